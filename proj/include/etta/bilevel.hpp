#pragma once

#include <cstdint>
#include <cstring>
#include <vector>

#include "etta/model.hpp"

namespace etta {

inline std::uint64_t fnv1a64(const void* data, std::size_t n) {
    const auto* bytes = static_cast<const unsigned char*>(data);
    std::uint64_t h = 1469598103934665603ULL;
    for (std::size_t i = 0; i < n; ++i) {
        h ^= bytes[i];
        h *= 1099511628211ULL;
    }
    return h;
}

inline std::uint64_t hash_vector(const Vec& v) {
    return fnv1a64(v.data(), static_cast<std::size_t>(v.size()) * sizeof(double));
}

struct ClipInfo {
    double input_norm = 0.0;
    double scale = 1.0; // applied multiplier
    bool active = false;
};

// Rescales g to norm <= threshold, direction preserved.
inline Vec clip_by_norm(const Vec& g, double threshold, ClipInfo* info = nullptr) {
    if (!(threshold > 0.0)) throw std::invalid_argument("clip_by_norm: threshold must be positive");
    double n = g.norm();
    ClipInfo ci;
    ci.input_norm = n;
    if (n > threshold) {
        ci.active = true;
        ci.scale = threshold / n;
    }
    if (info) *info = ci;
    return ci.active ? Vec(ci.scale * g) : g;
}

// How the inner step transforms its gradient before the parameter update.
//   sgd_clip : w' = w - rate * clip(g)            (plain GD with norm clipping)
//   adam_like: w' = w - rate * g / (|g| + eps)    (stateless normalized step)
enum class InnerRule { sgd_clip, adam_like };

struct InnerStepRecord {
    Vec point;        // parameters the gradient was evaluated at
    Vec grad;         // raw task gradient
    double task_value = 0.0;
    ClipInfo clip;    // sgd_clip only
};

struct InnerResult {
    Vec adapted;
    std::vector<InnerStepRecord> steps;
    std::uint64_t origin_hash = 0;

    double task_value_origin() const { return steps.front().task_value; }
    const Vec& task_grad_origin() const { return steps.front().grad; }
};

namespace detail {

inline void check_finite(const Vec& v, const char* what) {
    if (!v.allFinite()) throw std::runtime_error(std::string("non-finite ") + what + " encountered");
}

inline Vec inner_transform(const InnerStepRecord& rec, double clip_norm, InnerRule rule, double eps) {
    if (rule == InnerRule::sgd_clip) return clip_by_norm(rec.grad, clip_norm);
    Vec out(rec.grad.size());
    for (Eigen::Index i = 0; i < out.size(); ++i)
        out[i] = rec.grad[i] / (std::abs(rec.grad[i]) + eps);
    return out;
}

// v <- D^T v where D is the Jacobian of inner_transform at the recorded
// gradient. The clip Jacobian (c/|g|)(I - ghat ghat^T) is symmetric; the
// adam_like Jacobian is the diagonal eps/(|g_i|+eps)^2.
inline Vec transform_jacobian_tv(const InnerStepRecord& rec, InnerRule rule, double eps, const Vec& v) {
    if (rule == InnerRule::sgd_clip) {
        if (!rec.clip.active) return v;
        Vec ghat = rec.grad / rec.clip.input_norm;
        return rec.clip.scale * (v - ghat * ghat.dot(v));
    }
    Vec out(v.size());
    for (Eigen::Index i = 0; i < v.size(); ++i) {
        double denom = std::abs(rec.grad[i]) + eps;
        out[i] = v[i] * eps / (denom * denom);
    }
    return out;
}

} // namespace detail

// Inner adaptation: one or more task-gradient steps producing the adapted
// parameters. The trajectory is recorded so the meta-gradient can
// differentiate through every step.
template <typename Obj>
InnerResult inner_adapt(const Obj& obj, const Vec& w0, double rate, double clip_norm, int steps,
                        InnerRule rule = InnerRule::sgd_clip, double eps = 1e-8) {
    if (steps < 1) throw std::invalid_argument("inner_adapt: need at least one step");
    InnerResult res;
    res.origin_hash = hash_vector(w0);
    Vec w = w0;
    for (int s = 0; s < steps; ++s) {
        InnerStepRecord rec;
        rec.point = w;
        rec.task_value = obj.task_value_grad(w, rec.grad);
        detail::check_finite(rec.grad, "inner-step gradient");
        Vec step;
        if (rule == InnerRule::sgd_clip) {
            step = clip_by_norm(rec.grad, clip_norm, &rec.clip);
        } else {
            step = detail::inner_transform(rec, clip_norm, rule, eps);
        }
        w -= rate * step;
        res.steps.push_back(std::move(rec));
    }
    res.adapted = std::move(w);
    return res;
}

// Gradient of the composite outer objective with respect to the ORIGINAL
// parameters:
//   g = grad L_task(w0) + J^T grad L_meta(adapted)
// where J is the Jacobian of the inner adaptation. second_order applies the
// exact chain rule through every recorded step (one task Hessian-vector
// product each); first-order treats the adapted parameters as constants.
template <typename Obj>
Vec meta_gradient(const Obj& obj, const InnerResult& inner, const Vec& g_meta, double rate, double clip_norm,
                  InnerRule rule, double eps, bool second_order) {
    Vec v = g_meta;
    if (second_order) {
        for (auto it = inner.steps.rbegin(); it != inner.steps.rend(); ++it) {
            Vec u = detail::transform_jacobian_tv(*it, rule, eps, v);
            Vec hv;
            obj.task_hvp(it->point, u, hv);
            v -= rate * hv;
        }
    }
    return inner.task_grad_origin() + v;
}

// ---- outer optimizer ---------------------------------------------------

struct AdamConfig {
    double lr = 5e-5;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct AdamState {
    Vec m, v;
    long t = 0;

    void reset(Eigen::Index dim) {
        m = Vec::Zero(dim);
        v = Vec::Zero(dim);
        t = 0;
    }
};

inline void adam_update(AdamState& st, Vec& w, const Vec& grad, const AdamConfig& cfg) {
    if (st.t == 0 && st.m.size() != w.size()) st.reset(w.size());
    ++st.t;
    st.m = cfg.beta1 * st.m + (1.0 - cfg.beta1) * grad;
    st.v = cfg.beta2 * st.v + (1.0 - cfg.beta2) * grad.cwiseProduct(grad);
    double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(st.t));
    double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(st.t));
    for (Eigen::Index i = 0; i < w.size(); ++i) {
        double mhat = st.m[i] / c1;
        double vhat = st.v[i] / c2;
        w[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
    }
}

} // namespace etta
