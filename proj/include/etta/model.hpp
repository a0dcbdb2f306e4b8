#pragma once

#include <Eigen/Core>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "etta/dual.hpp"
#include "etta/rng.hpp"

namespace etta {

template <typename S>
using MatX = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;
template <typename S>
using VecX = Eigen::Matrix<S, Eigen::Dynamic, 1>;

using Mat = MatX<double>;
using Vec = VecX<double>;

constexpr double kCosineNormFloor = 1e-12;
constexpr double kProbFloor = 1e-7;

enum class BackboneKind { identity, mlp };

inline std::string to_string(BackboneKind k) { return k == BackboneKind::identity ? "identity" : "mlp"; }

inline BackboneKind backbone_from_string(const std::string& s) {
    if (s == "identity") return BackboneKind::identity;
    if (s == "mlp") return BackboneKind::mlp;
    throw std::invalid_argument("unknown backbone kind: " + s);
}

struct BackboneSpec {
    BackboneKind kind = BackboneKind::mlp;
    int d_in = 2;
    int hidden = 64;
    int d_z = 32;

    int feature_dim() const { return kind == BackboneKind::identity ? d_in : d_z; }

    void validate() const {
        if (d_in < 1) throw std::invalid_argument("BackboneSpec: d_in must be positive");
        if (kind == BackboneKind::mlp && (hidden < 1 || d_z < 1))
            throw std::invalid_argument("BackboneSpec: hidden and d_z must be positive");
    }

    bool operator==(const BackboneSpec& o) const = default;
};

// Feature-extractor parameters phi plus the classifier prototype matrix theta
// (rows are the domain-general prototypes). Templated on the scalar so the
// same structure carries dual numbers during Hessian-vector products.
template <typename S = double>
struct ParamsT {
    BackboneSpec backbone;
    int num_classes = 0;
    MatX<S> w1, w2; // hidden x d_in, d_z x hidden (empty for identity backbone)
    VecX<S> b1, b2; // hidden, d_z
    MatX<S> theta;  // C x feature_dim

    static ParamsT zeros(const BackboneSpec& spec, int num_classes) {
        spec.validate();
        ParamsT p;
        p.backbone = spec;
        p.num_classes = num_classes;
        if (spec.kind == BackboneKind::mlp) {
            p.w1 = MatX<S>::Zero(spec.hidden, spec.d_in);
            p.b1 = VecX<S>::Zero(spec.hidden);
            p.w2 = MatX<S>::Zero(spec.d_z, spec.hidden);
            p.b2 = VecX<S>::Zero(spec.d_z);
        }
        p.theta = MatX<S>::Zero(num_classes, spec.feature_dim());
        return p;
    }

    Eigen::Index size() const {
        return w1.size() + b1.size() + w2.size() + b2.size() + theta.size();
    }

    VecX<S> flatten() const {
        VecX<S> out(size());
        Eigen::Index at = 0;
        auto put = [&](const auto& m) {
            for (Eigen::Index i = 0; i < m.rows(); ++i)
                for (Eigen::Index j = 0; j < m.cols(); ++j) out[at++] = m(i, j);
        };
        put(w1);
        put(b1);
        put(w2);
        put(b2);
        put(theta);
        return out;
    }

    static ParamsT from_flat(const BackboneSpec& spec, int num_classes, const VecX<S>& flat) {
        ParamsT p = zeros(spec, num_classes);
        if (flat.size() != p.size())
            throw std::invalid_argument("ParamsT::from_flat: flat vector has wrong length");
        Eigen::Index at = 0;
        auto take = [&](auto& m) {
            for (Eigen::Index i = 0; i < m.rows(); ++i)
                for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = flat[at++];
        };
        take(p.w1);
        take(p.b1);
        take(p.w2);
        take(p.b2);
        take(p.theta);
        return p;
    }

    // this += a * x (element-wise linear combination for gradient steps)
    ParamsT& axpy(S a, const ParamsT& x) {
        w1 += a * x.w1;
        b1 += a * x.b1;
        w2 += a * x.w2;
        b2 += a * x.b2;
        theta += a * x.theta;
        return *this;
    }

    bool all_finite() const {
        auto ok = [](const auto& m) {
            for (Eigen::Index i = 0; i < m.size(); ++i) {
                using std::isfinite;
                if (!isfinite(m(i))) return false;
            }
            return true;
        };
        return ok(w1) && ok(b1) && ok(w2) && ok(b2) && ok(theta);
    }
};

using ModelParams = ParamsT<double>;

// Gaussian fan-in init; prototype rows are redrawn if they come out zero
// (cosine needs nonzero rows).
inline ModelParams init_params(const BackboneSpec& spec, int num_classes, Rng& rng) {
    ModelParams p = ModelParams::zeros(spec, num_classes);
    if (spec.kind == BackboneKind::mlp) {
        double s1 = 1.0 / std::sqrt(static_cast<double>(spec.d_in));
        double s2 = 1.0 / std::sqrt(static_cast<double>(spec.hidden));
        for (Eigen::Index i = 0; i < p.w1.size(); ++i) p.w1(i) = s1 * rng.normal();
        for (Eigen::Index i = 0; i < p.w2.size(); ++i) p.w2(i) = s2 * rng.normal();
    }
    double st = 1.0 / std::sqrt(static_cast<double>(spec.feature_dim()));
    for (int c = 0; c < num_classes; ++c) {
        do {
            for (Eigen::Index j = 0; j < p.theta.cols(); ++j) p.theta(c, j) = st * rng.normal();
        } while (p.theta.row(c).squaredNorm() == 0.0);
    }
    return p;
}

// Dual-seeded copy: value = w, tangent = v. Running any gradient routine on
// the result yields Hessian-vector products in the tangent slots.
inline ParamsT<Dual> dual_seed(const ModelParams& w, const ModelParams& v) {
    ParamsT<Dual> out = ParamsT<Dual>::zeros(w.backbone, w.num_classes);
    auto seed = [](const auto& a, const auto& b, auto& dst) {
        for (Eigen::Index i = 0; i < a.size(); ++i) dst(i) = Dual(a(i), b(i));
    };
    seed(w.w1, v.w1, out.w1);
    seed(w.b1, v.b1, out.b1);
    seed(w.w2, v.w2, out.w2);
    seed(w.b2, v.b2, out.b2);
    seed(w.theta, v.theta, out.theta);
    return out;
}

inline ParamsT<Dual> dual_const(const ModelParams& w) {
    ModelParams zero = ModelParams::zeros(w.backbone, w.num_classes);
    return dual_seed(w, zero);
}

inline ModelParams dual_tangents(const ParamsT<Dual>& p) {
    ModelParams out = ModelParams::zeros(p.backbone, p.num_classes);
    auto take = [](const auto& a, auto& dst) {
        for (Eigen::Index i = 0; i < a.size(); ++i) dst(i) = a(i).d;
    };
    take(p.w1, out.w1);
    take(p.b1, out.b1);
    take(p.w2, out.w2);
    take(p.b2, out.b2);
    take(p.theta, out.theta);
    return out;
}

// ---- forward primitives ------------------------------------------------

template <typename S>
struct EmbedWork {
    MatX<S> x; // n x d_in
    MatX<S> h; // n x hidden (tanh activations), empty for identity
    MatX<S> f; // n x feature_dim
};

template <typename S>
EmbedWork<S> embed_forward(const ParamsT<S>& p, const MatX<S>& x) {
    if (x.cols() != p.backbone.d_in)
        throw std::invalid_argument("embed: input width " + std::to_string(x.cols()) +
                                    " does not match backbone d_in " + std::to_string(p.backbone.d_in));
    EmbedWork<S> w;
    w.x = x;
    if (p.backbone.kind == BackboneKind::identity) {
        w.f = x;
        return w;
    }
    MatX<S> a = x * p.w1.transpose();
    a.rowwise() += p.b1.transpose();
    w.h = a.unaryExpr([](const S& v) {
        using std::tanh;
        return tanh(v);
    });
    w.f = w.h * p.w2.transpose();
    w.f.rowwise() += p.b2.transpose();
    return w;
}

template <typename S>
MatX<S> embed(const ParamsT<S>& p, const MatX<S>& x) {
    return embed_forward(p, x).f;
}

// ---- prototypes ----------------------------------------------------------

struct PrototypeSet {
    static constexpr int kGeneralTag = -1;

    MatX<double> vectors; // C x d_z
    int tag = kGeneralTag; // kGeneralTag for domain-general, else domain_id

    bool is_general() const { return tag == kGeneralTag; }

    void validate() const {
        if (!vectors.allFinite()) throw std::invalid_argument("PrototypeSet: non-finite entry");
        for (Eigen::Index c = 0; c < vectors.rows(); ++c) {
            if (vectors.row(c).squaredNorm() == 0.0)
                throw std::invalid_argument("PrototypeSet: zero prototype row " + std::to_string(c));
        }
    }
};

// Per-class arithmetic means of embedding rows. Every class must appear.
template <typename S>
MatX<S> class_centroid_matrix(const MatX<S>& f, const std::vector<int>& labels, int num_classes,
                              std::vector<Eigen::Index>* counts_out = nullptr) {
    if (static_cast<std::size_t>(f.rows()) != labels.size())
        throw std::invalid_argument("class_centroids: embedding/label count mismatch");
    MatX<S> sums = MatX<S>::Zero(num_classes, f.cols());
    std::vector<Eigen::Index> counts(static_cast<std::size_t>(num_classes), 0);
    for (Eigen::Index i = 0; i < f.rows(); ++i) {
        int y = labels[static_cast<std::size_t>(i)];
        if (y < 0 || y >= num_classes) throw std::invalid_argument("class_centroids: label out of range");
        sums.row(y) += f.row(i);
        ++counts[static_cast<std::size_t>(y)];
    }
    for (int c = 0; c < num_classes; ++c) {
        if (counts[static_cast<std::size_t>(c)] == 0)
            throw std::invalid_argument("class_centroids: undefined prototype, class " + std::to_string(c) +
                                        " missing from batch");
        sums.row(c) /= S(static_cast<double>(counts[static_cast<std::size_t>(c)]));
    }
    if (counts_out) *counts_out = counts;
    return sums;
}

inline PrototypeSet class_centroids(const MatX<double>& embeddings, const std::vector<int>& labels,
                                    int num_classes, int domain_id) {
    PrototypeSet s;
    s.vectors = class_centroid_matrix(embeddings, labels, num_classes);
    s.tag = domain_id;
    return s;
}

// ---- cosine classifier -----------------------------------------------------

template <typename S>
struct CosineWork {
    MatX<S> fhat;        // rows normalized by floored norm
    MatX<S> phat;
    VecX<S> fnorm;       // floored norms
    VecX<S> pnorm;
    std::vector<char> fgate; // 1 when the true norm exceeded the floor
    std::vector<char> pgate;
    MatX<S> scores;      // n x C
};

template <typename S>
VecX<S> floored_row_norms(const MatX<S>& m, std::vector<char>& gate, const char* what) {
    VecX<S> out(m.rows());
    gate.assign(static_cast<std::size_t>(m.rows()), 1);
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        S sq = S(0.0);
        for (Eigen::Index j = 0; j < m.cols(); ++j) sq += m(i, j) * m(i, j);
        using std::sqrt;
        S n = sqrt(sq);
        if (value_of(n) == 0.0)
            throw std::invalid_argument(std::string("cosine_scores: zero-norm ") + what + " row " +
                                        std::to_string(i));
        if (value_of(n) <= kCosineNormFloor) {
            out[i] = S(kCosineNormFloor);
            gate[static_cast<std::size_t>(i)] = 0;
        } else {
            out[i] = n;
        }
    }
    return out;
}

template <typename S>
CosineWork<S> cosine_forward(const MatX<S>& f, const MatX<S>& prototypes) {
    if (f.cols() != prototypes.cols())
        throw std::invalid_argument("cosine_scores: embedding width does not match prototype width");
    CosineWork<S> w;
    w.fnorm = floored_row_norms(f, w.fgate, "embedding");
    w.pnorm = floored_row_norms(prototypes, w.pgate, "prototype");
    w.fhat = f.array().colwise() / w.fnorm.array();
    w.phat = prototypes.array().colwise() / w.pnorm.array();
    w.scores = w.fhat * w.phat.transpose();
    return w;
}

template <typename S>
MatX<S> cosine_score_matrix(const MatX<S>& f, const MatX<S>& prototypes) {
    return cosine_forward(f, prototypes).scores;
}

inline MatX<double> cosine_scores(const MatX<double>& embeddings, const PrototypeSet& prototypes) {
    return cosine_score_matrix(embeddings, prototypes.vectors);
}

// ---- probabilities -----------------------------------------------------

template <typename S>
struct ProbsWork {
    MatX<S> p_soft; // softmax(scores / temperature)
    VecX<S> z;      // row sums after clamping
    MatX<S> p;      // clamped + renormalized
};

// softmax(scores / temperature) row-wise, then a 1e-7 floor with
// renormalization so downstream KL terms stay finite.
template <typename S>
ProbsWork<S> probs_forward(const MatX<S>& scores, double temperature) {
    if (!(temperature > 0.0)) throw std::invalid_argument("predict_probs: temperature must be positive");
    ProbsWork<S> w;
    w.p_soft.resize(scores.rows(), scores.cols());
    for (Eigen::Index i = 0; i < scores.rows(); ++i) {
        S m = scores(i, 0) / S(temperature);
        for (Eigen::Index c = 1; c < scores.cols(); ++c) {
            using std::max;
            m = max(m, scores(i, c) / S(temperature));
        }
        S sum = S(0.0);
        for (Eigen::Index c = 0; c < scores.cols(); ++c) {
            using std::exp;
            S e = exp(scores(i, c) / S(temperature) - m);
            w.p_soft(i, c) = e;
            sum += e;
        }
        for (Eigen::Index c = 0; c < scores.cols(); ++c) w.p_soft(i, c) /= sum;
    }
    w.z.resize(scores.rows());
    w.p.resize(scores.rows(), scores.cols());
    for (Eigen::Index i = 0; i < scores.rows(); ++i) {
        S z = S(0.0);
        for (Eigen::Index c = 0; c < scores.cols(); ++c) {
            using std::max;
            S v = max(w.p_soft(i, c), S(kProbFloor));
            w.p(i, c) = v;
            z += v;
        }
        w.z[i] = z;
        for (Eigen::Index c = 0; c < scores.cols(); ++c) w.p(i, c) /= z;
    }
    return w;
}

template <typename S>
MatX<S> predict_probs(const MatX<S>& scores, double temperature) {
    return probs_forward(scores, temperature).p;
}

// ---- checkpoints ---------------------------------------------------------

namespace detail {

inline void write_bytes(std::ofstream& out, const void* data, std::size_t n) {
    out.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
}

inline void write_u32(std::ofstream& out, std::uint32_t v) { write_bytes(out, &v, 4); }

inline void write_string(std::ofstream& out, const std::string& s) {
    write_u32(out, static_cast<std::uint32_t>(s.size()));
    write_bytes(out, s.data(), s.size());
}

inline void write_array(std::ofstream& out, const std::string& name, const MatX<double>& m) {
    write_string(out, name);
    write_u32(out, static_cast<std::uint32_t>(m.rows()));
    write_u32(out, static_cast<std::uint32_t>(m.cols()));
    for (Eigen::Index i = 0; i < m.rows(); ++i)
        for (Eigen::Index j = 0; j < m.cols(); ++j) {
            double v = m(i, j);
            write_bytes(out, &v, sizeof(double));
        }
}

inline void read_bytes(std::ifstream& in, void* data, std::size_t n) {
    if (!in.read(static_cast<char*>(data), static_cast<std::streamsize>(n)))
        throw std::runtime_error("checkpoint: truncated file");
}

inline std::uint32_t read_u32(std::ifstream& in) {
    std::uint32_t v;
    read_bytes(in, &v, 4);
    return v;
}

inline std::string read_string(std::ifstream& in) {
    auto n = read_u32(in);
    std::string s(n, '\0');
    read_bytes(in, s.data(), n);
    return s;
}

inline MatX<double> read_array(std::ifstream& in, const std::string& expect_name) {
    auto name = read_string(in);
    if (name != expect_name)
        throw std::runtime_error("checkpoint: expected array '" + expect_name + "', found '" + name + "'");
    auto rows = read_u32(in);
    auto cols = read_u32(in);
    MatX<double> m(rows, cols);
    for (std::uint32_t i = 0; i < rows; ++i)
        for (std::uint32_t j = 0; j < cols; ++j) {
            double v;
            read_bytes(in, &v, sizeof(double));
            m(i, j) = v;
        }
    return m;
}

} // namespace detail

inline constexpr char kCheckpointMagic[8] = {'E', 'T', 'T', 'A', 'C', 'K', 'P', '1'};

inline void save_checkpoint(const ModelParams& p, const std::string& config_hash,
                            const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("save_checkpoint: cannot open " + path.string());
    detail::write_bytes(out, kCheckpointMagic, 8);
    detail::write_string(out, config_hash);
    detail::write_u32(out, static_cast<std::uint32_t>(p.backbone.kind));
    detail::write_u32(out, static_cast<std::uint32_t>(p.backbone.d_in));
    detail::write_u32(out, static_cast<std::uint32_t>(p.backbone.hidden));
    detail::write_u32(out, static_cast<std::uint32_t>(p.backbone.d_z));
    detail::write_u32(out, static_cast<std::uint32_t>(p.num_classes));
    detail::write_array(out, "w1", p.w1);
    detail::write_array(out, "b1", p.b1);
    detail::write_array(out, "w2", p.w2);
    detail::write_array(out, "b2", p.b2);
    detail::write_array(out, "theta", p.theta);
    if (!out) throw std::runtime_error("save_checkpoint: write failed for " + path.string());
}

struct Checkpoint {
    ModelParams params;
    std::string config_hash;
};

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("load_checkpoint: cannot open " + path.string());
    char magic[8];
    detail::read_bytes(in, magic, 8);
    if (std::memcmp(magic, kCheckpointMagic, 8) != 0)
        throw std::runtime_error("load_checkpoint: bad magic in " + path.string());
    Checkpoint ck;
    ck.config_hash = detail::read_string(in);
    BackboneSpec spec;
    spec.kind = static_cast<BackboneKind>(detail::read_u32(in));
    spec.d_in = static_cast<int>(detail::read_u32(in));
    spec.hidden = static_cast<int>(detail::read_u32(in));
    spec.d_z = static_cast<int>(detail::read_u32(in));
    int num_classes = static_cast<int>(detail::read_u32(in));
    ck.params = ModelParams::zeros(spec, num_classes);
    ck.params.w1 = detail::read_array(in, "w1");
    ck.params.b1 = detail::read_array(in, "b1");
    ck.params.w2 = detail::read_array(in, "w2");
    ck.params.b2 = detail::read_array(in, "b2");
    ck.params.theta = detail::read_array(in, "theta");
    return ck;
}

} // namespace etta
