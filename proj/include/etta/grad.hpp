#pragma once

#include <cmath>
#include <vector>

#include "etta/episodes.hpp"
#include "etta/losses.hpp"
#include "etta/model.hpp"

namespace etta {

// Reverse-mode passes for the episode losses. Each backward mirrors its
// forward (same floors, same gates), so gradients agree with the computed
// values to machine precision. Everything is templated on the scalar so the
// same code run on Dual inputs yields exact Hessian-vector products.

template <typename S>
void embed_backward(const ParamsT<S>& p, const EmbedWork<S>& w, const MatX<S>& df, ParamsT<S>& grad) {
    if (p.backbone.kind == BackboneKind::identity) return; // no feature-extractor parameters
    grad.w2 += df.transpose() * w.h;
    grad.b2 += df.colwise().sum().transpose();
    MatX<S> dh = df * p.w2;
    MatX<S> gate = w.h.unaryExpr([](const S& t) { return S(1.0) - t * t; });
    MatX<S> da = dh.cwiseProduct(gate);
    grad.w1 += da.transpose() * w.x;
    grad.b1 += da.colwise().sum().transpose();
}

template <typename S>
void cosine_backward(const CosineWork<S>& w, const MatX<S>& dscores, MatX<S>& df, MatX<S>& dproto) {
    MatX<S> dfhat = dscores * w.phat;
    MatX<S> dphat = dscores.transpose() * w.fhat;
    df.resize(w.fhat.rows(), w.fhat.cols());
    dproto.resize(w.phat.rows(), w.phat.cols());
    for (Eigen::Index i = 0; i < w.fhat.rows(); ++i) {
        S dot = S(0.0);
        for (Eigen::Index j = 0; j < w.fhat.cols(); ++j) dot += w.fhat(i, j) * dfhat(i, j);
        for (Eigen::Index j = 0; j < w.fhat.cols(); ++j) {
            S v = dfhat(i, j);
            if (w.fgate[static_cast<std::size_t>(i)]) v -= w.fhat(i, j) * dot;
            df(i, j) = v / w.fnorm[i];
        }
    }
    for (Eigen::Index c = 0; c < w.phat.rows(); ++c) {
        S dot = S(0.0);
        for (Eigen::Index j = 0; j < w.phat.cols(); ++j) dot += w.phat(c, j) * dphat(c, j);
        for (Eigen::Index j = 0; j < w.phat.cols(); ++j) {
            S v = dphat(c, j);
            if (w.pgate[static_cast<std::size_t>(c)]) v -= w.phat(c, j) * dot;
            dproto(c, j) = v / w.pnorm[c];
        }
    }
}

template <typename S>
MatX<S> probs_backward(const ProbsWork<S>& w, const MatX<S>& dp, double temperature) {
    MatX<S> dscores(dp.rows(), dp.cols());
    for (Eigen::Index i = 0; i < dp.rows(); ++i) {
        // clamp + renormalize
        S dot = S(0.0);
        for (Eigen::Index c = 0; c < dp.cols(); ++c) dot += dp(i, c) * w.p(i, c);
        VecX<S> dsoft(dp.cols());
        for (Eigen::Index c = 0; c < dp.cols(); ++c) {
            S v = (dp(i, c) - dot) / w.z[i];
            dsoft[c] = value_of(w.p_soft(i, c)) > kProbFloor ? v : S(0.0);
        }
        // softmax
        S dot2 = S(0.0);
        for (Eigen::Index c = 0; c < dp.cols(); ++c) dot2 += dsoft[c] * w.p_soft(i, c);
        for (Eigen::Index c = 0; c < dp.cols(); ++c)
            dscores(i, c) = w.p_soft(i, c) * (dsoft[c] - dot2) / S(temperature);
    }
    return dscores;
}

// Mean cross-entropy through cosine scores; accumulates parameter gradients
// when `grad` is given. This is the only loss the bilevel core needs second
// derivatives of, hence the scalar template.
template <typename S>
S task_loss_grad(const ParamsT<S>& p, const MatX<S>& x, const std::vector<int>& y, double temperature,
                 ParamsT<S>* grad) {
    auto ew = embed_forward(p, x);
    auto cw = cosine_forward(ew.f, p.theta);
    auto pw = probs_forward(cw.scores, temperature);
    S loss = task_loss_t(pw.p, y);
    if (!grad) return loss;

    const auto n = static_cast<double>(x.rows());
    MatX<S> dp = MatX<S>::Zero(pw.p.rows(), pw.p.cols());
    for (Eigen::Index i = 0; i < pw.p.rows(); ++i) {
        int c = y[static_cast<std::size_t>(i)];
        dp(i, c) = S(-1.0 / n) / pw.p(i, c);
    }
    MatX<S> dscores = probs_backward(pw, dp, temperature);
    MatX<S> df, dtheta;
    cosine_backward(cw, dscores, df, dtheta);
    grad->theta += dtheta;
    embed_backward(p, ew, df, *grad);
    return loss;
}

template <typename S>
S task_loss_value(const ParamsT<S>& p, const MatX<S>& x, const std::vector<int>& y, double temperature) {
    return task_loss_grad<S>(p, x, y, temperature, nullptr);
}

// ---- meta objective (weighted alignment parts), first-order only ------------

struct MetaParts {
    bool has_alignment = false; // false in task-only mode
    double sa = std::numeric_limits<double>::quiet_NaN();
    double pa = std::numeric_limits<double>::quiet_NaN();
    double meta = 0.0;
};

namespace detail {

// d(symmetric KL)/dp for one sample row pair; mirrors kl_divergence's floor
// gates. Accumulates into row s of the dp/dq matrices.
inline void symmetric_kl_row_backward(const Vec& p, const Vec& q, double coef, Mat& dp, Mat& dq,
                                      Eigen::Index s) {
    for (Eigen::Index c = 0; c < p.size(); ++c) {
        double pt = std::max(p[c], kProbFloor);
        double qt = std::max(q[c], kProbFloor);
        double lg = std::log(pt / qt);
        double gp = p[c] > kProbFloor ? 1.0 : 0.0;
        double gq = q[c] > kProbFloor ? 1.0 : 0.0;
        dp(s, c) += coef * 0.5 * (lg + gp * (1.0 - q[c] / pt));
        dq(s, c) += coef * 0.5 * (-lg + gq * (1.0 - p[c] / qt));
    }
}

} // namespace detail

// Sample-wise and prototype-wise alignment at the adapted parameters,
// combined as gamma1*sa + gamma2*pa. Gradients (if requested) flow into the
// adapted parameters: through the meta-test embeddings, through the
// domain-specific centroids of the meta-train batches, and into theta.
inline MetaParts meta_losses_grad(const ModelParams& adapted, const std::vector<Mat>& train_x,
                                  const std::vector<std::vector<int>>& train_y, const Mat& te_x,
                                  const std::vector<int>& te_y, double temperature, double gamma1,
                                  double gamma2, ModelParams* grad) {
    const int num_classes = adapted.num_classes;
    const auto k_train = train_x.size();

    std::vector<EmbedWork<double>> ew_train(k_train);
    for (std::size_t k = 0; k < k_train; ++k) ew_train[k] = embed_forward(adapted, train_x[k]);
    EmbedWork<double> ew_te = embed_forward(adapted, te_x);

    std::vector<Mat> df_train(k_train);
    for (std::size_t k = 0; k < k_train; ++k) df_train[k] = Mat::Zero(ew_train[k].f.rows(), ew_train[k].f.cols());
    Mat df_te = Mat::Zero(ew_te.f.rows(), ew_te.f.cols());
    Mat dtheta = Mat::Zero(adapted.theta.rows(), adapted.theta.cols());

    MetaParts parts;
    parts.has_alignment = true;

    // ---- sample-wise alignment over meta-train and meta-test samples ----
    {
        std::size_t n_total = static_cast<std::size_t>(te_x.rows());
        for (std::size_t k = 0; k < k_train; ++k) n_total += train_y[k].size();
        double sa_sum = 0.0;
        auto add_batch = [&](const EmbedWork<double>& ew, const std::vector<int>& y, Mat& df_acc) {
            auto cw = cosine_forward(ew.f, adapted.theta);
            for (Eigen::Index i = 0; i < cw.scores.rows(); ++i) {
                int yc = y[static_cast<std::size_t>(i)];
                double row_sum = cw.scores.row(i).sum();
                sa_sum += 1.0 - 2.0 * cw.scores(i, yc) + row_sum;
            }
            if (grad) {
                Mat ds(cw.scores.rows(), cw.scores.cols());
                for (Eigen::Index i = 0; i < ds.rows(); ++i)
                    for (Eigen::Index c = 0; c < ds.cols(); ++c)
                        ds(i, c) = gamma1 * (1.0 - 2.0 * (c == y[static_cast<std::size_t>(i)])) /
                                   static_cast<double>(n_total);
                Mat df, dth;
                cosine_backward(cw, ds, df, dth);
                df_acc += df;
                dtheta += dth;
            }
        };
        for (std::size_t k = 0; k < k_train; ++k) add_batch(ew_train[k], train_y[k], df_train[k]);
        add_batch(ew_te, te_y, df_te);
        parts.sa = sa_sum / static_cast<double>(n_total);
    }

    // ---- prototype-wise alignment over meta-test samples ----
    {
        std::vector<Mat> protos(k_train);
        std::vector<std::vector<Eigen::Index>> counts(k_train);
        for (std::size_t k = 0; k < k_train; ++k)
            protos[k] = class_centroid_matrix(ew_train[k].f, train_y[k], num_classes, &counts[k]);

        const auto n_sets = k_train + 1; // domain-specific sets plus the general one
        std::vector<CosineWork<double>> cw(n_sets);
        std::vector<ProbsWork<double>> pw(n_sets);
        for (std::size_t a = 0; a < k_train; ++a) cw[a] = cosine_forward(ew_te.f, protos[a]);
        cw[k_train] = cosine_forward(ew_te.f, adapted.theta);
        for (std::size_t a = 0; a < n_sets; ++a) pw[a] = probs_forward(cw[a].scores, temperature);

        const auto n_te = static_cast<double>(te_x.rows());
        const double n_pairs = static_cast<double>(n_sets * (n_sets - 1) / 2);
        double pa_sum = 0.0;
        std::vector<Mat> dp(n_sets, Mat::Zero(ew_te.f.rows(), num_classes));
        const double coef = gamma2 / (n_pairs * n_te);
        for (std::size_t a = 0; a < n_sets; ++a) {
            for (std::size_t b = a + 1; b < n_sets; ++b) {
                for (Eigen::Index s = 0; s < ew_te.f.rows(); ++s) {
                    Vec p = pw[a].p.row(s).transpose();
                    Vec q = pw[b].p.row(s).transpose();
                    pa_sum += symmetric_kl_t(p, q);
                    if (grad) detail::symmetric_kl_row_backward(p, q, coef, dp[a], dp[b], s);
                }
            }
        }
        parts.pa = pa_sum / (n_pairs * n_te);

        if (grad) {
            for (std::size_t a = 0; a < n_sets; ++a) {
                Mat ds = probs_backward(pw[a], dp[a], temperature);
                Mat df, dproto;
                cosine_backward(cw[a], ds, df, dproto);
                df_te += df;
                if (a == k_train) {
                    dtheta += dproto;
                } else {
                    // centroid backward: scatter the class-mean gradients
                    for (Eigen::Index i = 0; i < ew_train[a].f.rows(); ++i) {
                        int yc = train_y[a][static_cast<std::size_t>(i)];
                        df_train[a].row(i) +=
                            dproto.row(yc) / static_cast<double>(counts[a][static_cast<std::size_t>(yc)]);
                    }
                }
            }
        }
    }

    parts.meta = gamma1 * parts.sa + gamma2 * parts.pa;

    if (grad) {
        grad->theta += dtheta;
        for (std::size_t k = 0; k < k_train; ++k) embed_backward(adapted, ew_train[k], df_train[k], *grad);
        embed_backward(adapted, ew_te, df_te, *grad);
    }
    return parts;
}

// ---- flat-vector objective for the bilevel core ------------------------------

enum class MetaObjectiveMode { se, task_only };

// One episode's composite objective over flattened parameters:
//   task part  L_task(D_tr; w)          (also the inner-adaptation loss)
//   meta part  L_meta(D_tr, D_te; w')   evaluated at adapted parameters.
class EpisodeObjective {
public:
    EpisodeObjective(BackboneSpec backbone, int num_classes, std::vector<Mat> train_x,
                     std::vector<std::vector<int>> train_y, Mat te_x, std::vector<int> te_y,
                     double temperature, double gamma1, double gamma2, MetaObjectiveMode mode)
        : backbone_(backbone),
          num_classes_(num_classes),
          train_x_(std::move(train_x)),
          train_y_(std::move(train_y)),
          te_x_(std::move(te_x)),
          te_y_(std::move(te_y)),
          temperature_(temperature),
          gamma1_(gamma1),
          gamma2_(gamma2),
          mode_(mode) {
        std::size_t rows = 0;
        for (const auto& x : train_x_) rows += static_cast<std::size_t>(x.rows());
        pooled_x_.resize(static_cast<Eigen::Index>(rows), backbone_.d_in);
        Eigen::Index at = 0;
        for (std::size_t k = 0; k < train_x_.size(); ++k) {
            pooled_x_.middleRows(at, train_x_[k].rows()) = train_x_[k];
            at += train_x_[k].rows();
            pooled_y_.insert(pooled_y_.end(), train_y_[k].begin(), train_y_[k].end());
        }
    }

    static EpisodeObjective from_task(const BackboneSpec& backbone, int num_classes, const MetaTask& task,
                                      double temperature, double gamma1, double gamma2,
                                      MetaObjectiveMode mode) {
        std::vector<Mat> tx;
        std::vector<std::vector<int>> ty;
        for (const auto& b : task.meta_train) {
            tx.push_back(b.x);
            ty.push_back(b.y);
        }
        return EpisodeObjective(backbone, num_classes, std::move(tx), std::move(ty), task.meta_test.x,
                                task.meta_test.y, temperature, gamma1, gamma2, mode);
    }

    Eigen::Index dim() const { return ModelParams::zeros(backbone_, num_classes_).size(); }

    ModelParams unflatten(const Vec& w) const { return ModelParams::from_flat(backbone_, num_classes_, w); }

    double task_value(const Vec& w) const {
        return task_loss_value(unflatten(w), pooled_x_, pooled_y_, temperature_);
    }

    double task_value_grad(const Vec& w, Vec& grad) const {
        ModelParams p = unflatten(w);
        ModelParams g = ModelParams::zeros(backbone_, num_classes_);
        double v = task_loss_grad(p, pooled_x_, pooled_y_, temperature_, &g);
        grad = g.flatten();
        return v;
    }

    // Exact Hessian-vector product of the task loss via forward-over-reverse.
    void task_hvp(const Vec& w, const Vec& v, Vec& out) const {
        ParamsT<Dual> p = dual_seed(unflatten(w), unflatten(v));
        ParamsT<Dual> g = ParamsT<Dual>::zeros(backbone_, num_classes_);
        MatX<Dual> x = pooled_x_.cast<Dual>();
        task_loss_grad<Dual>(p, x, pooled_y_, temperature_, &g);
        out = dual_tangents(g).flatten();
    }

    MetaParts meta_value(const Vec& adapted) const { return meta_impl(adapted, nullptr); }

    MetaParts meta_value_grad(const Vec& adapted, Vec& grad) const {
        ModelParams g = ModelParams::zeros(backbone_, num_classes_);
        MetaParts parts = meta_impl(adapted, &g);
        grad = g.flatten();
        return parts;
    }

    // Task loss on the meta-test batch (training-task DG loss for the logs).
    double te_task_value(const Vec& w) const {
        return task_loss_value(unflatten(w), te_x_, te_y_, temperature_);
    }

    double temperature() const { return temperature_; }

private:
    MetaParts meta_impl(const Vec& adapted, ModelParams* grad) const {
        ModelParams p = unflatten(adapted);
        if (mode_ == MetaObjectiveMode::task_only) {
            MetaParts parts;
            parts.has_alignment = false;
            parts.meta = grad ? task_loss_grad(p, te_x_, te_y_, temperature_, grad)
                              : task_loss_value(p, te_x_, te_y_, temperature_);
            return parts;
        }
        return meta_losses_grad(p, train_x_, train_y_, te_x_, te_y_, temperature_, gamma1_, gamma2_, grad);
    }

    BackboneSpec backbone_;
    int num_classes_;
    std::vector<Mat> train_x_;
    std::vector<std::vector<int>> train_y_;
    Mat te_x_;
    std::vector<int> te_y_;
    Mat pooled_x_;
    std::vector<int> pooled_y_;
    double temperature_;
    double gamma1_;
    double gamma2_;
    MetaObjectiveMode mode_;
};

} // namespace etta
