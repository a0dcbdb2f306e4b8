#pragma once

#include <vector>

#include "etta/model.hpp"

namespace etta {

// One episode's loss values. meta = gamma1*sa + gamma2*pa; weighted_total
// additionally includes the task term of the outer objective.
struct LossBreakdown {
    double task = 0.0;
    double sa = 0.0;
    double pa = 0.0;
    double meta = 0.0;
    double weighted_total = 0.0;
};

// Mean cross-entropy over the batch, natural logarithm.
template <typename S>
S task_loss_t(const MatX<S>& probs, const std::vector<int>& labels) {
    if (probs.rows() == 0) throw std::invalid_argument("task_loss: empty batch");
    if (static_cast<std::size_t>(probs.rows()) != labels.size())
        throw std::invalid_argument("task_loss: prob/label count mismatch");
    S total = S(0.0);
    for (Eigen::Index i = 0; i < probs.rows(); ++i) {
        int y = labels[static_cast<std::size_t>(i)];
        if (y < 0 || y >= probs.cols()) throw std::invalid_argument("task_loss: label out of range");
        using std::log;
        total += -log(probs(i, y));
    }
    return total / S(static_cast<double>(probs.rows()));
}

inline double task_loss(const MatX<double>& probs, const std::vector<int>& labels) {
    return task_loss_t(probs, labels);
}

// Per-sample contrastive value from a cosine score row: pull towards the own
// class prototype, push away from the others.
template <typename S>
S sample_alignment_from_scores(const MatX<S>& scores, const std::vector<int>& labels) {
    if (scores.rows() == 0) throw std::invalid_argument("sample_alignment_loss: empty batch");
    S total = S(0.0);
    for (Eigen::Index i = 0; i < scores.rows(); ++i) {
        int y = labels[static_cast<std::size_t>(i)];
        S row_sum = S(0.0);
        for (Eigen::Index c = 0; c < scores.cols(); ++c) row_sum += scores(i, c);
        total += S(1.0) - scores(i, y) - scores(i, y) + row_sum;
    }
    return total / S(static_cast<double>(scores.rows()));
}

inline double sample_alignment_loss(const MatX<double>& embeddings, const std::vector<int>& labels,
                                    const PrototypeSet& general_prototypes) {
    if (!general_prototypes.is_general())
        throw std::invalid_argument("sample_alignment_loss: prototypes must be the domain-general set");
    auto scores = cosine_score_matrix(embeddings, general_prototypes.vectors);
    return sample_alignment_from_scores(scores, labels);
}

// KL(p||q) with a floor inside the logs so the value stays finite for
// degenerate inputs; natural logarithm.
template <typename S>
S kl_divergence(const VecX<S>& p, const VecX<S>& q) {
    if (p.size() != q.size()) throw std::invalid_argument("kl: length mismatch");
    S total = S(0.0);
    for (Eigen::Index c = 0; c < p.size(); ++c) {
        using std::log;
        using std::max;
        total += p[c] * log(max(p[c], S(kProbFloor)) / max(q[c], S(kProbFloor)));
    }
    return total;
}

template <typename S>
S symmetric_kl_t(const VecX<S>& p, const VecX<S>& q) {
    return S(0.5) * (kl_divergence(p, q) + kl_divergence(q, p));
}

inline double symmetric_kl(const Vec& p, const Vec& q) { return symmetric_kl_t(p, q); }

// Mean over samples and unordered prototype-set pairs of the symmetric KL
// between the per-set prediction rows.
template <typename S>
S prototype_alignment_from_probs(const std::vector<MatX<S>>& probs_per_set) {
    const auto a = probs_per_set.size();
    if (a < 2) throw std::invalid_argument("prototype_alignment_loss: need at least two prototype sets");
    const Eigen::Index n = probs_per_set.front().rows();
    if (n == 0) throw std::invalid_argument("prototype_alignment_loss: empty batch");
    S total = S(0.0);
    std::size_t pairs = 0;
    for (std::size_t i = 0; i < a; ++i) {
        for (std::size_t j = i + 1; j < a; ++j) {
            ++pairs;
            for (Eigen::Index s = 0; s < n; ++s) {
                VecX<S> pi = probs_per_set[i].row(s).transpose();
                VecX<S> pj = probs_per_set[j].row(s).transpose();
                total += symmetric_kl_t(pi, pj);
            }
        }
    }
    return total / S(static_cast<double>(pairs) * static_cast<double>(n));
}

inline double prototype_alignment_loss(const MatX<double>& meta_test_embeddings,
                                       const std::vector<PrototypeSet>& prototype_sets, double temperature) {
    std::vector<MatX<double>> probs;
    probs.reserve(prototype_sets.size());
    for (const auto& set : prototype_sets) {
        auto scores = cosine_score_matrix(meta_test_embeddings, set.vectors);
        probs.push_back(predict_probs(scores, temperature));
    }
    return prototype_alignment_from_probs(probs);
}

inline double meta_objective(double sa, double pa, double gamma1, double gamma2) {
    if (gamma1 < 0.0 || gamma2 < 0.0) throw std::invalid_argument("meta_objective: gammas must be >= 0");
    return gamma1 * sa + gamma2 * pa;
}

} // namespace etta
