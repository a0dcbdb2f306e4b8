#pragma once

#include <algorithm>
#include <numeric>
#include <vector>

#include "etta/data.hpp"
#include "etta/rng.hpp"

namespace etta {

struct Batch {
    int domain_id = -1; // -1 for mixed-domain batches
    Mat x;              // n x d_in
    std::vector<int> y;
    std::vector<std::size_t> indices; // row indices into the source dataset

    std::size_t size() const { return y.size(); }
};

// One episode: per-domain meta-train batches plus a (possibly mixed) meta-test
// batch drawn with ratios over all K source domains.
struct MetaTask {
    std::vector<Batch> meta_train;       // K-1 batches, ascending domain index
    Batch meta_test;                     // mixed; per-sample provenance below
    std::vector<int> meta_test_domains;  // domain_id per meta-test sample
    std::vector<std::size_t> meta_test_counts; // per source domain, ascending index
    int held_out_id = -1;
    Eigen::Index held_out_index = -1; // position of held_out_id in the domain list
    Vec ratios;                       // length K, nonnegative, sums to 1

    double r_ho() const { return held_out_index >= 0 ? ratios[held_out_index] : 0.0; }
};

struct MixRatioSchedule {
    enum class Mode { fixed, uniform_range };
    Mode mode = Mode::uniform_range;
    double r_ho_value = 1.0; // fixed mode
    double r_ho_lo = 0.0;    // range mode
    double r_ho_hi = 1.0;

    void validate() const {
        if (mode == Mode::fixed) {
            if (r_ho_value < 0.0 || r_ho_value > 1.0)
                throw std::invalid_argument("MixRatioSchedule: fixed r_ho must lie in [0,1]");
        } else {
            if (!(0.0 <= r_ho_lo && r_ho_lo <= r_ho_hi && r_ho_hi <= 1.0))
                throw std::invalid_argument("MixRatioSchedule: need 0 <= lo <= hi <= 1");
        }
    }

    // Fixed mode consumes no randomness, which is what makes MTS(r_ho=1)
    // seed-for-seed identical to TS.
    double draw(Rng& rng) const {
        validate();
        if (mode == Mode::fixed) return r_ho_value;
        return rng.uniform(r_ho_lo, r_ho_hi);
    }
};

// Largest-remainder apportionment of `total` into integer counts; ties broken
// by lower index.
inline std::vector<std::size_t> apportion_counts(const Vec& ratios, std::size_t total) {
    const auto k = static_cast<std::size_t>(ratios.size());
    double sum = 0.0;
    for (std::size_t i = 0; i < k; ++i) {
        if (ratios[static_cast<Eigen::Index>(i)] < 0.0)
            throw std::invalid_argument("apportion_counts: negative ratio");
        sum += ratios[static_cast<Eigen::Index>(i)];
    }
    if (std::abs(sum - 1.0) > 1e-9) throw std::invalid_argument("apportion_counts: ratios must sum to 1");

    std::vector<std::size_t> counts(k, 0);
    std::vector<std::pair<double, std::size_t>> rem(k);
    std::size_t assigned = 0;
    for (std::size_t i = 0; i < k; ++i) {
        double exact = ratios[static_cast<Eigen::Index>(i)] * static_cast<double>(total);
        counts[i] = static_cast<std::size_t>(std::floor(exact));
        rem[i] = {exact - std::floor(exact), i};
        assigned += counts[i];
    }
    std::stable_sort(rem.begin(), rem.end(),
                     [](const auto& a, const auto& b) { return a.first > b.first; });
    for (std::size_t j = 0; assigned < total; ++j, ++assigned) ++counts[rem[j].second];
    return counts;
}

namespace detail {

inline Batch make_batch(const DomainDataset& d, std::vector<std::size_t> idx) {
    Batch b;
    b.domain_id = d.domain_id();
    b.indices = std::move(idx);
    b.x.resize(static_cast<Eigen::Index>(b.indices.size()), d.dim());
    b.y.resize(b.indices.size());
    for (std::size_t i = 0; i < b.indices.size(); ++i) {
        b.x.row(static_cast<Eigen::Index>(i)) = d.features().row(static_cast<Eigen::Index>(b.indices[i]));
        b.y[i] = d.labels()[b.indices[i]];
    }
    return b;
}

inline bool covers_all_classes(const std::vector<int>& y, int num_classes) {
    std::vector<char> seen(static_cast<std::size_t>(num_classes), 0);
    for (int v : y) seen[static_cast<std::size_t>(v)] = 1;
    return std::all_of(seen.begin(), seen.end(), [](char s) { return s != 0; });
}

// Batch with every class present; class-balanced draws satisfy this directly,
// unbalanced ones retry (bounded).
inline Batch draw_covering_batch(const DomainDataset& d, std::size_t n, bool class_balanced, Rng& rng) {
    constexpr int kMaxTries = 100;
    for (int t = 0; t < kMaxTries; ++t) {
        auto idx = sample_batch_indices(d, n, class_balanced, rng);
        Batch b = make_batch(d, std::move(idx));
        if (covers_all_classes(b.y, d.num_classes())) return b;
    }
    throw std::runtime_error("draw_covering_batch: batch of " + std::to_string(n) + " from domain '" +
                             d.name() + "' kept missing a class");
}

// Assembles the meta-test batch from per-domain counts. Slices of at least C
// samples are drawn class-balanced (when balancing is on); smaller slices are
// plain uniform draws. The union must cover every class.
inline void draw_meta_test(const std::vector<DomainDataset>& domains, const std::vector<std::size_t>& counts,
                           bool class_balanced, Rng& rng, MetaTask& task) {
    int num_classes = domains.front().num_classes();
    int d_in = domains.front().dim();
    constexpr int kMaxTries = 100;
    for (int t = 0; t < kMaxTries; ++t) {
        std::vector<Batch> slices;
        std::size_t total = 0;
        for (std::size_t k = 0; k < domains.size(); ++k) {
            if (counts[k] == 0) continue;
            bool balanced = class_balanced && counts[k] >= static_cast<std::size_t>(num_classes);
            slices.push_back(make_batch(domains[k], sample_batch_indices(domains[k], counts[k], balanced, rng)));
            total += counts[k];
        }
        Batch te;
        te.domain_id = -1;
        te.x.resize(static_cast<Eigen::Index>(total), d_in);
        te.y.reserve(total);
        te.indices.reserve(total);
        std::vector<int> sample_domains;
        sample_domains.reserve(total);
        Eigen::Index row = 0;
        for (const auto& s : slices) {
            te.x.middleRows(row, s.x.rows()) = s.x;
            row += s.x.rows();
            te.y.insert(te.y.end(), s.y.begin(), s.y.end());
            te.indices.insert(te.indices.end(), s.indices.begin(), s.indices.end());
            sample_domains.insert(sample_domains.end(), s.y.size(), s.domain_id);
        }
        if (covers_all_classes(te.y, num_classes)) {
            task.meta_test = std::move(te);
            task.meta_test_domains = std::move(sample_domains);
            return;
        }
    }
    throw std::runtime_error("draw_meta_test: meta-test batch kept missing a class");
}

inline void check_task_domains(const std::vector<DomainDataset>& domains) {
    if (domains.size() < 2)
        throw std::invalid_argument("episode sampling needs K >= 2 source domains to simulate domain shift");
    for (const auto& d : domains) {
        if (d.num_classes() != domains.front().num_classes())
            throw std::invalid_argument("episode sampling: domains disagree on number of classes");
        if (d.dim() != domains.front().dim())
            throw std::invalid_argument("episode sampling: domains disagree on feature width");
    }
}

inline void fill_meta_train(const std::vector<DomainDataset>& domains, std::size_t held_idx,
                            std::size_t batch_train, bool class_balanced, Rng& rng, MetaTask& task) {
    for (std::size_t k = 0; k < domains.size(); ++k) {
        if (k == held_idx) continue;
        task.meta_train.push_back(draw_covering_batch(domains[k], batch_train, class_balanced, rng));
    }
}

} // namespace detail

// Task sampling (TS): one held-out domain becomes the whole meta-test.
inline MetaTask sample_task_ts(const std::vector<DomainDataset>& train_domains, std::size_t batch_train,
                               std::size_t batch_test, Rng& rng, bool class_balanced = true) {
    detail::check_task_domains(train_domains);
    const auto k = train_domains.size();
    MetaTask task;
    auto held = rng.uniform_index(k);
    task.held_out_index = static_cast<Eigen::Index>(held);
    task.held_out_id = train_domains[held].domain_id();
    task.ratios = Vec::Zero(static_cast<Eigen::Index>(k));
    task.ratios[static_cast<Eigen::Index>(held)] = 1.0;
    task.meta_test_counts.assign(k, 0);
    task.meta_test_counts[held] = batch_test;
    detail::draw_meta_test(train_domains, task.meta_test_counts, class_balanced, rng, task);
    detail::fill_meta_train(train_domains, held, batch_train, class_balanced, rng, task);
    return task;
}

// Mixed task sampling (MTS): the held-out domain keeps ratio r_ho drawn from
// the schedule; the remaining mass is split over the other K-1 domains by a
// symmetric flat Dirichlet draw.
inline MetaTask sample_task_mts(const std::vector<DomainDataset>& train_domains,
                                const MixRatioSchedule& schedule, std::size_t batch_train, std::size_t n_te,
                                Rng& rng, bool class_balanced = true) {
    detail::check_task_domains(train_domains);
    const auto k = train_domains.size();
    MetaTask task;
    auto held = rng.uniform_index(k);
    task.held_out_index = static_cast<Eigen::Index>(held);
    task.held_out_id = train_domains[held].domain_id();

    double r_ho = schedule.draw(rng);
    task.ratios = Vec::Zero(static_cast<Eigen::Index>(k));
    task.ratios[static_cast<Eigen::Index>(held)] = r_ho;
    double rest = 1.0 - r_ho;
    if (rest > 0.0) {
        // Gamma(1,1) draws normalized = flat Dirichlet over the K-1 others.
        std::vector<double> e(k, 0.0);
        double sum = 0.0;
        for (std::size_t i = 0; i < k; ++i) {
            if (i == held) continue;
            e[i] = -std::log(1.0 - rng.uniform());
            sum += e[i];
        }
        for (std::size_t i = 0; i < k; ++i) {
            if (i == held) continue;
            task.ratios[static_cast<Eigen::Index>(i)] = rest * e[i] / sum;
        }
    }

    task.meta_test_counts = apportion_counts(task.ratios, n_te);
    detail::draw_meta_test(train_domains, task.meta_test_counts, class_balanced, rng, task);
    detail::fill_meta_train(train_domains, held, batch_train, class_balanced, rng, task);
    return task;
}

} // namespace etta
