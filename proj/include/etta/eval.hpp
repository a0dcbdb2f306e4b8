#pragma once

#include <atomic>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <mutex>
#include <numeric>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "etta/metatrain.hpp"

namespace etta {

inline double accuracy(const std::vector<int>& predictions, const std::vector<int>& labels) {
    if (predictions.empty()) throw std::invalid_argument("accuracy: empty batch");
    if (predictions.size() != labels.size()) throw std::invalid_argument("accuracy: length mismatch");
    std::size_t correct = 0;
    for (std::size_t i = 0; i < predictions.size(); ++i)
        if (predictions[i] == labels[i]) ++correct;
    return static_cast<double>(correct) / static_cast<double>(predictions.size());
}

// Dice coefficient over binary masks (any shape, flattened). Two empty masks
// overlap perfectly by convention.
inline double dice(const std::vector<int>& prediction_mask, const std::vector<int>& truth_mask) {
    if (prediction_mask.size() != truth_mask.size()) throw std::invalid_argument("dice: shape mismatch");
    std::size_t p = 0, g = 0, both = 0;
    for (std::size_t i = 0; i < prediction_mask.size(); ++i) {
        bool pi = prediction_mask[i] != 0;
        bool gi = truth_mask[i] != 0;
        p += pi;
        g += gi;
        both += pi && gi;
    }
    if (p + g == 0) return 1.0;
    return 2.0 * static_cast<double>(both) / static_cast<double>(p + g);
}

// Argmax over cosine scores against the domain-general prototypes.
inline std::vector<int> predict(const ModelParams& params, const Mat& x) {
    Mat f = embed(params, x);
    Mat scores = cosine_score_matrix(f, params.theta);
    std::vector<int> out(static_cast<std::size_t>(scores.rows()));
    for (Eigen::Index i = 0; i < scores.rows(); ++i) {
        Eigen::Index best = 0;
        scores.row(i).maxCoeff(&best);
        out[static_cast<std::size_t>(i)] = static_cast<int>(best);
    }
    return out;
}

inline double dataset_accuracy(const ModelParams& params, const DomainDataset& d) {
    return accuracy(predict(params, d.features()), d.labels());
}

// ---- leave-one-domain-out harness -------------------------------------------

struct MethodConfig {
    enum class Kind { etta, deepall };
    std::string name;
    Kind kind = Kind::etta;
    TrainConfig train{};
};

struct RunResult {
    std::string held_out; // target domain name, or "Average"
    std::string method;
    std::string metric;
    double mean = 0.0;
    double stddev = 0.0;
    std::vector<double> per_seed;
    std::string config_hash;
};

struct LodoOptions {
    double train_fraction = 0.7;
    std::uint64_t split_seed = 7301;
    int jobs = 1;
    std::string config_hash;
};

namespace detail {

inline std::pair<double, double> mean_std(const std::vector<double>& v) {
    double mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    if (v.size() < 2) return {mean, 0.0};
    double ss = 0.0;
    for (double x : v) ss += (x - mean) * (x - mean);
    return {mean, std::sqrt(ss / static_cast<double>(v.size() - 1))};
}

} // namespace detail

// For each held-out domain, method, and seed: trains on the other domains'
// 70% splits and scores accuracy on the held-out domain's 30% split (plus the
// source test splits for reference). Cells run independently up to `jobs`
// threads; aggregation order is fixed.
inline std::vector<RunResult> leave_one_domain_out(const std::vector<DomainDataset>& all_domains,
                                                   const std::vector<MethodConfig>& methods,
                                                   const std::vector<std::uint64_t>& seeds,
                                                   const LodoOptions& options = {}) {
    const auto n_domains = all_domains.size();
    if (n_domains < 3)
        throw std::invalid_argument("leave_one_domain_out: need at least 3 domains (K >= 2 sources)");
    if (methods.empty() || seeds.empty())
        throw std::invalid_argument("leave_one_domain_out: methods and seeds must be nonempty");

    std::vector<DomainDataset> train_split, test_split;
    train_split.reserve(n_domains);
    test_split.reserve(n_domains);
    for (const auto& d : all_domains) {
        auto [tr, te] = split_train_test(d, SplitSpec{options.train_fraction, options.split_seed});
        train_split.push_back(std::move(tr));
        test_split.push_back(std::move(te));
    }

    struct Cell {
        std::size_t held, method, seed;
    };
    std::vector<Cell> cells;
    for (std::size_t h = 0; h < n_domains; ++h)
        for (std::size_t m = 0; m < methods.size(); ++m)
            for (std::size_t s = 0; s < seeds.size(); ++s) cells.push_back({h, m, s});

    const auto n_cells = cells.size();
    std::vector<double> acc_target(n_cells, 0.0);
    std::vector<double> acc_source(n_cells, 0.0);

    std::atomic<std::size_t> next{0};
    std::mutex err_mutex;
    std::exception_ptr first_error;

    auto worker = [&]() {
        for (;;) {
            std::size_t i = next.fetch_add(1);
            if (i >= n_cells) return;
            try {
                const Cell& cell = cells[i];
                std::vector<DomainDataset> sources;
                for (std::size_t k = 0; k < n_domains; ++k)
                    if (k != cell.held) sources.push_back(train_split[k]);
                TrainConfig cfg = methods[cell.method].train;
                cfg.seed = seeds[cell.seed];
                TrainResult res = methods[cell.method].kind == MethodConfig::Kind::etta
                                      ? train(sources, cfg)
                                      : train_deepall(sources, cfg);
                acc_target[i] = dataset_accuracy(res.params, test_split[cell.held]);
                double src = 0.0;
                std::size_t n_src = 0;
                for (std::size_t k = 0; k < n_domains; ++k) {
                    if (k == cell.held) continue;
                    src += dataset_accuracy(res.params, test_split[k]);
                    ++n_src;
                }
                acc_source[i] = src / static_cast<double>(n_src);
            } catch (...) {
                std::lock_guard<std::mutex> lk(err_mutex);
                if (!first_error) first_error = std::current_exception();
                next.store(n_cells);
                return;
            }
        }
    };

    int jobs = std::max(1, options.jobs);
    if (jobs == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (int t = 0; t < jobs; ++t) pool.emplace_back(worker);
        for (auto& t : pool) t.join();
    }
    if (first_error) std::rethrow_exception(first_error);

    auto cell_index = [&](std::size_t h, std::size_t m, std::size_t s) {
        return (h * methods.size() + m) * seeds.size() + s;
    };

    std::vector<RunResult> out;
    for (std::size_t h = 0; h < n_domains; ++h) {
        for (std::size_t m = 0; m < methods.size(); ++m) {
            for (const auto* values : {&acc_target, &acc_source}) {
                RunResult r;
                r.held_out = all_domains[h].name();
                r.method = methods[m].name;
                r.metric = values == &acc_target ? "acc_target" : "acc_source_test";
                for (std::size_t s = 0; s < seeds.size(); ++s)
                    r.per_seed.push_back((*values)[cell_index(h, m, s)]);
                std::tie(r.mean, r.stddev) = detail::mean_std(r.per_seed);
                r.config_hash = options.config_hash;
                out.push_back(std::move(r));
            }
        }
    }
    // Average rows: seed-matched means across held-out settings.
    for (std::size_t m = 0; m < methods.size(); ++m) {
        for (const auto* values : {&acc_target, &acc_source}) {
            RunResult r;
            r.held_out = "Average";
            r.method = methods[m].name;
            r.metric = values == &acc_target ? "acc_target" : "acc_source_test";
            for (std::size_t s = 0; s < seeds.size(); ++s) {
                double sum = 0.0;
                for (std::size_t h = 0; h < n_domains; ++h) sum += (*values)[cell_index(h, m, s)];
                r.per_seed.push_back(sum / static_cast<double>(n_domains));
            }
            std::tie(r.mean, r.stddev) = detail::mean_std(r.per_seed);
            r.config_hash = options.config_hash;
            out.push_back(std::move(r));
        }
    }
    return out;
}

// ---- overfitting-gap diagnostic ---------------------------------------------

// Trapezoidal integral over iterations of |testing-task loss - training-task
// loss|, optionally after a trailing moving average of both curves.
inline double overfit_gap_area(const std::vector<EpisodeLog>& logs, int burn_in = 0, int smooth_window = 0) {
    if (burn_in < 0) throw std::invalid_argument("overfit_gap_area: burn_in must be >= 0");
    std::vector<double> x, a, b;
    for (const auto& log : logs) {
        if (!log.loss_task_unseen)
            throw std::invalid_argument("overfit_gap_area: log at iteration " + std::to_string(log.iteration) +
                                        " has no unseen-domain loss channel");
        if (!log.loss_task_metatest)
            throw std::invalid_argument("overfit_gap_area: log at iteration " + std::to_string(log.iteration) +
                                        " has no meta-test loss channel");
        x.push_back(static_cast<double>(log.iteration));
        a.push_back(*log.loss_task_unseen);
        b.push_back(*log.loss_task_metatest);
    }
    if (static_cast<std::size_t>(burn_in) >= x.size())
        throw std::invalid_argument("overfit_gap_area: burn_in exceeds log length");

    if (smooth_window > 1) {
        auto smooth = [&](std::vector<double>& v) {
            std::vector<double> out(v.size());
            double acc = 0.0;
            for (std::size_t i = 0; i < v.size(); ++i) {
                acc += v[i];
                if (i >= static_cast<std::size_t>(smooth_window)) acc -= v[i - smooth_window];
                auto len = std::min<std::size_t>(i + 1, static_cast<std::size_t>(smooth_window));
                out[i] = acc / static_cast<double>(len);
            }
            v = std::move(out);
        };
        smooth(a);
        smooth(b);
    }

    double area = 0.0;
    for (std::size_t i = static_cast<std::size_t>(burn_in) + 1; i < x.size(); ++i) {
        double g0 = std::abs(a[i - 1] - b[i - 1]);
        double g1 = std::abs(a[i] - b[i]);
        area += 0.5 * (g0 + g1) * (x[i] - x[i - 1]);
    }
    return area;
}

// ---- embedding export --------------------------------------------------------

// CSV with columns z0..z{d_z-1},label,domain_id, one row per sample.
inline void export_embeddings(const ModelParams& params, const std::vector<DomainDataset>& domains,
                              const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("export_embeddings: cannot open " + path.string());
    int d_z = params.backbone.feature_dim();
    for (int j = 0; j < d_z; ++j) out << "z" << j << ",";
    out << "label,domain_id\n";
    char buf[64];
    for (const auto& d : domains) {
        Mat f = embed(params, d.features());
        for (Eigen::Index i = 0; i < f.rows(); ++i) {
            for (Eigen::Index j = 0; j < f.cols(); ++j) {
                std::snprintf(buf, sizeof(buf), "%.17g", f(i, j));
                out << buf << ",";
            }
            out << d.labels()[static_cast<std::size_t>(i)] << "," << d.domain_id() << "\n";
        }
    }
    if (!out) throw std::runtime_error("export_embeddings: write failed for " + path.string());
}

// ---- result serialization ------------------------------------------------------

inline nlohmann::json run_results_to_json(const std::vector<RunResult>& results) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& r : results) {
        arr.push_back({{"held_out", r.held_out},
                       {"method", r.method},
                       {"metric", r.metric},
                       {"mean", r.mean},
                       {"std", r.stddev},
                       {"per_seed", r.per_seed},
                       {"config_hash", r.config_hash}});
    }
    return arr;
}

// Fixed-width table: rows = source -> target settings plus Average, columns =
// methods, cells = mean+-std of the target-domain accuracy.
inline std::string run_results_table(const std::vector<RunResult>& results,
                                     const std::vector<std::string>& domain_names) {
    std::vector<std::string> methods;
    for (const auto& r : results)
        if (std::find(methods.begin(), methods.end(), r.method) == methods.end()) methods.push_back(r.method);

    auto find = [&](const std::string& held, const std::string& method) -> const RunResult* {
        for (const auto& r : results)
            if (r.held_out == held && r.method == method && r.metric == "acc_target") return &r;
        return nullptr;
    };

    std::vector<std::string> row_labels;
    std::vector<std::string> row_keys;
    for (const auto& target : domain_names) {
        std::string sources;
        for (const auto& s : domain_names) {
            if (s == target) continue;
            if (!sources.empty()) sources += ",";
            sources += s;
        }
        row_labels.push_back(sources + " -> " + target);
        row_keys.push_back(target);
    }
    row_labels.push_back("Average");
    row_keys.push_back("Average");

    std::size_t label_w = std::string("Setting").size();
    for (const auto& l : row_labels) label_w = std::max(label_w, l.size());

    auto cell = [&](const RunResult* r) {
        if (!r) return std::string("-");
        char buf[64];
        std::snprintf(buf, sizeof(buf), "%.4f+-%.4f", r->mean, r->stddev);
        return std::string(buf);
    };

    std::vector<std::size_t> col_w(methods.size());
    for (std::size_t m = 0; m < methods.size(); ++m) {
        col_w[m] = methods[m].size();
        for (const auto& key : row_keys) col_w[m] = std::max(col_w[m], cell(find(key, methods[m])).size());
    }

    std::ostringstream out;
    out << std::string(label_w - 7, ' ') << "Setting";
    for (std::size_t m = 0; m < methods.size(); ++m)
        out << "  " << std::string(col_w[m] - methods[m].size(), ' ') << methods[m];
    out << "\n";
    for (std::size_t i = 0; i < row_keys.size(); ++i) {
        out << std::string(label_w - row_labels[i].size(), ' ') << row_labels[i];
        for (std::size_t m = 0; m < methods.size(); ++m) {
            std::string c = cell(find(row_keys[i], methods[m]));
            out << "  " << std::string(col_w[m] - c.size(), ' ') << c;
        }
        out << "\n";
    }
    return out.str();
}

} // namespace etta
