#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "etta/rng.hpp"

namespace etta {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

struct LabeledSample {
    Vec features;
    int label = 0;
    int domain_id = 0;
};

// One source/test domain. Feature rows are stored in a stable order so that
// seeded sampling is reproducible. Immutable after construction.
class DomainDataset {
public:
    DomainDataset() = default;

    DomainDataset(int domain_id, std::string name, Mat features, std::vector<int> labels,
                  int num_classes)
        : domain_id_(domain_id),
          name_(std::move(name)),
          features_(std::move(features)),
          labels_(std::move(labels)),
          num_classes_(num_classes) {
        validate();
    }

    int domain_id() const { return domain_id_; }
    const std::string& name() const { return name_; }
    int num_classes() const { return num_classes_; }
    int dim() const { return static_cast<int>(features_.cols()); }
    std::size_t size() const { return labels_.size(); }

    const Mat& features() const { return features_; }
    const std::vector<int>& labels() const { return labels_; }

    LabeledSample sample(std::size_t i) const {
        return {features_.row(static_cast<Eigen::Index>(i)).transpose(), labels_[i], domain_id_};
    }

    // Row indices per class, in dataset order.
    const std::vector<std::vector<std::size_t>>& class_index() const { return class_index_; }

private:
    void validate() {
        if (num_classes_ < 1) throw std::invalid_argument("DomainDataset: num_classes must be >= 1");
        if (static_cast<std::size_t>(features_.rows()) != labels_.size())
            throw std::invalid_argument("DomainDataset: feature/label count mismatch");
        class_index_.assign(static_cast<std::size_t>(num_classes_), {});
        for (std::size_t i = 0; i < labels_.size(); ++i) {
            int y = labels_[i];
            if (y < 0 || y >= num_classes_)
                throw std::invalid_argument("DomainDataset '" + name_ + "': label out of range at row " +
                                            std::to_string(i));
            class_index_[static_cast<std::size_t>(y)].push_back(i);
        }
        for (int c = 0; c < num_classes_; ++c) {
            if (class_index_[static_cast<std::size_t>(c)].empty())
                throw std::invalid_argument("DomainDataset '" + name_ + "': class " + std::to_string(c) +
                                            " absent");
        }
        if (!features_.allFinite())
            throw std::invalid_argument("DomainDataset '" + name_ + "': non-finite feature");
    }

    int domain_id_ = 0;
    std::string name_;
    Mat features_;
    std::vector<int> labels_;
    int num_classes_ = 0;
    std::vector<std::vector<std::size_t>> class_index_;
};

struct SplitSpec {
    double train_fraction = 0.7;
    std::uint64_t seed = 0;
};

enum class SyntheticFamily { rotated_two_moons, shifted_gaussians };

inline std::string to_string(SyntheticFamily f) {
    return f == SyntheticFamily::rotated_two_moons ? "rotated_two_moons" : "shifted_gaussians";
}

inline SyntheticFamily synthetic_family_from_string(const std::string& s) {
    if (s == "rotated_two_moons") return SyntheticFamily::rotated_two_moons;
    if (s == "shifted_gaussians") return SyntheticFamily::shifted_gaussians;
    throw std::invalid_argument("unknown synthetic family: " + s);
}

inline int synthetic_num_classes(SyntheticFamily f) {
    return f == SyntheticFamily::rotated_two_moons ? 2 : 3;
}

namespace detail {

// Class-balanced base draw shared by every domain of a synthetic benchmark;
// each domain applies its own transform to the same base point set so the
// inter-domain shift is exactly the configured transform.
inline void two_moons_base(int n, double noise, Rng& rng, Mat& x, std::vector<int>& y) {
    x.resize(n, 2);
    y.resize(static_cast<std::size_t>(n));
    int n0 = (n + 1) / 2;
    for (int i = 0; i < n; ++i) {
        int cls = i < n0 ? 0 : 1;
        double t = rng.uniform(0.0, M_PI);
        double px, py;
        if (cls == 0) {
            px = std::cos(t) - 0.5;
            py = std::sin(t) - 0.25;
        } else {
            px = 0.5 - std::cos(t);
            py = 0.25 - std::sin(t);
        }
        x(i, 0) = px + noise * rng.normal();
        x(i, 1) = py + noise * rng.normal();
        y[static_cast<std::size_t>(i)] = cls;
    }
}

// Three Gaussian blobs on a circle of radius 2, stddev = noise.
inline void gaussian_base(int n, double noise, Rng& rng, Mat& x, std::vector<int>& y) {
    constexpr int kClasses = 3;
    x.resize(n, 2);
    y.resize(static_cast<std::size_t>(n));
    double sigma = noise;
    for (int i = 0; i < n; ++i) {
        int cls = i % kClasses;
        double angle = M_PI_2 + 2.0 * M_PI * cls / kClasses;
        x(i, 0) = 2.0 * std::cos(angle) + sigma * rng.normal();
        x(i, 1) = 2.0 * std::sin(angle) + sigma * rng.normal();
        y[static_cast<std::size_t>(i)] = cls;
    }
}

inline Mat rotation2d(double degrees) {
    double rad = degrees * M_PI / 180.0;
    Mat r(2, 2);
    r << std::cos(rad), -std::sin(rad), std::sin(rad), std::cos(rad);
    return r;
}

} // namespace detail

// Synthetic multi-domain benchmarks with one shift parameter per domain
// (rotation angle in degrees, or class-mean shift magnitude along +x).
inline std::vector<DomainDataset> generate_synthetic_domains(SyntheticFamily family, int num_domains,
                                                             int samples_per_domain,
                                                             const std::vector<double>& domain_params,
                                                             std::uint64_t seed, double noise = 0.1) {
    int num_classes = synthetic_num_classes(family);
    if (num_domains < 2) throw std::invalid_argument("generate_synthetic_domains: need at least 2 domains");
    if (samples_per_domain < 2 * num_classes)
        throw std::invalid_argument("generate_synthetic_domains: samples_per_domain must be >= 2*C");
    if (static_cast<int>(domain_params.size()) != num_domains)
        throw std::invalid_argument("generate_synthetic_domains: one domain_param per domain required");
    for (std::size_t i = 0; i < domain_params.size(); ++i) {
        for (std::size_t j = i + 1; j < domain_params.size(); ++j) {
            if (domain_params[i] == domain_params[j])
                throw std::invalid_argument(
                    "generate_synthetic_domains: duplicate domain_params entry (no shift between domains " +
                    std::to_string(i) + " and " + std::to_string(j) + ")");
        }
    }

    Rng rng(seed);
    Mat base;
    std::vector<int> labels;
    if (family == SyntheticFamily::rotated_two_moons) {
        detail::two_moons_base(samples_per_domain, noise, rng, base, labels);
    } else {
        detail::gaussian_base(samples_per_domain, noise, rng, base, labels);
    }

    std::vector<DomainDataset> out;
    out.reserve(static_cast<std::size_t>(num_domains));
    for (int k = 0; k < num_domains; ++k) {
        Mat x;
        if (family == SyntheticFamily::rotated_two_moons) {
            x = base * detail::rotation2d(domain_params[static_cast<std::size_t>(k)]).transpose();
        } else {
            x = base;
            x.col(0).array() += domain_params[static_cast<std::size_t>(k)];
        }
        char buf[64];
        std::snprintf(buf, sizeof(buf), "%s_%03d", to_string(family).c_str(), k);
        out.emplace_back(k, buf, std::move(x), labels, num_classes);
    }
    return out;
}

// ---- on-disk domain format -------------------------------------------------
// One directory per domain: meta.json {domain_id, name, num_classes, d_in}
// and data.csv with header f0,...,f{d_in-1},label.

inline void save_domain_dir(const DomainDataset& d, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    nlohmann::json meta = {{"domain_id", d.domain_id()},
                           {"name", d.name()},
                           {"num_classes", d.num_classes()},
                           {"d_in", d.dim()}};
    {
        std::ofstream mf(dir / "meta.json");
        if (!mf) throw std::runtime_error("save_domain_dir: cannot write " + (dir / "meta.json").string());
        mf << meta.dump(2) << "\n";
    }
    std::ofstream cf(dir / "data.csv");
    if (!cf) throw std::runtime_error("save_domain_dir: cannot write " + (dir / "data.csv").string());
    for (int j = 0; j < d.dim(); ++j) cf << "f" << j << ",";
    cf << "label\n";
    char buf[64];
    for (std::size_t i = 0; i < d.size(); ++i) {
        for (int j = 0; j < d.dim(); ++j) {
            std::snprintf(buf, sizeof(buf), "%.17g", d.features()(static_cast<Eigen::Index>(i), j));
            cf << buf << ",";
        }
        cf << d.labels()[i] << "\n";
    }
}

inline DomainDataset load_domain_dir(const std::filesystem::path& dir) {
    std::ifstream mf(dir / "meta.json");
    if (!mf) throw std::runtime_error("load_domain_dir: missing " + (dir / "meta.json").string());
    nlohmann::json meta = nlohmann::json::parse(mf);
    int domain_id = meta.at("domain_id").get<int>();
    std::string name = meta.at("name").get<std::string>();
    int num_classes = meta.at("num_classes").get<int>();
    int d_in = meta.at("d_in").get<int>();

    std::ifstream cf(dir / "data.csv");
    if (!cf) throw std::runtime_error("load_domain_dir: missing " + (dir / "data.csv").string());
    std::string line;
    if (!std::getline(cf, line)) throw std::runtime_error("load_domain_dir: empty data.csv in " + dir.string());
    {
        std::ostringstream expect;
        for (int j = 0; j < d_in; ++j) expect << "f" << j << ",";
        expect << "label";
        if (line != expect.str())
            throw std::runtime_error("load_domain_dir: unexpected header in " + (dir / "data.csv").string() +
                                     " (missing label column or wrong width)");
    }

    std::vector<double> values;
    std::vector<int> labels;
    std::size_t row = 0;
    while (std::getline(cf, line)) {
        if (line.empty()) continue;
        ++row;
        std::stringstream ss(line);
        std::string cell;
        for (int j = 0; j < d_in; ++j) {
            if (!std::getline(ss, cell, ','))
                throw std::runtime_error("load_domain_dir: row " + std::to_string(row) + " truncated");
            std::size_t pos = 0;
            double v = std::stod(cell, &pos);
            if (!std::isfinite(v))
                throw std::runtime_error("load_domain_dir: non-finite feature at row " + std::to_string(row));
            values.push_back(v);
        }
        if (!std::getline(ss, cell, ','))
            throw std::runtime_error("load_domain_dir: missing label column at row " + std::to_string(row));
        labels.push_back(std::stoi(cell));
    }
    auto n = static_cast<Eigen::Index>(labels.size());
    Mat x(n, d_in);
    for (Eigen::Index i = 0; i < n; ++i)
        for (int j = 0; j < d_in; ++j) x(i, j) = values[static_cast<std::size_t>(i) * d_in + j];
    // DomainDataset validation reports absent classes / bad labels with context.
    return DomainDataset(domain_id, name, std::move(x), std::move(labels), num_classes);
}

// Loads every subdirectory of `root` that contains meta.json, sorted by name.
inline std::vector<DomainDataset> load_domain_root(const std::filesystem::path& root) {
    std::vector<std::filesystem::path> dirs;
    for (const auto& e : std::filesystem::directory_iterator(root)) {
        if (e.is_directory() && std::filesystem::exists(e.path() / "meta.json")) dirs.push_back(e.path());
    }
    std::sort(dirs.begin(), dirs.end());
    if (dirs.empty()) throw std::runtime_error("load_domain_root: no domain directories under " + root.string());
    std::vector<DomainDataset> out;
    out.reserve(dirs.size());
    for (const auto& d : dirs) out.push_back(load_domain_dir(d));
    return out;
}

// ---- splitting and sampling ------------------------------------------------

inline std::pair<DomainDataset, DomainDataset> split_train_test(const DomainDataset& d,
                                                                const SplitSpec& spec) {
    if (spec.train_fraction <= 0.0 || spec.train_fraction >= 1.0)
        throw std::invalid_argument("split_train_test: train_fraction must lie strictly inside (0,1)");
    auto n = d.size();
    auto n_train = static_cast<std::size_t>(std::llround(spec.train_fraction * static_cast<double>(n)));
    n_train = std::min(std::max<std::size_t>(n_train, 1), n - 1);
    std::size_t n_test = n - n_train;
    auto c = static_cast<std::size_t>(d.num_classes());
    if (n_train < c || n_test < c)
        throw std::invalid_argument("split_train_test: dataset '" + d.name() +
                                    "' too small to give every class to both splits");

    Rng rng(spec.seed);
    std::vector<std::size_t> perm(n);
    for (std::size_t i = 0; i < n; ++i) perm[i] = i;

    auto covers_all = [&](std::size_t lo, std::size_t hi) {
        std::vector<char> seen(c, 0);
        for (std::size_t i = lo; i < hi; ++i) seen[static_cast<std::size_t>(d.labels()[perm[i]])] = 1;
        return std::all_of(seen.begin(), seen.end(), [](char s) { return s != 0; });
    };

    constexpr int kMaxTries = 1000;
    for (int attempt = 0; attempt < kMaxTries; ++attempt) {
        rng.shuffle(perm.begin(), perm.end());
        if (covers_all(0, n_train) && covers_all(n_train, n)) {
            auto build = [&](std::size_t lo, std::size_t hi) {
                Mat x(static_cast<Eigen::Index>(hi - lo), d.dim());
                std::vector<int> y(hi - lo);
                std::vector<std::size_t> idx(perm.begin() + static_cast<std::ptrdiff_t>(lo),
                                             perm.begin() + static_cast<std::ptrdiff_t>(hi));
                std::sort(idx.begin(), idx.end()); // keep source order stable
                for (std::size_t i = 0; i < idx.size(); ++i) {
                    x.row(static_cast<Eigen::Index>(i)) = d.features().row(static_cast<Eigen::Index>(idx[i]));
                    y[i] = d.labels()[idx[i]];
                }
                return DomainDataset(d.domain_id(), d.name(), std::move(x), std::move(y), d.num_classes());
            };
            return {build(0, n_train), build(n_train, n)};
        }
    }
    throw std::runtime_error("split_train_test: could not give every class to both splits for '" + d.name() +
                             "'");
}

// n distinct row indices; with class balancing the per-class counts differ by
// at most one (random classes receive the remainder).
inline std::vector<std::size_t> sample_batch_indices(const DomainDataset& d, std::size_t n,
                                                     bool class_balanced, Rng& rng) {
    if (n > d.size())
        throw std::invalid_argument("sample_batch_indices: requested " + std::to_string(n) + " of " +
                                    std::to_string(d.size()) + " samples in domain '" + d.name() + "'");
    if (!class_balanced) {
        auto idx = rng.sample_indices(d.size(), n);
        std::sort(idx.begin(), idx.end());
        return idx;
    }
    auto c = static_cast<std::size_t>(d.num_classes());
    if (n < c)
        throw std::invalid_argument("sample_batch_indices: class-balanced batch needs n >= C");
    std::vector<std::size_t> count(c, n / c);
    std::size_t rem = n % c;
    if (rem > 0) {
        auto bump = rng.sample_indices(c, rem);
        for (auto cls : bump) ++count[cls];
    }
    std::vector<std::size_t> out;
    out.reserve(n);
    for (std::size_t cls = 0; cls < c; ++cls) {
        const auto& rows = d.class_index()[cls];
        if (count[cls] > rows.size())
            throw std::invalid_argument("sample_batch_indices: class " + std::to_string(cls) + " of domain '" +
                                        d.name() + "' has only " + std::to_string(rows.size()) + " samples");
        auto pick = rng.sample_indices(rows.size(), count[cls]);
        for (auto p : pick) out.push_back(rows[p]);
    }
    std::sort(out.begin(), out.end());
    return out;
}

inline std::vector<LabeledSample> sample_batch(const DomainDataset& d, std::size_t n, bool class_balanced,
                                               Rng& rng) {
    auto idx = sample_batch_indices(d, n, class_balanced, rng);
    std::vector<LabeledSample> out;
    out.reserve(idx.size());
    for (auto i : idx) out.push_back(d.sample(i));
    return out;
}

} // namespace etta
