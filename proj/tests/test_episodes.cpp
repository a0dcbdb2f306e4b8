#include <gtest/gtest.h>

#include <set>

#include "etta/episodes.hpp"

using namespace etta;

namespace {

std::vector<DomainDataset> moons(int k, int n = 120, std::uint64_t seed = 7) {
    std::vector<double> params;
    for (int i = 0; i < k; ++i) params.push_back(15.0 * i);
    return generate_synthetic_domains(SyntheticFamily::rotated_two_moons, k, n, params, seed);
}

} // namespace

TEST(ApportionCounts, Basics) {
    Vec one(3);
    one << 1.0, 0.0, 0.0;
    EXPECT_EQ(apportion_counts(one, 60), (std::vector<std::size_t>{60, 0, 0}));

    Vec thirds = Vec::Constant(3, 1.0 / 3.0);
    EXPECT_EQ(apportion_counts(thirds, 10), (std::vector<std::size_t>{4, 3, 3}));

    Vec mix(3);
    mix << 0.5, 0.25, 0.25;
    EXPECT_EQ(apportion_counts(mix, 60), (std::vector<std::size_t>{30, 15, 15}));
}

TEST(ApportionCounts, SumAndClosenessProperties) {
    Rng rng(5);
    for (int trial = 0; trial < 200; ++trial) {
        auto k = 2 + rng.uniform_index(5);
        Vec r(static_cast<Eigen::Index>(k));
        double sum = 0.0;
        for (Eigen::Index i = 0; i < r.size(); ++i) {
            r[i] = -std::log(1.0 - rng.uniform());
            sum += r[i];
        }
        r /= sum;
        std::size_t total = rng.uniform_index(200);
        auto counts = apportion_counts(r, total);
        std::size_t got = 0;
        for (std::size_t i = 0; i < counts.size(); ++i) {
            got += counts[i];
            EXPECT_LT(std::abs(static_cast<double>(counts[i]) - r[static_cast<Eigen::Index>(i)] *
                                                                    static_cast<double>(total)),
                      1.0 + 1e-9);
        }
        EXPECT_EQ(got, total);
    }
}

TEST(ApportionCounts, NegativeRatioRejected) {
    Vec r(2);
    r << 1.5, -0.5;
    EXPECT_THROW(apportion_counts(r, 10), std::invalid_argument);
}

TEST(TaskSamplingTS, ShapeAndRatios) {
    auto domains = moons(3);
    Rng rng(1);
    auto task = sample_task_ts(domains, 12, 12, rng);
    EXPECT_EQ(task.meta_train.size(), 2u);
    EXPECT_EQ(task.ratios.size(), 3);
    EXPECT_DOUBLE_EQ(task.ratios.sum(), 1.0);
    EXPECT_DOUBLE_EQ(task.ratios[task.held_out_index], 1.0);
    EXPECT_EQ(task.meta_test.size(), 12u);
    for (const auto& b : task.meta_train) EXPECT_NE(b.domain_id, task.held_out_id);
    for (int d : task.meta_test_domains) EXPECT_EQ(d, task.held_out_id);
}

TEST(TaskSamplingTS, RequiresTwoDomains) {
    auto domains = moons(2);
    std::vector<DomainDataset> one{domains[0]};
    Rng rng(1);
    EXPECT_THROW(sample_task_ts(one, 8, 8, rng), std::invalid_argument);
}

TEST(TaskSamplingTS, HeldOutFrequencyIsUniform) {
    auto domains = moons(4, 60);
    Rng rng(123);
    std::vector<int> held(4, 0);
    const int episodes = 3000;
    for (int i = 0; i < episodes; ++i) {
        auto task = sample_task_ts(domains, 8, 8, rng);
        ++held[static_cast<std::size_t>(task.held_out_index)];
    }
    for (int count : held) {
        double freq = static_cast<double>(count) / episodes;
        EXPECT_GE(freq, 0.20);
        EXPECT_LE(freq, 0.30);
    }
}

TEST(TaskSamplingMTS, FixedZeroExcludesHeldOut) {
    auto domains = moons(3);
    MixRatioSchedule sched;
    sched.mode = MixRatioSchedule::Mode::fixed;
    sched.r_ho_value = 0.0;
    Rng rng(4);
    for (int i = 0; i < 20; ++i) {
        auto task = sample_task_mts(domains, sched, 10, 12, rng);
        EXPECT_EQ(task.meta_test_counts[static_cast<std::size_t>(task.held_out_index)], 0u);
        for (int d : task.meta_test_domains) EXPECT_NE(d, task.held_out_id);
    }
}

TEST(TaskSamplingMTS, TsIsMtsWithFixedOne) {
    auto domains = moons(4, 80);
    MixRatioSchedule sched;
    sched.mode = MixRatioSchedule::Mode::fixed;
    sched.r_ho_value = 1.0;
    for (std::uint64_t seed : {1ULL, 17ULL, 400ULL}) {
        Rng a(seed), b(seed);
        auto ts = sample_task_ts(domains, 10, 12, a);
        auto mts = sample_task_mts(domains, sched, 10, 12, b);
        EXPECT_EQ(ts.held_out_id, mts.held_out_id);
        EXPECT_EQ(ts.meta_test.indices, mts.meta_test.indices);
        ASSERT_EQ(ts.meta_train.size(), mts.meta_train.size());
        for (std::size_t k = 0; k < ts.meta_train.size(); ++k)
            EXPECT_EQ(ts.meta_train[k].indices, mts.meta_train[k].indices);
    }
}

TEST(TaskSamplingMTS, ApportionedCountsAndInvariants) {
    auto domains = moons(3, 100);
    MixRatioSchedule sched; // uniform [0,1]
    Rng rng(9);
    for (int i = 0; i < 100; ++i) {
        auto task = sample_task_mts(domains, sched, 10, 30, rng);
        EXPECT_NEAR(task.ratios.sum(), 1.0, 1e-9);
        EXPECT_GE(task.ratios.minCoeff(), 0.0);
        std::size_t total = 0;
        for (auto c : task.meta_test_counts) total += c;
        EXPECT_EQ(total, 30u);
        EXPECT_EQ(task.meta_test.size(), 30u);
        // per-sample provenance matches the counts
        std::vector<std::size_t> seen(3, 0);
        for (int d : task.meta_test_domains) ++seen[static_cast<std::size_t>(d)];
        for (std::size_t k = 0; k < 3; ++k) EXPECT_EQ(seen[k], task.meta_test_counts[k]);
        // every class everywhere
        for (const auto& b : task.meta_train) {
            std::set<int> classes(b.y.begin(), b.y.end());
            EXPECT_EQ(classes.size(), 2u);
        }
        std::set<int> te_classes(task.meta_test.y.begin(), task.meta_test.y.end());
        EXPECT_EQ(te_classes.size(), 2u);
    }
}

TEST(TaskSamplingMTS, UniformRangeMeanHalf) {
    auto domains = moons(3, 60);
    MixRatioSchedule sched; // uniform [0,1]
    Rng rng(2024);
    double sum = 0.0;
    const int episodes = 5000;
    for (int i = 0; i < episodes; ++i) {
        auto task = sample_task_mts(domains, sched, 6, 12, rng);
        sum += task.r_ho();
    }
    EXPECT_NEAR(sum / episodes, 0.5, 0.02);
}

TEST(TaskSamplingMTS, RatioVectorsVaryContinuously) {
    auto domains = moons(3, 60);
    MixRatioSchedule sched;
    Rng rng(31);
    std::set<std::vector<double>> distinct;
    for (int i = 0; i < 1000; ++i) {
        auto task = sample_task_mts(domains, sched, 6, 12, rng);
        distinct.insert({task.ratios[0], task.ratios[1], task.ratios[2]});
    }
    EXPECT_GE(distinct.size(), 100u);
}

TEST(TaskSamplingMTS, OverdrawnDomainErrors) {
    auto domains = moons(2, 10);
    MixRatioSchedule sched;
    sched.mode = MixRatioSchedule::Mode::fixed;
    sched.r_ho_value = 1.0;
    Rng rng(3);
    EXPECT_THROW(sample_task_mts(domains, sched, 4, 50, rng), std::invalid_argument);
}

TEST(MixRatioSchedule, InvariantsEnforced) {
    MixRatioSchedule bad;
    bad.mode = MixRatioSchedule::Mode::fixed;
    bad.r_ho_value = 1.5;
    EXPECT_THROW(bad.validate(), std::invalid_argument);
    bad.mode = MixRatioSchedule::Mode::uniform_range;
    bad.r_ho_lo = 0.8;
    bad.r_ho_hi = 0.2;
    EXPECT_THROW(bad.validate(), std::invalid_argument);
}
