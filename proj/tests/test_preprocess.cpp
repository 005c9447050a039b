// SPDX-License-Identifier: Apache-2.0
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
// http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.
// ------------------------------------------------------------------------

#include "covtwin/preprocess.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <set>

using namespace covtwin;

TEST(Median, OddEvenAndErrors) {
    EXPECT_EQ(median({3, 1, 2}), 2.0);
    EXPECT_EQ(median({4, 1, 3, 2}), 2.5);
    EXPECT_EQ(median({-7}), -7.0);
    EXPECT_THROW(median({}), ValidationError);
}

TEST(Hampel, FlagsTheSpike) {
    const std::vector<double> v{1, 2, 3, 4, 1000};
    // median 3, MAD 1: only 1000 lies beyond 4.5.
    const auto keep = hampel_mask(v, 4.5);
    EXPECT_EQ(keep, (std::vector<bool>{true, true, true, true, false}));
}

TEST(Hampel, ThresholdTiesAreKept) {
    // median 0, deviations {0,1,1,2,2}: MAD 1, so k=2 keeps |2|.
    const std::vector<double> v{0, 1, -1, 2, -2};
    const auto keep = hampel_mask(v, 2.0);
    EXPECT_TRUE(std::all_of(keep.begin(), keep.end(), [](bool b) { return b; }));
    const auto strict = hampel_mask(v, 1.5);
    EXPECT_EQ(strict, (std::vector<bool>{true, true, true, false, false}));
}

TEST(Hampel, ZeroMadDropsEverythingOffMedian) {
    const std::vector<double> v{5, 5, 5, 5, 6};
    EXPECT_EQ(hampel_mask(v), (std::vector<bool>{true, true, true, true, false}));
}

TEST(Hampel, MaskIsOracleConsistent) {
    Rng rng = make_rng(3, {});
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<double> v(1 + static_cast<std::size_t>(uniform(rng, 1, 60)));
        for (auto& x : v) x = uniform01(rng) < 0.1 ? uniform(rng, -500, 500) : standard_normal(rng);
        // Oracle: full sort for median and MAD.
        auto s = v;
        std::sort(s.begin(), s.end());
        const auto med_of = [](const std::vector<double>& a) {
            const std::size_t n = a.size();
            return n % 2 ? a[n / 2] : 0.5 * (a[n / 2 - 1] + a[n / 2]);
        };
        const double med = med_of(s);
        std::vector<double> dev;
        for (double x : v) dev.push_back(std::abs(x - med));
        auto ds = dev;
        std::sort(ds.begin(), ds.end());
        const double mad = med_of(ds);
        const auto keep = hampel_mask(v, 3.0);
        for (std::size_t i = 0; i < v.size(); ++i) EXPECT_EQ(keep[i], dev[i] <= 3.0 * mad);
    }
}

TEST(FilterOutliers, TwoPassesAndSubset) {
    BinDataset ds;
    for (int i = 0; i < 20; ++i) ds.records.push_back({i, 100.0 + i % 5, 200.0 + i % 4, 0, 1, -70.0 - i});
    ds.records.push_back({100, 5000.0, 201.0, 1, 1, -80});
    ds.records.push_back({101, 101.0, -9000.0, 2, 1, -80});
    const auto out = filter_outliers(ds, 4.5);
    EXPECT_EQ(out.records.size(), 20u);
    for (const auto& r : out.records) EXPECT_LT(r.bin_id, 100);
    // Idempotent once clean.
    EXPECT_EQ(filter_outliers(out, 4.5).records, out.records);
}

TEST(FilterOutliers, SurvivorsAreInputRecordsInOrder) {
    Rng rng = make_rng(11, {});
    BinDataset ds;
    for (int i = 0; i < 500; ++i)
        ds.records.push_back({i, uniform(rng, 0, 500) + (i % 97 == 0 ? 1e4 : 0.0), uniform(rng, 0, 500), i % 3, 1,
                              -90.0});
    const auto out = filter_outliers(ds);
    std::size_t j = 0;
    for (const auto& r : out.records) {
        while (j < ds.records.size() && !(ds.records[j] == r)) ++j;
        ASSERT_LT(j, ds.records.size());
        ++j;
    }
    EXPECT_LT(out.records.size(), ds.records.size());
}

TEST(Features, AssemblyOrder) {
    const MeasurementRecord r{4, 12.5, 33.0, 2, 7, -88};
    const auto f = assemble_features(r);
    EXPECT_EQ(f.variant, FeatureVariant::Baseline);
    EXPECT_EQ(f.values, (std::vector<double>{12.5, 33.0, 2, 7}));
    const auto g = assemble_features(r, LatentPair{0.25, -1.5});
    EXPECT_EQ(g.variant, FeatureVariant::Proposal);
    EXPECT_EQ(g.values, (std::vector<double>{12.5, 33.0, 2, 7, 0.25, -1.5}));
    EXPECT_EQ(feature_dim(FeatureVariant::Baseline), 4u);
    EXPECT_EQ(feature_dim(FeatureVariant::Proposal), 6u);
}

TEST(Normalization, FitMatchesHandValues) {
    const std::vector<std::vector<double>> rows{{1, 10, 3}, {3, 10, 5}, {5, 10, 7}};
    const auto s = normalize_fit(std::span<const std::vector<double>>(rows));
    EXPECT_NEAR(s.mean[0], 3.0, 1e-15);
    EXPECT_NEAR(s.std[0], std::sqrt(8.0 / 3.0), 1e-15);
    EXPECT_EQ(s.std[1], 1.0);  // constant column passes through centred
    const auto z = s.apply(rows[2]);
    EXPECT_NEAR(z[0], 2.0 / std::sqrt(8.0 / 3.0), 1e-15);
    EXPECT_EQ(z[1], 0.0);
}

TEST(Normalization, StandardizesAndRoundTrips) {
    Rng rng = make_rng(5, {});
    std::vector<std::vector<double>> rows(300);
    for (auto& r : rows) r = {uniform(rng, -1e3, 1e3), 4 + 0.01 * standard_normal(rng), standard_normal(rng) * 50};
    const auto s = normalize_fit(std::span<const std::vector<double>>(rows));
    std::vector<double> m(3, 0.0), v(3, 0.0);
    for (const auto& r : rows) {
        const auto z = s.apply(r);
        const auto back = s.unapply(z);
        for (std::size_t i = 0; i < 3; ++i) {
            EXPECT_NEAR(back[i], r[i], 1e-9 * std::max(1.0, std::abs(r[i])));
            m[i] += z[i];
            v[i] += z[i] * z[i];
        }
    }
    for (std::size_t i = 0; i < 3; ++i) {
        EXPECT_NEAR(m[i] / 300, 0.0, 1e-12);
        EXPECT_NEAR(v[i] / 300, 1.0, 1e-12);
    }
    const auto j = normalization_stats_from_json(to_json(s));
    EXPECT_EQ(j.mean, s.mean);
    EXPECT_EQ(j.std, s.std);
    EXPECT_THROW(s.apply(std::vector<double>{1.0}), ShapeError);
}

TEST(Splits, HoldoutProperties) {
    const SplitConfig cfg{SplitMode::RepeatedHoldout, 20, 0.8};
    const auto plan = make_splits(103, cfg, 42);
    ASSERT_EQ(plan.folds.size(), 20u);
    std::set<std::vector<std::size_t>> distinct;
    for (const auto& f : plan.folds) {
        EXPECT_EQ(f.train.size(), 82u);
        EXPECT_EQ(f.validation.size(), 21u);
        std::vector<std::size_t> all = f.train;
        all.insert(all.end(), f.validation.begin(), f.validation.end());
        std::sort(all.begin(), all.end());
        for (std::size_t i = 0; i < all.size(); ++i) ASSERT_EQ(all[i], i);  // disjoint + covering
        distinct.insert(f.validation);
    }
    EXPECT_GT(distinct.size(), 15u);
    const auto again = make_splits(103, cfg, 42);
    for (std::size_t f = 0; f < 20; ++f) EXPECT_EQ(again.folds[f].validation, plan.folds[f].validation);
    EXPECT_NE(make_splits(103, cfg, 43).folds[0].validation, plan.folds[0].validation);
}

TEST(Splits, KFoldPartitions) {
    const SplitConfig cfg{SplitMode::KFold, 7, 0.8};
    const auto plan = make_splits(50, cfg, 1);
    std::vector<int> seen(50, 0);
    for (const auto& f : plan.folds) {
        EXPECT_TRUE(f.validation.size() == 7 || f.validation.size() == 8);
        EXPECT_EQ(f.train.size() + f.validation.size(), 50u);
        for (auto i : f.validation) ++seen[i];
    }
    for (int c : seen) EXPECT_EQ(c, 1);
}

TEST(Splits, RejectsDegenerateInputs) {
    EXPECT_THROW(make_splits(9, {}, 0), ValidationError);
    EXPECT_THROW(make_splits(100, {SplitMode::RepeatedHoldout, 0, 0.8}, 0), ValidationError);
    EXPECT_THROW(make_splits(100, {SplitMode::RepeatedHoldout, 5, 1.0}, 0), ValidationError);
    EXPECT_THROW(make_splits(10, {SplitMode::RepeatedHoldout, 5, 0.99}, 0), ValidationError);
    EXPECT_THROW(make_splits(10, {SplitMode::KFold, 11, 0.8}, 0), ValidationError);
    EXPECT_THROW(split_config_from_json({{"mode", "bootstrap"}}), ValidationError);
}
