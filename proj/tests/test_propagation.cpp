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

#include "covtwin/dataset.hpp"
#include "covtwin/propagation.hpp"
#include "covtwin/scenario.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

using namespace covtwin;

namespace {

PropagationParams quiet_params() {
    PropagationParams p;
    p.shadow_sigma_db = 0.0;
    p.sample_sigma_db = 0.0;
    return p;
}

SiteMap open_map() {
    SiteMap m;
    m.bounds = {0, 0, 100, 100};
    m.bs.position = {50, 50};
    m.bins = make_bin_grid(m.bounds, 10.0);
    return m;
}

std::vector<MeasurementRecord> ldpl_records(double p0, double n, Point2D bs, const std::vector<double>& dists) {
    PropagationParams p;
    p.p0_dbm = p0;
    p.n = n;
    std::vector<MeasurementRecord> out;
    std::int64_t id = 0;
    for (double d : dists) out.push_back({id++, bs.x + d, bs.y, 0, 1, ldpl_power(p, d)});
    return out;
}

}  // namespace

TEST(Ldpl, HandValues) {
    PropagationParams p;
    p.p0_dbm = -30;
    p.n = 2;
    EXPECT_EQ(ldpl_power(p, p.d0_m), -30.0);
    EXPECT_NEAR(ldpl_power(p, 100.0), -70.0, 1e-12);
    EXPECT_NEAR(ldpl_power(p, 10.0) - ldpl_power(p, 20.0), 20.0 * std::log10(2.0), 1e-12);
    EXPECT_NEAR(ldpl_power(p, 10.0, -4.5), -54.5, 1e-12);
    EXPECT_THROW(ldpl_power(p, 0.0), ValidationError);
    EXPECT_THROW(ldpl_power(p, -1.0), ValidationError);
}

TEST(Ldpl, StrictlyDecreasingInDistance) {
    PropagationParams p;
    for (double n : {0.5, 2.0, 3.7}) {
        p.n = n;
        double prev = ldpl_power(p, 0.01);
        for (double d = 0.02; d < 2000.0; d *= 1.37) {
            const double cur = ldpl_power(p, d);
            EXPECT_LT(cur, prev);
            prev = cur;
        }
    }
}

TEST(SynthMean, ReducesToLdplWithoutEnvironment) {
    const auto p = quiet_params();
    CityGenParams gp;
    gp.building_count = 0;
    gp.foliage_count = 0;
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
        gp.bs_position = Point2D{123.0 + static_cast<double>(seed), 77.0};
        const auto m = generate_synthetic_map(seed, gp);
        for (const auto& b : m.bins)
            EXPECT_EQ(synth_rsrp_mean(m, p, b, 5), ldpl_power(p, distance(m.bs.position, b.center)));
    }
}

TEST(SynthMean, BuildingCrossingCosts15dB) {
    auto p = quiet_params();
    auto m = open_map();
    const Bin& target = m.bins[m.bins.size() - 1];  // (95, 95)
    const double clear = synth_rsrp_mean(m, p, target, 1);
    m.polygons.push_back({SurfaceKind::Building, {{70, 70}, {80, 70}, {80, 80}, {70, 80}}});
    EXPECT_NEAR(synth_rsrp_mean(m, p, target, 1), clear - 15.0, 1e-12);
    EXPECT_NEAR(clear, ldpl_power(p, distance(m.bs.position, target.center)), 0.0);
}

TEST(SynthMean, FoliageLossPerMeter) {
    auto p = quiet_params();
    auto m = open_map();
    const Bin& target = m.bins[5 * 10 + 9];  // (95, 55)
    const double clear = synth_rsrp_mean(m, p, target, 1);
    m.polygons.push_back({SurfaceKind::Foliage, {{60, 40}, {80, 40}, {80, 70}, {60, 70}}});
    // Ray (50,50) -> (95,55) spends x in [60, 80] inside: chord = 20 * |ab| / 45.
    const double chord = 20.0 * distance({50, 50}, {95, 55}) / 45.0;
    EXPECT_NEAR(synth_rsrp_mean(m, p, target, 1), clear - 0.2 * chord, 1e-12);
}

TEST(SynthMean, MonthOffsetsAreAdditive) {
    auto p = quiet_params();
    p.month_offsets_db[0] = 0.0;
    p.month_offsets_db[1] = -3.0;
    const auto m = open_map();
    for (const auto& b : m.bins)
        EXPECT_NEAR(synth_rsrp_mean(m, p, b, 1) - synth_rsrp_mean(m, p, b, 2), 3.0, 1e-12);
    EXPECT_THROW(synth_rsrp_mean(m, p, m.bins[0], 13), ValidationError);
}

TEST(SynthMean, CoincidentBinRejected) {
    auto m = open_map();
    m.bs.position = m.bins[0].center;
    EXPECT_THROW(synth_rsrp_mean(m, quiet_params(), m.bins[0], 1), ValidationError);
}

TEST(Shadow, DeterministicAndCalibrated) {
    PropagationParams p;
    p.shadow_seed = 99;
    const auto f = make_shadow_field(p);
    const auto g = make_shadow_field(p);
    double s = 0.0, s2 = 0.0;
    int n = 0;
    // 200 x 200 = 40 000 points over 80 x 80 correlation lengths.
    for (int i = 0; i < 200; ++i)
        for (int j = 0; j < 200; ++j) {
            const Point2D q{i * 20.0 + 3.3, j * 20.0 + 7.1};
            const double v = f(q);
            ASSERT_EQ(v, g(q));
            s += v;
            s2 += v * v;
            ++n;
        }
    const double mean = s / n, sd = std::sqrt(s2 / n - mean * mean);
    EXPECT_NEAR(sd, p.shadow_sigma_db, 0.1 * p.shadow_sigma_db);
    p.shadow_seed = 100;
    EXPECT_NE(make_shadow_field(p)({3.3, 7.1}), f({3.3, 7.1}));
}

TEST(Shadow, SpatiallyCorrelated) {
    PropagationParams p;
    const auto f = make_shadow_field(p);
    // Neighbours 1 m apart differ far less than the field's spread.
    double diff2 = 0.0;
    for (int i = 0; i < 1000; ++i) {
        const Point2D q{i * 7.0, i * 3.0};
        const double d = f(q) - f({q.x + 1.0, q.y});
        diff2 += d * d;
    }
    EXPECT_LT(std::sqrt(diff2 / 1000), 0.5);
}

TEST(Sampling, ZeroNoiseEqualsMean) {
    auto p = quiet_params();
    p.shadow_sigma_db = 4.0;
    CityGenParams gp;
    gp.bounds = {0, 0, 100, 100};
    gp.building_count = 3;
    gp.building_min_m = 10;
    gp.building_max_m = 15;
    gp.foliage_count = 1;
    const auto m = generate_synthetic_map(2, gp);
    const std::vector<int> months{1, 7};
    const auto ds = sample_measurements(m, p, months, 3, 5);
    ASSERT_EQ(ds.records.size(), m.bins.size() * 2 * 3);
    for (const auto& r : ds.records) {
        const auto& b = m.bin(r.bin_id);
        EXPECT_EQ(r.rsrp_dbm, synth_rsrp_mean(m, p, b, r.month));
        EXPECT_EQ(r.x_loc, b.center.x);
        EXPECT_EQ(r.y_loc, b.center.y);
        EXPECT_EQ(r.sector, assign_sector(m.bs, b.center));
    }
    EXPECT_NO_THROW(validate_dataset(ds, m));
}

TEST(Sampling, DeterministicPerSeed) {
    const PropagationParams p;
    const auto m = open_map();
    const std::vector<int> months{1, 2};
    EXPECT_EQ(sample_measurements(m, p, months, 4, 8), sample_measurements(m, p, months, 4, 8));
    EXPECT_NE(sample_measurements(m, p, months, 4, 8).records, sample_measurements(m, p, months, 4, 9).records);
}

TEST(Sampling, MonteCarloMomentsOfOneBin) {
    PropagationParams p;
    p.sample_sigma_db = 2.0;
    SiteMap m = open_map();
    m.bins = {m.bins[0]};
    const std::vector<int> months{3};
    const auto ds = sample_measurements(m, p, months, 10000, 4);
    double s = 0.0, s2 = 0.0;
    for (const auto& r : ds.records) s += r.rsrp_dbm;
    const double mean = s / 10000.0;
    for (const auto& r : ds.records) s2 += (r.rsrp_dbm - mean) * (r.rsrp_dbm - mean);
    const double sd = std::sqrt(s2 / 9999.0);
    EXPECT_NEAR(mean, synth_rsrp_mean(m, p, m.bins[0], 3), 0.1);
    EXPECT_NEAR(sd, 2.0, 0.1);
}

TEST(EmpiricalFit, NoiselessRoundTrip) {
    const Point2D bs{10, 20};
    std::vector<double> d;
    for (int i = 1; i <= 200; ++i) d.push_back(1.5 * i);
    const auto recs = ldpl_records(-30.0, 3.0, bs, d);
    const auto fit = fit_empirical_baseline(recs, bs);
    EXPECT_NEAR(fit.p0_dbm, -30.0, 1e-6);
    EXPECT_NEAR(fit.n, 3.0, 1e-6);
    double worst = 0.0;
    for (const auto& r : recs)
        worst = std::max(worst, std::abs(predict_empirical(fit, distance(bs, {r.x_loc, r.y_loc})) - r.rsrp_dbm));
    EXPECT_LT(worst, 1e-10);
}

TEST(EmpiricalFit, TwoPointHandSolve) {
    const Point2D bs{0, 0};
    std::vector<MeasurementRecord> recs{{0, 1, 0, 0, 1, -30.0}, {1, 10, 0, 0, 1, -60.0}};
    const auto fit = fit_empirical_baseline(recs, bs);
    EXPECT_NEAR(fit.n, 3.0, 1e-12);
    EXPECT_NEAR(fit.p0_dbm, -30.0, 1e-12);
}

TEST(EmpiricalFit, EquidistantIsRankDeficient) {
    const Point2D bs{0, 0};
    std::vector<MeasurementRecord> recs{{0, 5, 0, 0, 1, -50}, {1, 0, 5, 0, 1, -52}, {2, -3, 4, 0, 1, -49}};
    EXPECT_THROW(fit_empirical_baseline(recs, bs), ValidationError);
    EXPECT_THROW(fit_empirical_baseline({}, bs), ValidationError);
}

TEST(EmpiricalFit, PredictHandValues) {
    EmpiricalFit fit{-30.0, 2.0, 1.0};
    EXPECT_EQ(predict_empirical(fit, 1.0), -30.0);
    EXPECT_NEAR(predict_empirical(fit, 10.0), -50.0, 1e-12);
    EXPECT_THROW(predict_empirical(fit, 0.0), ValidationError);
}

TEST(EmpiricalFit, MatchesNormalEquationsOnNoisyData) {
    // Independent oracle: solve the 2x2 normal equations directly.
    PropagationParams p;
    const auto m = open_map();
    const std::vector<int> months{1};
    const auto ds = sample_measurements(m, p, months, 5, 3);
    double sxx = 0, sx = 0, sy = 0, sxy = 0;
    for (const auto& r : ds.records) {
        const double x = -10.0 * std::log10(distance(m.bs.position, {r.x_loc, r.y_loc}));
        sx += x;
        sy += r.rsrp_dbm;
        sxx += x * x;
        sxy += x * r.rsrp_dbm;
    }
    const double n = static_cast<double>(ds.records.size());
    const double slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
    const double icpt = (sy - slope * sx) / n;
    const auto fit = fit_empirical_baseline(ds.records, m.bs.position);
    EXPECT_NEAR(fit.n, slope, 1e-9);
    EXPECT_NEAR(fit.p0_dbm, icpt, 1e-7);
}

TEST(Dataset, CsvRoundTripIsExact) {
    const PropagationParams p;
    const auto m = open_map();
    const std::vector<int> months{1, 2};
    const auto ds = sample_measurements(m, p, months, 2, 1);
    const auto path = std::filesystem::temp_directory_path() / "covtwin_ds.csv";
    write_dataset_csv(ds, path);
    const auto back = read_dataset_csv(path);
    EXPECT_EQ(back.records, ds.records);
    std::ifstream in(path);
    std::string header;
    std::getline(in, header);
    EXPECT_EQ(header, "bin_id,x_loc,y_loc,sector,month,rsrp_dbm");
}

TEST(Dataset, RejectsBadRows) {
    const auto path = std::filesystem::temp_directory_path() / "covtwin_bad.csv";
    std::ofstream(path) << "bin_id,x_loc,y_loc,sector,month,rsrp_dbm\n1,5,5,0,13,-70\n";
    EXPECT_THROW(read_dataset_csv(path), ParseError);
    std::ofstream(path) << "bin,x\n";
    EXPECT_THROW(read_dataset_csv(path), ParseError);
    EXPECT_THROW(read_dataset_csv("/nonexistent.csv"), MissingArtifactError);
    BinDataset ds;
    ds.records.push_back({12345, 5, 5, 0, 1, -70});
    EXPECT_THROW(validate_dataset(ds, open_map()), ValidationError);
}
