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

/**
 * Synthetic ground-truth RSRP.
 *
 * The mean received power of a bin is the log-distance path loss term plus
 * an environment term made explicit as
 *
 *   shadow(x, y) - l_building * buildings_crossed - l_foliage * foliage_m
 *   + month_offset[month]
 *
 * and individual measurements add iid Gaussian noise on top. The empirical
 * baseline is an ordinary least-squares fit of the same log-distance form.
 */

#pragma once

#include "covtwin/dataset.hpp"
#include "covtwin/error.hpp"
#include "covtwin/geo.hpp"
#include "covtwin/rng.hpp"

#include <json.hpp>

#include <array>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace covtwin {

struct PropagationParams {
    double p0_dbm = -30.0;
    double n = 3.0;
    double d0_m = 1.0;
    double l_building_db = 15.0;
    double l_foliage_db_per_m = 0.2;
    double shadow_sigma_db = 4.0;
    double shadow_corr_m = 50.0;
    std::array<double, 12> month_offsets_db{};
    double sample_sigma_db = 2.0;
    std::uint64_t shadow_seed = 0;
};

inline void validate(const PropagationParams& p) {
    require(p.d0_m > 0.0, "propagation: d0_m must be positive");
    require(p.n > 0.0, "propagation: n must be positive");
    require(p.shadow_sigma_db >= 0.0 && p.sample_sigma_db >= 0.0,
            "propagation: standard deviations must be >= 0");
    require(p.shadow_corr_m > 0.0, "propagation: shadow_corr_m must be positive");
}

inline nlohmann::json to_json(const PropagationParams& p) {
    return {{"p0_dbm", p.p0_dbm},
            {"n", p.n},
            {"d0_m", p.d0_m},
            {"l_building_db", p.l_building_db},
            {"l_foliage_db_per_m", p.l_foliage_db_per_m},
            {"shadow_sigma_db", p.shadow_sigma_db},
            {"shadow_corr_m", p.shadow_corr_m},
            {"month_offsets_db", p.month_offsets_db},
            {"sample_sigma_db", p.sample_sigma_db},
            {"shadow_seed", p.shadow_seed}};
}

inline PropagationParams propagation_params_from_json(const nlohmann::json& j) {
    PropagationParams p;
    try {
        p.p0_dbm = j.value("p0_dbm", p.p0_dbm);
        p.n = j.value("n", p.n);
        p.d0_m = j.value("d0_m", p.d0_m);
        p.l_building_db = j.value("l_building_db", p.l_building_db);
        p.l_foliage_db_per_m = j.value("l_foliage_db_per_m", p.l_foliage_db_per_m);
        p.shadow_sigma_db = j.value("shadow_sigma_db", p.shadow_sigma_db);
        p.shadow_corr_m = j.value("shadow_corr_m", p.shadow_corr_m);
        if (j.contains("month_offsets_db")) {
            const auto& m = j.at("month_offsets_db");
            if (!m.is_array() || m.size() != 12)
                throw ParseError("propagation: month_offsets_db must hold 12 values");
            for (std::size_t i = 0; i < 12; ++i) p.month_offsets_db[i] = m[i].get<double>();
        }
        p.sample_sigma_db = j.value("sample_sigma_db", p.sample_sigma_db);
        p.shadow_seed = j.value("shadow_seed", p.shadow_seed);
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("propagation params: ") + e.what());
    }
    validate(p);
    return p;
}

/// Log-distance path loss: P0 - 10 n log10(d / d0) + w.
inline double ldpl_power(const PropagationParams& p, double d_m, double w_db = 0.0) {
    if (!(d_m > 0.0)) throw ValidationError("ldpl_power: distance must be positive");
    return p.p0_dbm - 10.0 * p.n * std::log10(d_m / p.d0_m) + w_db;
}

/// Spatially correlated shadowing: unit Gaussian values on a square lattice
/// of pitch `corr_m`, bilinearly interpolated. Bilinear weights shrink the
/// variance by 4/9 on average over a cell, so the output is rescaled by 3/2
/// to keep the spatial std at `sigma_db`.
class ShadowField {
public:
    ShadowField(std::uint64_t seed, double sigma_db, double corr_m)
        : seed_(seed), sigma_(sigma_db), pitch_(corr_m) {}

    double operator()(Point2D p) const {
        if (sigma_ == 0.0) return 0.0;
        const double gx = p.x / pitch_, gy = p.y / pitch_;
        const double fx = std::floor(gx), fy = std::floor(gy);
        const double u = gx - fx, v = gy - fy;
        const auto i = static_cast<std::int64_t>(fx), j = static_cast<std::int64_t>(fy);
        const double v00 = node(i, j), v10 = node(i + 1, j);
        const double v01 = node(i, j + 1), v11 = node(i + 1, j + 1);
        const double interp = (1 - u) * (1 - v) * v00 + u * (1 - v) * v10 + (1 - u) * v * v01 +
                              u * v * v11;
        return 1.5 * sigma_ * interp;
    }

private:
    double node(std::int64_t i, std::int64_t j) const {
        Rng rng = make_rng(seed_, {0x736861646f77ULL, static_cast<std::uint64_t>(i),
                                   static_cast<std::uint64_t>(j)});
        return standard_normal(rng);
    }

    std::uint64_t seed_;
    double sigma_;
    double pitch_;
};

inline ShadowField make_shadow_field(const PropagationParams& p) {
    return ShadowField(p.shadow_seed, p.shadow_sigma_db, p.shadow_corr_m);
}

/// Noise-free mean RSRP of a bin in a given month.
inline double synth_rsrp_mean(const SiteMap& map, const PropagationParams& p, const Bin& bin,
                              int month) {
    require(month >= 1 && month <= 12, "synth_rsrp_mean: month outside 1..12");
    const double d = distance(map.bs.position, bin.center);
    if (d == 0.0)
        throw ValidationError("synth_rsrp_mean: bin " + std::to_string(bin.id) +
                              " center coincides with base station");
    const auto obs = segment_obstructions(map, map.bs.position, bin.center);
    const double w = make_shadow_field(p)(bin.center) -
                     p.l_building_db * obs.buildings_crossed -
                     p.l_foliage_db_per_m * obs.foliage_inside_m +
                     p.month_offsets_db[static_cast<std::size_t>(month - 1)];
    return ldpl_power(p, d, w);
}

/// Draws `samples_per_bin` Gaussian measurements per (bin, month). Each
/// (bin, month) pair has its own substream derived from (seed, bin id, month)
/// so the result does not depend on iteration order.
inline BinDataset sample_measurements(const SiteMap& map, const PropagationParams& p,
                                      std::span<const int> months, int samples_per_bin,
                                      std::uint64_t seed) {
    validate(p);
    require(samples_per_bin >= 1, "sample_measurements: samples_per_bin must be >= 1");
    BinDataset ds;
    ds.provenance = "synthetic:seed=" + std::to_string(seed);
    ds.records.reserve(map.bins.size() * months.size() * static_cast<std::size_t>(samples_per_bin));
    for (const auto& bin : map.bins) {
        const int sector = assign_sector(map.bs, bin.center);
        for (int month : months) {
            const double mean = synth_rsrp_mean(map, p, bin, month);
            Rng rng = make_rng(seed, {static_cast<std::uint64_t>(bin.id),
                                      static_cast<std::uint64_t>(month)});
            for (int s = 0; s < samples_per_bin; ++s) {
                const double noise = p.sample_sigma_db == 0.0 ? 0.0
                                                               : p.sample_sigma_db * standard_normal(rng);
                ds.records.push_back({bin.id, bin.center.x, bin.center.y, sector, month, mean + noise});
            }
        }
    }
    return ds;
}

// ---------------------------------------------------------------------------
// Empirical baseline
// ---------------------------------------------------------------------------

struct EmpiricalFit {
    double p0_dbm = 0.0;
    double n = 0.0;
    double d0_m = 1.0;
};

/// Least squares of rsrp against -10 log10(d / d0): slope n, intercept P0.
inline EmpiricalFit fit_empirical_baseline(std::span<const MeasurementRecord> train, Point2D bs,
                                           double d0_m = 1.0) {
    require(!train.empty(), "empirical fit: no training records");
    std::vector<double> xs;
    xs.reserve(train.size());
    double mx = 0.0, my = 0.0;
    for (const auto& r : train) {
        const double d = distance(bs, {r.x_loc, r.y_loc});
        require(d > 0.0, "empirical fit: record coincides with base station");
        xs.push_back(-10.0 * std::log10(d / d0_m));
        mx += xs.back();
        my += r.rsrp_dbm;
    }
    const auto count = static_cast<double>(train.size());
    mx /= count;
    my /= count;
    double sxx = 0.0, sxy = 0.0;
    for (std::size_t i = 0; i < train.size(); ++i) {
        const double dx = xs[i] - mx;
        sxx += dx * dx;
        sxy += dx * (train[i].rsrp_dbm - my);
    }
    // Relative threshold: all UEs at one distance leave sxx at round-off level.
    if (!(sxx > 1e-12 * count * std::max(1.0, mx * mx)))
        throw ValidationError("empirical fit: rank-deficient design (all samples equidistant)");
    EmpiricalFit fit;
    fit.n = sxy / sxx;
    fit.p0_dbm = my - fit.n * mx;
    fit.d0_m = d0_m;
    return fit;
}

inline double predict_empirical(const EmpiricalFit& fit, double d_m) {
    if (!(d_m > 0.0)) throw ValidationError("predict_empirical: distance must be positive");
    return fit.p0_dbm - 10.0 * fit.n * std::log10(d_m / fit.d0_m);
}

}  // namespace covtwin
