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

#pragma once

#include "covtwin/dataset.hpp"
#include "covtwin/error.hpp"
#include "covtwin/rng.hpp"

#include <json.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace covtwin {

// ---------------------------------------------------------------------------
// Hampel outlier filter
// ---------------------------------------------------------------------------

inline double median(std::vector<double> v) {
    require(!v.empty(), "median of empty sequence");
    const std::size_t mid = v.size() / 2;
    std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid), v.end());
    const double hi = v[mid];
    if (v.size() % 2 == 1) return hi;
    const double lo = *std::max_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid));
    return 0.5 * (lo + hi);
}

/// keep[i] is false iff |v[i] - median| > k * MAD. Ties at the threshold
/// are kept.
inline std::vector<bool> hampel_mask(std::span<const double> values, double k = 4.5) {
    require(!values.empty(), "hampel_mask: empty input");
    const double med = median({values.begin(), values.end()});
    std::vector<double> dev(values.size());
    for (std::size_t i = 0; i < values.size(); ++i) dev[i] = std::abs(values[i] - med);
    const double threshold = k * median(dev);
    std::vector<bool> keep(values.size());
    for (std::size_t i = 0; i < values.size(); ++i) keep[i] = !(dev[i] > threshold);
    return keep;
}

/// Hampel pass on x_loc over all records, then on y_loc over the survivors.
inline BinDataset filter_outliers(const BinDataset& ds, double k = 4.5) {
    require(!ds.records.empty(), "filter_outliers: empty dataset");
    auto pass = [k](const std::vector<MeasurementRecord>& in, auto coord) {
        std::vector<double> v;
        v.reserve(in.size());
        for (const auto& r : in) v.push_back(coord(r));
        const auto keep = hampel_mask(v, k);
        std::vector<MeasurementRecord> out;
        out.reserve(in.size());
        for (std::size_t i = 0; i < in.size(); ++i)
            if (keep[i]) out.push_back(in[i]);
        return out;
    };
    BinDataset out{{}, ds.scenario_ref, ds.provenance};
    out.records = pass(ds.records, [](const MeasurementRecord& r) { return r.x_loc; });
    if (!out.records.empty())
        out.records = pass(out.records, [](const MeasurementRecord& r) { return r.y_loc; });
    return out;
}

// ---------------------------------------------------------------------------
// Feature vectors
// ---------------------------------------------------------------------------

enum class FeatureVariant { Baseline, Proposal };

inline constexpr std::size_t feature_dim(FeatureVariant v) {
    return v == FeatureVariant::Proposal ? 6 : 4;
}

struct FeatureVector {
    FeatureVariant variant = FeatureVariant::Baseline;
    std::vector<double> values;  // (x_loc, y_loc, sector, month[, z1, z2])

    std::size_t dim() const { return values.size(); }
};

using LatentPair = std::array<double, 2>;

inline FeatureVector assemble_features(const MeasurementRecord& r,
                                       const std::optional<LatentPair>& z = std::nullopt) {
    FeatureVector f;
    f.values = {r.x_loc, r.y_loc, static_cast<double>(r.sector), static_cast<double>(r.month)};
    if (z) {
        f.variant = FeatureVariant::Proposal;
        f.values.push_back((*z)[0]);
        f.values.push_back((*z)[1]);
    }
    return f;
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

struct NormalizationStats {
    std::vector<double> mean;
    std::vector<double> std;

    std::size_t dim() const { return mean.size(); }

    void apply_inplace(std::span<double> v) const {
        require_shape(v.size() == dim(), "normalize: dimension mismatch");
        for (std::size_t i = 0; i < v.size(); ++i) v[i] = (v[i] - mean[i]) / std[i];
    }
    std::vector<double> apply(std::span<const double> v) const {
        std::vector<double> out(v.begin(), v.end());
        apply_inplace(out);
        return out;
    }
    std::vector<double> unapply(std::span<const double> v) const {
        require_shape(v.size() == dim(), "unnormalize: dimension mismatch");
        std::vector<double> out(v.size());
        for (std::size_t i = 0; i < v.size(); ++i) out[i] = v[i] * std[i] + mean[i];
        return out;
    }
};

inline nlohmann::json to_json(const NormalizationStats& s) {
    return {{"mean", s.mean}, {"std", s.std}};
}

inline NormalizationStats normalization_stats_from_json(const nlohmann::json& j) {
    NormalizationStats s;
    s.mean = j.at("mean").get<std::vector<double>>();
    s.std = j.at("std").get<std::vector<double>>();
    require_shape(s.mean.size() == s.std.size(), "normalization stats: mean/std size mismatch");
    return s;
}

/// Per-feature z-score statistics (population std); constant features get
/// std 1 so they pass through centered.
inline NormalizationStats normalize_fit(std::span<const std::vector<double>> rows) {
    require(!rows.empty(), "normalize_fit: no rows");
    const std::size_t d = rows.front().size();
    NormalizationStats s{std::vector<double>(d, 0.0), std::vector<double>(d, 0.0)};
    for (const auto& r : rows) {
        require_shape(r.size() == d, "normalize_fit: ragged rows");
        for (std::size_t i = 0; i < d; ++i) s.mean[i] += r[i];
    }
    const auto n = static_cast<double>(rows.size());
    for (auto& m : s.mean) m /= n;
    for (const auto& r : rows)
        for (std::size_t i = 0; i < d; ++i) s.std[i] += (r[i] - s.mean[i]) * (r[i] - s.mean[i]);
    for (std::size_t i = 0; i < d; ++i) {
        s.std[i] = std::sqrt(s.std[i] / n);
        if (!(s.std[i] > 1e-12 * std::max(1.0, std::abs(s.mean[i])))) s.std[i] = 1.0;
    }
    return s;
}

inline NormalizationStats normalize_fit(std::span<const FeatureVector> rows) {
    std::vector<std::vector<double>> raw;
    raw.reserve(rows.size());
    for (const auto& f : rows) raw.push_back(f.values);
    return normalize_fit(std::span<const std::vector<double>>(raw));
}

inline FeatureVector normalize_apply(const NormalizationStats& s, const FeatureVector& f) {
    return {f.variant, s.apply(f.values)};
}

// ---------------------------------------------------------------------------
// Split planning
// ---------------------------------------------------------------------------

enum class SplitMode { RepeatedHoldout, KFold };

struct SplitConfig {
    SplitMode mode = SplitMode::RepeatedHoldout;
    int folds = 20;
    double train_fraction = 0.8;
};

struct Fold {
    std::vector<std::size_t> train;
    std::vector<std::size_t> validation;
};

struct SplitPlan {
    SplitConfig config;
    std::uint64_t seed = 0;
    std::vector<Fold> folds;
};

inline nlohmann::json to_json(const SplitConfig& c) {
    return {{"mode", c.mode == SplitMode::KFold ? "kfold" : "repeated_holdout"},
            {"folds", c.folds},
            {"train_fraction", c.train_fraction}};
}

inline SplitConfig split_config_from_json(const nlohmann::json& j) {
    SplitConfig c;
    const auto mode = j.value("mode", std::string("repeated_holdout"));
    if (mode == "kfold") c.mode = SplitMode::KFold;
    else if (mode == "repeated_holdout") c.mode = SplitMode::RepeatedHoldout;
    else throw ValidationError("split: unknown mode '" + mode + "'");
    c.folds = j.value("folds", c.folds);
    c.train_fraction = j.value("train_fraction", c.train_fraction);
    return c;
}

inline std::vector<std::size_t> seeded_permutation(std::size_t n, Rng& rng) {
    std::vector<std::size_t> p(n);
    std::iota(p.begin(), p.end(), std::size_t{0});
    for (std::size_t i = n; i > 1; --i) {
        const auto j = static_cast<std::size_t>(uniform01(rng) * static_cast<double>(i));
        std::swap(p[i - 1], p[std::min(j, i - 1)]);
    }
    return p;
}

/// Index splits over `n` units. RepeatedHoldout draws an independent seeded
/// shuffle per fold and cuts it at train_fraction; KFold partitions one
/// shuffle into k near-equal validation blocks.
inline SplitPlan make_splits(std::size_t n, const SplitConfig& cfg, std::uint64_t seed) {
    require(n >= 10, "make_splits: need at least 10 units, have " + std::to_string(n));
    require(cfg.folds >= 1, "make_splits: folds must be >= 1");
    SplitPlan plan{cfg, seed, {}};
    auto finish = [](std::vector<std::size_t> v) {
        std::sort(v.begin(), v.end());
        return v;
    };
    if (cfg.mode == SplitMode::RepeatedHoldout) {
        require(cfg.train_fraction > 0.0 && cfg.train_fraction < 1.0,
                "make_splits: train_fraction must lie in (0, 1)");
        const auto n_train =
            static_cast<std::size_t>(std::llround(cfg.train_fraction * static_cast<double>(n)));
        require(n_train >= 1 && n_train < n, "make_splits: a fold would hold less than 1 record");
        for (int f = 0; f < cfg.folds; ++f) {
            Rng rng = make_rng(seed, {0x686f6c646f7574ULL, static_cast<std::uint64_t>(f)});
            auto perm = seeded_permutation(n, rng);
            plan.folds.push_back({finish({perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(n_train)}),
                                  finish({perm.begin() + static_cast<std::ptrdiff_t>(n_train), perm.end()})});
        }
    } else {
        const auto k = static_cast<std::size_t>(cfg.folds);
        require(k >= 2 && k <= n, "make_splits: a fold would hold less than 1 record");
        Rng rng = make_rng(seed, {0x6b666f6c64ULL});
        auto perm = seeded_permutation(n, rng);
        for (std::size_t f = 0; f < k; ++f) {
            const std::size_t lo = f * n / k, hi = (f + 1) * n / k;
            Fold fold;
            for (std::size_t i = 0; i < n; ++i)
                (i >= lo && i < hi ? fold.validation : fold.train).push_back(perm[i]);
            plan.folds.push_back({finish(std::move(fold.train)), finish(std::move(fold.validation))});
        }
    }
    return plan;
}

}  // namespace covtwin
