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
#include "covtwin/format.hpp"
#include "covtwin/geo.hpp"
#include "covtwin/likelihood.hpp"
#include "covtwin/preprocess.hpp"
#include "covtwin/propagation.hpp"
#include "covtwin/rng.hpp"
#include "covtwin/vae.hpp"

#include <json.hpp>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <thread>
#include <tuple>
#include <vector>

namespace covtwin {

inline constexpr const char* kModelEmpirical = "empirical";
inline constexpr const char* kModelBaseline = "baseline_mlp";
inline constexpr const char* kModelTwoTier = "two_tier";

inline const std::vector<std::string>& model_names() {
    static const std::vector<std::string> names{kModelEmpirical, kModelBaseline, kModelTwoTier};
    return names;
}

/// Mean absolute error between per-bin ground-truth means and predictions.
inline double mae(std::span<const double> truth, std::span<const double> pred) {
    require(truth.size() == pred.size(), "mae: length mismatch (" + std::to_string(truth.size()) + " vs " +
                                             std::to_string(pred.size()) + ")");
    require(!truth.empty(), "mae: empty input");
    double s = 0.0;
    for (std::size_t i = 0; i < truth.size(); ++i) s += std::abs(truth[i] - pred[i]);
    return s / static_cast<double>(truth.size());
}

struct FoldResult {
    int fold = 0;
    std::string model;
    int sector = 0;
    int month = 0;
    double mae_dbm = 0.0;
    std::size_t n_validation = 0;  // validation bins
    std::uint64_t seed = 0;        // master seed
};

struct BoxplotStats {
    double min = 0.0, q1 = 0.0, median = 0.0, q3 = 0.0, max = 0.0;
    std::vector<double> outliers;
};

/// Quantile with linear interpolation between order statistics
/// (h = (n - 1) p), on sorted input.
inline double quantile_sorted(std::span<const double> v, double p) {
    require(!v.empty(), "quantile: empty input");
    const double h = (static_cast<double>(v.size()) - 1.0) * p;
    const auto lo = static_cast<std::size_t>(std::floor(h));
    const std::size_t hi = std::min(lo + 1, v.size() - 1);
    return v[lo] + (h - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

/// Whiskers end at the most extreme points inside the Tukey fences; points
/// beyond Q1 - 1.5 IQR or Q3 + 1.5 IQR are listed as outliers.
inline BoxplotStats boxplot_stats(std::vector<double> v) {
    require(!v.empty(), "boxplot: empty input");
    std::sort(v.begin(), v.end());
    BoxplotStats b;
    b.q1 = quantile_sorted(v, 0.25);
    b.median = quantile_sorted(v, 0.5);
    b.q3 = quantile_sorted(v, 0.75);
    const double iqr = b.q3 - b.q1, lo = b.q1 - 1.5 * iqr, hi = b.q3 + 1.5 * iqr;
    b.min = b.q1;
    b.max = b.q3;
    for (double x : v) {
        if (x < lo || x > hi) {
            b.outliers.push_back(x);
            continue;
        }
        b.min = std::min(b.min, x);
        b.max = std::max(b.max, x);
    }
    return b;
}

struct SeedPlan {
    std::uint64_t seed = 0;
    SplitPlan plan;
};

struct SummaryKey {
    std::string model;
    int sector = 0;
    int month = 0;
    auto operator<=>(const SummaryKey&) const = default;
};

struct EvalReport {
    std::vector<FoldResult> folds;
    std::map<SummaryKey, double> summary;  // mean MAE
    std::map<SummaryKey, BoxplotStats> boxplots;
    std::vector<std::int64_t> bin_ids;     // split indices refer into this list
    std::vector<SeedPlan> plans;
    std::vector<std::string> warnings;
    nlohmann::json config = nlohmann::json::object();
};

struct ComparisonConfig {
    SplitConfig split{};
    std::vector<std::uint64_t> seeds{0};
    LikelihoodTrainConfig train{};
    double d0_m = 1.0;
    int threads = 1;
};

inline nlohmann::json to_json(const ComparisonConfig& c) {
    return {{"split", to_json(c.split)}, {"seeds", c.seeds}, {"train", to_json(c.train)}, {"d0_m", c.d0_m}};
}

namespace detail {

struct BinTruth {
    std::int64_t bin_id = 0;
    double x = 0.0, y = 0.0;
    double mean_dbm = 0.0;
};

// Validation ground truth: per-bin mean of the held-out samples.
inline std::vector<BinTruth> bin_truths(std::span<const MeasurementRecord> recs) {
    std::map<std::int64_t, std::tuple<double, double, double, std::size_t>> acc;
    for (const auto& r : recs) {
        auto& [x, y, s, n] = acc[r.bin_id];
        x = r.x_loc;
        y = r.y_loc;
        s += r.rsrp_dbm;
        ++n;
    }
    std::vector<BinTruth> out;
    for (const auto& [id, t] : acc) {
        const auto& [x, y, s, n] = t;
        out.push_back({id, x, y, s / static_cast<double>(n)});
    }
    return out;
}

struct FoldOutput {
    std::vector<FoldResult> results;
    std::vector<std::string> warnings;
};

inline FoldOutput run_fold(std::span<const MeasurementRecord> records, const SiteMap& map, const LatentTable& z,
                           const std::vector<std::int64_t>& bin_ids, const Fold& fold, int fold_index,
                           std::uint64_t master_seed, const ComparisonConfig& cfg,
                           const std::vector<int>& months) {
    FoldOutput out;
    std::set<std::int64_t> train_bins, val_bins;
    for (auto i : fold.train) train_bins.insert(bin_ids[i]);
    for (auto i : fold.validation) val_bins.insert(bin_ids[i]);

    for (int sector = 0; sector < 3; ++sector) {
        std::vector<MeasurementRecord> train, val;
        for (const auto& r : records) {
            if (r.sector != sector) continue;
            if (train_bins.count(r.bin_id)) train.push_back(r);
            else if (val_bins.count(r.bin_id)) val.push_back(r);
        }
        const std::string where =
            "seed " + std::to_string(master_seed) + " fold " + std::to_string(fold_index) + " sector " +
            std::to_string(sector);
        if (train.empty() || val.empty()) {
            out.warnings.push_back(where + ": no training or validation records, skipped");
            continue;
        }

        auto unit_cfg = [&](std::uint64_t model_key) {
            LikelihoodTrainConfig c = cfg.train;
            c.seed = derive_seed(master_seed, {static_cast<std::uint64_t>(fold_index),
                                               static_cast<std::uint64_t>(sector), model_key});
            return c;
        };
        auto mlp = train_baseline_mlp(train, unit_cfg(1));
        auto two = train_likelihood(train, &z, unit_cfg(2));

        for (int month : months) {
            std::vector<MeasurementRecord> tr_m, va_m;
            for (const auto& r : train)
                if (r.month == month) tr_m.push_back(r);
            for (const auto& r : val)
                if (r.month == month) va_m.push_back(r);
            const std::string wm = where + " month " + std::to_string(month);
            if (va_m.empty()) {
                out.warnings.push_back(wm + ": no validation records, skipped");
                continue;
            }
            const auto truths = bin_truths(va_m);
            std::vector<double> truth;
            for (const auto& t : truths) truth.push_back(t.mean_dbm);

            // The log-distance baseline has no month input, so it is fitted
            // per sector and month.
            try {
                const auto fit = fit_empirical_baseline(tr_m, map.bs.position, cfg.d0_m);
                std::vector<double> pred;
                for (const auto& t : truths)
                    pred.push_back(predict_empirical(fit, distance(Point2D{t.x, t.y}, map.bs.position)));
                out.results.push_back(
                    {fold_index, kModelEmpirical, sector, month, mae(truth, pred), truths.size(), master_seed});
            } catch (const ValidationError& e) {
                out.warnings.push_back(wm + ": empirical fit failed (" + e.what() + "), skipped");
            }

            auto predict = [&](LikelihoodModel& m, bool proposal) {
                std::vector<double> pred;
                for (const auto& t : truths) {
                    MeasurementRecord r{t.bin_id, t.x, t.y, sector, month, 0.0};
                    std::optional<LatentPair> lat;
                    if (proposal) lat = z.at(t.bin_id);
                    pred.push_back(m.forward(assemble_features(r, lat)).mean_dbm);
                }
                return pred;
            };
            out.results.push_back({fold_index, kModelBaseline, sector, month, mae(truth, predict(mlp.model, false)),
                                   truths.size(), master_seed});
            out.results.push_back({fold_index, kModelTwoTier, sector, month, mae(truth, predict(two.model, true)),
                                   truths.size(), master_seed});
        }
    }
    return out;
}

}  // namespace detail

inline void summarize(EvalReport& report) {
    std::map<SummaryKey, std::vector<double>> groups;
    for (const auto& f : report.folds) groups[{f.model, f.sector, f.month}].push_back(f.mae_dbm);
    report.summary.clear();
    report.boxplots.clear();
    for (auto& [k, v] : groups) {
        double s = 0.0;
        for (double x : v) s += x;
        report.summary[k] = s / static_cast<double>(v.size());
        report.boxplots[k] = boxplot_stats(v);
    }
}

/// Cross-validated comparison of the three models. Splits are drawn over the
/// distinct bins, one plan per master seed; every fold retrains fresh models
/// per sector on the training bins and scores them on the validation bins.
inline EvalReport run_comparison(const BinDataset& ds, const SiteMap& map, const LatentTable& z,
                                 const ComparisonConfig& cfg) {
    require(!ds.records.empty(), "run_comparison: empty dataset");
    require(!cfg.seeds.empty(), "run_comparison: no master seeds");
    EvalReport report;
    report.config = to_json(cfg);
    {
        std::set<std::int64_t> ids;
        for (const auto& r : ds.records) ids.insert(r.bin_id);
        report.bin_ids.assign(ids.begin(), ids.end());
    }
    for (auto id : report.bin_ids)
        if (!z.count(id))
            throw MissingArtifactError("run_comparison: latent table has no row for bin " + std::to_string(id));
    std::vector<int> months;
    {
        std::set<int> ms;
        for (const auto& r : ds.records) ms.insert(r.month);
        months.assign(ms.begin(), ms.end());
    }
    for (auto seed : cfg.seeds) report.plans.push_back({seed, make_splits(report.bin_ids.size(), cfg.split, seed)});

    struct Unit {
        std::size_t plan;
        std::size_t fold;
    };
    std::vector<Unit> units;
    for (std::size_t p = 0; p < report.plans.size(); ++p)
        for (std::size_t f = 0; f < report.plans[p].plan.folds.size(); ++f) units.push_back({p, f});

    std::vector<detail::FoldOutput> outputs(units.size());
    std::vector<std::exception_ptr> errors(units.size());
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (std::size_t u = next++; u < units.size(); u = next++) {
            const auto& sp = report.plans[units[u].plan];
            try {
                outputs[u] = detail::run_fold(ds.records, map, z, report.bin_ids, sp.plan.folds[units[u].fold],
                                              static_cast<int>(units[u].fold), sp.seed, cfg, months);
            } catch (...) {
                errors[u] = std::current_exception();
            }
        }
    };
    const auto n_threads = static_cast<std::size_t>(std::max(1, cfg.threads));
    if (n_threads == 1) {
        worker();
    } else {
        std::vector<std::jthread> pool;
        for (std::size_t t = 0; t < std::min(n_threads, units.size()); ++t) pool.emplace_back(worker);
    }
    for (const auto& e : errors)
        if (e) std::rethrow_exception(e);
    for (auto& o : outputs) {
        report.folds.insert(report.folds.end(), o.results.begin(), o.results.end());
        report.warnings.insert(report.warnings.end(), o.warnings.begin(), o.warnings.end());
    }
    summarize(report);
    return report;
}

/// Mean MAE of one model over all folds, sectors and months of one master seed.
inline double seed_mean_mae(const EvalReport& r, const std::string& model, std::uint64_t seed) {
    double s = 0.0;
    std::size_t n = 0;
    for (const auto& f : r.folds)
        if (f.model == model && f.seed == seed) {
            s += f.mae_dbm;
            ++n;
        }
    return n ? s / static_cast<double>(n) : std::numeric_limits<double>::quiet_NaN();
}

namespace detail {

inline std::string display_name(const std::string& model) {
    if (model == kModelEmpirical) return "Empirical";
    if (model == kModelBaseline) return "Baseline MLP";
    if (model == kModelTwoTier) return "Two-tier";
    return model;
}

inline std::string fixed(double v, int digits = 3) {
    std::ostringstream os;
    os.setf(std::ios::fixed);
    os.precision(digits);
    os << v;
    return os.str();
}

inline void write_text(const std::filesystem::path& p, const std::string& text) {
    std::ofstream out(p, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + p.string());
    out << text;
    if (!out) throw std::runtime_error("write failed: " + p.string());
}

}  // namespace detail

inline std::string summary_markdown(const EvalReport& r) {
    std::set<std::pair<int, int>> cells;  // (month, sector)
    for (const auto& [k, v] : r.summary) cells.insert({k.month, k.sector});
    const auto& models = model_names();
    std::ostringstream os;
    os << "# Cross-validated MAE (dBm)\n\n";
    os << "Mean over " << r.plans.size() << " master seed(s) and their folds.\n\n";
    os << "| Month | Sector |";
    for (const auto& m : models) os << ' ' << detail::display_name(m) << " |";
    os << " Improvement over MLP |\n|---|---|";
    for (std::size_t i = 0; i < models.size(); ++i) os << "---|";
    os << "---|\n";
    for (const auto& [month, sector] : cells) {
        os << "| " << month << " | " << static_cast<char>('A' + sector) << " |";
        for (const auto& m : models) {
            auto it = r.summary.find({m, sector, month});
            os << ' ' << (it == r.summary.end() ? std::string("-") : detail::fixed(it->second)) << " |";
        }
        auto b = r.summary.find({kModelBaseline, sector, month});
        auto t = r.summary.find({kModelTwoTier, sector, month});
        if (b != r.summary.end() && t != r.summary.end() && b->second > 0.0)
            os << ' ' << detail::fixed(100.0 * (b->second - t->second) / b->second, 1) << "% |\n";
        else
            os << " - |\n";
    }
    if (!r.warnings.empty()) {
        os << "\n## Warnings\n\n";
        for (const auto& w : r.warnings) os << "- " << w << '\n';
    }
    return os.str();
}

/// Writes summary.md, folds.csv, boxplot.csv, splits.csv and config.json.
inline void emit_report(const EvalReport& r, const std::filesystem::path& out_dir) {
    std::error_code ec;
    std::filesystem::create_directories(out_dir, ec);
    if (ec) throw std::runtime_error("cannot create " + out_dir.string() + ": " + ec.message());

    detail::write_text(out_dir / "summary.md", summary_markdown(r));

    std::ostringstream folds;
    folds << "fold,model,sector,month,mae,n,seed\n";
    for (const auto& f : r.folds)
        folds << f.fold << ',' << f.model << ',' << f.sector << ',' << f.month << ',' << fmt_double(f.mae_dbm) << ','
              << f.n_validation << ',' << f.seed << '\n';
    detail::write_text(out_dir / "folds.csv", folds.str());

    std::ostringstream box;
    box << "model,sector,month,min,q1,median,q3,max,outliers\n";
    for (const auto& [k, b] : r.boxplots) {
        box << k.model << ',' << k.sector << ',' << k.month << ',' << fmt_double(b.min) << ',' << fmt_double(b.q1)
            << ',' << fmt_double(b.median) << ',' << fmt_double(b.q3) << ',' << fmt_double(b.max) << ',';
        for (std::size_t i = 0; i < b.outliers.size(); ++i) box << (i ? ";" : "") << fmt_double(b.outliers[i]);
        box << '\n';
    }
    detail::write_text(out_dir / "boxplot.csv", box.str());

    std::ostringstream splits;
    splits << "seed,fold,bin_id,role\n";
    for (const auto& sp : r.plans)
        for (std::size_t f = 0; f < sp.plan.folds.size(); ++f) {
            for (auto i : sp.plan.folds[f].train) splits << sp.seed << ',' << f << ',' << r.bin_ids[i] << ",train\n";
            for (auto i : sp.plan.folds[f].validation)
                splits << sp.seed << ',' << f << ',' << r.bin_ids[i] << ",validation\n";
        }
    detail::write_text(out_dir / "splits.csv", splits.str());

    nlohmann::json cfg = r.config;
    cfg["warnings"] = r.warnings;
    detail::write_text(out_dir / "config.json", cfg.dump(2) + "\n");
}

}  // namespace covtwin
