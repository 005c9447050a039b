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
#include "covtwin/eval.hpp"
#include "covtwin/likelihood.hpp"
#include "covtwin/preprocess.hpp"
#include "covtwin/propagation.hpp"
#include "covtwin/raster.hpp"
#include "covtwin/rng.hpp"
#include "covtwin/scenario.hpp"
#include "covtwin/vae.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

namespace covtwin {

namespace fs = std::filesystem;

inline nlohmann::json to_json(const VaeTrainConfig& c) {
    return {{"epochs", c.epochs}, {"batch", c.batch}, {"lr", c.adam.lr}};
}

inline VaeTrainConfig vae_train_config_from_json(const nlohmann::json& j) {
    VaeTrainConfig c;
    c.epochs = j.value("epochs", c.epochs);
    c.batch = j.value("batch", c.batch);
    c.adam.lr = j.value("lr", c.adam.lr);
    require(c.epochs >= 1 && c.batch >= 1, "vae: epochs and batch must be >= 1");
    require(c.adam.lr > 0.0, "vae: lr must be positive");
    return c;
}

/// Per-stage settings of one pipeline run. Every stage seed derives from the
/// master seed; there is no clock-based default.
struct PipelineConfig {
    std::uint64_t seed = 0;
    std::optional<fs::path> scenario_file;
    CityGenParams generator{};
    PropagationParams propagation{};
    bool shadow_seed_explicit = false;
    std::vector<int> months{1, 2};
    int samples_per_bin = 30;
    double hampel_k = 4.5;
    RasterConfig raster{};
    VaeConfig vae{};
    VaeTrainConfig vae_train{};
    double vae_train_fraction = 0.8;
    LikelihoodTrainConfig likelihood{};
    ComparisonConfig evaluation{};
    bool evaluation_seeds_explicit = false;
    fs::path out = "out";
};

// Stage tags for seed derivation.
enum class Stage : std::uint64_t {
    Scenario = 1,
    Shadow = 2,
    Sampling = 3,
    Vae = 4,
    Likelihood = 5,
};

inline std::uint64_t stage_seed(const PipelineConfig& c, Stage s) {
    return derive_seed(c.seed, {static_cast<std::uint64_t>(s)});
}

/// Parses the JSON document. `seed_override` replaces "seed"; one of the two
/// must be present. Relative scenario paths resolve against `base_dir`.
inline PipelineConfig pipeline_config_from_json(const nlohmann::json& j, std::optional<std::uint64_t> seed_override,
                                                const fs::path& base_dir = {}) {
    if (!j.is_object()) throw ParseError("config: top level must be a JSON object");
    PipelineConfig c;
    try {
        if (seed_override) c.seed = *seed_override;
        else if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
        else throw ValidationError("config: no seed given (set \"seed\" or pass --seed)");

        const auto section = [&](const char* key) {
            return j.contains(key) ? j.at(key) : nlohmann::json::object();
        };

        const auto sc = section("scenario");
        if (sc.contains("file")) {
            fs::path p = sc.at("file").get<std::string>();
            c.scenario_file = p.is_absolute() ? p : base_dir / p;
        } else {
            c.generator = city_gen_params_from_json(sc.value("generator", nlohmann::json::object()));
            validate_city_gen_params(c.generator);
        }

        const auto pr = section("propagation");
        c.propagation = propagation_params_from_json(pr);
        c.shadow_seed_explicit = pr.contains("shadow_seed");
        c.months = pr.value("months", c.months);
        c.samples_per_bin = pr.value("samples_per_bin", c.samples_per_bin);
        require(!c.months.empty(), "config: propagation.months must not be empty");
        for (int m : c.months) require(m >= 1 && m <= 12, "config: months must lie in 1..12");
        require(c.samples_per_bin >= 1, "config: samples_per_bin must be >= 1");

        c.hampel_k = section("preprocess").value("hampel_k", c.hampel_k);
        require(c.hampel_k > 0.0, "config: hampel_k must be positive");

        c.raster = raster_config_from_json(section("raster"));
        validate(c.raster);

        const auto va = section("vae");
        c.vae = vae_config_from_json(va.value("model", nlohmann::json::object()));
        c.vae.resolution = c.raster.resolution;
        c.vae_train = vae_train_config_from_json(va);
        c.vae_train_fraction = va.value("train_fraction", c.vae_train_fraction);
        require(c.vae_train_fraction > 0.0 && c.vae_train_fraction <= 1.0,
                "config: vae.train_fraction must lie in (0, 1]");

        c.likelihood = likelihood_train_config_from_json(section("likelihood"));

        const auto ev = section("evaluation");
        c.evaluation.split = split_config_from_json(ev.value("split", nlohmann::json::object()));
        c.evaluation.train = c.likelihood;
        c.evaluation.d0_m = ev.value("d0_m", c.propagation.d0_m);
        require(c.evaluation.d0_m > 0.0, "config: evaluation.d0_m must be positive");
        if (ev.contains("seeds")) {
            c.evaluation.seeds = ev.at("seeds").get<std::vector<std::uint64_t>>();
            c.evaluation_seeds_explicit = true;
            require(!c.evaluation.seeds.empty(), "config: evaluation.seeds must not be empty");
        } else {
            c.evaluation.seeds = {c.seed};
        }

        if (j.contains("out")) {
            fs::path p = j.at("out").get<std::string>();
            c.out = p.is_absolute() ? p : base_dir / p;
        }
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("config: ") + e.what());
    }
    if (!c.shadow_seed_explicit) c.propagation.shadow_seed = stage_seed(c, Stage::Shadow);
    return c;
}

inline nlohmann::json to_json(const PipelineConfig& c) {
    nlohmann::json j;
    j["seed"] = c.seed;
    if (c.scenario_file) j["scenario"] = {{"file", c.scenario_file->generic_string()}};
    else j["scenario"] = {{"generator", to_json(c.generator)}};
    j["propagation"] = to_json(c.propagation);
    j["propagation"]["months"] = c.months;
    j["propagation"]["samples_per_bin"] = c.samples_per_bin;
    j["preprocess"] = {{"hampel_k", c.hampel_k}};
    j["raster"] = to_json(c.raster);
    j["vae"] = to_json(c.vae_train);
    j["vae"]["model"] = to_json(c.vae);
    j["vae"]["train_fraction"] = c.vae_train_fraction;
    j["likelihood"] = to_json(c.likelihood);
    j["evaluation"] = {{"split", to_json(c.evaluation.split)},
                       {"seeds", c.evaluation.seeds},
                       {"d0_m", c.evaluation.d0_m}};
    return j;
}

inline PipelineConfig load_pipeline_config(const fs::path& path, std::optional<std::uint64_t> seed_override) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ParseError("config file not readable: " + path.string());
    auto j = nlohmann::json::parse(in, nullptr, false);
    if (j.is_discarded()) throw ParseError("config file is not valid JSON: " + path.string());
    return pipeline_config_from_json(j, seed_override, path.parent_path());
}

/// Artifact locations under the output root.
struct Layout {
    fs::path root;

    fs::path config() const { return root / "config.json"; }
    fs::path scenario() const { return root / "scenario.json"; }
    fs::path raw_data() const { return root / "data" / "measurements.csv"; }
    fs::path filtered_data() const { return root / "data" / "filtered.csv"; }
    fs::path images() const { return root / "images"; }
    fs::path image_index() const { return images() / "index.csv"; }
    fs::path vae_stem() const { return root / "vae" / "vae"; }
    fs::path vae_history() const { return root / "vae" / "history.csv"; }
    fs::path latents() const { return root / "latents" / "latents.csv"; }
    fs::path likelihood_dir() const { return root / "likelihood"; }
    fs::path predictions() const { return likelihood_dir() / "predictions.csv"; }
    fs::path report() const { return root / "report"; }
};

inline const std::vector<std::string>& stage_names() {
    static const std::vector<std::string> names{"gen-scenario",     "gen-data",         "render",  "train-vae",
                                                "extract-latents", "train-likelihood", "evaluate"};
    return names;
}

struct StagePlan {
    std::vector<fs::path> inputs;
    std::vector<fs::path> outputs;
};

inline StagePlan stage_plan(const std::string& stage, const PipelineConfig& c) {
    const Layout L{c.out};
    const fs::path scenario_in = c.scenario_file ? *c.scenario_file : L.scenario();
    if (stage == "gen-scenario")
        return {c.scenario_file ? std::vector<fs::path>{*c.scenario_file} : std::vector<fs::path>{},
                {L.scenario(), L.config()}};
    if (stage == "gen-data") return {{scenario_in}, {L.raw_data(), L.filtered_data(), L.config()}};
    if (stage == "render") return {{scenario_in}, {L.image_index(), L.config()}};
    if (stage == "train-vae")
        return {{L.image_index()}, {fs::path(L.vae_stem().string() + ".json"),
                                   fs::path(L.vae_stem().string() + ".bin"), L.vae_history(), L.config()}};
    if (stage == "extract-latents")
        return {{fs::path(L.vae_stem().string() + ".json"), L.image_index()}, {L.latents(), L.config()}};
    if (stage == "train-likelihood")
        return {{scenario_in, L.filtered_data(), L.latents()}, {L.likelihood_dir(), L.predictions(), L.config()}};
    if (stage == "evaluate")
        return {{scenario_in, L.filtered_data(), L.latents()},
                {L.report() / "summary.md", L.report() / "folds.csv", L.report() / "boxplot.csv",
                 L.report() / "splits.csv", L.report() / "config.json", L.config()}};
    throw ValidationError("unknown subcommand: " + stage);
}

namespace detail {

inline void ensure_parent(const fs::path& p) {
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
}

inline void write_file(const fs::path& p, const std::string& text) {
    ensure_parent(p);
    std::ofstream out(p, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + p.string());
    out << text;
}

inline void require_input(const fs::path& p, const std::string& produced_by) {
    if (!fs::exists(p))
        throw MissingArtifactError("missing input " + p.string() + " (run " + produced_by + " first)");
}

inline SiteMap stage_scenario(const PipelineConfig& c) {
    if (c.scenario_file) return load_scenario(*c.scenario_file);
    const Layout L{c.out};
    require_input(L.scenario(), "gen-scenario");
    return load_scenario(L.scenario());
}

inline BinDataset stage_filtered(const PipelineConfig& c) {
    const Layout L{c.out};
    require_input(L.filtered_data(), "gen-data");
    return read_dataset_csv(L.filtered_data());
}

inline LatentTable stage_latents(const PipelineConfig& c) {
    const Layout L{c.out};
    require_input(L.latents(), "extract-latents");
    return read_latent_table(L.latents());
}

// Images of the VAE training part: a seeded subset of the index.
inline std::pair<std::vector<nn::Tensor>, std::vector<nn::Tensor>> vae_image_split(const ImageIndex& idx,
                                                                                   double train_fraction,
                                                                                   std::uint64_t seed) {
    Rng rng = make_rng(seed, {0x696d672dULL});
    const auto perm = seeded_permutation(idx.entries.size(), rng);
    auto n_train = static_cast<std::size_t>(std::llround(train_fraction * static_cast<double>(perm.size())));
    n_train = std::clamp<std::size_t>(n_train, 1, perm.size());
    std::vector<nn::Tensor> train, val;
    for (std::size_t i = 0; i < perm.size(); ++i) {
        const auto& e = idx.entries[perm[i]];
        const auto path = idx.tensor_path(e);
        if (!fs::exists(path)) throw MissingArtifactError("missing image file " + path.string());
        (i < n_train ? train : val).push_back(load_image_tensor(path));
    }
    return {std::move(train), std::move(val)};
}

}  // namespace detail

/// Runs one stage, writing its artifacts under `c.out` and the effective
/// config into the output root. Progress lines go to `log`.
inline void run_stage(const std::string& stage, const PipelineConfig& c, std::ostream& log) {
    const Layout L{c.out};
    stage_plan(stage, c);  // rejects unknown names
    fs::create_directories(L.root);

    if (stage == "gen-scenario") {
        const SiteMap map = c.scenario_file ? load_scenario(*c.scenario_file)
                                            : generate_synthetic_map(stage_seed(c, Stage::Scenario), c.generator);
        save_scenario(map, L.scenario());
        log << "scenario: " << map.bins.size() << " bins, " << map.polygons.size() << " polygons -> "
            << L.scenario().string() << '\n';
    } else if (stage == "gen-data") {
        const auto map = detail::stage_scenario(c);
        auto ds = sample_measurements(map, c.propagation, c.months, c.samples_per_bin, stage_seed(c, Stage::Sampling));
        ds.scenario_ref = L.scenario().filename().string();
        detail::ensure_parent(L.raw_data());
        write_dataset_csv(ds, L.raw_data());
        const auto filtered = filter_outliers(ds, c.hampel_k);
        write_dataset_csv(filtered, L.filtered_data());
        log << "data: " << ds.records.size() << " samples, " << filtered.records.size() << " after outlier filter\n";
    } else if (stage == "render") {
        const auto map = detail::stage_scenario(c);
        const auto idx = render_dataset(map, map.bins, c.raster, L.images());
        log << "render: " << idx.entries.size() << " images at " << c.raster.resolution << " px\n";
    } else if (stage == "train-vae") {
        detail::require_input(L.image_index(), "render");
        const auto idx = read_image_index(L.images());
        auto [train, val] = detail::vae_image_split(idx, c.vae_train_fraction, stage_seed(c, Stage::Vae));
        VaeModel model{c.vae};
        VaeTrainConfig tc = c.vae_train;
        tc.seed = stage_seed(c, Stage::Vae);
        const auto result = train_vae(model, train, tc, val);
        detail::ensure_parent(L.vae_stem());
        save_vae(model, L.vae_stem());
        std::string hist = "epoch,loss,recon,kl,min_batch_kl,val_loss\n";
        for (const auto& h : result.history)
            hist += std::to_string(h.epoch) + ',' + fmt_double(h.loss) + ',' + fmt_double(h.recon) + ',' +
                    fmt_double(h.kl) + ',' + fmt_double(h.min_batch_kl) + ',' +
                    (std::isnan(h.val_loss) ? std::string() : fmt_double(h.val_loss)) + '\n';
        detail::write_file(L.vae_history(), hist);
        log << "vae: " << train.size() << " training images, loss " << fmt_double(result.history.front().loss)
            << " -> " << fmt_double(result.history.back().loss) << '\n';
    } else if (stage == "extract-latents") {
        detail::require_input(fs::path(L.vae_stem().string() + ".json"), "train-vae");
        detail::require_input(L.image_index(), "render");
        auto model = load_vae(L.vae_stem());
        const auto table = extract_features(model, read_image_index(L.images()));
        detail::ensure_parent(L.latents());
        write_latent_table(table, L.latents());
        log << "latents: " << table.size() << " rows -> " << L.latents().string() << '\n';
    } else if (stage == "train-likelihood") {
        const auto map = detail::stage_scenario(c);
        const auto ds = detail::stage_filtered(c);
        const auto z = detail::stage_latents(c);
        fs::create_directories(L.likelihood_dir());
        std::string pred = "bin_id,sector,month,model,mean_dbm,variance_db2\n";
        for (int sector = 0; sector < 3; ++sector) {
            std::vector<MeasurementRecord> recs;
            for (const auto& r : ds.records)
                if (r.sector == sector) recs.push_back(r);
            if (recs.empty()) {
                log << "likelihood: sector " << sector << " has no records, skipped\n";
                continue;
            }
            std::vector<Bin> bins;
            for (const auto& b : map.bins)
                if (assign_sector(map.bs, b.center) == sector) bins.push_back(b);
            for (int variant = 0; variant < 2; ++variant) {
                LikelihoodTrainConfig tc = c.likelihood;
                tc.seed = derive_seed(stage_seed(c, Stage::Likelihood),
                                      {static_cast<std::uint64_t>(sector), static_cast<std::uint64_t>(variant)});
                const LatentTable* zp = variant == 1 ? &z : nullptr;
                const std::string name = variant == 1 ? kModelTwoTier : kModelBaseline;
                auto trained = train_likelihood(recs, zp, tc);
                save_likelihood(trained.model, L.likelihood_dir() / (name + "_sector" + std::to_string(sector)),
                                to_json(tc));
                for (int month : c.months) {
                    const auto p = predict_bins(trained.model, map, bins, month, zp);
                    for (std::size_t i = 0; i < bins.size(); ++i)
                        pred += std::to_string(bins[i].id) + ',' + std::to_string(sector) + ',' +
                                std::to_string(month) + ',' + name + ',' + fmt_double(p[i].mean_dbm) + ',' +
                                fmt_double(p[i].variance_db2) + '\n';
                }
                log << "likelihood: sector " << sector << ' ' << name << " best epoch "
                    << trained.history.best_epoch << " of " << trained.history.epochs_run << '\n';
            }
        }
        detail::write_file(L.predictions(), pred);
    } else if (stage == "evaluate") {
        const auto map = detail::stage_scenario(c);
        const auto ds = detail::stage_filtered(c);
        const auto z = detail::stage_latents(c);
        const auto report = run_comparison(ds, map, z, c.evaluation);
        emit_report(report, L.report());
        for (auto seed : c.evaluation.seeds) {
            log << "evaluate: seed " << seed;
            for (const auto& m : model_names()) log << ' ' << m << '=' << fmt_double(seed_mean_mae(report, m, seed));
            log << '\n';
        }
        for (const auto& w : report.warnings) log << "warning: " << w << '\n';
    }
    detail::write_file(L.config(), to_json(c).dump(2) + "\n");
}

}  // namespace covtwin
