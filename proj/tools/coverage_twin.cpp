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

// coverage-twin <subcommand> --config <path> [--seed N] [--out DIR] [--threads N] [--dry-run]
//
// Exit codes: 0 success, 2 config or validation error, 3 missing upstream
// artifact, 4 internal error.

#include "covtwin/pipeline.hpp"

#include <CLI11.hpp>

#include <cstdlib>
#include <iostream>
#include <map>
#include <optional>

namespace {

enum Exit { kOk = 0, kConfig = 2, kMissing = 3, kInternal = 4 };

int run(const std::string& stage, const std::string& config_path, std::optional<std::uint64_t> seed,
        std::optional<std::string> out, int threads, bool dry_run) {
    using namespace covtwin;
    auto cfg = load_pipeline_config(config_path, seed);
    if (out) cfg.out = *out;
    if (const char* env = std::getenv("COVERAGE_TWIN_OUT"); env && *env) cfg.out = env;
    if (threads < 1) throw ValidationError("--threads must be >= 1");
    cfg.evaluation.threads = threads;

    if (dry_run) {
        const auto plan = stage_plan(stage, cfg);
        std::cout << "plan: " << stage << " (seed " << cfg.seed << ", out " << cfg.out.string() << ")\n";
        for (const auto& p : plan.inputs)
            std::cout << "  read  " << p.string() << (fs::exists(p) ? "" : "  [missing]") << '\n';
        for (const auto& p : plan.outputs) std::cout << "  write " << p.string() << '\n';
        return kOk;
    }
    run_stage(stage, cfg, std::cout);
    return kOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Coverage digital twin: synthetic data, VAE features and RSRP likelihood models"};
    app.name("coverage-twin");
    app.require_subcommand(1);

    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> out;
    int threads = 1;
    bool dry_run = false;

    const std::map<std::string, std::string> blurbs{
        {"gen-scenario", "Generate the BS, bin grid and obstruction polygons"},
        {"gen-data", "Synthesize RSRP measurements and filter outliers"},
        {"render", "Render one association image per bin"},
        {"train-vae", "Train the image VAE"},
        {"extract-latents", "Encode every bin image to its latent mean"},
        {"train-likelihood", "Fit the empirical, MLP and two-tier models on all data"},
        {"evaluate", "Cross-validated comparison of the three models"},
    };
    for (const auto& name : covtwin::stage_names()) {
        auto* sub = app.add_subcommand(name, blurbs.at(name));
        sub->add_option("--config", config_path, "Pipeline config (JSON)")->required();
        sub->add_option("--seed", seed, "Master seed (overrides the config)");
        sub->add_option("--out", out, "Output root (COVERAGE_TWIN_OUT takes precedence)");
        sub->add_option("--threads", threads, "Worker threads for fold-level evaluation")->capture_default_str();
        sub->add_flag("--dry-run", dry_run, "Print the plan without writing anything");
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? kOk : kConfig;
    }

    const std::string stage = app.get_subcommands().front()->get_name();
    try {
        return run(stage, config_path, seed, out, threads, dry_run);
    } catch (const covtwin::MissingArtifactError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kMissing;
    } catch (const covtwin::ParseError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return kConfig;
    } catch (const covtwin::ValidationError& e) {
        std::cerr << "validation error: " << e.what() << '\n';
        return kConfig;
    } catch (const covtwin::InfeasibleError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return kConfig;
    } catch (const std::exception& e) {
        std::cerr << "internal error: " << e.what() << '\n';
        return kInternal;
    }
}
