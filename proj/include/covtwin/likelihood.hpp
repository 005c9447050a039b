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
 * Heteroscedastic RSRP regressor.
 *
 *   features -> dense(100) ReLU -> dense(50) ReLU -+-> dense(50) ReLU -> dense(1)           mean
 *                                                  +-> dense(50) ReLU -> dense(1) -> clamp  log-variance
 *
 * Trained on raw per-sample RSRP labels with the Gaussian negative
 * log-likelihood; features are z-scored with statistics of the training
 * portion. The same network with 4 inputs is the plain-MLP baseline.
 */

#pragma once

#include "covtwin/dataset.hpp"
#include "covtwin/error.hpp"
#include "covtwin/geo.hpp"
#include "covtwin/nn/adam.hpp"
#include "covtwin/nn/checkpoint.hpp"
#include "covtwin/nn/early_stopping.hpp"
#include "covtwin/nn/layers.hpp"
#include "covtwin/nn/losses.hpp"
#include "covtwin/preprocess.hpp"
#include "covtwin/rng.hpp"
#include "covtwin/vae.hpp"

#include <json.hpp>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <vector>

namespace covtwin {

struct PredictiveDistribution {
    double mean_dbm = 0.0;
    double variance_db2 = 1.0;
};

class LikelihoodModel {
public:
    static constexpr double kLogVarMin = -10.0;
    static constexpr double kLogVarMax = 10.0;

    explicit LikelihoodModel(FeatureVariant variant = FeatureVariant::Proposal)
        : variant_(variant),
          input_dim_(feature_dim(variant)),
          fc1_("fc1", input_dim_, 100),
          fc2_("fc2", 100, 50),
          mean1_("mean.fc1", 50, 50),
          mean2_("mean.out", 50, 1),
          var1_("logvar.fc1", 50, 50),
          var2_("logvar.out", 50, 1),
          clamp_(kLogVarMin, kLogVarMax) {
        stats_.mean.assign(input_dim_, 0.0);
        stats_.std.assign(input_dim_, 1.0);
    }

    FeatureVariant variant() const { return variant_; }
    std::size_t input_dim() const { return input_dim_; }
    const NormalizationStats& stats() const { return stats_; }
    void set_stats(NormalizationStats s) {
        require_shape(s.dim() == input_dim_, "likelihood: normalization stats dimension mismatch");
        stats_ = std::move(s);
    }

    void init(std::uint64_t seed) {
        Rng rng = make_rng(seed, {0x6c696b2d696e6974ULL});
        for (auto* d : layers()) d->init(rng);
    }

    std::vector<nn::Dense*> layers() { return {&fc1_, &fc2_, &mean1_, &mean2_, &var1_, &var2_}; }

    nn::ParamList params() {
        nn::ParamList out;
        for (auto* d : layers())
            for (auto* p : d->params()) out.push_back(p);
        return out;
    }

    nn::Dense& mean_out() { return mean2_; }
    nn::Dense& logvar_out() { return var2_; }

    /// Batch forward on already-normalized rows (N x input_dim). Returns
    /// (mean, clamped log-variance), each of length N.
    std::pair<nn::Tensor, nn::Tensor> forward_normalized(const nn::Tensor& x) {
        require_shape(x.rank() == 2 && x.dim(1) == input_dim_,
                      "likelihood: expected " + std::to_string(input_dim_) + " features, got shape " +
                          nn::shape_str(x.shape));
        const std::size_t n = x.dim(0);
        auto h = relu2_.forward(fc2_.forward(relu1_.forward(fc1_.forward(x))));
        auto mean = mean2_.forward(relum_.forward(mean1_.forward(h)));
        auto logvar = clamp_.forward(var2_.forward(reluv_.forward(var1_.forward(h))));
        return {mean.reshaped({n}), logvar.reshaped({n})};
    }

    /// Backpropagates d/dmean and d/dlogvar through the last forward.
    void backward(const nn::Tensor& dmean, const nn::Tensor& dlogvar) {
        const std::size_t n = dmean.size();
        auto gm = mean1_.backward(relum_.backward(mean2_.backward(dmean.reshaped({n, 1}))));
        auto gv = var1_.backward(reluv_.backward(var2_.backward(clamp_.backward(dlogvar.reshaped({n, 1})))));
        nn::add_inplace(gm, gv);
        fc1_.backward(relu1_.backward(fc2_.backward(relu2_.backward(gm))));
    }

    PredictiveDistribution forward(const FeatureVector& f) {
        require_shape(f.dim() == input_dim_,
                      "likelihood: feature vector has " + std::to_string(f.dim()) + " entries, model expects " +
                          std::to_string(input_dim_));
        nn::Tensor x({1, input_dim_}, stats_.apply(f.values));
        auto [mean, logvar] = forward_normalized(x);
        return {mean[0], std::exp(logvar[0])};
    }

private:
    FeatureVariant variant_;
    std::size_t input_dim_;
    nn::Dense fc1_, fc2_, mean1_, mean2_, var1_, var2_;
    nn::ReLU relu1_, relu2_, relum_, reluv_;
    nn::Clamp clamp_;
    NormalizationStats stats_;
};

/// Batch loss: mean over samples of 0.5 * (r^2 / var + ln var)
/// with var = exp(logvar). Returns (loss, d/dmean, d/dlogvar).
struct NllBatch {
    double loss = 0.0;
    nn::Tensor dmean;
    nn::Tensor dlogvar;
};

inline NllBatch nll_from_logvar(const nn::Tensor& mean, const nn::Tensor& logvar, const nn::Tensor& y) {
    nn::Tensor var(logvar.shape);
    for (std::size_t i = 0; i < var.size(); ++i) var[i] = std::exp(logvar[i]);
    auto g = nn::gaussian_nll(mean, var, y);
    const double inv_n = 1.0 / static_cast<double>(mean.size());
    NllBatch out{g.value * inv_n, std::move(g.grad_a), nn::Tensor(logvar.shape)};
    for (std::size_t i = 0; i < var.size(); ++i) {
        out.dmean[i] *= inv_n;
        out.dlogvar[i] = g.grad_b[i] * var[i] * inv_n;
    }
    return out;
}

struct LikelihoodTrainConfig {
    std::size_t batch = 3000;
    int patience = 8;
    int max_epochs = 300;
    double inner_val_fraction = 0.1;
    std::uint64_t seed = 0;
    bool warm_start_output_bias = true;
    nn::AdamConfig adam{};
};

inline nlohmann::json to_json(const LikelihoodTrainConfig& c) {
    return {{"batch", c.batch},
            {"patience", c.patience},
            {"max_epochs", c.max_epochs},
            {"inner_val_fraction", c.inner_val_fraction},
            {"seed", c.seed},
            {"warm_start_output_bias", c.warm_start_output_bias},
            {"lr", c.adam.lr}};
}

inline LikelihoodTrainConfig likelihood_train_config_from_json(const nlohmann::json& j) {
    LikelihoodTrainConfig c;
    c.batch = j.value("batch", c.batch);
    c.patience = j.value("patience", c.patience);
    c.max_epochs = j.value("max_epochs", c.max_epochs);
    c.inner_val_fraction = j.value("inner_val_fraction", c.inner_val_fraction);
    c.seed = j.value("seed", c.seed);
    c.warm_start_output_bias = j.value("warm_start_output_bias", c.warm_start_output_bias);
    c.adam.lr = j.value("lr", c.adam.lr);
    require(c.batch >= 1 && c.patience >= 1 && c.max_epochs >= 1, "likelihood: batch, patience, max_epochs must be >= 1");
    require(c.inner_val_fraction > 0.0 && c.inner_val_fraction < 1.0, "likelihood: inner_val_fraction must lie in (0, 1)");
    return c;
}

struct LikelihoodHistory {
    std::vector<double> train_loss;  // epoch mean of the batch losses
    std::vector<double> val_loss;
    int best_epoch = 0;
    int epochs_run = 0;
};

struct TrainedLikelihood {
    LikelihoodModel model;
    LikelihoodHistory history;
};

namespace detail {

inline std::vector<FeatureVector> assemble_all(std::span<const MeasurementRecord> records,
                                               const LatentTable* z) {
    std::vector<FeatureVector> out;
    out.reserve(records.size());
    for (const auto& r : records) {
        if (z) {
            auto it = z->find(r.bin_id);
            if (it == z->end())
                throw MissingArtifactError("latent table has no row for bin " + std::to_string(r.bin_id));
            out.push_back(assemble_features(r, it->second));
        } else {
            out.push_back(assemble_features(r));
        }
    }
    return out;
}

// Early-stopping holdout: 10% of the bins, or of the records when there are
// too few distinct bins to split.
inline std::pair<std::vector<std::size_t>, std::vector<std::size_t>>
inner_split(std::span<const MeasurementRecord> records, double val_fraction, std::uint64_t seed) {
    std::vector<std::int64_t> bins;
    {
        std::set<std::int64_t> s;
        for (const auto& r : records) s.insert(r.bin_id);
        bins.assign(s.begin(), s.end());
    }
    Rng rng = make_rng(seed, {0x696e6e6572ULL});
    std::vector<std::size_t> train, val;
    if (bins.size() >= 10) {
        const auto perm = seeded_permutation(bins.size(), rng);
        const auto n_val = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(val_fraction * static_cast<double>(bins.size()))));
        std::set<std::int64_t> val_bins;
        for (std::size_t i = 0; i < n_val; ++i) val_bins.insert(bins[perm[i]]);
        for (std::size_t i = 0; i < records.size(); ++i)
            (val_bins.count(records[i].bin_id) ? val : train).push_back(i);
    } else {
        const auto perm = seeded_permutation(records.size(), rng);
        const auto n_val = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(val_fraction * static_cast<double>(records.size()))));
        for (std::size_t i = 0; i < records.size(); ++i) (i < n_val ? val : train).push_back(perm[i]);
        std::sort(train.begin(), train.end());
        std::sort(val.begin(), val.end());
    }
    if (train.empty()) std::swap(train, val);
    return {train, val};
}

inline nn::Tensor gather_rows(const std::vector<std::vector<double>>& rows, std::span<const std::size_t> idx,
                              std::size_t dim) {
    nn::Tensor x({idx.size(), dim});
    for (std::size_t i = 0; i < idx.size(); ++i)
        std::copy(rows[idx[i]].begin(), rows[idx[i]].end(), x.data.begin() + static_cast<std::ptrdiff_t>(i * dim));
    return x;
}

}  // namespace detail

/// Mean NLL of the model over a set of normalized rows, evaluated in chunks.
inline double evaluate_nll(LikelihoodModel& model, const std::vector<std::vector<double>>& rows,
                           const std::vector<double>& labels, std::span<const std::size_t> idx) {
    if (idx.empty()) return std::numeric_limits<double>::quiet_NaN();
    double sum = 0.0;
    constexpr std::size_t chunk = 4096;
    for (std::size_t lo = 0; lo < idx.size(); lo += chunk) {
        const auto part = idx.subspan(lo, std::min(chunk, idx.size() - lo));
        auto [mean, logvar] = model.forward_normalized(detail::gather_rows(rows, part, model.input_dim()));
        for (std::size_t i = 0; i < part.size(); ++i) {
            const double r = mean[i] - labels[part[i]];
            sum += 0.5 * (r * r / std::exp(logvar[i]) + logvar[i]);
        }
    }
    return sum / static_cast<double>(idx.size());
}

/// Trains a fresh model with Adam on mini-batches, early-stopping on a
/// held-out 10% of the training bins and restoring the best-epoch weights.
/// `z` selects the Proposal variant (6 features); nullptr the Baseline (4).
inline TrainedLikelihood train_likelihood(std::span<const MeasurementRecord> records, const LatentTable* z,
                                          const LikelihoodTrainConfig& cfg) {
    require(!records.empty(), "train_likelihood: no training records");
    const auto variant = z ? FeatureVariant::Proposal : FeatureVariant::Baseline;
    TrainedLikelihood out{LikelihoodModel(variant), {}};
    auto& model = out.model;
    const std::size_t dim = model.input_dim();

    const auto features = detail::assemble_all(records, z);
    auto [train_idx, val_idx] = detail::inner_split(records, cfg.inner_val_fraction, cfg.seed);

    std::vector<std::vector<double>> train_rows;
    train_rows.reserve(train_idx.size());
    for (auto i : train_idx) train_rows.push_back(features[i].values);
    model.set_stats(normalize_fit(std::span<const std::vector<double>>(train_rows)));

    std::vector<std::vector<double>> rows(records.size());
    std::vector<double> labels(records.size());
    for (std::size_t i = 0; i < records.size(); ++i) {
        rows[i] = model.stats().apply(features[i].values);
        labels[i] = records[i].rsrp_dbm;
    }

    model.init(cfg.seed);
    if (cfg.warm_start_output_bias) {
        // Start the heads at the label mean and variance of the training part.
        double m = 0.0, v = 0.0;
        for (auto i : train_idx) m += labels[i];
        m /= static_cast<double>(train_idx.size());
        for (auto i : train_idx) v += (labels[i] - m) * (labels[i] - m);
        v /= static_cast<double>(train_idx.size());
        model.mean_out().bias.value[0] = m;
        model.logvar_out().bias.value[0] =
            std::clamp(std::log(std::max(v, 1e-6)), LikelihoodModel::kLogVarMin, LikelihoodModel::kLogVarMax);
    }

    auto params = model.params();
    auto adam = nn::make_adam_state(params, cfg.adam);
    std::vector<nn::Tensor> best;
    auto snapshot = [&] {
        best.clear();
        for (auto* p : params) best.push_back(p->value);
    };

    const auto monitor = val_idx.empty() ? std::span<const std::size_t>(train_idx) : std::span<const std::size_t>(val_idx);
    auto run_epoch = [&](int epoch) {
        Rng rng = make_rng(cfg.seed, {0x65706f6368ULL, static_cast<std::uint64_t>(epoch)});
        const auto perm = seeded_permutation(train_idx.size(), rng);
        std::vector<std::size_t> order(train_idx.size());
        for (std::size_t i = 0; i < perm.size(); ++i) order[i] = train_idx[perm[i]];
        const std::size_t batch = std::min(cfg.batch, order.size());
        double loss_sum = 0.0;
        std::size_t batches = 0;
        for (std::size_t lo = 0; lo < order.size(); lo += batch) {
            const auto part = std::span<const std::size_t>(order).subspan(lo, std::min(batch, order.size() - lo));
            nn::Tensor y({part.size()});
            for (std::size_t i = 0; i < part.size(); ++i) y[i] = labels[part[i]];
            nn::zero_grads(params);
            auto [mean, logvar] = model.forward_normalized(detail::gather_rows(rows, part, dim));
            auto nll = nll_from_logvar(mean, logvar, y);
            model.backward(nll.dmean, nll.dlogvar);
            nn::adam_step(params, adam);
            loss_sum += nll.loss;
            ++batches;
        }
        out.history.train_loss.push_back(loss_sum / static_cast<double>(batches));
        const double val = evaluate_nll(model, rows, labels, monitor);
        out.history.val_loss.push_back(val);
        return val;
    };
    auto restore = [&] {
        for (std::size_t k = 0; k < params.size(); ++k) params[k]->value = best[k];
    };
    const auto outcome = nn::train_with_early_stopping(cfg.max_epochs, cfg.patience, run_epoch, snapshot, restore);
    out.history.best_epoch = outcome.best_epoch;
    out.history.epochs_run = outcome.epochs_run;
    return out;
}

inline TrainedLikelihood train_baseline_mlp(std::span<const MeasurementRecord> records,
                                            const LikelihoodTrainConfig& cfg) {
    return train_likelihood(records, nullptr, cfg);
}

/// Prediction for every bin at a fixed month, sector from the bin bearing.
inline std::vector<PredictiveDistribution> predict_bins(LikelihoodModel& model, const SiteMap& map,
                                                        std::span<const Bin> bins, int month,
                                                        const LatentTable* z) {
    require(month >= 1 && month <= 12, "predict_bins: month outside 1..12");
    if (model.variant() == FeatureVariant::Proposal && !z)
        throw MissingArtifactError("predict_bins: proposal model needs a latent table");
    std::vector<PredictiveDistribution> out;
    out.reserve(bins.size());
    for (const auto& b : bins) {
        MeasurementRecord r{b.id, b.center.x, b.center.y, assign_sector(map.bs, b.center), month, 0.0};
        std::optional<LatentPair> lat;
        if (model.variant() == FeatureVariant::Proposal) {
            auto it = z->find(b.id);
            if (it == z->end()) throw MissingArtifactError("predict_bins: no latent row for bin " + std::to_string(b.id));
            lat = it->second;
        }
        out.push_back(model.forward(assemble_features(r, lat)));
    }
    return out;
}

inline void save_likelihood(LikelihoodModel& model, const std::filesystem::path& stem,
                            const nlohmann::json& train_config = nlohmann::json::object()) {
    nn::save_checkpoint(model.params(), stem,
                        {{"kind", "likelihood"},
                         {"variant", model.variant() == FeatureVariant::Proposal ? "proposal" : "baseline"},
                         {"input_dim", model.input_dim()},
                         {"normalization", to_json(model.stats())},
                         {"train_config", train_config}});
}

inline LikelihoodModel load_likelihood(const std::filesystem::path& stem) {
    std::ifstream js(stem.string() + ".json");
    if (!js) throw MissingArtifactError("likelihood checkpoint not found: " + stem.string() + ".json");
    const auto manifest = nlohmann::json::parse(js, nullptr, false);
    if (manifest.is_discarded()) throw ParseError("likelihood manifest is not valid JSON");
    const auto& meta = manifest.at("meta");
    LikelihoodModel model(meta.at("variant") == "proposal" ? FeatureVariant::Proposal : FeatureVariant::Baseline);
    nn::load_checkpoint(model.params(), stem);
    model.set_stats(normalization_stats_from_json(meta.at("normalization")));
    return model;
}

}  // namespace covtwin
