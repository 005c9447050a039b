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
 * Convolutional variational autoencoder over association images.
 *
 * Encoder: three parallel stems (3x3, 5x5, 7x7) concatenated, max-pool,
 * two conv + max-pool stages, flatten, dropout, a 64-unit dense layer and
 * two 2-unit heads for the posterior mean and log-variance.
 *
 * Decoder: dense 2 -> 64 -> flattened feature map, then three
 * (nearest upsample, 3x3 conv) stages back to 3 x res x res with a tanh
 * output so reconstructions live in [-1, 1] like the inputs.
 *
 * The loss is the negative ELBO with a unit-variance Gaussian decoder:
 * 0.5 * ||x_hat - x||^2 + KL(q(z|x) || N(0, I)), summed over the batch,
 * using one reparameterised sample per image.
 */

#pragma once

#include "covtwin/error.hpp"
#include "covtwin/format.hpp"
#include "covtwin/nn/adam.hpp"
#include "covtwin/nn/checkpoint.hpp"
#include "covtwin/nn/layers.hpp"
#include "covtwin/nn/losses.hpp"
#include "covtwin/preprocess.hpp"
#include "covtwin/raster.hpp"
#include "covtwin/rng.hpp"

#include <json.hpp>

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <span>
#include <vector>

namespace covtwin {

struct VaeConfig {
    int resolution = 64;
    std::size_t stem_channels = 8;   // per stem; 3 stems are concatenated
    std::size_t mid_channels = 32;
    std::size_t hidden = 64;
    double dropout = 0.25;
    static constexpr std::size_t latent_dim = 2;
};

inline nlohmann::json to_json(const VaeConfig& c) {
    return {{"resolution", c.resolution},   {"stem_channels", c.stem_channels},
            {"mid_channels", c.mid_channels}, {"hidden", c.hidden},
            {"dropout", c.dropout},         {"latent_dim", VaeConfig::latent_dim}};
}

inline VaeConfig vae_config_from_json(const nlohmann::json& j) {
    VaeConfig c;
    c.resolution = j.value("resolution", c.resolution);
    c.stem_channels = j.value("stem_channels", c.stem_channels);
    c.mid_channels = j.value("mid_channels", c.mid_channels);
    c.hidden = j.value("hidden", c.hidden);
    c.dropout = j.value("dropout", c.dropout);
    if (j.value("latent_dim", VaeConfig::latent_dim) != VaeConfig::latent_dim)
        throw ValidationError("vae: latent_dim must be 2");
    return c;
}

struct LatentCode {
    std::array<double, 2> mu{};
    std::array<double, 2> logvar{};
    std::array<double, 2> z{};
};

/// z = mu + exp(logvar / 2) * eps.
inline std::array<double, 2> reparameterize(const std::array<double, 2>& mu,
                                            const std::array<double, 2>& logvar,
                                            const std::array<double, 2>& eps) {
    return {mu[0] + std::exp(0.5 * logvar[0]) * eps[0], mu[1] + std::exp(0.5 * logvar[1]) * eps[1]};
}

struct VaeLoss {
    double total = 0.0;
    double recon = 0.0;
    double kl = 0.0;
};

class VaeModel {
public:
    explicit VaeModel(VaeConfig cfg = {}) : cfg_(cfg), dropout_(cfg.dropout) {
        require(cfg.resolution >= 16 && cfg.resolution % 8 == 0,
                "vae: resolution must be a multiple of 8 and >= 16");
        const std::size_t s = cfg.stem_channels, m = cfg.mid_channels, h = cfg.hidden;
        const std::size_t cells = static_cast<std::size_t>(cfg.resolution / 8);
        flat_ = m * cells * cells;
        stem3_ = nn::Conv2d("enc.stem3", 3, s, 3);
        stem5_ = nn::Conv2d("enc.stem5", 3, s, 5);
        stem7_ = nn::Conv2d("enc.stem7", 3, s, 7);
        conv2_ = nn::Conv2d("enc.conv2", 3 * s, m, 3);
        conv3_ = nn::Conv2d("enc.conv3", m, m, 3);
        fc_ = nn::Dense("enc.fc", flat_, h);
        mu_head_ = nn::Dense("enc.mu", h, VaeConfig::latent_dim);
        logvar_head_ = nn::Dense("enc.logvar", h, VaeConfig::latent_dim);
        dfc1_ = nn::Dense("dec.fc1", VaeConfig::latent_dim, h);
        dfc2_ = nn::Dense("dec.fc2", h, flat_);
        dconv1_ = nn::Conv2d("dec.conv1", m, m, 3);
        dconv2_ = nn::Conv2d("dec.conv2", m, 3 * s, 3);
        dconv3_ = nn::Conv2d("dec.conv3", 3 * s, 3, 3);
    }

    const VaeConfig& config() const { return cfg_; }

    void init(std::uint64_t seed) {
        Rng rng = make_rng(seed, {0x7661652d696e6974ULL});
        for (auto* c : {&stem3_, &stem5_, &stem7_, &conv2_, &conv3_, &dconv1_, &dconv2_, &dconv3_}) c->init(rng);
        for (auto* d : {&fc_, &mu_head_, &logvar_head_, &dfc1_, &dfc2_}) d->init(rng);
    }

    nn::ParamList params() {
        nn::ParamList out;
        for (auto* c : {&stem3_, &stem5_, &stem7_, &conv2_, &conv3_})
            for (auto* p : c->params()) out.push_back(p);
        for (auto* d : {&fc_, &mu_head_, &logvar_head_, &dfc1_, &dfc2_})
            for (auto* p : d->params()) out.push_back(p);
        for (auto* c : {&dconv1_, &dconv2_, &dconv3_})
            for (auto* p : c->params()) out.push_back(p);
        return out;
    }
    nn::ParamList encoder_params() {
        nn::ParamList out;
        for (auto* p : params())
            if (p->name.rfind("enc.", 0) == 0) out.push_back(p);
        return out;
    }

    nn::Dense& mu_head() { return mu_head_; }
    nn::Dense& logvar_head() { return logvar_head_; }

    /// Posterior (mu, logvar). `rng` drives dropout in training mode only.
    std::pair<nn::Tensor, nn::Tensor> encode(const nn::Tensor& x, nn::Mode mode, Rng& rng) {
        const auto res = static_cast<std::size_t>(cfg_.resolution);
        require_shape(x.shape == nn::Shape({3, res, res}),
                      "vae encode: expected input (3," + std::to_string(res) + "," + std::to_string(res) +
                          "), got " + nn::shape_str(x.shape));
        auto a3 = relu3_.forward(stem3_.forward(x));
        auto a5 = relu5_.forward(stem5_.forward(x));
        auto a7 = relu7_.forward(stem7_.forward(x));
        auto h = pool1_.forward(nn::concat_channels({a3, a5, a7}));
        h = pool2_.forward(relu_c2_.forward(conv2_.forward(h)));
        h = pool3_.forward(relu_c3_.forward(conv3_.forward(h)));
        flat_shape_ = h.shape;
        auto f = dropout_.forward(h.reshaped({flat_}), mode, rng);
        auto hid = relu_fc_.forward(fc_.forward(f));
        return {mu_head_.forward(hid), logvar_head_.forward(hid)};
    }

    std::pair<nn::Tensor, nn::Tensor> encode(const nn::Tensor& x) {
        Rng unused(0);
        return encode(x, nn::Mode::Eval, unused);
    }

    nn::Tensor decode(const nn::Tensor& z) {
        require_shape(z.size() == VaeConfig::latent_dim, "vae decode: latent must have 2 entries");
        auto h = relu_d1_.forward(dfc1_.forward(z.reshaped({VaeConfig::latent_dim})));
        h = relu_d2_.forward(dfc2_.forward(h));
        const std::size_t cells = static_cast<std::size_t>(cfg_.resolution / 8);
        h = h.reshaped({cfg_.mid_channels, cells, cells});
        h = relu_dc1_.forward(dconv1_.forward(up1_.forward(h)));
        h = relu_dc2_.forward(dconv2_.forward(up2_.forward(h)));
        return out_tanh_.forward(dconv3_.forward(up3_.forward(h)));
    }

    /// Backpropagates through the most recent decode(); returns d/dz.
    nn::Tensor decode_backward(const nn::Tensor& dxhat) {
        auto g = up3_.backward(dconv3_.backward(out_tanh_.backward(dxhat)));
        g = up2_.backward(dconv2_.backward(relu_dc2_.backward(g)));
        g = up1_.backward(dconv1_.backward(relu_dc1_.backward(g)));
        g = dfc2_.backward(relu_d2_.backward(g.reshaped({flat_})));
        return dfc1_.backward(relu_d1_.backward(g));
    }

    /// Backpropagates through the most recent encode(); returns d/dx.
    nn::Tensor encode_backward(const nn::Tensor& dmu, const nn::Tensor& dlogvar) {
        auto g = mu_head_.backward(dmu);
        add_inplace(g, logvar_head_.backward(dlogvar));
        g = dropout_.backward(fc_.backward(relu_fc_.backward(g)));
        g = pool3_.backward(g.reshaped(flat_shape_));
        g = pool2_.backward(conv3_.backward(relu_c3_.backward(g)));
        g = pool1_.backward(conv2_.backward(relu_c2_.backward(g)));
        const std::size_t s = cfg_.stem_channels;
        auto parts = nn::split_channels(g, {s, s, s});
        auto dx = stem3_.backward(relu3_.backward(parts[0]));
        add_inplace(dx, stem5_.backward(relu5_.backward(parts[1])));
        add_inplace(dx, stem7_.backward(relu7_.backward(parts[2])));
        return dx;
    }

    /// Loss of a single image with noise `eps`; accumulates parameter
    /// gradients when `accumulate` is set.
    VaeLoss image_loss(const nn::Tensor& x, const std::array<double, 2>& eps, nn::Mode mode, Rng& rng,
                       bool accumulate) {
        auto [mu, logvar] = encode(x, mode, rng);
        const auto z = reparameterize({mu[0], mu[1]}, {logvar[0], logvar[1]}, eps);
        const auto xhat = decode(nn::Tensor({2}, {z[0], z[1]}));
        const auto rec = nn::half_sse(xhat, x);
        const auto kl = nn::kl_diag_gaussian(mu, logvar);
        if (accumulate) {
            const auto dz = decode_backward(rec.grad_a);
            nn::Tensor dmu = kl.grad_a, dlv = kl.grad_b;
            for (std::size_t i = 0; i < 2; ++i) {
                dmu[i] += dz[i];
                dlv[i] += dz[i] * eps[i] * 0.5 * std::exp(0.5 * logvar[i]);
            }
            encode_backward(dmu, dlv);
        }
        return {rec.value + kl.value, rec.value, kl.value};
    }

private:
    VaeConfig cfg_;
    std::size_t flat_ = 0;
    nn::Shape flat_shape_;
    nn::Conv2d stem3_, stem5_, stem7_, conv2_, conv3_, dconv1_, dconv2_, dconv3_;
    nn::Dense fc_, mu_head_, logvar_head_, dfc1_, dfc2_;
    nn::ReLU relu3_, relu5_, relu7_, relu_c2_, relu_c3_, relu_fc_, relu_d1_, relu_d2_, relu_dc1_, relu_dc2_;
    nn::MaxPool2 pool1_, pool2_, pool3_;
    nn::Upsample2 up1_, up2_, up3_;
    nn::Dropout dropout_;
    nn::Tanh out_tanh_;
};

namespace detail {

inline std::array<double, 2> draw_eps(Rng& rng) { return {standard_normal(rng), standard_normal(rng)}; }

}  // namespace detail

/// Negative ELBO summed over a batch, one noise draw per image. With
/// `accumulate` the parameter gradients of the same quantity are added into
/// the model's gradient buffers.
inline VaeLoss vae_loss(VaeModel& model, std::span<const nn::Tensor> batch, std::uint64_t seed,
                        nn::Mode mode = nn::Mode::Eval, bool accumulate = false) {
    require(!batch.empty(), "vae_loss: empty batch");
    VaeLoss sum;
    for (std::size_t i = 0; i < batch.size(); ++i) {
        Rng rng = make_rng(seed, {static_cast<std::uint64_t>(i)});
        const auto eps = detail::draw_eps(rng);
        const auto l = model.image_loss(batch[i], eps, mode, rng, accumulate);
        sum.total += l.total;
        sum.recon += l.recon;
        sum.kl += l.kl;
    }
    return sum;
}

struct VaeTrainConfig {
    int epochs = 20;
    std::size_t batch = 50;
    std::uint64_t seed = 0;
    nn::AdamConfig adam{};
};

struct VaeEpochStats {
    int epoch = 0;
    double loss = 0.0;   // per-image mean over the epoch
    double recon = 0.0;
    double kl = 0.0;
    double min_batch_kl = 0.0;
    double val_loss = std::numeric_limits<double>::quiet_NaN();
};

struct VaeTrainResult {
    std::vector<VaeEpochStats> history;
    std::size_t steps_per_epoch = 0;
};

inline std::size_t steps_per_epoch(std::size_t n_images, std::size_t batch) {
    return (n_images + batch - 1) / batch;
}

/// Adam on mini-batches with dropout active. Deterministic for a fixed seed:
/// the shuffle, the dropout masks and the reparameterisation noise all come
/// from substreams of `cfg.seed`.
inline VaeTrainResult train_vae(VaeModel& model, std::span<const nn::Tensor> images, const VaeTrainConfig& cfg,
                                std::span<const nn::Tensor> validation = {}) {
    require(!images.empty(), "train_vae: empty image set");
    require(cfg.batch >= 1 && cfg.epochs >= 1, "train_vae: batch and epochs must be >= 1");
    model.init(cfg.seed);
    auto params = model.params();
    auto adam = nn::make_adam_state(params, cfg.adam);
    VaeTrainResult result;
    result.steps_per_epoch = steps_per_epoch(images.size(), cfg.batch);
    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        Rng shuffle_rng = make_rng(cfg.seed, {0x73687566ULL, static_cast<std::uint64_t>(epoch)});
        const auto order = seeded_permutation(images.size(), shuffle_rng);
        VaeEpochStats st;
        st.epoch = epoch;
        st.min_batch_kl = std::numeric_limits<double>::infinity();
        for (std::size_t step = 0; step < result.steps_per_epoch; ++step) {
            nn::zero_grads(params);
            const std::size_t lo = step * cfg.batch, hi = std::min(images.size(), lo + cfg.batch);
            double batch_kl = 0.0;
            for (std::size_t i = lo; i < hi; ++i) {
                Rng rng = make_rng(cfg.seed, {static_cast<std::uint64_t>(epoch), static_cast<std::uint64_t>(i)});
                const auto eps = detail::draw_eps(rng);
                const auto l = model.image_loss(images[order[i]], eps, nn::Mode::Train, rng, true);
                st.loss += l.total;
                st.recon += l.recon;
                st.kl += l.kl;
                batch_kl += l.kl;
            }
            st.min_batch_kl = std::min(st.min_batch_kl, batch_kl);
            nn::adam_step(params, adam);
        }
        const auto n = static_cast<double>(images.size());
        st.loss /= n;
        st.recon /= n;
        st.kl /= n;
        if (!validation.empty())
            st.val_loss = vae_loss(model, validation, derive_seed(cfg.seed, {0x76616cULL})).total /
                          static_cast<double>(validation.size());
        result.history.push_back(st);
    }
    return result;
}

// ---------------------------------------------------------------------------
// Latent features
// ---------------------------------------------------------------------------

using LatentTable = std::map<std::int64_t, LatentPair>;

/// Posterior mean of every indexed image, eval mode.
inline LatentTable extract_features(VaeModel& model, const ImageIndex& index) {
    LatentTable out;
    for (const auto& e : index.entries) {
        const auto path = index.tensor_path(e);
        if (!std::filesystem::exists(path))
            throw MissingArtifactError("extract_features: missing image file " + path.string());
        const auto [mu, logvar] = model.encode(load_image_tensor(path));
        out[e.bin_id] = {mu[0], mu[1]};
    }
    return out;
}

inline void write_latent_table(const LatentTable& t, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << "bin_id,z1,z2\n";
    for (const auto& [id, z] : t) out << id << ',' << fmt_double(z[0]) << ',' << fmt_double(z[1]) << '\n';
}

inline LatentTable read_latent_table(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw MissingArtifactError("latent table not found: " + path.string());
    std::string line;
    std::getline(in, line);
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line != "bin_id,z1,z2") throw ParseError(path.string() + ": bad header");
    LatentTable t;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        auto f = split_csv_line(line);
        if (f.size() != 3) throw ParseError(path.string() + ": expected 3 fields");
        t[parse_int(f[0])] = {parse_double(f[1]), parse_double(f[2])};
    }
    return t;
}

inline void save_vae(VaeModel& model, const std::filesystem::path& stem) {
    nn::save_checkpoint(model.params(), stem, {{"kind", "vae"}, {"config", to_json(model.config())}});
}

inline VaeModel load_vae(const std::filesystem::path& stem) {
    std::ifstream js(stem.string() + ".json");
    if (!js) throw MissingArtifactError("VAE checkpoint not found: " + stem.string() + ".json");
    const auto manifest = nlohmann::json::parse(js, nullptr, false);
    if (manifest.is_discarded()) throw ParseError("VAE checkpoint manifest is not valid JSON");
    VaeModel model(vae_config_from_json(manifest.at("meta").at("config")));
    nn::load_checkpoint(model.params(), stem);
    return model;
}

}  // namespace covtwin
