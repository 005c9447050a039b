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

#include "covtwin/raster.hpp"
#include "covtwin/scenario.hpp"
#include "covtwin/vae.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

using namespace covtwin;
namespace fs = std::filesystem;

namespace {

VaeConfig small_config(int res = 16) {
    VaeConfig c;
    c.resolution = res;
    c.stem_channels = 2;
    c.mid_channels = 4;
    c.hidden = 8;
    return c;
}

SiteMap small_city() {
    CityGenParams gp;
    gp.bounds = {0, 0, 100, 100};
    gp.building_count = 3;
    gp.building_min_m = 10;
    gp.building_max_m = 20;
    gp.foliage_count = 1;
    gp.foliage_min_m = 10;
    gp.foliage_max_m = 20;
    return generate_synthetic_map(8, gp);
}

std::vector<nn::Tensor> images(const SiteMap& m, int res, std::size_t n) {
    std::vector<nn::Tensor> out;
    for (std::size_t i = 0; i < n; ++i)
        out.push_back(image_to_tensor(rasterize_scene(m, m.bins[i * 7 % m.bins.size()].center,
                                                      RasterConfig::for_resolution(res))));
    return out;
}

}  // namespace

TEST(Vae, ReparameterizeHandValues) {
    const auto z = reparameterize({0, 0}, {0, 0}, {1, -1});
    EXPECT_EQ(z[0], 1.0);
    EXPECT_EQ(z[1], -1.0);
    const auto w = reparameterize({1, -2}, {std::log(4.0), std::log(0.25)}, {0.5, 2});
    EXPECT_NEAR(w[0], 2.0, 1e-15);
    EXPECT_NEAR(w[1], -1.0, 1e-15);
}

TEST(Vae, ShapesAndRanges) {
    for (int res : {16, 32, 64}) {
        VaeModel m(small_config(res));
        m.init(1);
        Rng rng = make_rng(1, {});
        const auto ru = static_cast<std::size_t>(res);
        auto x = covtwin::nn::Tensor({3, ru, ru});
        for (auto& v : x.data) v = uniform(rng, -1, 1);
        const auto [mu, lv] = m.encode(x);
        EXPECT_EQ(mu.shape, (nn::Shape{2}));
        EXPECT_EQ(lv.shape, (nn::Shape{2}));
        const auto xhat = m.decode(mu);
        EXPECT_EQ(xhat.shape, (nn::Shape{3, ru, ru}));
        for (double v : xhat.data) {
            ASSERT_GE(v, -1.0);
            ASSERT_LE(v, 1.0);
        }
    }
    VaeModel m(small_config(16));
    EXPECT_THROW(m.encode(nn::Tensor({3, 32, 32})), ShapeError);
    EXPECT_THROW(m.decode(nn::Tensor({3})), ShapeError);
    EXPECT_THROW(VaeModel(small_config(20)), ValidationError);
    EXPECT_THROW(VaeModel(small_config(8)), ValidationError);
}

TEST(Vae, LossDecomposesAndIsDeterministic) {
    const auto city = small_city();
    const auto imgs = images(city, 16, 6);
    VaeModel m(small_config());
    m.init(2);
    const auto a = vae_loss(m, imgs, 11);
    const auto b = vae_loss(m, imgs, 11);
    EXPECT_EQ(a.total, b.total);
    EXPECT_NEAR(a.total, a.recon + a.kl, 1e-9 * std::abs(a.total));
    EXPECT_GE(a.kl, 0.0);
    EXPECT_GT(a.recon, 0.0);
    // Eval-mode encoding ignores the rng entirely.
    const auto [mu1, lv1] = m.encode(imgs[0]);
    const auto [mu2, lv2] = m.encode(imgs[0]);
    EXPECT_EQ(mu1.data, mu2.data);
    EXPECT_EQ(lv1.data, lv2.data);
    EXPECT_THROW(vae_loss(m, {}, 0), ValidationError);
}

TEST(Vae, KlNonNegativeOverRandomPosteriors) {
    Rng rng = make_rng(3, {});
    const auto city = small_city();
    const auto imgs = images(city, 16, 10);
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        VaeModel m(small_config());
        m.init(seed);
        for (auto* p : m.params())
            for (auto& v : p->value.data) v *= uniform(rng, 0.5, 3.0);
        EXPECT_GE(vae_loss(m, imgs, seed).kl, 0.0);
    }
}

TEST(Vae, StepsPerEpoch) {
    EXPECT_EQ(steps_per_epoch(2000, 50), 40u);
    EXPECT_EQ(steps_per_epoch(10, 3), 4u);
    EXPECT_EQ(steps_per_epoch(1, 50), 1u);
}

TEST(Vae, TrainingReducesLossDeterministically) {
    const auto city = small_city();
    const auto imgs = images(city, 16, 24);
    VaeTrainConfig tc;
    tc.epochs = 12;
    tc.batch = 6;
    tc.seed = 5;
    tc.adam.lr = 3e-3;
    VaeModel a(small_config()), b(small_config());
    const auto ha = train_vae(a, imgs, tc, std::span<const nn::Tensor>(imgs.data(), 4));
    const auto hb = train_vae(b, imgs, tc, std::span<const nn::Tensor>(imgs.data(), 4));
    ASSERT_EQ(ha.history.size(), 12u);
    EXPECT_EQ(ha.steps_per_epoch, 4u);
    for (std::size_t e = 0; e < 12; ++e) {
        EXPECT_EQ(ha.history[e].loss, hb.history[e].loss);
        EXPECT_GE(ha.history[e].min_batch_kl, 0.0);
        EXPECT_FALSE(std::isnan(ha.history[e].val_loss));
    }
    EXPECT_LT(ha.history.back().loss, 0.5 * ha.history.front().loss);
    EXPECT_EQ(a.encode(imgs[3]).first.data, b.encode(imgs[3]).first.data);
}

TEST(Vae, CheckpointRoundTrip) {
    VaeModel m(small_config(32));
    m.init(9);
    const auto stem = fs::temp_directory_path() / "covtwin_vae";
    save_vae(m, stem);
    auto back = load_vae(stem);
    EXPECT_EQ(to_json(back.config()), to_json(m.config()));
    const auto city = small_city();
    const auto x = images(city, 32, 1)[0];
    EXPECT_EQ(back.encode(x).first.data, m.encode(x).first.data);
    EXPECT_THROW(load_vae(stem.string() + "_missing"), MissingArtifactError);
}

TEST(Vae, LatentExtractionAndTableRoundTrip) {
    const auto city = small_city();
    const auto dir = fs::temp_directory_path() / "covtwin_vae_imgs";
    fs::remove_all(dir);
    const auto idx = render_dataset(city, std::span<const Bin>(city.bins.data(), 9), RasterConfig::for_resolution(16), dir);
    VaeModel m(small_config());
    m.init(4);
    const auto t = extract_features(m, idx);
    ASSERT_EQ(t.size(), 9u);
    for (const auto& e : idx.entries) {
        const auto [mu, lv] = m.encode(load_image_tensor(idx.tensor_path(e)));
        EXPECT_EQ(t.at(e.bin_id)[0], mu[0]);
        EXPECT_EQ(t.at(e.bin_id)[1], mu[1]);
    }
    const auto csv = dir / "latents.csv";
    write_latent_table(t, csv);
    EXPECT_EQ(read_latent_table(csv), t);  // shortest round-trip formatting is exact
    EXPECT_THROW(read_latent_table(dir / "none.csv"), MissingArtifactError);
    fs::remove(dir / idx.entries[2].tensor);
    EXPECT_THROW(extract_features(m, idx), MissingArtifactError);
    fs::remove_all(dir);
}
