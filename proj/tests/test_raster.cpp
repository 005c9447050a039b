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

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <iterator>

using namespace covtwin;
namespace fs = std::filesystem;

namespace {

SiteMap city(std::uint64_t seed) {
    CityGenParams gp;
    gp.bounds = {0, 0, 200, 200};
    gp.building_count = 6;
    gp.building_min_m = 15;
    gp.building_max_m = 30;
    gp.foliage_count = 3;
    gp.foliage_min_m = 15;
    gp.foliage_max_m = 30;
    return generate_synthetic_map(seed, gp);
}

std::uint32_t be32(const std::uint8_t* p) {
    return (std::uint32_t{p[0]} << 24) | (std::uint32_t{p[1]} << 16) | (std::uint32_t{p[2]} << 8) | p[3];
}

// Minimal independent PNG reader for 8-bit RGB, filter-none scanlines.
std::vector<std::uint8_t> decode_png(const std::vector<std::uint8_t>& png, int& w, int& h) {
    const std::uint8_t sig[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
    EXPECT_TRUE(std::equal(sig, sig + 8, png.begin()));
    std::vector<std::uint8_t> idat;
    std::size_t pos = 8;
    bool seen_end = false;
    while (pos + 12 <= png.size()) {
        const std::uint32_t len = be32(&png[pos]);
        const std::string type(png.begin() + static_cast<long>(pos) + 4, png.begin() + static_cast<long>(pos) + 8);
        const std::uint8_t* data = &png[pos + 8];
        const auto crc = static_cast<std::uint32_t>(crc32(0L, &png[pos + 4], len + 4));
        EXPECT_EQ(crc, be32(&png[pos + 8 + len])) << type;
        if (type == "IHDR") {
            w = static_cast<int>(be32(data));
            h = static_cast<int>(be32(data + 4));
            EXPECT_EQ(data[8], 8);
            EXPECT_EQ(data[9], 2);
        } else if (type == "IDAT") {
            idat.insert(idat.end(), data, data + len);
        } else if (type == "IEND") {
            seen_end = true;
        }
        pos += 12 + len;
    }
    EXPECT_TRUE(seen_end);
    std::vector<std::uint8_t> raw(static_cast<std::size_t>(h) * (3 * static_cast<std::size_t>(w) + 1));
    uLongf n = raw.size();
    EXPECT_EQ(uncompress(raw.data(), &n, idat.data(), static_cast<uLong>(idat.size())), Z_OK);
    std::vector<std::uint8_t> px;
    for (int r = 0; r < h; ++r) {
        const auto* row = &raw[static_cast<std::size_t>(r) * (3 * static_cast<std::size_t>(w) + 1)];
        EXPECT_EQ(row[0], 0);
        px.insert(px.end(), row + 1, row + 1 + 3 * w);
    }
    return px;
}

}  // namespace

TEST(Raster, PaletteAndShape) {
    const auto m = city(1);
    const auto cfg = RasterConfig::for_resolution(64);
    const auto img = rasterize_scene(m, m.bins[17].center, cfg, m.bins[17].id);
    ASSERT_EQ(img.pixels.size(), 3u * 64 * 64);
    EXPECT_EQ(img.bin_id, m.bins[17].id);
    const std::array<Rgb, 6> pal{cfg.background, cfg.building, cfg.foliage, cfg.bs, cfg.ue, cfg.link};
    std::array<int, 6> counts{};
    for (int r = 0; r < 64; ++r)
        for (int c = 0; c < 64; ++c) {
            const auto it = std::find(pal.begin(), pal.end(), img.pixel(r, c));
            ASSERT_NE(it, pal.end());
            ++counts[static_cast<std::size_t>(it - pal.begin())];
        }
    for (int k : counts) EXPECT_GT(k, 0);
}

TEST(Raster, MarkersAtExpectedPixels) {
    SiteMap m;
    m.bounds = {0, 0, 640, 640};
    m.bs.position = {320, 320};
    m.bins = make_bin_grid(m.bounds, 10);
    const auto cfg = RasterConfig::for_resolution(64);
    const Point2D ue{105, 535};  // pixel col 10, row 10 (north up)
    const auto img = rasterize_scene(m, ue, cfg);
    EXPECT_EQ(img.pixel(32, 32), cfg.bs);
    EXPECT_EQ(img.pixel(10, 10), cfg.ue);
    // The link runs along the diagonal between the two markers.
    EXPECT_EQ(img.pixel(21, 21), cfg.link);
    EXPECT_EQ(img.pixel(10, 50), cfg.background);
    // North is up: a UE near max_y lands in the top rows.
    const auto top = rasterize_scene(m, {320, 635}, cfg);
    EXPECT_EQ(top.pixel(0, 32), cfg.ue);
}

TEST(Raster, FillMatchesPointInPolygonAtPixelCenters) {
    for (std::uint64_t seed : {1u, 2u, 3u}) {
        const auto m = city(seed);
        const auto cfg = RasterConfig::for_resolution(64);
        const auto img = rasterize_scene(m, m.bins.front().center, cfg);
        int checked = 0;
        for (int r = 0; r < 64; ++r)
            for (int c = 0; c < 64; ++c) {
                const auto px = img.pixel(r, c);
                if (px == cfg.bs || px == cfg.ue || px == cfg.link) continue;
                const Point2D w{(c + 0.5) / 64 * 200, 200 - (r + 0.5) / 64 * 200};
                bool in_b = false, in_f = false;
                for (const auto& p : m.polygons)
                    (p.kind == SurfaceKind::Building ? in_b : in_f) |= point_in_polygon(p.vertices, w);
                const Rgb expect = in_b ? cfg.building : in_f ? cfg.foliage : cfg.background;
                EXPECT_EQ(px, expect) << "seed " << seed << " pixel " << r << "," << c;
                ++checked;
            }
        EXPECT_GT(checked, 3500);
    }
}

TEST(Raster, BuildingsPaintOverFoliage) {
    SiteMap m;
    m.bounds = {0, 0, 160, 160};
    m.bs.position = {5, 5};
    m.polygons.push_back({SurfaceKind::Building, {{60, 60}, {100, 60}, {100, 100}, {60, 100}}});
    m.polygons.push_back({SurfaceKind::Foliage, {{40, 40}, {120, 40}, {120, 120}, {40, 120}}});
    const auto cfg = RasterConfig::for_resolution(32);
    const auto img = rasterize_scene(m, {6, 6}, cfg);
    EXPECT_EQ(img.pixel(16, 16), cfg.building);
    EXPECT_EQ(img.pixel(9, 16), cfg.foliage);
}

TEST(Raster, RejectsBadInputs) {
    const auto m = city(1);
    EXPECT_THROW(rasterize_scene(m, {-1, 5}, RasterConfig::for_resolution(64)), ValidationError);
    EXPECT_THROW(rasterize_scene(m, {5, 5}, RasterConfig::for_resolution(8)), ValidationError);
    auto cfg = RasterConfig::for_resolution(64);
    cfg.ue = cfg.bs;
    EXPECT_THROW(rasterize_scene(m, {5, 5}, cfg), ValidationError);
    EXPECT_THROW(raster_config_from_json({{"bs", "black"}}), ParseError);
}

TEST(Raster, MarkerSizesScaleWithResolution) {
    EXPECT_EQ(RasterConfig::for_resolution(64).bs_radius_px, 2);
    EXPECT_EQ(RasterConfig::for_resolution(256).bs_radius_px, 8);
    const auto c = raster_config_from_json(to_json(RasterConfig::for_resolution(128)));
    EXPECT_EQ(to_json(c), to_json(RasterConfig::for_resolution(128)));
}

TEST(Raster, TensorMapping) {
    const auto m = city(4);
    const auto img = rasterize_scene(m, m.bins[40].center, RasterConfig::for_resolution(32));
    const auto t = image_to_tensor(img);
    ASSERT_EQ(t.shape, (std::vector<std::size_t>{3, 32, 32}));
    for (std::size_t r = 0; r < 32; ++r)
        for (std::size_t c = 0; c < 32; ++c)
            for (std::size_t ch = 0; ch < 3; ++ch) {
                const double v = t.at(ch, r, c);
                ASSERT_GE(v, -1.0);
                ASSERT_LE(v, 1.0);
                EXPECT_EQ(tensor_value_to_byte(v), img.pixels[3 * (r * 32 + c) + ch]);
            }
    EXPECT_EQ(tensor_value_to_byte(1.0), 255);
    EXPECT_EQ(tensor_value_to_byte(-1.0), 0);
}

TEST(Raster, PngDecodesToSamePixels) {
    const auto m = city(5);
    const auto img = rasterize_scene(m, m.bins[300].center, RasterConfig::for_resolution(64));
    int w = 0, h = 0;
    const auto px = decode_png(encode_png(img), w, h);
    EXPECT_EQ(w, 64);
    EXPECT_EQ(h, 64);
    EXPECT_EQ(px, img.pixels);
}

TEST(Raster, RenderDatasetIsDeterministicAndReloadable) {
    const auto m = city(6);
    const auto cfg = RasterConfig::for_resolution(32);
    const std::span<const Bin> bins(m.bins.data(), 12);
    const auto a = fs::temp_directory_path() / "covtwin_render_a";
    const auto b = fs::temp_directory_path() / "covtwin_render_b";
    fs::remove_all(a);
    fs::remove_all(b);
    render_dataset(m, bins, cfg, a);
    render_dataset(m, bins, cfg, b);
    auto slurp = [](const fs::path& p) {
        std::ifstream in(p, std::ios::binary);
        return std::vector<char>(std::istreambuf_iterator<char>(in), {});
    };
    const auto idx = read_image_index(a);
    ASSERT_EQ(idx.entries.size(), 12u);
    EXPECT_EQ(slurp(a / "index.csv"), slurp(b / "index.csv"));
    for (const auto& e : idx.entries) {
        EXPECT_EQ(slurp(a / e.png), slurp(b / e.png));
        EXPECT_EQ(slurp(a / e.tensor), slurp(b / e.tensor));
        const auto img = rasterize_scene(m, m.bin(e.bin_id).center, cfg, e.bin_id);
        EXPECT_EQ(load_image_tensor(idx.tensor_path(e)).data, image_to_tensor(img).data);
    }
    EXPECT_THROW(read_image_index(fs::temp_directory_path() / "covtwin_nope"), MissingArtifactError);
    EXPECT_THROW(read_tensor_dump(a / "nope.f32"), MissingArtifactError);
    fs::remove_all(a);
    fs::remove_all(b);
}

TEST(Raster, ImagesDifferAcrossBins) {
    const auto m = city(7);
    const auto cfg = RasterConfig::for_resolution(64);
    const auto a = rasterize_scene(m, m.bins[0].center, cfg);
    const auto b = rasterize_scene(m, m.bins[399].center, cfg);
    EXPECT_NE(a.pixels, b.pixels);
}
