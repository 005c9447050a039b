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
 * Top-view association images.
 *
 * The map bounds are mapped affinely onto a res x res pixel square with
 * north up. Layers are painted in order: background, foliage, buildings,
 * BS-UE link, BS disc, UE triangle. Polygons use an even-odd scanline fill
 * sampled at pixel centers; nothing is anti-aliased.
 */

#pragma once

#include "covtwin/error.hpp"
#include "covtwin/format.hpp"
#include "covtwin/geo.hpp"
#include "covtwin/nn/tensor.hpp"

#include <json.hpp>
#include <zlib.h>

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

namespace covtwin {

using Rgb = std::array<std::uint8_t, 3>;

struct RasterConfig {
    int resolution = 64;
    Rgb background{255, 255, 255};
    Rgb building{255, 0, 0};
    Rgb foliage{0, 255, 0};
    Rgb bs{0, 0, 0};
    Rgb ue{0, 0, 255};
    Rgb link{135, 206, 250};
    int bs_radius_px = 2;
    int ue_halfsize_px = 2;
    int line_thickness_px = 1;

    /// Marker sizes proportional to the image side (2 px at 64, 8 px at 256).
    static RasterConfig for_resolution(int res) {
        RasterConfig c;
        c.resolution = res;
        c.bs_radius_px = std::max(1, res / 32);
        c.ue_halfsize_px = std::max(1, res / 32);
        c.line_thickness_px = std::max(1, res / 64);
        return c;
    }
};

inline void validate(const RasterConfig& c) {
    require(c.resolution >= 16, "raster: resolution must be >= 16");
    const std::array<Rgb, 6> colors{c.background, c.building, c.foliage, c.bs, c.ue, c.link};
    for (std::size_t i = 0; i < colors.size(); ++i)
        for (std::size_t j = i + 1; j < colors.size(); ++j)
            require(colors[i] != colors[j], "raster: element colors must be pairwise distinct");
    require(c.bs_radius_px >= 1 && c.ue_halfsize_px >= 1 && c.line_thickness_px >= 1,
            "raster: marker sizes must be >= 1 px");
}

inline nlohmann::json to_json(const RasterConfig& c) {
    return {{"resolution", c.resolution}, {"background", c.background}, {"building", c.building},
            {"foliage", c.foliage},       {"bs", c.bs},                 {"ue", c.ue},
            {"link", c.link},             {"bs_radius_px", c.bs_radius_px},
            {"ue_halfsize_px", c.ue_halfsize_px}, {"line_thickness_px", c.line_thickness_px}};
}

inline RasterConfig raster_config_from_json(const nlohmann::json& j) {
    RasterConfig c = RasterConfig::for_resolution(j.value("resolution", 64));
    try {
        auto color = [&](const char* key, Rgb& dst) {
            if (j.contains(key)) dst = j.at(key).get<Rgb>();
        };
        color("background", c.background);
        color("building", c.building);
        color("foliage", c.foliage);
        color("bs", c.bs);
        color("ue", c.ue);
        color("link", c.link);
        c.bs_radius_px = j.value("bs_radius_px", c.bs_radius_px);
        c.ue_halfsize_px = j.value("ue_halfsize_px", c.ue_halfsize_px);
        c.line_thickness_px = j.value("line_thickness_px", c.line_thickness_px);
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("raster config: ") + e.what());
    }
    validate(c);
    return c;
}

struct AssociationImage {
    int resolution = 0;
    std::vector<std::uint8_t> pixels;  // row-major RGB, row 0 is the northern edge
    std::int64_t bin_id = -1;
    Point2D bs;
    Point2D ue;

    Rgb pixel(int row, int col) const {
        const auto i = 3 * (static_cast<std::size_t>(row) * static_cast<std::size_t>(resolution) +
                            static_cast<std::size_t>(col));
        return {pixels[i], pixels[i + 1], pixels[i + 2]};
    }
};

/// Continuous pixel coordinates (col, row) of a world point.
struct PixelPoint {
    double col = 0.0;
    double row = 0.0;
};

inline PixelPoint world_to_pixel(const Rect& b, int res, Point2D p) {
    return {(p.x - b.min_x) / b.width() * res, (b.max_y - p.y) / b.height() * res};
}

/// Index of the pixel containing a world point, clamped onto the image.
inline std::array<int, 2> pixel_of(const Rect& b, int res, Point2D p) {
    const auto q = world_to_pixel(b, res, p);
    return {std::clamp(static_cast<int>(std::floor(q.row)), 0, res - 1),
            std::clamp(static_cast<int>(std::floor(q.col)), 0, res - 1)};
}

namespace detail {

class Canvas {
public:
    Canvas(int res, Rgb bg) : res_(res), px_(3 * static_cast<std::size_t>(res) * static_cast<std::size_t>(res)) {
        for (std::size_t i = 0; i < px_.size(); i += 3) std::copy(bg.begin(), bg.end(), px_.begin() + static_cast<std::ptrdiff_t>(i));
    }

    void set(int row, int col, Rgb c) {
        if (row < 0 || col < 0 || row >= res_ || col >= res_) return;
        const auto i = 3 * (static_cast<std::size_t>(row) * static_cast<std::size_t>(res_) + static_cast<std::size_t>(col));
        px_[i] = c[0];
        px_[i + 1] = c[1];
        px_[i + 2] = c[2];
    }

    // Even-odd scanline fill: pixel (r, c) is painted iff its center lies
    // inside the polygon under the half-open crossing rule.
    void fill_polygon(const std::vector<PixelPoint>& v, Rgb color) {
        std::vector<double> xs;
        for (int r = 0; r < res_; ++r) {
            const double y = r + 0.5;
            xs.clear();
            for (std::size_t i = 0, n = v.size(), j = n - 1; i < n; j = i++) {
                if ((v[i].row > y) != (v[j].row > y))
                    xs.push_back((v[j].col - v[i].col) * (y - v[i].row) / (v[j].row - v[i].row) + v[i].col);
            }
            std::sort(xs.begin(), xs.end());
            for (std::size_t k = 0; k + 1 < xs.size(); k += 2) {
                // centers c + 0.5 in [x0, x1)
                const int c0 = std::max(0, static_cast<int>(std::ceil(xs[k] - 0.5)));
                const int c1 = std::min(res_, static_cast<int>(std::ceil(xs[k + 1] - 0.5)));
                for (int c = c0; c < c1; ++c) set(r, c, color);
            }
        }
    }

    void stamp(int row, int col, int size, Rgb color) {
        const int lo = -(size - 1) / 2, hi = size / 2;
        for (int dr = lo; dr <= hi; ++dr)
            for (int dc = lo; dc <= hi; ++dc) set(row + dr, col + dc, color);
    }

    void line(std::array<int, 2> a, std::array<int, 2> b, int thickness, Rgb color) {
        int r0 = a[0], c0 = a[1];
        const int r1 = b[0], c1 = b[1];
        const int dc = std::abs(c1 - c0), sc = c0 < c1 ? 1 : -1;
        const int dr = -std::abs(r1 - r0), sr = r0 < r1 ? 1 : -1;
        int err = dc + dr;
        for (;;) {
            stamp(r0, c0, thickness, color);
            if (r0 == r1 && c0 == c1) break;
            const int e2 = 2 * err;
            if (e2 >= dr) { err += dr; c0 += sc; }
            if (e2 <= dc) { err += dc; r0 += sr; }
        }
    }

    void disc(PixelPoint center, int radius, Rgb color) {
        const int r_lo = static_cast<int>(std::floor(center.row - radius)), r_hi = static_cast<int>(std::ceil(center.row + radius));
        const int c_lo = static_cast<int>(std::floor(center.col - radius)), c_hi = static_cast<int>(std::ceil(center.col + radius));
        for (int r = r_lo; r <= r_hi; ++r)
            for (int c = c_lo; c <= c_hi; ++c) {
                const double dy = r + 0.5 - center.row, dx = c + 0.5 - center.col;
                if (dx * dx + dy * dy <= static_cast<double>(radius) * radius) set(r, c, color);
            }
    }

    std::vector<std::uint8_t> take() && { return std::move(px_); }

private:
    int res_;
    std::vector<std::uint8_t> px_;
};

}  // namespace detail

inline AssociationImage rasterize_scene(const SiteMap& map, Point2D ue, const RasterConfig& cfg,
                                        std::int64_t bin_id = -1) {
    validate(cfg);
    if (!map.bounds.contains(ue)) throw ValidationError("rasterize_scene: UE outside map bounds");
    const int res = cfg.resolution;
    detail::Canvas canvas(res, cfg.background);
    auto to_px = [&](const std::vector<Point2D>& v) {
        std::vector<PixelPoint> out;
        out.reserve(v.size());
        for (const auto& p : v) out.push_back(world_to_pixel(map.bounds, res, p));
        return out;
    };
    for (const auto& poly : map.polygons)
        if (poly.kind == SurfaceKind::Foliage) canvas.fill_polygon(to_px(poly.vertices), cfg.foliage);
    for (const auto& poly : map.polygons)
        if (poly.kind == SurfaceKind::Building) canvas.fill_polygon(to_px(poly.vertices), cfg.building);

    const auto bs_px = pixel_of(map.bounds, res, map.bs.position);
    const auto ue_px = pixel_of(map.bounds, res, ue);
    canvas.line(bs_px, ue_px, cfg.line_thickness_px, cfg.link);

    canvas.disc(world_to_pixel(map.bounds, res, map.bs.position), cfg.bs_radius_px, cfg.bs);
    canvas.set(bs_px[0], bs_px[1], cfg.bs);

    // Upward triangle centered on the UE; the centroid pixel is always painted.
    const auto u = world_to_pixel(map.bounds, res, ue);
    const double h = cfg.ue_halfsize_px;
    canvas.fill_polygon({{u.col, u.row - h}, {u.col + h, u.row + h}, {u.col - h, u.row + h}}, cfg.ue);
    const PixelPoint centroid{u.col, u.row + h / 3.0};
    canvas.set(std::clamp(static_cast<int>(std::floor(centroid.row)), 0, res - 1),
               std::clamp(static_cast<int>(std::floor(centroid.col)), 0, res - 1), cfg.ue);

    return {res, std::move(canvas).take(), bin_id, map.bs.position, ue};
}

/// Channel-first 3 x res x res tensor with v -> v / 127.5 - 1.
inline nn::Tensor image_to_tensor(const AssociationImage& img) {
    const auto res = static_cast<std::size_t>(img.resolution);
    require_shape(img.pixels.size() == 3 * res * res, "image_to_tensor: pixel buffer size");
    nn::Tensor t({3, res, res});
    for (std::size_t r = 0; r < res; ++r)
        for (std::size_t c = 0; c < res; ++c)
            for (std::size_t ch = 0; ch < 3; ++ch)
                t.at(ch, r, c) = img.pixels[3 * (r * res + c) + ch] / 127.5 - 1.0;
    return t;
}

inline std::uint8_t tensor_value_to_byte(double v) {
    return static_cast<std::uint8_t>(std::clamp(std::lround((v + 1.0) * 127.5), 0L, 255L));
}

// ---------------------------------------------------------------------------
// Files: PNG, raw tensor dumps, image index
// ---------------------------------------------------------------------------

inline std::vector<std::uint8_t> encode_png(const AssociationImage& img) {
    const auto res = static_cast<std::uint32_t>(img.resolution);
    std::vector<std::uint8_t> raw;
    raw.reserve((3 * res + 1) * res);
    for (std::uint32_t r = 0; r < res; ++r) {
        raw.push_back(0);  // filter: none
        const auto* row = &img.pixels[3 * r * res];
        raw.insert(raw.end(), row, row + 3 * res);
    }
    uLongf zlen = compressBound(static_cast<uLong>(raw.size()));
    std::vector<std::uint8_t> z(zlen);
    if (compress2(z.data(), &zlen, raw.data(), static_cast<uLong>(raw.size()), 9) != Z_OK)
        throw std::runtime_error("png: deflate failed");
    z.resize(zlen);

    std::vector<std::uint8_t> out{0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
    auto put32 = [&](std::uint32_t v) {
        for (int s = 24; s >= 0; s -= 8) out.push_back(static_cast<std::uint8_t>(v >> s));
    };
    auto chunk = [&](const char* type, const std::vector<std::uint8_t>& data) {
        put32(static_cast<std::uint32_t>(data.size()));
        const std::size_t start = out.size();
        out.insert(out.end(), type, type + 4);
        out.insert(out.end(), data.begin(), data.end());
        const auto crc = crc32(0L, out.data() + start, static_cast<uInt>(out.size() - start));
        put32(static_cast<std::uint32_t>(crc));
    };
    std::vector<std::uint8_t> ihdr;
    for (int s = 24; s >= 0; s -= 8) ihdr.push_back(static_cast<std::uint8_t>(res >> s));
    for (int s = 24; s >= 0; s -= 8) ihdr.push_back(static_cast<std::uint8_t>(res >> s));
    ihdr.insert(ihdr.end(), {8, 2, 0, 0, 0});  // 8-bit RGB, deflate, no filter, no interlace
    chunk("IHDR", ihdr);
    chunk("IDAT", z);
    chunk("IEND", {});
    return out;
}

static_assert(std::endian::native == std::endian::little, "tensor dumps assume a little-endian host");

/// Raw dump: ASCII header "C H W\n" followed by little-endian float32 values.
inline void write_tensor_dump(const nn::Tensor& t, const std::filesystem::path& path) {
    require_shape(t.rank() == 3, "tensor dump: expected rank-3 tensor");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << t.dim(0) << ' ' << t.dim(1) << ' ' << t.dim(2) << '\n';
    std::vector<float> f(t.data.begin(), t.data.end());
    out.write(reinterpret_cast<const char*>(f.data()), static_cast<std::streamsize>(f.size() * sizeof(float)));
}

inline nn::Tensor read_tensor_dump(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw MissingArtifactError("image tensor not found: " + path.string());
    std::size_t c = 0, h = 0, w = 0;
    std::string header;
    std::getline(in, header);
    if (std::sscanf(header.c_str(), "%zu %zu %zu", &c, &h, &w) != 3)
        throw ParseError(path.string() + ": bad tensor header");
    std::vector<float> f(c * h * w);
    in.read(reinterpret_cast<char*>(f.data()), static_cast<std::streamsize>(f.size() * sizeof(float)));
    if (!in) throw ParseError(path.string() + ": truncated tensor data");
    return nn::Tensor({c, h, w}, std::vector<double>(f.begin(), f.end()));
}

/// Reads an image dump and snaps every value back onto the 256-level grid,
/// so the result equals image_to_tensor of the original pixels exactly.
inline nn::Tensor load_image_tensor(const std::filesystem::path& path) {
    nn::Tensor t = read_tensor_dump(path);
    for (auto& v : t.data) v = tensor_value_to_byte(v) / 127.5 - 1.0;
    return t;
}

struct ImageIndexEntry {
    std::int64_t bin_id = 0;
    std::filesystem::path png;     // relative to the index directory
    std::filesystem::path tensor;  // same stem, .f32
};

struct ImageIndex {
    std::filesystem::path dir;
    std::vector<ImageIndexEntry> entries;

    std::filesystem::path tensor_path(const ImageIndexEntry& e) const { return dir / e.tensor; }
};

inline void write_image_index(const ImageIndex& idx) {
    std::ofstream out(idx.dir / "index.csv", std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + (idx.dir / "index.csv").string());
    out << "bin_id,path\n";
    for (const auto& e : idx.entries) out << e.bin_id << ',' << e.png.generic_string() << '\n';
}

inline ImageIndex read_image_index(const std::filesystem::path& dir) {
    std::ifstream in(dir / "index.csv", std::ios::binary);
    if (!in) throw MissingArtifactError("image index not found: " + (dir / "index.csv").string());
    ImageIndex idx{dir, {}};
    std::string line;
    std::getline(in, line);
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line != "bin_id,path") throw ParseError((dir / "index.csv").string() + ": bad header");
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        auto f = split_csv_line(line);
        if (f.size() != 2) throw ParseError((dir / "index.csv").string() + ": expected 2 fields");
        std::filesystem::path png{std::string(f[1])};
        auto tensor = png;
        tensor.replace_extension(".f32");
        idx.entries.push_back({parse_int(f[0]), png, tensor});
    }
    return idx;
}

/// One image per bin with the UE at the bin center. Writes bin_<id>.png,
/// bin_<id>.f32 and index.csv into out_dir; output bytes depend only on
/// (map, bins, cfg).
inline ImageIndex render_dataset(const SiteMap& map, std::span<const Bin> bins, const RasterConfig& cfg,
                                 const std::filesystem::path& out_dir) {
    require(!bins.empty(), "render_dataset: no bins");
    std::error_code ec;
    std::filesystem::create_directories(out_dir, ec);
    if (ec || !std::filesystem::is_directory(out_dir))
        throw std::runtime_error("render_dataset: cannot create " + out_dir.string());
    ImageIndex idx{out_dir, {}};
    for (const auto& bin : bins) {
        const auto img = rasterize_scene(map, bin.center, cfg, bin.id);
        const std::string stem = "bin_" + std::to_string(bin.id);
        const auto png = encode_png(img);
        std::ofstream out(out_dir / (stem + ".png"), std::ios::binary);
        if (!out) throw std::runtime_error("render_dataset: cannot write into " + out_dir.string());
        out.write(reinterpret_cast<const char*>(png.data()), static_cast<std::streamsize>(png.size()));
        write_tensor_dump(image_to_tensor(img), out_dir / (stem + ".f32"));
        idx.entries.push_back({bin.id, stem + ".png", stem + ".f32"});
    }
    write_image_index(idx);
    return idx;
}

}  // namespace covtwin
