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

#include "covtwin/error.hpp"
#include "covtwin/geo.hpp"
#include "covtwin/rng.hpp"

#include <json.hpp>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <utility>

namespace covtwin {

// ---------------------------------------------------------------------------
// Scenario JSON
// ---------------------------------------------------------------------------

inline nlohmann::json scenario_to_json(const SiteMap& m) {
    nlohmann::json j;
    j["bounds"] = {{"min_x", m.bounds.min_x},
                   {"min_y", m.bounds.min_y},
                   {"max_x", m.bounds.max_x},
                   {"max_y", m.bounds.max_y}};
    auto polys = nlohmann::json::array();
    for (const auto& p : m.polygons) {
        auto verts = nlohmann::json::array();
        for (const auto& v : p.vertices) verts.push_back({v.x, v.y});
        polys.push_back({{"kind", to_string(p.kind)}, {"vertices", verts}});
    }
    j["polygons"] = polys;
    j["bs"] = {{"x", m.bs.position.x},
               {"y", m.bs.position.y},
               {"azimuths", m.bs.sector_azimuths_deg},
               {"label", m.bs.tx_label}};
    j["bin_extent_m"] = m.bin_extent;
    return j;
}

/// Builds and validates a SiteMap from parsed scenario JSON. Structural
/// problems raise ParseError, geometric ones ValidationError.
inline SiteMap scenario_from_json(const nlohmann::json& j) {
    SiteMap m;
    try {
        const auto& b = j.at("bounds");
        m.bounds = {b.at("min_x").get<double>(), b.at("min_y").get<double>(),
                    b.at("max_x").get<double>(), b.at("max_y").get<double>()};
        if (j.contains("polygons")) {
            for (const auto& p : j.at("polygons")) {
                SurfacePolygon poly;
                poly.kind = surface_kind_from_string(p.at("kind").get<std::string>());
                for (const auto& v : p.at("vertices")) {
                    if (!v.is_array() || v.size() != 2)
                        throw ParseError("scenario: vertex must be an [x, y] pair");
                    poly.vertices.push_back({v[0].get<double>(), v[1].get<double>()});
                }
                m.polygons.push_back(std::move(poly));
            }
        }
        const auto& bs = j.at("bs");
        m.bs.position = {bs.at("x").get<double>(), bs.at("y").get<double>()};
        const auto& az = bs.at("azimuths");
        if (!az.is_array() || az.size() != 3)
            throw ParseError("scenario: bs.azimuths must hold exactly 3 angles");
        for (int i = 0; i < 3; ++i) m.bs.sector_azimuths_deg[i] = az[i].get<double>();
        if (bs.contains("label")) m.bs.tx_label = bs.at("label").get<std::string>();
        m.bin_extent = j.value("bin_extent_m", 10.0);
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("scenario: ") + e.what());
    }
    m.bins = make_bin_grid(m.bounds, m.bin_extent);
    validate_site_map(m);
    return m;
}

inline SiteMap load_scenario(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw MissingArtifactError("scenario file not found: " + path.string());
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw ParseError("scenario " + path.string() + ": " + e.what());
    }
    return scenario_from_json(j);
}

inline void save_scenario(const SiteMap& m, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << scenario_to_json(m).dump(2) << '\n';
}

// ---------------------------------------------------------------------------
// Procedural city generator
// ---------------------------------------------------------------------------

struct CityGenParams {
    Rect bounds{0.0, 0.0, 500.0, 500.0};
    int building_count = 20;
    double building_min_m = 15.0;
    double building_max_m = 50.0;
    int foliage_count = 5;
    double foliage_min_m = 15.0;
    double foliage_max_m = 40.0;
    double bin_extent = 10.0;
    std::optional<Point2D> bs_position;  // defaults to the bounds center
    double bs_clearance_m = 10.0;
    double azimuth_offset_deg = 0.0;
    int max_retries = 1000;
};

inline nlohmann::json to_json(const CityGenParams& p) {
    nlohmann::json j{{"bounds", {{"min_x", p.bounds.min_x}, {"min_y", p.bounds.min_y},
                                 {"max_x", p.bounds.max_x}, {"max_y", p.bounds.max_y}}},
                     {"building_count", p.building_count},
                     {"building_min_m", p.building_min_m},
                     {"building_max_m", p.building_max_m},
                     {"foliage_count", p.foliage_count},
                     {"foliage_min_m", p.foliage_min_m},
                     {"foliage_max_m", p.foliage_max_m},
                     {"bin_extent_m", p.bin_extent},
                     {"bs_clearance_m", p.bs_clearance_m},
                     {"azimuth_offset_deg", p.azimuth_offset_deg},
                     {"max_retries", p.max_retries}};
    if (p.bs_position) j["bs_position"] = {p.bs_position->x, p.bs_position->y};
    return j;
}

inline CityGenParams city_gen_params_from_json(const nlohmann::json& j) {
    CityGenParams p;
    try {
        if (j.contains("bounds")) {
            const auto& b = j.at("bounds");
            p.bounds = {b.at("min_x").get<double>(), b.at("min_y").get<double>(),
                        b.at("max_x").get<double>(), b.at("max_y").get<double>()};
        }
        p.building_count = j.value("building_count", p.building_count);
        p.building_min_m = j.value("building_min_m", p.building_min_m);
        p.building_max_m = j.value("building_max_m", p.building_max_m);
        p.foliage_count = j.value("foliage_count", p.foliage_count);
        p.foliage_min_m = j.value("foliage_min_m", p.foliage_min_m);
        p.foliage_max_m = j.value("foliage_max_m", p.foliage_max_m);
        p.bin_extent = j.value("bin_extent_m", p.bin_extent);
        p.bs_clearance_m = j.value("bs_clearance_m", p.bs_clearance_m);
        p.azimuth_offset_deg = j.value("azimuth_offset_deg", p.azimuth_offset_deg);
        p.max_retries = j.value("max_retries", p.max_retries);
        if (j.contains("bs_position")) {
            const auto& v = j.at("bs_position");
            p.bs_position = Point2D{v.at(0).get<double>(), v.at(1).get<double>()};
        }
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("generator params: ") + e.what());
    }
    return p;
}

namespace detail {

inline double distance_to_segment(Point2D p, Point2D a, Point2D b) {
    const Point2D d = b - a;
    const double dd = d.x * d.x + d.y * d.y;
    double t = dd > 0.0 ? ((p.x - a.x) * d.x + (p.y - a.y) * d.y) / dd : 0.0;
    t = std::clamp(t, 0.0, 1.0);
    return distance(p, a + t * d);
}

inline std::vector<Point2D> random_building(Rng& rng, const CityGenParams& p) {
    const Point2D c{uniform(rng, p.bounds.min_x, p.bounds.max_x),
                    uniform(rng, p.bounds.min_y, p.bounds.max_y)};
    const double w = uniform(rng, p.building_min_m, p.building_max_m);
    const double h = uniform(rng, p.building_min_m, p.building_max_m);
    const double theta = uniform(rng, 0.0, 0.5 * 3.14159265358979323846);
    const double cs = std::cos(theta), sn = std::sin(theta);
    std::vector<Point2D> v;
    constexpr std::array<std::pair<int, int>, 4> corners{{{-1, -1}, {1, -1}, {1, 1}, {-1, 1}}};
    for (auto [sx, sy] : corners) {
        const double lx = 0.5 * w * sx, ly = 0.5 * h * sy;
        v.push_back({c.x + cs * lx - sn * ly, c.y + sn * lx + cs * ly});
    }
    return v;
}

// Star-shaped blob around a center: sorted angles keep it simple.
inline std::vector<Point2D> random_foliage(Rng& rng, const CityGenParams& p) {
    const Point2D c{uniform(rng, p.bounds.min_x, p.bounds.max_x),
                    uniform(rng, p.bounds.min_y, p.bounds.max_y)};
    const double radius = 0.5 * uniform(rng, p.foliage_min_m, p.foliage_max_m);
    const int n = 6 + static_cast<int>(uniform01(rng) * 3.0);
    std::vector<Point2D> v;
    const double step = 2.0 * 3.14159265358979323846 / n;
    for (int i = 0; i < n; ++i) {
        const double a = (i + uniform(rng, 0.1, 0.9)) * step;
        const double r = radius * uniform(rng, 0.6, 1.0);
        v.push_back({c.x + r * std::cos(a), c.y + r * std::sin(a)});
    }
    return v;
}

inline bool placement_ok(const std::vector<Point2D>& cand, const SiteMap& m, double clearance) {
    for (const auto& v : cand)
        if (!m.bounds.contains(v)) return false;
    if (point_in_polygon(cand, m.bs.position)) return false;
    for (std::size_t i = 0; i < cand.size(); ++i)
        if (distance_to_segment(m.bs.position, cand[i], cand[(i + 1) % cand.size()]) < clearance)
            return false;
    for (const auto& other : m.polygons)
        if (polygons_overlap(cand, other.vertices)) return false;
    return true;
}

}  // namespace detail

inline void validate_city_gen_params(const CityGenParams& p) {
    const auto& b = p.bounds;
    require(b.min_x < b.max_x && b.min_y < b.max_y, "generator: bounds min must be below max");
    require(p.building_count >= 0 && p.foliage_count >= 0, "generator: counts must be >= 0");
    require(p.building_min_m > 0.0 && p.building_min_m <= p.building_max_m,
            "generator: building size range invalid");
    require(p.foliage_min_m > 0.0 && p.foliage_min_m <= p.foliage_max_m,
            "generator: foliage size range invalid");
    require(p.bin_extent > 0.0, "generator: bin_extent_m must be positive");
    require(p.max_retries >= 1, "generator: max_retries must be >= 1");
}

/// Deterministic synthetic map: a pure function of (seed, params). Buildings
/// are rotated rectangles, foliage star-shaped blobs; every polygon is kept
/// clear of the base station and of every other polygon by rejection
/// sampling with a bounded retry count.
inline SiteMap generate_synthetic_map(std::uint64_t seed, const CityGenParams& p) {
    validate_city_gen_params(p);
    SiteMap m;
    m.bounds = p.bounds;
    m.bin_extent = p.bin_extent;
    m.bs.position = p.bs_position.value_or(p.bounds.center());
    double off = std::fmod(p.azimuth_offset_deg, 120.0);
    if (off < 0.0) off += 120.0;
    m.bs.sector_azimuths_deg = {off, off + 120.0, off + 240.0};
    m.bins = make_bin_grid(p.bounds, p.bin_extent);
    require(p.bounds.contains(m.bs.position), "generator: bs position outside bounds");
    for (const auto& bin : m.bins)
        require(!(bin.center == m.bs.position),
                "generator: bs position coincides with the center of bin " + std::to_string(bin.id));

    Rng rng = make_rng(seed, {0x6369747967656eULL});
    auto place = [&](SurfaceKind kind, int count) {
        for (int k = 0; k < count; ++k) {
            bool placed = false;
            for (int attempt = 0; attempt < p.max_retries && !placed; ++attempt) {
                auto cand = kind == SurfaceKind::Building ? detail::random_building(rng, p)
                                                          : detail::random_foliage(rng, p);
                if (detail::placement_ok(cand, m, p.bs_clearance_m)) {
                    m.polygons.push_back({kind, std::move(cand)});
                    placed = true;
                }
            }
            if (!placed)
                throw InfeasibleError("generator: could not place " + to_string(kind) + " " +
                                      std::to_string(k + 1) + " of " + std::to_string(count) +
                                      " after " + std::to_string(p.max_retries) + " attempts");
        }
    };
    place(SurfaceKind::Building, p.building_count);
    place(SurfaceKind::Foliage, p.foliage_count);
    validate_site_map(m);
    return m;
}

}  // namespace covtwin
