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
 * Scenario geometry: planar points in meters (x east, y north), surface
 * polygons, a three-sector base station and the square bin grid that
 * measurements are aggregated on.
 */

#pragma once

#include "covtwin/error.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <set>
#include <span>
#include <string>
#include <vector>

namespace covtwin {

struct Point2D {
    double x = 0.0;
    double y = 0.0;

    friend bool operator==(const Point2D&, const Point2D&) = default;
};

inline Point2D operator+(Point2D a, Point2D b) { return {a.x + b.x, a.y + b.y}; }
inline Point2D operator-(Point2D a, Point2D b) { return {a.x - b.x, a.y - b.y}; }
inline Point2D operator*(double s, Point2D p) { return {s * p.x, s * p.y}; }

inline double cross(Point2D a, Point2D b) { return a.x * b.y - a.y * b.x; }
inline double distance(Point2D a, Point2D b) { return std::hypot(a.x - b.x, a.y - b.y); }

struct Rect {
    double min_x = 0.0;
    double min_y = 0.0;
    double max_x = 0.0;
    double max_y = 0.0;

    double width() const { return max_x - min_x; }
    double height() const { return max_y - min_y; }
    Point2D center() const { return {0.5 * (min_x + max_x), 0.5 * (min_y + max_y)}; }
    bool contains(Point2D p) const {
        return p.x >= min_x && p.x <= max_x && p.y >= min_y && p.y <= max_y;
    }
    friend bool operator==(const Rect&, const Rect&) = default;
};

enum class SurfaceKind { Building, Foliage };

inline std::string to_string(SurfaceKind k) {
    return k == SurfaceKind::Building ? "building" : "foliage";
}

inline SurfaceKind surface_kind_from_string(const std::string& s) {
    if (s == "building" || s == "Building") return SurfaceKind::Building;
    if (s == "foliage" || s == "Foliage") return SurfaceKind::Foliage;
    throw ValidationError("unknown polygon kind '" + s + "'");
}

struct SurfacePolygon {
    SurfaceKind kind = SurfaceKind::Building;
    std::vector<Point2D> vertices;

    friend bool operator==(const SurfacePolygon&, const SurfacePolygon&) = default;
};

struct BaseStation {
    Point2D position;
    // Start bearing of each 120 degree sector, clockwise from north.
    std::array<double, 3> sector_azimuths_deg{0.0, 120.0, 240.0};
    std::string tx_label = "bs0";

    friend bool operator==(const BaseStation&, const BaseStation&) = default;
};

struct Bin {
    std::int64_t id = 0;
    Point2D center;
    double extent = 10.0;

    friend bool operator==(const Bin&, const Bin&) = default;
};

struct SiteMap {
    Rect bounds;
    std::vector<SurfacePolygon> polygons;
    BaseStation bs;
    double bin_extent = 10.0;
    std::vector<Bin> bins;

    const Bin& bin(std::int64_t id) const {
        auto it = std::lower_bound(bins.begin(), bins.end(), id,
                                   [](const Bin& b, std::int64_t v) { return b.id < v; });
        if (it == bins.end() || it->id != id)
            throw ValidationError("bin " + std::to_string(id) + " not in scenario");
        return *it;
    }
    bool has_bin(std::int64_t id) const {
        auto it = std::lower_bound(bins.begin(), bins.end(), id,
                                   [](const Bin& b, std::int64_t v) { return b.id < v; });
        return it != bins.end() && it->id == id;
    }

    friend bool operator==(const SiteMap&, const SiteMap&) = default;
};

// ---------------------------------------------------------------------------
// Polygon primitives
// ---------------------------------------------------------------------------

/// Shoelace signed area; positive for counter-clockwise vertex order.
inline double signed_area(std::span<const Point2D> v) {
    double acc = 0.0;
    for (std::size_t i = 0, n = v.size(); i < n; ++i) acc += cross(v[i], v[(i + 1) % n]);
    return 0.5 * acc;
}

inline double polygon_area(std::span<const Point2D> v) { return std::abs(signed_area(v)); }

namespace detail {

inline int orientation(Point2D a, Point2D b, Point2D c) {
    const double v = cross(b - a, c - a);
    return (v > 0.0) - (v < 0.0);
}

inline bool on_segment(Point2D a, Point2D b, Point2D p) {
    return std::min(a.x, b.x) <= p.x && p.x <= std::max(a.x, b.x) && std::min(a.y, b.y) <= p.y &&
           p.y <= std::max(a.y, b.y);
}

}  // namespace detail

/// Closed-segment intersection test (touching counts).
inline bool segments_intersect(Point2D p1, Point2D p2, Point2D q1, Point2D q2) {
    using detail::on_segment;
    using detail::orientation;
    const int o1 = orientation(p1, p2, q1), o2 = orientation(p1, p2, q2);
    const int o3 = orientation(q1, q2, p1), o4 = orientation(q1, q2, p2);
    if (o1 != o2 && o3 != o4) return true;
    if (o1 == 0 && on_segment(p1, p2, q1)) return true;
    if (o2 == 0 && on_segment(p1, p2, q2)) return true;
    if (o3 == 0 && on_segment(q1, q2, p1)) return true;
    if (o4 == 0 && on_segment(q1, q2, p2)) return true;
    return false;
}

/// True when no two non-adjacent edges meet and no vertex repeats.
inline bool is_simple_polygon(std::span<const Point2D> v) {
    const std::size_t n = v.size();
    if (n < 3) return false;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j)
            if (v[i] == v[j]) return false;
    for (std::size_t i = 0; i < n; ++i) {
        const Point2D a = v[i], b = v[(i + 1) % n];
        for (std::size_t j = i + 1; j < n; ++j) {
            if (j == i + 1 || (i == 0 && j == n - 1)) continue;  // adjacent
            if (segments_intersect(a, b, v[j], v[(j + 1) % n])) return false;
        }
    }
    return true;
}

/// Even-odd point-in-polygon test.
inline bool point_in_polygon(std::span<const Point2D> v, Point2D p) {
    bool inside = false;
    for (std::size_t i = 0, n = v.size(), j = n - 1; i < n; j = i++) {
        if ((v[i].y > p.y) != (v[j].y > p.y)) {
            const double xcross = (v[j].x - v[i].x) * (p.y - v[i].y) / (v[j].y - v[i].y) + v[i].x;
            if (p.x < xcross) inside = !inside;
        }
    }
    return inside;
}

/// Length of the part of segment ab that lies inside the polygon.
inline double chord_length_inside(std::span<const Point2D> poly, Point2D a, Point2D b) {
    const Point2D d = b - a;
    const double len = std::hypot(d.x, d.y);
    if (len == 0.0) return 0.0;
    std::vector<double> ts{0.0, 1.0};
    for (std::size_t i = 0, n = poly.size(); i < n; ++i) {
        const Point2D p = poly[i], q = poly[(i + 1) % n];
        const Point2D e = q - p;
        const double denom = cross(d, e);
        if (denom == 0.0) {
            // Parallel; a collinear overlap contributes its endpoints.
            if (cross(p - a, d) == 0.0) {
                const double dd = d.x * d.x + d.y * d.y;
                for (Point2D r : {p, q}) {
                    const double t = ((r.x - a.x) * d.x + (r.y - a.y) * d.y) / dd;
                    if (t > 0.0 && t < 1.0) ts.push_back(t);
                }
            }
            continue;
        }
        const double t = cross(p - a, e) / denom;
        const double u = cross(p - a, d) / denom;
        if (t > 0.0 && t < 1.0 && u >= 0.0 && u <= 1.0) ts.push_back(t);
    }
    std::sort(ts.begin(), ts.end());
    double inside = 0.0;
    for (std::size_t k = 0; k + 1 < ts.size(); ++k) {
        const double t0 = ts[k], t1 = ts[k + 1];
        if (t1 <= t0) continue;
        const double tm = 0.5 * (t0 + t1);
        if (point_in_polygon(poly, a + tm * d)) inside += (t1 - t0);
    }
    return inside * len;
}

/// True if the two polygons share any interior or boundary point.
inline bool polygons_overlap(std::span<const Point2D> a, std::span<const Point2D> b) {
    for (std::size_t i = 0; i < a.size(); ++i)
        for (std::size_t j = 0; j < b.size(); ++j)
            if (segments_intersect(a[i], a[(i + 1) % a.size()], b[j], b[(j + 1) % b.size()]))
                return true;
    return point_in_polygon(a, b.front()) || point_in_polygon(b, a.front());
}

// ---------------------------------------------------------------------------
// Base station sectors
// ---------------------------------------------------------------------------

/// Bearing from `from` to `to` in degrees clockwise from north, in [0, 360).
inline double bearing_deg(Point2D from, Point2D to) {
    double b = std::atan2(to.x - from.x, to.y - from.y) * (180.0 / 3.14159265358979323846);
    if (b < 0.0) b += 360.0;
    if (b >= 360.0) b -= 360.0;
    return b;
}

inline void validate_base_station(const BaseStation& bs) {
    const auto& az = bs.sector_azimuths_deg;
    for (double a : az)
        require(std::isfinite(a) && a >= 0.0 && a < 360.0,
                "bs: sector azimuth " + std::to_string(a) + " outside [0, 360)");
    for (int i = 0; i < 3; ++i) {
        double gap = az[(i + 1) % 3] - az[i];
        if (gap <= 0.0) gap += 360.0;
        require(std::abs(gap - 120.0) < 1e-9, "bs: sector azimuths must be 120 degrees apart");
    }
}

/// Index of the half-open wedge [azimuth[i], azimuth[i] + 120) holding the
/// bearing from the base station to p.
inline int assign_sector(const BaseStation& bs, Point2D p) {
    if (p == bs.position) throw ValidationError("assign_sector: point coincides with base station");
    const auto& az = bs.sector_azimuths_deg;
    double rel = bearing_deg(bs.position, p) - az[0];
    if (rel < 0.0) rel += 360.0;
    // Bearings within 1e-9 degrees of a wedge boundary snap onto it so that
    // round-off in atan2 cannot move a boundary point into the previous wedge.
    const double nearest = std::round(rel / 120.0) * 120.0;
    if (std::abs(rel - nearest) < 1e-9) rel = nearest;
    if (rel >= 360.0) rel -= 360.0;
    return static_cast<int>(rel / 120.0);
}

// ---------------------------------------------------------------------------
// Bins and map validation
// ---------------------------------------------------------------------------

/// Regular grid of square bins tiling the bounds, ids assigned row-major
/// from the south-west corner.
inline std::vector<Bin> make_bin_grid(const Rect& bounds, double extent) {
    require(extent > 0.0 && std::isfinite(extent), "bin_extent_m must be positive");
    const auto nx = static_cast<std::int64_t>(std::floor(bounds.width() / extent + 1e-9));
    const auto ny = static_cast<std::int64_t>(std::floor(bounds.height() / extent + 1e-9));
    std::vector<Bin> bins;
    bins.reserve(static_cast<std::size_t>(std::max<std::int64_t>(nx * ny, 0)));
    for (std::int64_t j = 0; j < ny; ++j)
        for (std::int64_t i = 0; i < nx; ++i)
            bins.push_back({j * nx + i,
                            {bounds.min_x + (static_cast<double>(i) + 0.5) * extent,
                             bounds.min_y + (static_cast<double>(j) + 0.5) * extent},
                            extent});
    return bins;
}

inline void validate_polygon(const SurfacePolygon& poly, const Rect& bounds, std::size_t index) {
    const std::string name = "polygon[" + std::to_string(index) + "]";
    require(poly.vertices.size() >= 3,
            name + ": needs at least 3 vertices, has " + std::to_string(poly.vertices.size()));
    for (const auto& v : poly.vertices) {
        require(std::isfinite(v.x) && std::isfinite(v.y), name + ": non-finite vertex");
        require(bounds.contains(v), name + ": vertex outside bounds");
    }
    require(polygon_area(poly.vertices) > 0.0, name + ": zero area");
    require(is_simple_polygon(poly.vertices), name + ": self-intersecting");
}

inline void validate_site_map(const SiteMap& m) {
    const auto& b = m.bounds;
    require(std::isfinite(b.min_x) && std::isfinite(b.min_y) && std::isfinite(b.max_x) &&
                std::isfinite(b.max_y),
            "bounds: non-finite value");
    require(b.min_x < b.max_x && b.min_y < b.max_y, "bounds: min must be below max");
    for (std::size_t i = 0; i < m.polygons.size(); ++i) validate_polygon(m.polygons[i], b, i);
    validate_base_station(m.bs);
    require(std::isfinite(m.bs.position.x) && std::isfinite(m.bs.position.y) &&
                b.contains(m.bs.position),
            "bs '" + m.bs.tx_label + "': position outside bounds");
    std::set<std::int64_t> ids;
    for (const auto& bin : m.bins) {
        require(bin.extent > 0.0, "bin " + std::to_string(bin.id) + ": extent must be positive");
        require(b.contains(bin.center), "bin " + std::to_string(bin.id) + ": outside bounds");
        require(ids.insert(bin.id).second, "bin " + std::to_string(bin.id) + ": duplicate id");
    }
}

// ---------------------------------------------------------------------------
// Obstruction along a link
// ---------------------------------------------------------------------------

struct ObstructionSummary {
    int buildings_crossed = 0;
    int foliage_crossed = 0;
    double building_inside_m = 0.0;
    double foliage_inside_m = 0.0;
};

/// Counts distinct polygons whose interior the segment ab passes through and
/// the chord length spent inside each surface kind.
inline ObstructionSummary segment_obstructions(const SiteMap& m, Point2D a, Point2D b) {
    ObstructionSummary s;
    for (const auto& poly : m.polygons) {
        const double chord = chord_length_inside(poly.vertices, a, b);
        if (chord <= 0.0) continue;
        if (poly.kind == SurfaceKind::Building) {
            ++s.buildings_crossed;
            s.building_inside_m += chord;
        } else {
            ++s.foliage_crossed;
            s.foliage_inside_m += chord;
        }
    }
    return s;
}

}  // namespace covtwin
