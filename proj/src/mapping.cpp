#include "rarequery/mapping.hpp"

#include <algorithm>
#include <limits>
#include <numeric>
#include <random>

#include <json.hpp>

#include "rarequery/tileset_io.hpp"

namespace rarequery {

namespace {

std::size_t find_root(std::vector<std::size_t>& parent, std::size_t i) {
    while (parent[i] != i) i = parent[i] = parent[parent[i]];
    return i;
}

double cross(const Point2& o, const Point2& a, const Point2& b) {
    return (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x);
}

std::vector<Point2> kmeanspp(std::span<const Point2> points, std::size_t k, std::mt19937_64& rng) {
    std::vector<Point2> centroids;
    std::uniform_int_distribution<std::size_t> first(0, points.size() - 1);
    centroids.push_back(points[first(rng)]);
    std::vector<double> d2(points.size());
    while (centroids.size() < k) {
        double total = 0.0;
        for (std::size_t i = 0; i < points.size(); ++i) {
            d2[i] = std::numeric_limits<double>::infinity();
            for (const auto& c : centroids) d2[i] = std::min(d2[i], distance2(points[i], c));
            total += d2[i];
        }
        std::size_t chosen = 0;
        if (total == 0.0) {
            // Every point coincides with a centroid; any duplicate will do.
            chosen = first(rng);
        } else {
            std::uniform_real_distribution<double> u(0.0, total);
            double r = u(rng), acc = 0.0;
            chosen = points.size() - 1;
            for (std::size_t i = 0; i < points.size(); ++i) {
                acc += d2[i];
                if (d2[i] > 0.0 && r < acc) {
                    chosen = i;
                    break;
                }
            }
        }
        centroids.push_back(points[chosen]);
    }
    return centroids;
}

}  // namespace

std::vector<DetectionPoint> merge_points(std::vector<DetectionPoint> points, double radius) {
    const double r2 = radius * radius;
    for (;;) {
        const std::size_t n = points.size();
        std::vector<std::size_t> parent(n);
        std::iota(parent.begin(), parent.end(), std::size_t{0});
        bool merged = false;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = i + 1; j < n; ++j)
                if (distance2(points[i].position, points[j].position) <= r2) {
                    const std::size_t a = find_root(parent, i), b = find_root(parent, j);
                    if (a != b) parent[std::max(a, b)] = std::min(a, b);
                    merged = true;
                }
        if (!merged) return points;

        std::vector<DetectionPoint> next;
        std::vector<std::size_t> slot(n, n);
        std::vector<double> sx, sy;
        for (std::size_t i = 0; i < n; ++i) {
            const std::size_t root = find_root(parent, i);
            if (slot[root] == n) {
                slot[root] = next.size();
                next.push_back({{0.0, 0.0}, points[i].confidence, 0});
                sx.push_back(0.0);
                sy.push_back(0.0);
            }
            auto& g = next[slot[root]];
            const auto w = static_cast<double>(points[i].members);
            sx[slot[root]] += w * points[i].position.x;
            sy[slot[root]] += w * points[i].position.y;
            g.members += points[i].members;
            g.confidence = std::max(g.confidence, points[i].confidence);
        }
        for (std::size_t g = 0; g < next.size(); ++g)
            next[g].position = {sx[g] / static_cast<double>(next[g].members), sy[g] / static_cast<double>(next[g].members)};
        points = std::move(next);
    }
}

std::vector<DetectionPoint> detections_to_points(const Tileset& ts, std::span<const double> outputs, double threshold,
                                                 double radius) {
    if (outputs.size() != ts.size())
        throw InvalidArgument("detections_to_points: " + std::to_string(outputs.size()) + " outputs for " +
                              std::to_string(ts.size()) + " tiles");
    if (radius <= 0.0) radius = 2.0 * ts.crop.stride_m;
    std::vector<DetectionPoint> points;
    for (const auto& t : ts.tiles)
        if (outputs[t.id] >= threshold) points.push_back({t.center, outputs[t.id], 1});
    return merge_points(std::move(points), radius);
}

double distance2(const Point2& a, const Point2& b) {
    const double dx = a.x - b.x, dy = a.y - b.y;
    return dx * dx + dy * dy;
}

std::size_t nearest_centroid(const Point2& p, std::span<const Point2> centroids) {
    std::size_t best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < centroids.size(); ++c) {
        const double d = distance2(p, centroids[c]);
        if (d < best_d) {
            best_d = d;
            best = c;
        }
    }
    return best;
}

double inertia(std::span<const Point2> points, std::span<const Point2> centroids,
               std::span<const std::size_t> assignment) {
    double sum = 0.0;
    for (std::size_t i = 0; i < points.size(); ++i) sum += distance2(points[i], centroids[assignment[i]]);
    return sum;
}

KMeansResult kmeans_single(std::span<const Point2> points, std::size_t k, std::uint64_t seed,
                           std::size_t max_iterations) {
    if (k == 0) throw InvalidArgument("k-means needs k >= 1");
    if (points.size() < k)
        throw InvalidArgument("k-means with k = " + std::to_string(k) + " needs at least k points, got " +
                              std::to_string(points.size()));
    std::mt19937_64 rng(seed);
    KMeansResult r;
    r.centroids = kmeanspp(points, k, rng);
    const std::size_t n = points.size();
    r.assignment.assign(n, k);  // k marks "unassigned" so the first pass always counts as a change
    std::vector<std::size_t> next(n), sizes(k);
    for (std::size_t iter = 0; iter < max_iterations; ++iter) {
        for (std::size_t i = 0; i < n; ++i) next[i] = nearest_centroid(points[i], r.centroids);
        std::fill(sizes.begin(), sizes.end(), 0);
        for (std::size_t a : next) ++sizes[a];
        for (std::size_t c = 0; c < k; ++c) {
            if (sizes[c] != 0) continue;
            // Reseed an empty cluster with the point farthest from its centroid.
            std::size_t far = n;
            double far_d = -1.0;
            for (std::size_t i = 0; i < n; ++i) {
                if (sizes[next[i]] <= 1) continue;
                const double d = distance2(points[i], r.centroids[next[i]]);
                if (d > far_d) {
                    far_d = d;
                    far = i;
                }
            }
            if (far == n) break;
            --sizes[next[far]];
            next[far] = c;
            sizes[c] = 1;
            r.centroids[c] = points[far];
        }
        const bool unchanged = next == r.assignment;
        r.assignment = next;
        std::vector<Point2> sum(k);
        for (std::size_t i = 0; i < n; ++i) {
            sum[next[i]].x += points[i].x;
            sum[next[i]].y += points[i].y;
        }
        for (std::size_t c = 0; c < k; ++c)
            if (sizes[c]) r.centroids[c] = {sum[c].x / static_cast<double>(sizes[c]), sum[c].y / static_cast<double>(sizes[c])};
        if (unchanged) {
            r.converged = true;
            break;
        }
        r.iterations = iter + 1;
        r.inertia_history.push_back(inertia(points, r.centroids, r.assignment));
    }
    r.inertia = inertia(points, r.centroids, r.assignment);
    return r;
}

KMeansResult kmeans(std::span<const Point2> points, const KMeansConfig& config) {
    KMeansResult best;
    bool have = false;
    for (std::size_t run = 0; run < std::max<std::size_t>(config.restarts, 1); ++run) {
        auto r = kmeans_single(points, config.k, config.seed + run * 0x9e3779b97f4a7c15ULL, config.max_iterations);
        if (!have || r.inertia < best.inertia) {
            best = std::move(r);
            have = true;
        }
    }
    return best;
}

std::vector<ElbowPoint> elbow_scan(std::span<const Point2> points, std::size_t k_min, std::size_t k_max,
                                   std::uint64_t seed) {
    std::vector<ElbowPoint> out;
    k_max = std::min(k_max, points.size());
    for (std::size_t k = std::max<std::size_t>(k_min, 1); k <= k_max; ++k)
        out.push_back({k, kmeans(points, {k, seed, 300, 10}).inertia});
    return out;
}

DetectionMap build_map(std::vector<DetectionPoint> points, const KMeansConfig& config, Point2 origin) {
    DetectionMap map;
    map.origin = origin;
    map.points = std::move(points);
    if (!map.points.empty()) {
        std::vector<Point2> xy;
        for (const auto& p : map.points) xy.push_back(p.position);
        KMeansConfig c = config;
        c.k = std::min(c.k, xy.size());
        map.clusters = kmeans(xy, c);
    }
    return map;
}

std::vector<Point2> convex_hull(std::vector<Point2> pts) {
    std::sort(pts.begin(), pts.end(), [](const Point2& a, const Point2& b) { return a.x != b.x ? a.x < b.x : a.y < b.y; });
    pts.erase(std::unique(pts.begin(), pts.end()), pts.end());
    if (pts.size() < 3) return pts;
    std::vector<Point2> hull(2 * pts.size());
    std::size_t k = 0;
    for (const auto& p : pts) {
        while (k >= 2 && cross(hull[k - 2], hull[k - 1], p) <= 0) --k;
        hull[k++] = p;
    }
    for (std::size_t i = pts.size() - 1, t = k + 1; i-- > 0;) {
        while (k >= t && cross(hull[k - 2], hull[k - 1], pts[i]) <= 0) --k;
        hull[k++] = pts[i];
    }
    hull.resize(k - 1);
    return hull;
}

std::string map_to_geojson(const DetectionMap& map, const ExportOptions& options) {
    using nlohmann::ordered_json;
    ordered_json doc;
    doc["type"] = "FeatureCollection";
    doc["schema_version"] = 1;
    doc["crs"] = {{"type", "local"}, {"units", "m"}, {"origin", {map.origin.x, map.origin.y}}};
    doc["redacted"] = options.redact_landscape;
    if (!options.redact_landscape && !options.basemap.empty()) doc["basemap"] = options.basemap;
    auto& features = doc["features"] = ordered_json::array();
    const auto& km = map.clusters;
    const bool clustered = !km.assignment.empty();
    for (std::size_t i = 0; i < map.points.size(); ++i) {
        const auto& p = map.points[i];
        ordered_json props = {{"role", "detection"}, {"id", i}, {"confidence", p.confidence}, {"members", p.members}};
        if (clustered) props["cluster"] = km.assignment[i];
        features.push_back({{"type", "Feature"},
                            {"geometry", {{"type", "Point"}, {"coordinates", {p.position.x, p.position.y}}}},
                            {"properties", props}});
    }
    for (std::size_t c = 0; c < km.centroids.size(); ++c) {
        std::vector<Point2> members;
        for (std::size_t i = 0; i < km.assignment.size(); ++i)
            if (km.assignment[i] == c) members.push_back(map.points[i].position);
        features.push_back({{"type", "Feature"},
                            {"geometry", {{"type", "Point"}, {"coordinates", {km.centroids[c].x, km.centroids[c].y}}}},
                            {"properties", {{"role", "cluster_center"}, {"cluster", c}, {"size", members.size()}}}});
        const auto hull = convex_hull(members);
        if (hull.size() < 3) continue;
        ordered_json ring = ordered_json::array();
        for (const auto& h : hull) ring.push_back({h.x, h.y});
        ring.push_back({hull.front().x, hull.front().y});
        features.push_back({{"type", "Feature"},
                            {"geometry", {{"type", "Polygon"}, {"coordinates", {ring}}}},
                            {"properties", {{"role", "cluster_hull"}, {"cluster", c}}}});
    }
    return doc.dump(2) + "\n";
}

void export_map(const DetectionMap& map, const std::filesystem::path& path, const ExportOptions& options) {
    write_file(path, map_to_geojson(map, options));
}

std::vector<DetectionPoint> load_map_points(const std::filesystem::path& path) {
    const auto doc = nlohmann::json::parse(read_file(path));
    std::vector<DetectionPoint> out;
    for (const auto& f : doc.at("features")) {
        const auto& props = f.at("properties");
        if (props.at("role") != "detection") continue;
        const auto& c = f.at("geometry").at("coordinates");
        out.push_back({{c.at(0).get<double>(), c.at(1).get<double>()}, props.at("confidence").get<double>(),
                       props.at("members").get<std::size_t>()});
    }
    return out;
}

}  // namespace rarequery
