#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "rarequery/tilestore.hpp"

namespace rarequery {

struct DetectionPoint {
    Point2 position;
    double confidence = 1.0;
    std::size_t members = 1;  // tile centers merged into this point
};

/// Centers of tiles with output >= threshold, merged until no two points lie
/// within merge_radius_m of each other. Each merge replaces a connected group
/// by its member-weighted mean carrying the group's maximum confidence.
/// merge_radius_m <= 0 selects twice the tileset's crop stride.
std::vector<DetectionPoint> detections_to_points(const Tileset& tileset, std::span<const double> outputs,
                                                 double threshold = 0.5, double merge_radius_m = 0.0);

/// Same merge rule applied to arbitrary points.
std::vector<DetectionPoint> merge_points(std::vector<DetectionPoint> points, double merge_radius_m);

struct KMeansConfig {
    std::size_t k = 6;
    std::uint64_t seed = 0;
    std::size_t max_iterations = 300;
    std::size_t restarts = 10;  // best inertia over this many k-means++ starts
};

struct KMeansResult {
    std::vector<Point2> centroids;
    std::vector<std::size_t> assignment;  // cluster index per point
    double inertia = 0.0;
    std::size_t iterations = 0;
    bool converged = false;
    std::vector<double> inertia_history;  // after each update step of the chosen run
};

/// Squared Euclidean distance.
double distance2(const Point2& a, const Point2& b);

/// Nearest centroid, ties to the lowest index.
std::size_t nearest_centroid(const Point2& p, std::span<const Point2> centroids);

double inertia(std::span<const Point2> points, std::span<const Point2> centroids,
               std::span<const std::size_t> assignment);

/// Lloyd iterations from one k-means++ start drawn from rng seed `seed`.
KMeansResult kmeans_single(std::span<const Point2> points, std::size_t k, std::uint64_t seed,
                           std::size_t max_iterations = 300);

KMeansResult kmeans(std::span<const Point2> points, const KMeansConfig& config);

struct ElbowPoint {
    std::size_t k = 0;
    double inertia = 0.0;
};

std::vector<ElbowPoint> elbow_scan(std::span<const Point2> points, std::size_t k_min, std::size_t k_max,
                                   std::uint64_t seed);

struct DetectionMap {
    std::vector<DetectionPoint> points;
    KMeansResult clusters;  // empty when there were no points
    Point2 origin;          // local meters; world = origin + coordinates
};

DetectionMap build_map(std::vector<DetectionPoint> points, const KMeansConfig& config, Point2 origin = {});

/// Counter-clockwise convex hull (monotone chain), without repeating the first vertex.
std::vector<Point2> convex_hull(std::vector<Point2> points);

struct ExportOptions {
    bool redact_landscape = true;
    std::string basemap;  // written only when not redacted
};

std::string map_to_geojson(const DetectionMap& map, const ExportOptions& options = {});
void export_map(const DetectionMap& map, const std::filesystem::path& path, const ExportOptions& options = {});

/// Detection points read back from an exported map.
std::vector<DetectionPoint> load_map_points(const std::filesystem::path& path);

}  // namespace rarequery
