#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <numbers>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "rog/error.hpp"
#include "rog/random.hpp"

namespace rog::geometry {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using Face = std::array<std::uint32_t, 3>;

inline constexpr std::size_t kNumKeypoints = 24;
inline constexpr std::size_t kNumCornerKeypoints = 8;
inline constexpr std::size_t kNumPoissonKeypoints = 16;
inline constexpr double kMinFaceArea = 1e-12;

struct TriangleMesh {
    std::vector<Vec3> vertices;
    std::vector<Face> faces;

    double face_area(std::size_t f) const {
        const auto& [a, b, c] = faces[f];
        return 0.5 * (vertices[b] - vertices[a]).cross(vertices[c] - vertices[a]).norm();
    }

    double surface_area() const {
        double total = 0.0;
        for (std::size_t f = 0; f < faces.size(); ++f) total += face_area(f);
        return total;
    }

    // Throws InputError when the mesh breaks an invariant.
    void validate() const {
        if (vertices.size() < 4)
            throw InputError("mesh needs at least 4 vertices, got " + std::to_string(vertices.size()));
        if (faces.empty()) throw InputError("mesh has no faces");
        for (std::size_t f = 0; f < faces.size(); ++f) {
            for (auto idx : faces[f]) {
                if (idx >= vertices.size())
                    throw InputError("face " + std::to_string(f) + " references vertex " +
                                     std::to_string(idx) + " of " + std::to_string(vertices.size()));
            }
            if (!(face_area(f) > kMinFaceArea))
                throw InputError("face " + std::to_string(f) + " is degenerate");
        }
        for (const auto& v : vertices)
            if (!v.allFinite()) throw InputError("mesh has a non-finite vertex");
    }
};

struct Aabb {
    Vec3 min_corner = Vec3::Zero();
    Vec3 max_corner = Vec3::Zero();

    Vec3 center() const { return 0.5 * (min_corner + max_corner); }
    Vec3 extent() const { return max_corner - min_corner; }

    // Corners in lexicographic (x, y, z) order from min to max: bit 2 selects
    // x, bit 1 selects y, bit 0 selects z.
    std::array<Vec3, 8> corners() const {
        std::array<Vec3, 8> out;
        for (std::size_t k = 0; k < 8; ++k) {
            out[k] = Vec3((k & 4) ? max_corner.x() : min_corner.x(),
                          (k & 2) ? max_corner.y() : min_corner.y(),
                          (k & 1) ? max_corner.z() : min_corner.z());
        }
        return out;
    }
};

enum class KeypointSource { corner_nearest, poisson };

inline const char* to_string(KeypointSource s) {
    return s == KeypointSource::corner_nearest ? "corner-nearest" : "poisson";
}

struct KeyPointSet {
    std::array<Vec3, kNumKeypoints> points{};
    std::array<KeypointSource, kNumKeypoints> provenance{};
    std::uint64_t seed = 0;
    double poisson_radius = 0.0;
};

// ---------------------------------------------------------------------------
// OBJ subset: `v x y z` and `f i j k` (1-based) only. Blank lines and `#`
// comments are skipped; every other record is rejected.

inline TriangleMesh parse_obj(std::istream& in, const std::string& source = "<stream>") {
    TriangleMesh mesh;
    std::vector<std::size_t> face_lines;
    std::string line;
    std::size_t line_no = 0;
    auto fail = [&](const std::string& what) {
        throw InputError(source + ":" + std::to_string(line_no) + ": " + what);
    };
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        std::istringstream ls(line);
        std::string tag;
        if (!(ls >> tag) || tag[0] == '#') continue;
        if (tag == "v") {
            double x, y, z;
            if (!(ls >> x >> y >> z)) fail("malformed vertex record");
            std::string extra;
            if (ls >> extra) fail("vertex record has more than 3 coordinates");
            mesh.vertices.emplace_back(x, y, z);
        } else if (tag == "f") {
            std::vector<long long> idx;
            std::string tok;
            while (ls >> tok) {
                if (tok.find('/') != std::string::npos) fail("face attributes (texture/normal) are not supported");
                std::size_t used = 0;
                long long v = 0;
                try {
                    v = std::stoll(tok, &used);
                } catch (const std::exception&) {
                    fail("malformed face index '" + tok + "'");
                }
                if (used != tok.size()) fail("malformed face index '" + tok + "'");
                idx.push_back(v);
            }
            if (idx.size() != 3) fail("non-triangle face with " + std::to_string(idx.size()) + " vertices");
            Face face{};
            for (int k = 0; k < 3; ++k) {
                if (idx[k] < 1) fail("face index " + std::to_string(idx[k]) + " out of range");
                face[k] = static_cast<std::uint32_t>(idx[k] - 1);
            }
            mesh.faces.push_back(face);
            face_lines.push_back(line_no);
        } else {
            fail("unsupported record '" + tag + "'");
        }
    }
    for (std::size_t f = 0; f < mesh.faces.size(); ++f) {
        for (auto v : mesh.faces[f]) {
            if (v >= mesh.vertices.size()) {
                line_no = face_lines[f];
                fail("face index " + std::to_string(v + 1) + " out of range (" +
                     std::to_string(mesh.vertices.size()) + " vertices)");
            }
        }
    }
    try {
        mesh.validate();
    } catch (const InputError& e) {
        throw InputError(source + ": " + e.what());
    }
    return mesh;
}

inline TriangleMesh load_obj(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw InputError("cannot open OBJ file " + path.string());
    return parse_obj(in, path.string());
}

inline void write_obj(std::ostream& out, const TriangleMesh& mesh) {
    out << std::setprecision(17);
    for (const auto& v : mesh.vertices) out << "v " << v.x() << ' ' << v.y() << ' ' << v.z() << '\n';
    for (const auto& f : mesh.faces) out << "f " << f[0] + 1 << ' ' << f[1] + 1 << ' ' << f[2] + 1 << '\n';
}

inline void save_obj(const std::filesystem::path& path, const TriangleMesh& mesh) {
    std::ofstream out(path);
    if (!out) throw InputError("cannot write OBJ file " + path.string());
    write_obj(out, mesh);
}

inline TriangleMesh transform(const TriangleMesh& mesh, const Mat3& rotation, const Vec3& translation) {
    TriangleMesh out = mesh;
    for (auto& v : out.vertices) v = rotation * v + translation;
    return out;
}

// ---------------------------------------------------------------------------
// Bounding box and keypoints

inline Aabb compute_aabb(const TriangleMesh& mesh) {
    if (mesh.vertices.empty()) throw InputError("compute_aabb on empty mesh");
    Aabb box{mesh.vertices.front(), mesh.vertices.front()};
    for (const auto& v : mesh.vertices) {
        box.min_corner = box.min_corner.cwiseMin(v);
        box.max_corner = box.max_corner.cwiseMax(v);
    }
    return box;
}

// For each box corner in corners() order, the index of the nearest unused
// vertex. Ties break toward the lower vertex index.
inline std::array<std::size_t, 8> corner_nearest_vertices(const TriangleMesh& mesh, const Aabb& box) {
    if (mesh.vertices.size() < 8)
        throw InputError("corner-nearest selection needs at least 8 vertices, got " +
                         std::to_string(mesh.vertices.size()));
    std::array<std::size_t, 8> picked{};
    std::vector<bool> used(mesh.vertices.size(), false);
    const auto corners = box.corners();
    for (std::size_t c = 0; c < 8; ++c) {
        std::size_t best = mesh.vertices.size();
        double best_d = std::numeric_limits<double>::infinity();
        for (std::size_t v = 0; v < mesh.vertices.size(); ++v) {
            if (used[v]) continue;
            const double d = (mesh.vertices[v] - corners[c]).squaredNorm();
            if (d < best_d) {
                best_d = d;
                best = v;
            }
        }
        used[best] = true;
        picked[c] = best;
    }
    return picked;
}

inline std::array<Vec3, 8> corner_nearest_points(const TriangleMesh& mesh, const Aabb& box) {
    const auto idx = corner_nearest_vertices(mesh, box);
    std::array<Vec3, 8> out;
    for (std::size_t c = 0; c < 8; ++c) out[c] = mesh.vertices[idx[c]];
    return out;
}

struct PoissonSample {
    std::vector<Vec3> points;
    double radius = 0.0;
};

// Keypoints closer than this are treated as coincident.
inline constexpr double kMinPoissonRadius = 1e-6;

// Dart throwing on the surface. The radius starts at sqrt(A / (2 * 24 * pi)),
// each round allows 30 * count darts, and a failed round shrinks the radius
// by 0.9 down to a floor of r0 / 100. Samples also keep the radius from every
// excluded point.
inline PoissonSample poisson_disk_sample(const TriangleMesh& mesh, std::size_t count, std::span<const Vec3> exclude,
                                         std::uint64_t seed) {
    const double area = mesh.surface_area();
    if (!(area > 0.0)) throw InputError("poisson_disk_sample: mesh surface area is zero");
    if (count == 0) return {};

    std::vector<double> cdf(mesh.faces.size());
    double acc = 0.0;
    for (std::size_t f = 0; f < mesh.faces.size(); ++f) {
        acc += mesh.face_area(f);
        cdf[f] = acc;
    }

    Rng rng(seed);
    auto dart = [&]() -> Vec3 {
        const double u = rng.uniform() * acc;
        auto it = std::upper_bound(cdf.begin(), cdf.end(), u);
        const std::size_t f = std::min<std::size_t>(static_cast<std::size_t>(it - cdf.begin()), cdf.size() - 1);
        double s = rng.uniform();
        double t = rng.uniform();
        if (s + t > 1.0) {
            s = 1.0 - s;
            t = 1.0 - t;
        }
        const auto& [a, b, c] = mesh.faces[f];
        return mesh.vertices[a] + s * (mesh.vertices[b] - mesh.vertices[a]) +
               t * (mesh.vertices[c] - mesh.vertices[a]);
    };

    const double r0 = std::sqrt(area / (2.0 * static_cast<double>(kNumKeypoints) * std::numbers::pi));
    const double floor_r = std::max(r0 / 100.0, kMinPoissonRadius);
    const std::size_t attempts = 30 * count;

    for (double r = r0; r >= floor_r; r *= 0.9) {
        const double r2 = r * r;
        PoissonSample sample{{}, r};
        sample.points.reserve(count);
        for (std::size_t a = 0; a < attempts && sample.points.size() < count; ++a) {
            const Vec3 p = dart();
            auto far = [&](const Vec3& q) { return (p - q).squaredNorm() >= r2; };
            if (std::all_of(exclude.begin(), exclude.end(), far) &&
                std::all_of(sample.points.begin(), sample.points.end(), far))
                sample.points.push_back(p);
        }
        if (sample.points.size() == count) return sample;
    }
    throw NumericalError("poisson_disk_sample: cannot place " + std::to_string(count) +
                         " points before reaching the radius floor (surface area " + std::to_string(area) + ")");
}

inline KeyPointSet sample_object_keypoints(const TriangleMesh& mesh, std::uint64_t seed) {
    mesh.validate();
    const auto corners = corner_nearest_points(mesh, compute_aabb(mesh));
    const auto poisson = poisson_disk_sample(mesh, kNumPoissonKeypoints, corners, seed);
    KeyPointSet set;
    set.seed = seed;
    set.poisson_radius = poisson.radius;
    for (std::size_t k = 0; k < kNumCornerKeypoints; ++k) {
        set.points[k] = corners[k];
        set.provenance[k] = KeypointSource::corner_nearest;
    }
    for (std::size_t k = 0; k < kNumPoissonKeypoints; ++k) {
        set.points[kNumCornerKeypoints + k] = poisson.points[k];
        set.provenance[kNumCornerKeypoints + k] = KeypointSource::poisson;
    }
    return set;
}

inline nlohmann::json to_json(const KeyPointSet& set) {
    nlohmann::json pts = nlohmann::json::array(), prov = nlohmann::json::array();
    for (std::size_t k = 0; k < kNumKeypoints; ++k) {
        pts.push_back({set.points[k].x(), set.points[k].y(), set.points[k].z()});
        prov.push_back(to_string(set.provenance[k]));
    }
    return {{"points", pts}, {"provenance", prov}, {"seed", set.seed}, {"poisson_radius", set.poisson_radius}};
}

inline KeyPointSet keypoints_from_json(const nlohmann::json& j) {
    KeyPointSet set;
    const auto& pts = j.at("points");
    const auto& prov = j.at("provenance");
    if (pts.size() != kNumKeypoints || prov.size() != kNumKeypoints)
        throw InputError("keypoint JSON must hold exactly 24 points");
    for (std::size_t k = 0; k < kNumKeypoints; ++k) {
        const auto& p = pts[k];
        if (p.size() != 3) throw InputError("keypoint JSON: point " + std::to_string(k) + " is not a 3-vector");
        set.points[k] = Vec3(p[0].get<double>(), p[1].get<double>(), p[2].get<double>());
        const auto tag = prov[k].get<std::string>();
        if (tag == "corner-nearest")
            set.provenance[k] = KeypointSource::corner_nearest;
        else if (tag == "poisson")
            set.provenance[k] = KeypointSource::poisson;
        else
            throw InputError("keypoint JSON: unknown provenance '" + tag + "'");
    }
    set.seed = j.value("seed", std::uint64_t{0});
    set.poisson_radius = j.value("poisson_radius", 0.0);
    return set;
}

// ---------------------------------------------------------------------------
// Distance queries

// Closest point on triangle abc to p (Voronoi-region walk).
inline Vec3 closest_point_on_triangle(const Vec3& p, const Vec3& a, const Vec3& b, const Vec3& c) {
    const Vec3 ab = b - a, ac = c - a, ap = p - a;
    const double d1 = ab.dot(ap), d2 = ac.dot(ap);
    if (d1 <= 0.0 && d2 <= 0.0) return a;
    const Vec3 bp = p - b;
    const double d3 = ab.dot(bp), d4 = ac.dot(bp);
    if (d3 >= 0.0 && d4 <= d3) return b;
    const double vc = d1 * d4 - d3 * d2;
    if (vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0) return a + (d1 / (d1 - d3)) * ab;
    const Vec3 cp = p - c;
    const double d5 = ab.dot(cp), d6 = ac.dot(cp);
    if (d6 >= 0.0 && d5 <= d6) return c;
    const double vb = d5 * d2 - d1 * d6;
    if (vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0) return a + (d2 / (d2 - d6)) * ac;
    const double va = d3 * d6 - d5 * d4;
    if (va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0)
        return b + ((d4 - d3) / ((d4 - d3) + (d5 - d6))) * (c - b);
    const double denom = 1.0 / (va + vb + vc);
    return a + ab * (vb * denom) + ac * (vc * denom);
}

inline double point_triangle_distance(const Vec3& p, const Vec3& a, const Vec3& b, const Vec3& c) {
    return (p - closest_point_on_triangle(p, a, b, c)).norm();
}

// Unsigned distance from p to the mesh surface (brute force over faces).
inline double surface_distance(const TriangleMesh& mesh, const Vec3& p) {
    double best = std::numeric_limits<double>::infinity();
    for (const auto& [a, b, c] : mesh.faces)
        best = std::min(best, point_triangle_distance(p, mesh.vertices[a], mesh.vertices[b], mesh.vertices[c]));
    return best;
}

// Möller-Trumbore; counts hits with t > 0.
inline bool ray_hits_triangle(const Vec3& origin, const Vec3& dir, const Vec3& a, const Vec3& b, const Vec3& c) {
    const Vec3 e1 = b - a, e2 = c - a;
    const Vec3 h = dir.cross(e2);
    const double det = e1.dot(h);
    if (std::abs(det) < 1e-15) return false;
    const double inv = 1.0 / det;
    const Vec3 s = origin - a;
    const double u = inv * s.dot(h);
    if (u < 0.0 || u > 1.0) return false;
    const Vec3 q = s.cross(e1);
    const double v = inv * dir.dot(q);
    if (v < 0.0 || u + v > 1.0) return false;
    return inv * e2.dot(q) > 0.0;
}

// Ray-parity inside test, majority vote over three generic directions.
inline bool is_inside(const TriangleMesh& mesh, const Vec3& p) {
    static const std::array<Vec3, 3> dirs = {Vec3(0.5361, 0.3917, 0.7478).normalized(),
                                             Vec3(-0.6123, 0.7071, 0.3536).normalized(),
                                             Vec3(0.2740, -0.8318, 0.4826).normalized()};
    int votes = 0;
    for (const auto& d : dirs) {
        int hits = 0;
        for (const auto& [a, b, c] : mesh.faces)
            hits += ray_hits_triangle(p, d, mesh.vertices[a], mesh.vertices[b], mesh.vertices[c]) ? 1 : 0;
        votes += hits % 2;
    }
    return votes >= 2;
}

inline double signed_distance(const TriangleMesh& mesh, const Vec3& p) {
    const double d = surface_distance(mesh, p);
    return is_inside(mesh, p) ? -d : d;
}

// First edge used by a number of faces other than two, if any.
inline std::optional<std::pair<std::uint32_t, std::uint32_t>> find_open_edge(const TriangleMesh& mesh) {
    std::map<std::pair<std::uint32_t, std::uint32_t>, int> uses;
    for (const auto& f : mesh.faces) {
        for (int k = 0; k < 3; ++k) {
            auto a = f[k], b = f[(k + 1) % 3];
            if (a > b) std::swap(a, b);
            ++uses[{a, b}];
        }
    }
    for (const auto& [edge, n] : uses)
        if (n != 2) return edge;
    return std::nullopt;
}

struct SignedDistanceGrid {
    Vec3 origin = Vec3::Zero();
    double cell_size = 0.0;
    std::array<int, 3> resolution{0, 0, 0};
    std::vector<double> values;  // x fastest, then y, then z

    std::size_t index(int ix, int iy, int iz) const {
        return static_cast<std::size_t>(ix) +
               static_cast<std::size_t>(resolution[0]) *
                   (static_cast<std::size_t>(iy) + static_cast<std::size_t>(resolution[1]) * iz);
    }

    Vec3 node(int ix, int iy, int iz) const { return origin + cell_size * Vec3(ix, iy, iz); }

    double at(int ix, int iy, int iz) const { return values[index(ix, iy, iz)]; }

    // Trilinear interpolation; points outside the grid clamp to the boundary.
    double query(const Vec3& p) const {
        double g[3];
        int i0[3];
        double frac[3];
        for (int a = 0; a < 3; ++a) {
            g[a] = std::clamp((p[a] - origin[a]) / cell_size, 0.0, static_cast<double>(resolution[a] - 1));
            i0[a] = std::min(static_cast<int>(std::floor(g[a])), resolution[a] - 2);
            frac[a] = g[a] - i0[a];
        }
        double out = 0.0;
        for (int corner = 0; corner < 8; ++corner) {
            double w = 1.0;
            int id[3];
            for (int a = 0; a < 3; ++a) {
                const int bit = (corner >> a) & 1;
                id[a] = i0[a] + bit;
                w *= bit ? frac[a] : 1.0 - frac[a];
            }
            if (w != 0.0) out += w * at(id[0], id[1], id[2]);
        }
        return out;
    }
};

inline double sdf_query(const SignedDistanceGrid& grid, const Vec3& p) { return grid.query(p); }

// `resolution` is the node count along the longest padded axis; the other
// axes use the same cell size with at least 8 nodes.
inline SignedDistanceGrid build_sdf_grid(const TriangleMesh& mesh, int resolution, double padding) {
    if (resolution < 8 || resolution > 256)
        throw InputError("SDF resolution must be in [8, 256], got " + std::to_string(resolution));
    if (!(padding >= 0.0)) throw InputError("SDF padding must be non-negative");
    mesh.validate();
    if (auto edge = find_open_edge(mesh))
        throw InputError("mesh is not watertight: open edge (" + std::to_string(edge->first) + ", " +
                         std::to_string(edge->second) + ")");

    const Aabb box = compute_aabb(mesh);
    const Vec3 lo = box.min_corner - Vec3::Constant(padding);
    const Vec3 size = box.extent() + Vec3::Constant(2.0 * padding);
    SignedDistanceGrid grid;
    grid.cell_size = size.maxCoeff() / (resolution - 1);
    for (int a = 0; a < 3; ++a)
        grid.resolution[a] = std::max(8, static_cast<int>(std::ceil(size[a] / grid.cell_size - 1e-9)) + 1);
    // Center the node lattice on the padded box.
    const Vec3 span = grid.cell_size * Vec3(grid.resolution[0] - 1, grid.resolution[1] - 1, grid.resolution[2] - 1);
    grid.origin = lo - 0.5 * (span - size);
    grid.values.resize(static_cast<std::size_t>(grid.resolution[0]) * grid.resolution[1] * grid.resolution[2]);
    for (int iz = 0; iz < grid.resolution[2]; ++iz)
        for (int iy = 0; iy < grid.resolution[1]; ++iy)
            for (int ix = 0; ix < grid.resolution[0]; ++ix)
                grid.values[grid.index(ix, iy, iz)] = signed_distance(mesh, grid.node(ix, iy, iz));
    return grid;
}

}  // namespace rog::geometry
