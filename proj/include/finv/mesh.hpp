#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "finv/camera.hpp"
#include "finv/generator.hpp"
#include "finv/rng.hpp"

namespace finv {

struct Mesh {
    std::vector<Vec3> vertices;
    std::vector<std::array<int, 3>> triangles;
    std::vector<Vec3> vertex_colors;  // [0,1]^3

    bool empty() const { return triangles.empty(); }
};

namespace detail {

/// Trilinear color sample on the cell-center grid, clamped at the border.
inline Vec3 sample_color(const Array& colors, int V, const Vec3& p) {
    double g[3], f[3];
    int i0[3];
    for (int a = 0; a < 3; ++a) {
        g[a] = (p[a] + 0.5) * V - 0.5;
        double base = std::floor(g[a]);
        int i = static_cast<int>(base);
        double fr = g[a] - base;
        if (i < 0) {
            i = 0;
            fr = 0.0;
        }
        if (i > V - 2) {
            i = V - 2;
            fr = 1.0;
        }
        i0[a] = i;
        f[a] = fr;
    }
    Vec3 out{0, 0, 0};
    for (int dx = 0; dx < 2; ++dx)
        for (int dy = 0; dy < 2; ++dy)
            for (int dz = 0; dz < 2; ++dz) {
                const double w = (dx ? f[0] : 1 - f[0]) * (dy ? f[1] : 1 - f[1]) * (dz ? f[2] : 1 - f[2]);
                const int64_t idx =
                    ((static_cast<int64_t>(i0[0] + dx) * V) + (i0[1] + dy)) * V + (i0[2] + dz);
                for (int c = 0; c < 3; ++c) out[c] += w * colors[idx * 3 + c];
            }
    return out;
}

// The six tetrahedra of the Kuhn subdivision along the 000-111 diagonal;
// corner bits are (x<<2)|(y<<1)|z. Neighboring cubes share face diagonals,
// so the extracted surface is watertight.
constexpr int kTetCorners[6][4] = {{0, 4, 6, 7}, {0, 4, 5, 7}, {0, 2, 6, 7},
                                   {0, 2, 3, 7}, {0, 1, 5, 7}, {0, 1, 3, 7}};

}  // namespace detail

/// Isosurface of sigmoid(occupancy_logits) at the given level, via tetrahedral
/// decomposition with edge-interpolated vertices welded on shared grid edges.
/// The grid is padded with one empty cell so closed fields produce closed
/// 2-manifold meshes (surfaces hug the boundary for all-solid fields).
/// Vertex colors are sampled trilinearly from the color grid.
inline Mesh extract_mesh(const VoxelFields& fields, double iso = 0.5) {
    const int V = fields.grid;
    if (V < 2) throw std::invalid_argument("extract_mesh: grid too small");
    const int P = V + 2;  // padded
    auto prob = [&](int x, int y, int z) -> double {
        if (x < 1 || y < 1 || z < 1 || x > V || y > V || z > V) return 0.0;  // empty border
        const double logit =
            fields.occupancy_logits[(static_cast<int64_t>(x - 1) * V + (y - 1)) * V + (z - 1)];
        return 1.0 / (1.0 + std::exp(-logit));
    };
    auto pos = [&](int x, int y, int z) -> Vec3 {
        return {grid_coord(x - 1, V), grid_coord(y - 1, V), grid_coord(z - 1, V)};
    };
    auto gid = [&](int x, int y, int z) -> int64_t { return (static_cast<int64_t>(x) * P + y) * P + z; };

    Mesh mesh;
    std::unordered_map<uint64_t, int> weld;  // (lo grid id, hi grid id) -> vertex index

    auto edge_vertex = [&](const std::array<int, 3>& a, double pa, const std::array<int, 3>& b,
                           double pb) -> int {
        const int64_t ga = gid(a[0], a[1], a[2]);
        const int64_t gb = gid(b[0], b[1], b[2]);
        const uint64_t key = ga < gb ? (static_cast<uint64_t>(ga) << 32 | static_cast<uint64_t>(gb))
                                     : (static_cast<uint64_t>(gb) << 32 | static_cast<uint64_t>(ga));
        auto it = weld.find(key);
        if (it != weld.end()) return it->second;
        const double t = (iso - pa) / (pb - pa);
        const Vec3 va = pos(a[0], a[1], a[2]);
        const Vec3 vb = pos(b[0], b[1], b[2]);
        const Vec3 p = va + t * (vb - va);
        const int idx = static_cast<int>(mesh.vertices.size());
        mesh.vertices.push_back(p);
        mesh.vertex_colors.push_back(detail::sample_color(fields.colors, V, p));
        weld.emplace(key, idx);
        return idx;
    };

    auto emit_triangle = [&](int v0, int v1, int v2, const Vec3& inside_ref) {
        if (v0 == v1 || v1 == v2 || v0 == v2) return;
        const Vec3 e1 = mesh.vertices[v1] - mesh.vertices[v0];
        const Vec3 e2 = mesh.vertices[v2] - mesh.vertices[v0];
        const Vec3 n = cross(e1, e2);
        const double area2 = norm(n);
        if (area2 * 0.5 <= 1e-12) return;
        const Vec3 centroid = (1.0 / 3.0) * (mesh.vertices[v0] + mesh.vertices[v1] + mesh.vertices[v2]);
        // orient outward: away from the inside reference point
        if (dot(n, centroid - inside_ref) >= 0.0)
            mesh.triangles.push_back({v0, v1, v2});
        else
            mesh.triangles.push_back({v0, v2, v1});
    };

    std::array<int, 3> corner[8];
    double value[8];
    for (int cx = 0; cx < P - 1; ++cx)
        for (int cy = 0; cy < P - 1; ++cy)
            for (int cz = 0; cz < P - 1; ++cz) {
                bool any_in = false, any_out = false;
                for (int b = 0; b < 8; ++b) {
                    corner[b] = {cx + ((b >> 2) & 1), cy + ((b >> 1) & 1), cz + (b & 1)};
                    value[b] = prob(corner[b][0], corner[b][1], corner[b][2]);
                    (value[b] > iso ? any_in : any_out) = true;
                }
                if (!any_in || !any_out) continue;
                for (const auto& tet : detail::kTetCorners) {
                    int inside[4], outside[4];
                    int ni = 0, no = 0;
                    for (int v = 0; v < 4; ++v)
                        (value[tet[v]] > iso ? inside[ni++] : outside[no++]) = tet[v];
                    if (ni == 0 || ni == 4) continue;
                    if (ni == 1 || ni == 3) {
                        const int apex = ni == 1 ? inside[0] : outside[0];
                        const int* base = ni == 1 ? outside : inside;
                        const int v0 = edge_vertex(corner[apex], value[apex], corner[base[0]], value[base[0]]);
                        const int v1 = edge_vertex(corner[apex], value[apex], corner[base[1]], value[base[1]]);
                        const int v2 = edge_vertex(corner[apex], value[apex], corner[base[2]], value[base[2]]);
                        const Vec3 ref = ni == 1 ? pos(corner[apex][0], corner[apex][1], corner[apex][2])
                                                 : (1.0 / 3.0) *
                                                       (pos(corner[base[0]][0], corner[base[0]][1], corner[base[0]][2]) +
                                                        pos(corner[base[1]][0], corner[base[1]][1], corner[base[1]][2]) +
                                                        pos(corner[base[2]][0], corner[base[2]][1], corner[base[2]][2]));
                        emit_triangle(v0, v1, v2, ref);
                    } else {  // 2 in, 2 out: a quad
                        const int a = inside[0], b2 = inside[1], c = outside[0], d = outside[1];
                        const int vac = edge_vertex(corner[a], value[a], corner[c], value[c]);
                        const int vad = edge_vertex(corner[a], value[a], corner[d], value[d]);
                        const int vbc = edge_vertex(corner[b2], value[b2], corner[c], value[c]);
                        const int vbd = edge_vertex(corner[b2], value[b2], corner[d], value[d]);
                        const Vec3 ref = 0.5 * (pos(corner[a][0], corner[a][1], corner[a][2]) +
                                                pos(corner[b2][0], corner[b2][1], corner[b2][2]));
                        emit_triangle(vac, vad, vbd, ref);
                        emit_triangle(vac, vbd, vbc, ref);
                    }
                }
            }
    return mesh;
}

/// OBJ export with per-vertex colors appended to the `v` lines (x y z r g b).
inline void save_obj(const Mesh& mesh, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("save_obj: cannot open " + path);
    os.precision(9);
    for (size_t i = 0; i < mesh.vertices.size(); ++i) {
        const Vec3& v = mesh.vertices[i];
        const Vec3& c = mesh.vertex_colors[i];
        os << "v " << v[0] << " " << v[1] << " " << v[2] << " " << c[0] << " " << c[1] << " " << c[2]
           << "\n";
    }
    for (const auto& t : mesh.triangles)
        os << "f " << t[0] + 1 << " " << t[1] + 1 << " " << t[2] + 1 << "\n";
    if (!os) throw std::runtime_error("save_obj: write failed for " + path);
}

/// Area-weighted uniform surface sampling, deterministic per seed.
inline Array sample_mesh_points(const Mesh& mesh, int n, uint64_t seed) {
    if (mesh.empty()) throw std::invalid_argument("sample_mesh_points: empty mesh");
    std::vector<double> cumulative(mesh.triangles.size());
    double total = 0.0;
    for (size_t i = 0; i < mesh.triangles.size(); ++i) {
        const auto& t = mesh.triangles[i];
        total += 0.5 * norm(cross(mesh.vertices[t[1]] - mesh.vertices[t[0]],
                                  mesh.vertices[t[2]] - mesh.vertices[t[0]]));
        cumulative[i] = total;
    }
    Rng rng(mix_seed(seed, 0x6d657368));
    Array out({n, 3});
    for (int i = 0; i < n; ++i) {
        const double pick = rng.uniform() * total;
        const size_t tri =
            std::lower_bound(cumulative.begin(), cumulative.end(), pick) - cumulative.begin();
        const auto& t = mesh.triangles[std::min(tri, mesh.triangles.size() - 1)];
        const double r1 = std::sqrt(rng.uniform());
        const double r2 = rng.uniform();
        const Vec3 p = (1 - r1) * mesh.vertices[t[0]] + (r1 * (1 - r2)) * mesh.vertices[t[1]] +
                       (r1 * r2) * mesh.vertices[t[2]];
        for (int a = 0; a < 3; ++a) out[static_cast<int64_t>(i) * 3 + a] = p[a];
    }
    return out;
}

}  // namespace finv
