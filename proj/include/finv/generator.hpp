#pragma once

#include <cstdint>
#include <fstream>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "finv/array.hpp"
#include "finv/graph.hpp"
#include "finv/rng.hpp"

namespace finv {

/// Decoder architecture. Both branches are coordinate-conditioned MLPs over
/// fourier features, so the parameter count is independent of the grid size.
struct ArchConfig {
    int d_latent = 32;
    int hidden = 64;
    int hidden_layers = 3;
    int fourier_bands = 4;  // frequencies 2^k * pi, k = 0..bands-1

    int fourier_dim() const { return 6 * fourier_bands; }
    int geo_in() const { return fourier_dim() + d_latent; }
    int tex_in() const { return fourier_dim() + 2 * d_latent; }
    bool valid() const { return d_latent >= 1 && hidden >= 1 && hidden_layers >= 1 && fourier_bands >= 1; }
};

/// The per-object optimization variable: geometry and texture codes.
struct LatentPair {
    Array w_geo;  // [d_latent]
    Array w_tex;  // [d_latent]
};

struct MlpParams {
    std::vector<Array> weights;  // [in, out] per layer
    std::vector<Array> biases;   // [out] per layer

    int64_t count() const {
        int64_t n = 0;
        for (const auto& w : weights) n += w.size();
        for (const auto& b : biases) n += b.size();
        return n;
    }
};

/// Geometry-branch and texture-branch decoder weights.
struct GeneratorParams {
    ArchConfig arch;
    MlpParams geo;  // occupancy head, linear output (logits)
    MlpParams tex;  // color head, sigmoid output
};

/// Diagonal Gaussian over latent space, fitted to a pretraining latent table.
struct PriorSampler {
    Array mean_geo, mean_tex;    // [d_latent]
    Array scale_geo, scale_tex;  // [d_latent], strictly positive
};

/// Occupancy-logit and color grids over the unit cube [-0.5, 0.5]^3, sampled
/// at cell centers. Linear index is (ix*V + iy)*V + iz.
struct VoxelFields {
    int grid = 0;
    Array occupancy_logits;  // [V^3]
    Array colors;            // [V^3, 3], in [0,1]
};

inline double grid_coord(int i, int V) { return -0.5 + (i + 0.5) / static_cast<double>(V); }

/// Cell-center positions of a V^3 grid, shape [V^3, 3].
inline Array grid_points(int V) {
    Array pts({V * V * V, 3});
    int64_t r = 0;
    for (int ix = 0; ix < V; ++ix)
        for (int iy = 0; iy < V; ++iy)
            for (int iz = 0; iz < V; ++iz) {
                pts[r * 3 + 0] = grid_coord(ix, V);
                pts[r * 3 + 1] = grid_coord(iy, V);
                pts[r * 3 + 2] = grid_coord(iz, V);
                ++r;
            }
    return pts;
}

/// Positional features: sin/cos of each coordinate at frequencies 2^k * pi.
inline Array fourier_features(const Array& points, int bands) {
    const int64_t n = points.shape()[0];
    Array f({static_cast<int>(n), 6 * bands});
    for (int64_t i = 0; i < n; ++i) {
        int64_t c = i * 6 * bands;
        for (int axis = 0; axis < 3; ++axis) {
            const double x = points[i * 3 + axis];
            for (int k = 0; k < bands; ++k) {
                const double arg = std::ldexp(M_PI, k) * x;
                f[c++] = std::sin(arg);
                f[c++] = std::cos(arg);
            }
        }
    }
    return f;
}

/// Fan-in-scaled random initialization, deterministic for a given seed.
inline GeneratorParams init_params(const ArchConfig& arch, uint64_t seed) {
    if (!arch.valid()) throw std::invalid_argument("init_params: invalid architecture config");
    GeneratorParams p;
    p.arch = arch;
    Rng rng(mix_seed(seed, 0x67656e70));
    auto make_mlp = [&](int in_dim, int out_dim) {
        MlpParams mlp;
        std::vector<int> dims{in_dim};
        for (int l = 0; l < arch.hidden_layers; ++l) dims.push_back(arch.hidden);
        dims.push_back(out_dim);
        for (size_t l = 0; l + 1 < dims.size(); ++l) {
            Array w({dims[l], dims[l + 1]});
            const double s = 1.0 / std::sqrt(static_cast<double>(dims[l]));
            for (int64_t i = 0; i < w.size(); ++i) w[i] = s * rng.normal();
            mlp.weights.push_back(std::move(w));
            mlp.biases.push_back(Array({dims[l + 1]}));
        }
        return mlp;
    };
    p.geo = make_mlp(arch.geo_in(), 1);
    p.tex = make_mlp(arch.tex_in(), 3);
    return p;
}

/// Draw from the prior; w = mean + scale .* z with z ~ N(0, I).
inline LatentPair sample_latent(const PriorSampler& s, uint64_t seed) {
    Rng rng(mix_seed(seed, 0x6c617470));
    LatentPair w;
    w.w_geo = Array(s.mean_geo.shape());
    w.w_tex = Array(s.mean_tex.shape());
    for (int64_t i = 0; i < w.w_geo.size(); ++i) w.w_geo[i] = s.mean_geo[i] + s.scale_geo[i] * rng.normal();
    for (int64_t i = 0; i < w.w_tex.size(); ++i) w.w_tex[i] = s.mean_tex[i] + s.scale_tex[i] * rng.normal();
    return w;
}

// ---------------------------------------------------------------------------
// Graph emission

/// Node handles of an emitted decoder. Leaf vectors are empty for branches
/// emitted with constant parameters.
struct DecodeNodes {
    int occupancy = -1;  // [N] logits
    int colors = -1;     // [N, 3] post-sigmoid, -1 unless colors requested
    int w_geo = -1, w_tex = -1;               // latent leaves ([1, d]) if leaves
    std::vector<int> phi_w, phi_b;            // geometry parameter leaves
    std::vector<int> theta_w, theta_b;        // texture parameter leaves
};

struct DecodeOptions {
    bool latents_are_leaves = true;
    bool geo_params_are_leaves = false;
    bool tex_params_are_leaves = false;
    bool want_colors = true;
    bool want_occupancy = true;
    const LatentPair* w = nullptr;           // required when latents are constants
    const DecodeNodes* share_params = nullptr;  // reuse another emission's parameter leaves
    int fourier_node = -1;  // existing [N,F] node to use instead of fresh constants
                            // (parameter-leaf emissions only; enables refreshable inputs)
};

namespace detail {

using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// X [n,in] * W [in,out] + b, computed at build time.
inline Array affine_const(const Array& x, const Array& w, const Array& b) {
    const int n = x.shape()[0], in = x.shape()[1], out = w.shape()[1];
    Array y({n, out});
    Eigen::Map<EMat>(y.data(), n, out).noalias() =
        Eigen::Map<const EMat>(x.data(), n, in) * Eigen::Map<const EMat>(w.data(), in, out);
    for (int64_t r = 0; r < n; ++r)
        for (int c = 0; c < out; ++c) y[r * out + c] += b[c];
    return y;
}

inline Array slice_rows(const Array& w, int lo, int hi) {
    const int out = w.shape()[1];
    Array s({hi - lo, out});
    std::copy(w.data() + static_cast<int64_t>(lo) * out, w.data() + static_cast<int64_t>(hi) * out, s.data());
    return s;
}

struct LatentPart {
    int leaf = -1;           // [1, d] leaf node, or
    const Array* value = nullptr;  // constant [d]
    int dim = 0;
};

// Emits one MLP branch. `fourier` is the [N,F] feature block; latent parts are
// appended after it in input order. When parameters are constants and all
// latent parts are leaves, the fourier contribution of the first layer is
// folded into one constant, so per-evaluation cost starts at the hidden
// layers.
inline int emit_mlp(Graph& g, const Array& fourier, const std::vector<LatentPart>& parts,
                    const MlpParams& mlp, bool params_are_leaves, std::vector<int>* w_leaves,
                    std::vector<int>* b_leaves, int fourier_node = -1) {
    const int n = fourier.shape()[0];
    const int f_dim = fourier.shape()[1];
    const int layers = static_cast<int>(mlp.weights.size());
    int h = -1;

    if (!params_are_leaves) {
        // first layer folded: the fourier block (and any constant latent part)
        // is premultiplied into one constant, leaf parts contribute a [1,H]
        // matmul broadcast over rows
        const int h_dim = mlp.weights[0].shape()[1];
        Array folded = affine_const(fourier, slice_rows(mlp.weights[0], 0, f_dim), mlp.biases[0]);
        int row_off = f_dim;
        struct LeafRow {
            int leaf, off, dim;
        };
        std::vector<LeafRow> leaf_rows;
        for (const auto& p : parts) {
            if (p.leaf >= 0) {
                leaf_rows.push_back({p.leaf, row_off, p.dim});
            } else {
                const Array wp = slice_rows(mlp.weights[0], row_off, row_off + p.dim);
                for (int c = 0; c < h_dim; ++c) {
                    double acc = 0;
                    for (int j = 0; j < p.dim; ++j) acc += (*p.value)[j] * wp[static_cast<int64_t>(j) * h_dim + c];
                    for (int64_t r = 0; r < n; ++r) folded[r * h_dim + c] += acc;
                }
            }
            row_off += p.dim;
        }
        h = g.constant(std::move(folded));
        for (const auto& lr : leaf_rows) {
            int wc = g.constant(slice_rows(mlp.weights[0], lr.off, lr.off + lr.dim));
            int contrib = g.matmul(lr.leaf, wc);  // [1, H]
            h = g.add(h, g.broadcast(contrib, {n, h_dim}));
        }
        h = g.tanh(h);
        for (int l = 1; l < layers; ++l) {
            int hw = g.matmul(h, g.constant(mlp.weights[l]));
            Array brow = mlp.biases[l];
            brow.reshape({1, mlp.biases[l].shape()[0]});
            h = g.add(hw, g.broadcast(g.constant(brow), g.node(hw).shape));
            if (l + 1 < layers) h = g.tanh(h);
        }
        return h;
    }

    // parameters are leaves
    int x;
    {
        bool any_leaf = false;
        for (const auto& p : parts) any_leaf = any_leaf || p.leaf >= 0;
        if (!any_leaf) {
            Shape xs{n, f_dim};
            for (const auto& p : parts) xs[1] += p.dim;
            Array xf(xs);
            for (int64_t r = 0; r < n; ++r) {
                int64_t c = r * xs[1];
                for (int j = 0; j < f_dim; ++j) xf[c++] = fourier[r * f_dim + j];
                for (const auto& p : parts)
                    for (int j = 0; j < p.dim; ++j) xf[c++] = (*p.value)[j];
            }
            x = g.constant(std::move(xf));
        } else {
            std::vector<int> blocks{fourier_node >= 0 ? fourier_node : g.constant(fourier)};
            for (const auto& p : parts) {
                int part_node;
                if (p.leaf >= 0) {
                    part_node = p.leaf;
                } else {
                    Array row = *p.value;
                    row.reshape({1, p.dim});
                    part_node = g.constant(std::move(row));
                }
                blocks.push_back(g.broadcast(part_node, {n, p.dim}));
            }
            x = g.concat(blocks, 1);
        }
    }
    // parameter leaves may be pre-created by the caller (shared across
    // several emissions, e.g. a pretraining batch)
    const bool reuse = w_leaves && !w_leaves->empty();
    int h2 = x;
    for (int l = 0; l < layers; ++l) {
        int wl, bl;
        if (reuse) {
            wl = (*w_leaves)[l];
            bl = (*b_leaves)[l];
        } else {
            wl = g.input({mlp.weights[l].shape()[0], mlp.weights[l].shape()[1]});
            bl = g.input({1, mlp.biases[l].shape()[0]});
            if (w_leaves) w_leaves->push_back(wl);
            if (b_leaves) b_leaves->push_back(bl);
        }
        int hw = g.matmul(h2, wl);
        h2 = g.add(hw, g.broadcast(bl, g.node(hw).shape));
        if (l + 1 < layers) h2 = g.tanh(h2);
    }
    return h2;
}

}  // namespace detail

/// Emits the decoder for the given fourier block. Geometry output is raw
/// logits; colors go through a sigmoid. The mask path never sees w_tex or
/// theta: occupancy depends on (w_geo, phi) only.
inline DecodeNodes emit_decode(Graph& g, const GeneratorParams& params, const Array& fourier,
                               const DecodeOptions& opt) {
    const ArchConfig& arch = params.arch;
    const int n = fourier.shape()[0];
    DecodeNodes out;
    if (opt.share_params) {
        out.phi_w = opt.share_params->phi_w;
        out.phi_b = opt.share_params->phi_b;
        out.theta_w = opt.share_params->theta_w;
        out.theta_b = opt.share_params->theta_b;
    }

    detail::LatentPart geo_part, tex_part;
    geo_part.dim = tex_part.dim = arch.d_latent;
    if (opt.latents_are_leaves) {
        out.w_geo = g.input({1, arch.d_latent});
        geo_part.leaf = out.w_geo;
    } else {
        if (!opt.w) throw std::invalid_argument("emit_decode: constant latents need a value");
        geo_part.value = &opt.w->w_geo;
    }

    if (opt.want_occupancy) {
        int occ = detail::emit_mlp(g, fourier, {geo_part}, params.geo, opt.geo_params_are_leaves,
                                   &out.phi_w, &out.phi_b, opt.fourier_node);
        out.occupancy = g.reshape(occ, {n});
    }

    if (opt.want_colors) {
        if (opt.latents_are_leaves) {
            out.w_tex = g.input({1, arch.d_latent});
            tex_part.leaf = out.w_tex;
        } else {
            tex_part.value = &opt.w->w_tex;
        }
        int tex = detail::emit_mlp(g, fourier, {geo_part, tex_part}, params.tex, opt.tex_params_are_leaves,
                                   &out.theta_w, &out.theta_b, opt.fourier_node);
        out.colors = g.sigmoid(tex);
    }
    return out;
}

inline Array as_row(const Array& v) {
    Array r = v;
    r.reshape({1, v.shape()[0]});
    return r;
}

/// Feeds a latent pair into the leaves emitted by emit_decode.
inline void feed_latents(std::map<int, Array>& leaf_values, const DecodeNodes& nodes, const LatentPair& w) {
    if (nodes.w_geo >= 0) leaf_values[nodes.w_geo] = as_row(w.w_geo);
    if (nodes.w_tex >= 0) leaf_values[nodes.w_tex] = as_row(w.w_tex);
}

/// Feeds one MLP's parameters into leaves emitted with params_are_leaves.
inline void feed_mlp(std::map<int, Array>& leaf_values, const std::vector<int>& w_leaves,
                     const std::vector<int>& b_leaves, const MlpParams& mlp) {
    for (size_t l = 0; l < w_leaves.size(); ++l) {
        leaf_values[w_leaves[l]] = mlp.weights[l];
        leaf_values[b_leaves[l]] = as_row(mlp.biases[l]);
    }
}

/// Decode a latent pair to voxel fields (forward only).
inline VoxelFields decode(const LatentPair& w, const GeneratorParams& params, int grid_size) {
    if (static_cast<int>(w.w_geo.size()) != params.arch.d_latent ||
        static_cast<int>(w.w_tex.size()) != params.arch.d_latent)
        throw std::invalid_argument("decode: latent length does not match architecture");
    Graph g;
    Array fourier = fourier_features(grid_points(grid_size), params.arch.fourier_bands);
    DecodeOptions opt;
    DecodeNodes nodes = emit_decode(g, params, fourier, opt);
    std::map<int, Array> leaves;
    feed_latents(leaves, nodes, w);
    Workspace ws;
    g.forward(ws, leaves);
    VoxelFields out;
    out.grid = grid_size;
    out.occupancy_logits = ws.value(nodes.occupancy);
    out.colors = ws.value(nodes.colors);
    return out;
}

// ---------------------------------------------------------------------------
// Checkpoint I/O: "FINVPRIOR1" magic, JSON header, raw little-endian doubles.

namespace detail {

inline void write_block(std::ostream& os, const Array& a) {
    os.write(reinterpret_cast<const char*>(a.data()), a.size() * sizeof(double));
}

inline void read_block(std::istream& is, Array& a) {
    is.read(reinterpret_cast<char*>(a.data()), a.size() * sizeof(double));
    if (!is) throw std::runtime_error("checkpoint: truncated weight block");
}

}  // namespace detail

inline void save_params(const GeneratorParams& p, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("save_params: cannot open " + path);
    nlohmann::json header{{"d_latent", p.arch.d_latent},
                          {"hidden", p.arch.hidden},
                          {"hidden_layers", p.arch.hidden_layers},
                          {"fourier_bands", p.arch.fourier_bands}};
    os << "FINVPRIOR1\n" << header.dump() << "\n";
    for (const auto& mlp : {&p.geo, &p.tex}) {
        for (size_t l = 0; l < mlp->weights.size(); ++l) {
            detail::write_block(os, mlp->weights[l]);
            detail::write_block(os, mlp->biases[l]);
        }
    }
    if (!os) throw std::runtime_error("save_params: write failed for " + path);
}

inline GeneratorParams load_params(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("load_params: cannot open " + path);
    std::string magic, header_line;
    std::getline(is, magic);
    if (magic != "FINVPRIOR1") throw std::runtime_error("load_params: bad magic in " + path);
    std::getline(is, header_line);
    const auto header = nlohmann::json::parse(header_line);
    ArchConfig arch;
    arch.d_latent = header.at("d_latent");
    arch.hidden = header.at("hidden");
    arch.hidden_layers = header.at("hidden_layers");
    arch.fourier_bands = header.at("fourier_bands");
    GeneratorParams p = init_params(arch, 0);
    for (auto* mlp : {&p.geo, &p.tex}) {
        for (size_t l = 0; l < mlp->weights.size(); ++l) {
            detail::read_block(is, mlp->weights[l]);
            detail::read_block(is, mlp->biases[l]);
        }
    }
    return p;
}

}  // namespace finv
