#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "finv/array.hpp"

namespace finv {

/// Thrown when a forward evaluation produces NaN/Inf anywhere in the graph.
struct NonFiniteError : std::runtime_error {
    int node;
    explicit NonFiniteError(int node_id, const std::string& what)
        : std::runtime_error(what), node(node_id) {}
};

enum class Op {
    kConstant,
    kInput,
    kAdd,
    kSub,
    kMul,
    kAddRow,  // [N,C] + [1,C], the row broadcast fused away
    kAddScalar,
    kMulScalar,
    kMatMul,
    kBroadcast,
    kReshape,
    kConcat,
    kSumAll,
    kMeanAll,
    kSumAxis,
    kTanh,
    kSigmoid,
    kSoftplus,
    kExp,
    kLog,
    kSin,
    kCos,
    kAbs,
    kClamp,
    kGatherInterp,   // sparse weighted gather: out[i] = sum_k w[i,k] * x[idx[i,k]]
    kScatterRows,    // out[rows[i], :] = x[i, :], zeros elsewhere
    kCumsumExclLast, // exclusive prefix sum along the last axis of a 2-D array
    kSliceCols,      // contiguous column range of a 2-D array
};

inline const char* op_name(Op op) {
    switch (op) {
        case Op::kConstant: return "constant";
        case Op::kInput: return "input";
        case Op::kAdd: return "add";
        case Op::kSub: return "sub";
        case Op::kMul: return "mul";
        case Op::kAddScalar: return "add_scalar";
        case Op::kMulScalar: return "mul_scalar";
        case Op::kMatMul: return "matmul";
        case Op::kBroadcast: return "broadcast";
        case Op::kReshape: return "reshape";
        case Op::kConcat: return "concat";
        case Op::kSumAll: return "sum";
        case Op::kMeanAll: return "mean";
        case Op::kSumAxis: return "sum_axis";
        case Op::kTanh: return "tanh";
        case Op::kSigmoid: return "sigmoid";
        case Op::kSoftplus: return "softplus";
        case Op::kExp: return "exp";
        case Op::kLog: return "log";
        case Op::kSin: return "sin";
        case Op::kCos: return "cos";
        case Op::kAbs: return "abs";
        case Op::kClamp: return "clamp";
        case Op::kGatherInterp: return "gather_interp";
        case Op::kScatterRows: return "scatter_rows";
        case Op::kCumsumExclLast: return "cumsum_excl";
        case Op::kSliceCols: return "slice_cols";
    }
    return "?";
}

/// Precomputed sparse interpolation stencil shared between graphs (e.g. the
/// trilinear corners of every ray sample for one camera).
struct InterpStencil {
    int64_t rows = 0;
    int taps = 0;
    std::vector<int32_t> index;   // rows*taps, into the source's leading axis
    std::vector<double> weight;   // rows*taps
};

struct ScatterSpec {
    int64_t out_rows = 0;
    std::vector<int32_t> row;  // one target row per input row, no duplicates
};

struct Node {
    Op op = Op::kConstant;
    Shape shape;
    std::vector<int> inputs;
    double a = 0.0, b = 0.0;  // scalar payload (add/mul scalar, clamp bounds)
    int axis = -1;
    int col_lo = 0, col_hi = 0;
    bool requires_grad = false;
    std::shared_ptr<const Array> value;  // constants only
    std::shared_ptr<const InterpStencil> stencil;
    std::shared_ptr<const ScatterSpec> scatter;
};

class Graph;

/// Per-evaluation buffers, reusable across repeated evaluations of one graph.
/// A workspace belongs to a single caller; distinct workspaces over the same
/// (immutable) graph may run concurrently.
class Workspace {
public:
    const Array& value(int id) const { return *val_[id]; }
    bool has_value(int id) const { return id < static_cast<int>(val_.size()) && val_[id] != nullptr; }
    const Array& grad(int id) const { return grad_[id]; }

private:
    friend class Graph;
    std::vector<const Array*> val_;  // points into owned_, graph constants, or fed inputs
    std::vector<Array> owned_;
    std::vector<Array> grad_;
    std::vector<char> grad_live_;
    std::vector<Array> fed_;  // copies of the fed leaf values
};

/// Tape-based computation graph over dense double arrays. Nodes are stored in
/// topological order (inputs always precede consumers); shapes are checked as
/// nodes are added. Leaves are input nodes; gradients flow only along paths
/// that reach a leaf.
class Graph {
public:
    int num_nodes() const { return static_cast<int>(nodes_.size()); }
    const Node& node(int id) const { return nodes_[id]; }
    const std::vector<int>& leaves() const { return leaves_; }

    int input(Shape shape) {
        Node n;
        n.op = Op::kInput;
        n.shape = std::move(shape);
        n.requires_grad = true;
        int id = push(std::move(n));
        leaves_.push_back(id);
        return id;
    }

    int constant(Array value) {
        Node n;
        n.op = Op::kConstant;
        n.shape = value.shape();
        n.value = std::make_shared<Array>(std::move(value));
        return push(std::move(n));
    }

    int constant_scalar(double v) { return constant(Array::scalar(v)); }

    /// Replaces a constant's payload (same shape). The single owner of a graph
    /// may use this to refresh values that are external to the optimized
    /// leaves, e.g. a field recomputed by another optimizer.
    void set_constant(int id, Array value) {
        Node& n = nodes_[id];
        if (n.op != Op::kConstant) throw std::logic_error("set_constant: node is not a constant");
        if (!same_shape(n.shape, value.shape()))
            throw std::invalid_argument("set_constant: shape mismatch");
        n.value = std::make_shared<Array>(std::move(value));
    }

    int add(int x, int y) { return binary(Op::kAdd, x, y); }
    int sub(int x, int y) { return binary(Op::kSub, x, y); }
    int mul(int x, int y) { return binary(Op::kMul, x, y); }

    int add_scalar(int x, double c) {
        Node n = unary_node(Op::kAddScalar, x);
        n.a = c;
        return push(std::move(n));
    }
    int mul_scalar(int x, double c) {
        Node n = unary_node(Op::kMulScalar, x);
        n.a = c;
        return push(std::move(n));
    }

    int matmul(int x, int y) {
        const Shape& a = nodes_[x].shape;
        const Shape& b = nodes_[y].shape;
        if (a.size() != 2 || b.size() != 2 || a[1] != b[0])
            throw std::invalid_argument("matmul: incompatible shapes " + shape_str(a) + " x " + shape_str(b));
        Node n;
        n.op = Op::kMatMul;
        n.shape = {a[0], b[1]};
        n.inputs = {x, y};
        return push(std::move(n));
    }

    int broadcast(int x, Shape to) {
        const Shape& from = nodes_[x].shape;
        if (from.size() != to.size())
            throw std::invalid_argument("broadcast: rank mismatch " + shape_str(from) + " -> " + shape_str(to));
        for (size_t i = 0; i < to.size(); ++i)
            if (from[i] != to[i] && from[i] != 1)
                throw std::invalid_argument("broadcast: dim " + std::to_string(i) + " of " + shape_str(from) +
                                            " cannot expand to " + shape_str(to));
        Node n;
        n.op = Op::kBroadcast;
        n.shape = std::move(to);
        n.inputs = {x};
        return push(std::move(n));
    }

    int reshape(int x, Shape to) {
        if (numel(nodes_[x].shape) != numel(to))
            throw std::invalid_argument("reshape: numel mismatch");
        Node n;
        n.op = Op::kReshape;
        n.shape = std::move(to);
        n.inputs = {x};
        return push(std::move(n));
    }

    int concat(const std::vector<int>& xs, int axis) {
        if (xs.empty()) throw std::invalid_argument("concat: no inputs");
        Shape out = nodes_[xs[0]].shape;
        if (axis < 0 || axis >= static_cast<int>(out.size())) throw std::invalid_argument("concat: bad axis");
        for (size_t i = 1; i < xs.size(); ++i) {
            const Shape& s = nodes_[xs[i]].shape;
            if (s.size() != out.size()) throw std::invalid_argument("concat: rank mismatch");
            for (size_t d = 0; d < s.size(); ++d)
                if (static_cast<int>(d) != axis && s[d] != out[d])
                    throw std::invalid_argument("concat: shape mismatch off-axis");
            out[axis] += s[axis];
        }
        Node n;
        n.op = Op::kConcat;
        n.shape = std::move(out);
        n.inputs = xs;
        n.axis = axis;
        return push(std::move(n));
    }

    int sum_all(int x) {
        Node n = unary_node(Op::kSumAll, x);
        n.shape = {};
        return push(std::move(n));
    }
    int mean_all(int x) {
        Node n = unary_node(Op::kMeanAll, x);
        n.shape = {};
        return push(std::move(n));
    }
    int sum_axis(int x, int axis) {
        const Shape& s = nodes_[x].shape;
        if (axis < 0 || axis >= static_cast<int>(s.size())) throw std::invalid_argument("sum_axis: bad axis");
        Shape out;
        for (int d = 0; d < static_cast<int>(s.size()); ++d)
            if (d != axis) out.push_back(s[d]);
        Node n;
        n.op = Op::kSumAxis;
        n.shape = std::move(out);
        n.inputs = {x};
        n.axis = axis;
        return push(std::move(n));
    }

    int tanh(int x) { return push(unary_node(Op::kTanh, x)); }
    int sigmoid(int x) { return push(unary_node(Op::kSigmoid, x)); }
    int softplus(int x) { return push(unary_node(Op::kSoftplus, x)); }
    int exp(int x) { return push(unary_node(Op::kExp, x)); }
    int log(int x) { return push(unary_node(Op::kLog, x)); }
    int sin(int x) { return push(unary_node(Op::kSin, x)); }
    int cos(int x) { return push(unary_node(Op::kCos, x)); }
    int abs(int x) { return push(unary_node(Op::kAbs, x)); }

    /// Clamp to [lo, hi]; gradient is zero outside the interval.
    int clamp(int x, double lo, double hi) {
        Node n = unary_node(Op::kClamp, x);
        n.a = lo;
        n.b = hi;
        return push(std::move(n));
    }

    /// out[i] (or out[i,:] for 2-D sources) = sum_k weight[i,k] * x[index[i,k]].
    int gather_interp(int x, std::shared_ptr<const InterpStencil> st) {
        const Shape& s = nodes_[x].shape;
        if (s.size() != 1 && s.size() != 2) throw std::invalid_argument("gather_interp: source must be 1-D or 2-D");
        Node n;
        n.op = Op::kGatherInterp;
        n.inputs = {x};
        n.shape = s.size() == 1 ? Shape{static_cast<int>(st->rows)}
                                : Shape{static_cast<int>(st->rows), s[1]};
        n.stencil = std::move(st);
        return push(std::move(n));
    }

    /// Scatters rows of a [K,C] (or [K]) array into a zero [R,C] (or [R]) array.
    int scatter_rows(int x, std::shared_ptr<const ScatterSpec> sp) {
        const Shape& s = nodes_[x].shape;
        if (s.size() != 1 && s.size() != 2) throw std::invalid_argument("scatter_rows: source must be 1-D or 2-D");
        if (s[0] != static_cast<int>(sp->row.size()))
            throw std::invalid_argument("scatter_rows: row count mismatch");
        Node n;
        n.op = Op::kScatterRows;
        n.inputs = {x};
        n.shape = s.size() == 1 ? Shape{static_cast<int>(sp->out_rows)}
                                : Shape{static_cast<int>(sp->out_rows), s[1]};
        n.scatter = std::move(sp);
        return push(std::move(n));
    }

    /// Columns [lo, hi) of a 2-D array.
    int slice_cols(int x, int lo, int hi) {
        const Shape& s = nodes_[x].shape;
        if (s.size() != 2 || lo < 0 || hi > s[1] || lo >= hi)
            throw std::invalid_argument("slice_cols: bad range");
        Node n;
        n.op = Op::kSliceCols;
        n.shape = {s[0], hi - lo};
        n.inputs = {x};
        n.col_lo = lo;
        n.col_hi = hi;
        return push(std::move(n));
    }

    /// y[i,j] = sum_{k<j} x[i,k] on a 2-D array.
    int cumsum_exclusive(int x) {
        const Shape& s = nodes_[x].shape;
        if (s.size() != 2) throw std::invalid_argument("cumsum_exclusive: input must be 2-D");
        Node n;
        n.op = Op::kCumsumExclLast;
        n.shape = s;
        n.inputs = {x};
        return push(std::move(n));
    }

    // ------------------------------------------------------------------
    // Evaluation

    /// Forward pass. `leaf_values` feeds every input node (keyed by node id);
    /// values and shapes are validated. All intermediate values must come out
    /// finite, otherwise NonFiniteError.
    void forward(Workspace& ws, const std::map<int, Array>& leaf_values) const {
        prepare(ws);
        for (int id : leaves_) {
            auto it = leaf_values.find(id);
            if (it == leaf_values.end())
                throw std::invalid_argument("forward: missing value for leaf " + std::to_string(id));
            if (!same_shape(it->second.shape(), nodes_[id].shape))
                throw std::invalid_argument("forward: leaf " + std::to_string(id) + " expects shape " +
                                            shape_str(nodes_[id].shape) + ", got " + shape_str(it->second.shape()));
            ws.fed_[id] = it->second;
            ws.val_[id] = &ws.fed_[id];
        }
        for (int id = 0; id < num_nodes(); ++id) eval_node(ws, id);
    }

    /// Reverse pass from a scalar output. Must be called on a workspace that
    /// holds a completed forward pass. Returns the gradient for every leaf
    /// (zero-filled when the output does not depend on it).
    std::map<int, Array> backward(Workspace& ws, int output) const {
        if (numel(nodes_[output].shape) != 1)
            throw std::invalid_argument("backward: output node must be scalar, got " +
                                        shape_str(nodes_[output].shape));
        if (!ws.has_value(output)) throw std::logic_error("backward: run forward first");
        ws.grad_.resize(nodes_.size());
        ws.grad_live_.assign(nodes_.size(), 0);
        seed_grad(ws, output, 1.0);
        for (int id = output; id >= 0; --id) {
            if (!ws.grad_live_[id] || !nodes_[id].requires_grad) continue;
            back_node(ws, id);
        }
        std::map<int, Array> out;
        for (int id : leaves_) {
            if (ws.grad_live_[id])
                out.emplace(id, ws.grad_[id]);
            else
                out.emplace(id, Array(nodes_[id].shape));
        }
        return out;
    }

    /// Convenience single-shot API used by tests and small callers.
    std::map<int, Array> evaluate(const std::map<int, Array>& leaf_values) const {
        Workspace ws;
        forward(ws, leaf_values);
        std::map<int, Array> out;
        for (int id = 0; id < num_nodes(); ++id) out.emplace(id, ws.value(id));
        return out;
    }

    /// Max over entries of one leaf of |analytic - central difference| /
    /// max(1, |analytic|), with the given step. Independent oracle for the
    /// reverse pass.
    double finite_difference_check(const std::map<int, Array>& leaf_values, int leaf, int output,
                                   double step) const {
        if (step <= 0.0) throw std::invalid_argument("finite_difference_check: step must be > 0");
        Workspace ws;
        forward(ws, leaf_values);
        auto grads = backward(ws, output);
        const Array& analytic = grads.at(leaf);
        std::map<int, Array> perturbed = leaf_values;
        Array& x = perturbed.at(leaf);
        double worst = 0.0;
        for (int64_t i = 0; i < x.size(); ++i) {
            const double orig = x[i];
            x[i] = orig + step;
            forward(ws, perturbed);
            const double fp = ws.value(output).value();
            x[i] = orig - step;
            forward(ws, perturbed);
            const double fm = ws.value(output).value();
            x[i] = orig;
            const double fd = (fp - fm) / (2.0 * step);
            const double err = std::abs(analytic[i] - fd) / std::max(1.0, std::abs(analytic[i]));
            worst = std::max(worst, err);
        }
        return worst;
    }

private:
    std::vector<Node> nodes_;
    std::vector<int> leaves_;

    Node unary_node(Op op, int x) const {
        Node n;
        n.op = op;
        n.shape = nodes_[x].shape;
        n.inputs = {x};
        return n;
    }

    int binary(Op op, int x, int y) {
        if (!same_shape(nodes_[x].shape, nodes_[y].shape))
            throw std::invalid_argument(std::string(op_name(op)) + ": shape mismatch " +
                                        shape_str(nodes_[x].shape) + " vs " + shape_str(nodes_[y].shape));
        Node n;
        n.op = op;
        n.shape = nodes_[x].shape;
        n.inputs = {x, y};
        return push(std::move(n));
    }

    int push(Node n) {
        for (int in : n.inputs) {
            if (in < 0 || in >= num_nodes()) throw std::invalid_argument("node input out of range");
            n.requires_grad = n.requires_grad || nodes_[in].requires_grad;
        }
        nodes_.push_back(std::move(n));
        return num_nodes() - 1;
    }

    void prepare(Workspace& ws) const {
        const size_t n = nodes_.size();
        if (ws.val_.size() != n) {
            ws.val_.assign(n, nullptr);
            ws.owned_.resize(n);
            ws.fed_.resize(n);
        }
    }

    Array& out_buffer(Workspace& ws, int id) const {
        Array& buf = ws.owned_[id];
        if (!same_shape(buf.shape(), nodes_[id].shape)) buf = Array(nodes_[id].shape);
        ws.val_[id] = &buf;
        return buf;
    }

    void check_finite(const Array& a, int id) const {
        if (!Eigen::Map<const Eigen::ArrayXd>(a.data(), a.size()).allFinite())
            throw NonFiniteError(id, "non-finite value in node " + std::to_string(id) + " (" +
                                         op_name(nodes_[id].op) + ")");
    }

    using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    using MapM = Eigen::Map<EMat>;
    using MapC = Eigen::Map<const EMat>;

    void eval_node(Workspace& ws, int id) const {
        const Node& n = nodes_[id];
        switch (n.op) {
            case Op::kConstant:
                ws.val_[id] = n.value.get();
                return;  // constants are validated once at insertion
            case Op::kInput:
                check_finite(*ws.val_[id], id);
                return;
            default:
                break;
        }
        const Array& x = *ws.val_[n.inputs[0]];
        Array& y = out_buffer(ws, id);
        const double* xs = x.data();
        double* ys = y.data();
        const int64_t count = y.size();
        switch (n.op) {
            case Op::kAdd: {
                const double* zs = ws.val_[n.inputs[1]]->data();
                for (int64_t i = 0; i < count; ++i) ys[i] = xs[i] + zs[i];
                break;
            }
            case Op::kSub: {
                const double* zs = ws.val_[n.inputs[1]]->data();
                for (int64_t i = 0; i < count; ++i) ys[i] = xs[i] - zs[i];
                break;
            }
            case Op::kMul: {
                const double* zs = ws.val_[n.inputs[1]]->data();
                for (int64_t i = 0; i < count; ++i) ys[i] = xs[i] * zs[i];
                break;
            }
            case Op::kAddScalar: {
                const double c = n.a;
                for (int64_t i = 0; i < count; ++i) ys[i] = xs[i] + c;
                break;
            }
            case Op::kMulScalar: {
                const double c = n.a;
                for (int64_t i = 0; i < count; ++i) ys[i] = xs[i] * c;
                break;
            }
            case Op::kMatMul: {
                const Array& z = *ws.val_[n.inputs[1]];
                const int m = x.shape()[0], k = x.shape()[1], c = z.shape()[1];
                MapM(y.data(), m, c).noalias() = MapC(x.data(), m, k) * MapC(z.data(), k, c);
                break;
            }
            case Op::kBroadcast:
                broadcast_fwd(x, y);
                break;
            case Op::kReshape:
                std::copy(xs, xs + count, ys);
                break;
            case Op::kConcat: {
                concat_fwd(ws, n, y);
                break;
            }
            case Op::kSumAll:
                ys[0] = Eigen::Map<const Eigen::ArrayXd>(xs, x.size()).sum();
                break;
            case Op::kMeanAll:
                ys[0] = Eigen::Map<const Eigen::ArrayXd>(xs, x.size()).sum() / static_cast<double>(x.size());
                break;
            case Op::kSumAxis:
                sum_axis_fwd(x, y, n.axis);
                break;
            case Op::kTanh:
                // 2*sigmoid(2x) - 1 rides Eigen's vectorized exp; saturates to
                // exactly +/-1 at the extremes. Absolute error stays ~1 ulp.
                Eigen::Map<Eigen::ArrayXd>(ys, count) =
                    2.0 / (1.0 + (-2.0 * Eigen::Map<const Eigen::ArrayXd>(xs, count)).exp()) - 1.0;
                break;
            case Op::kSigmoid:
                // the naive form is value-safe in double: exp(-x) saturates to
                // inf/0 and the quotient lands on exactly 0 or 1
                Eigen::Map<Eigen::ArrayXd>(ys, count) =
                    1.0 / (1.0 + (-Eigen::Map<const Eigen::ArrayXd>(xs, count)).exp());
                break;
            case Op::kSoftplus:
                for (int64_t i = 0; i < count; ++i) ys[i] = stable_softplus(xs[i]);
                break;
            case Op::kExp:
                Eigen::Map<Eigen::ArrayXd>(ys, count) = Eigen::Map<const Eigen::ArrayXd>(xs, count).exp();
                break;
            case Op::kLog:
                Eigen::Map<Eigen::ArrayXd>(ys, count) = Eigen::Map<const Eigen::ArrayXd>(xs, count).log();
                break;
            case Op::kSin:
                for (int64_t i = 0; i < count; ++i) ys[i] = std::sin(xs[i]);
                break;
            case Op::kCos:
                for (int64_t i = 0; i < count; ++i) ys[i] = std::cos(xs[i]);
                break;
            case Op::kAbs:
                for (int64_t i = 0; i < count; ++i) ys[i] = std::abs(xs[i]);
                break;
            case Op::kClamp: {
                const double lo = n.a, hi = n.b;
                for (int64_t i = 0; i < count; ++i) ys[i] = std::min(hi, std::max(lo, xs[i]));
                break;
            }
            case Op::kGatherInterp: {
                const InterpStencil& st = *n.stencil;
                const int c = x.rank() == 2 ? x.shape()[1] : 1;
                for (int64_t r = 0; r < st.rows; ++r) {
                    for (int ch = 0; ch < c; ++ch) {
                        double acc = 0.0;
                        for (int k = 0; k < st.taps; ++k) {
                            const int64_t t = r * st.taps + k;
                            acc += st.weight[t] * x[static_cast<int64_t>(st.index[t]) * c + ch];
                        }
                        y[r * c + ch] = acc;
                    }
                }
                break;
            }
            case Op::kScatterRows: {
                const ScatterSpec& sp = *n.scatter;
                const int c = x.rank() == 2 ? x.shape()[1] : 1;
                y.fill(0.0);
                for (size_t r = 0; r < sp.row.size(); ++r)
                    for (int ch = 0; ch < c; ++ch) y[static_cast<int64_t>(sp.row[r]) * c + ch] = x[r * c + ch];
                break;
            }
            case Op::kCumsumExclLast: {
                const int rows = x.shape()[0], cols = x.shape()[1];
                for (int r = 0; r < rows; ++r) {
                    double acc = 0.0;
                    for (int j = 0; j < cols; ++j) {
                        y[static_cast<int64_t>(r) * cols + j] = acc;
                        acc += x[static_cast<int64_t>(r) * cols + j];
                    }
                }
                break;
            }
            case Op::kSliceCols: {
                const int rows = x.shape()[0], cols = x.shape()[1];
                const int w = n.col_hi - n.col_lo;
                for (int r = 0; r < rows; ++r)
                    for (int j = 0; j < w; ++j)
                        y[static_cast<int64_t>(r) * w + j] = x[static_cast<int64_t>(r) * cols + n.col_lo + j];
                break;
            }
            default:
                throw std::logic_error("eval: unhandled op");
        }
        check_finite(y, id);
    }

    void seed_grad(Workspace& ws, int id, double v) const {
        Array& g = ws.grad_[id];
        if (!same_shape(g.shape(), nodes_[id].shape)) g = Array(nodes_[id].shape);
        g.fill(v);
        ws.grad_live_[id] = 1;
    }

    Array& grad_of(Workspace& ws, int id) const {
        Array& g = ws.grad_[id];
        if (!ws.grad_live_[id]) {
            if (!same_shape(g.shape(), nodes_[id].shape)) g = Array(nodes_[id].shape);
            g.fill(0.0);
            ws.grad_live_[id] = 1;
        }
        return g;
    }

    void back_node(Workspace& ws, int id) const {
        const Node& n = nodes_[id];
        if (n.op == Op::kConstant || n.op == Op::kInput) return;
        const Array& gy = ws.grad_[id];
        const double* gys = gy.data();
        const int64_t count = gy.size();
        auto want = [&](int in) { return nodes_[in].requires_grad; };
        switch (n.op) {
            case Op::kAdd: {
                for (int s = 0; s < 2; ++s)
                    if (want(n.inputs[s])) {
                        double* g = grad_of(ws, n.inputs[s]).data();
                        for (int64_t i = 0; i < count; ++i) g[i] += gys[i];
                    }
                break;
            }
            case Op::kSub: {
                if (want(n.inputs[0])) {
                    double* g = grad_of(ws, n.inputs[0]).data();
                    for (int64_t i = 0; i < count; ++i) g[i] += gys[i];
                }
                if (want(n.inputs[1])) {
                    double* g = grad_of(ws, n.inputs[1]).data();
                    for (int64_t i = 0; i < count; ++i) g[i] -= gys[i];
                }
                break;
            }
            case Op::kMul: {
                const double* a = ws.val_[n.inputs[0]]->data();
                const double* b = ws.val_[n.inputs[1]]->data();
                if (want(n.inputs[0])) {
                    double* g = grad_of(ws, n.inputs[0]).data();
                    for (int64_t i = 0; i < count; ++i) g[i] += gys[i] * b[i];
                }
                if (want(n.inputs[1])) {
                    double* g = grad_of(ws, n.inputs[1]).data();
                    for (int64_t i = 0; i < count; ++i) g[i] += gys[i] * a[i];
                }
                break;
            }
            case Op::kAddScalar: {
                double* g = grad_of(ws, n.inputs[0]).data();
                for (int64_t i = 0; i < count; ++i) g[i] += gys[i];
                break;
            }
            case Op::kMulScalar: {
                double* g = grad_of(ws, n.inputs[0]).data();
                const double c = n.a;
                for (int64_t i = 0; i < count; ++i) g[i] += gys[i] * c;
                break;
            }
            case Op::kMatMul: {
                const Array& a = *ws.val_[n.inputs[0]];
                const Array& b = *ws.val_[n.inputs[1]];
                const int m = a.shape()[0], k = a.shape()[1], c = b.shape()[1];
                if (want(n.inputs[0])) {
                    Array& g = grad_of(ws, n.inputs[0]);
                    MapM(g.data(), m, k).noalias() += MapC(gy.data(), m, c) * MapC(b.data(), k, c).transpose();
                }
                if (want(n.inputs[1])) {
                    Array& g = grad_of(ws, n.inputs[1]);
                    MapM(g.data(), k, c).noalias() += MapC(a.data(), m, k).transpose() * MapC(gy.data(), m, c);
                }
                break;
            }
            case Op::kBroadcast: {
                Array& g = grad_of(ws, n.inputs[0]);
                broadcast_bwd(gy, g);
                break;
            }
            case Op::kReshape: {
                double* g = grad_of(ws, n.inputs[0]).data();
                for (int64_t i = 0; i < count; ++i) g[i] += gys[i];
                break;
            }
            case Op::kConcat:
                concat_bwd(ws, n, gy);
                break;
            case Op::kSumAll: {
                Array& garr = grad_of(ws, n.inputs[0]);
                double* g = garr.data();
                const double s = gys[0];
                for (int64_t i = 0; i < garr.size(); ++i) g[i] += s;
                break;
            }
            case Op::kMeanAll: {
                Array& garr = grad_of(ws, n.inputs[0]);
                double* g = garr.data();
                const double s = gys[0] / static_cast<double>(garr.size());
                for (int64_t i = 0; i < garr.size(); ++i) g[i] += s;
                break;
            }
            case Op::kSumAxis:
                sum_axis_bwd(ws, n, gy);
                break;
            case Op::kTanh: {
                const double* y = ws.val_[id]->data();
                double* g = grad_of(ws, n.inputs[0]).data();
                for (int64_t i = 0; i < count; ++i) g[i] += gys[i] * (1.0 - y[i] * y[i]);
                break;
            }
            case Op::kSigmoid: {
                const double* y = ws.val_[id]->data();
                double* g = grad_of(ws, n.inputs[0]).data();
                for (int64_t i = 0; i < count; ++i) g[i] += gys[i] * y[i] * (1.0 - y[i]);
                break;
            }
            case Op::kSoftplus: {
                const double* x = ws.val_[n.inputs[0]]->data();
                double* g = grad_of(ws, n.inputs[0]).data();
                for (int64_t i = 0; i < count; ++i) g[i] += gys[i] * stable_sigmoid(x[i]);
                break;
            }
            case Op::kExp: {
                const double* y = ws.val_[id]->data();
                double* g = grad_of(ws, n.inputs[0]).data();
                for (int64_t i = 0; i < count; ++i) g[i] += gys[i] * y[i];
                break;
            }
            case Op::kLog: {
                const double* x = ws.val_[n.inputs[0]]->data();
                double* g = grad_of(ws, n.inputs[0]).data();
                for (int64_t i = 0; i < count; ++i) g[i] += gys[i] / x[i];
                break;
            }
            case Op::kSin: {
                const double* x = ws.val_[n.inputs[0]]->data();
                double* g = grad_of(ws, n.inputs[0]).data();
                for (int64_t i = 0; i < count; ++i) g[i] += gys[i] * std::cos(x[i]);
                break;
            }
            case Op::kCos: {
                const double* x = ws.val_[n.inputs[0]]->data();
                double* g = grad_of(ws, n.inputs[0]).data();
                for (int64_t i = 0; i < count; ++i) g[i] -= gys[i] * std::sin(x[i]);
                break;
            }
            case Op::kAbs: {
                const double* x = ws.val_[n.inputs[0]]->data();
                double* g = grad_of(ws, n.inputs[0]).data();
                for (int64_t i = 0; i < count; ++i)
                    g[i] += x[i] > 0.0 ? gys[i] : (x[i] < 0.0 ? -gys[i] : 0.0);
                break;
            }
            case Op::kClamp: {
                const double* x = ws.val_[n.inputs[0]]->data();
                double* g = grad_of(ws, n.inputs[0]).data();
                const double lo = n.a, hi = n.b;
                for (int64_t i = 0; i < count; ++i)
                    if (x[i] >= lo && x[i] <= hi) g[i] += gys[i];
                break;
            }
            case Op::kGatherInterp: {
                const InterpStencil& st = *n.stencil;
                const Array& x = *ws.val_[n.inputs[0]];
                const int c = x.rank() == 2 ? x.shape()[1] : 1;
                Array& g = grad_of(ws, n.inputs[0]);
                for (int64_t r = 0; r < st.rows; ++r)
                    for (int k = 0; k < st.taps; ++k) {
                        const int64_t t = r * st.taps + k;
                        const int64_t base = static_cast<int64_t>(st.index[t]) * c;
                        for (int ch = 0; ch < c; ++ch) g[base + ch] += st.weight[t] * gy[r * c + ch];
                    }
                break;
            }
            case Op::kScatterRows: {
                const ScatterSpec& sp = *n.scatter;
                const Array& x = *ws.val_[n.inputs[0]];
                const int c = x.rank() == 2 ? x.shape()[1] : 1;
                Array& g = grad_of(ws, n.inputs[0]);
                for (size_t r = 0; r < sp.row.size(); ++r)
                    for (int ch = 0; ch < c; ++ch) g[r * c + ch] += gy[static_cast<int64_t>(sp.row[r]) * c + ch];
                break;
            }
            case Op::kCumsumExclLast: {
                // y[r,j] = sum_{k<j} x[r,k]  =>  dx[r,j] = sum_{k>j} gy[r,k]
                const int rows = n.shape[0], cols = n.shape[1];
                Array& g = grad_of(ws, n.inputs[0]);
                for (int r = 0; r < rows; ++r) {
                    double acc = 0.0;
                    for (int j = cols - 1; j >= 0; --j) {
                        g[static_cast<int64_t>(r) * cols + j] += acc;
                        acc += gy[static_cast<int64_t>(r) * cols + j];
                    }
                }
                break;
            }
            case Op::kSliceCols: {
                const int rows = nodes_[n.inputs[0]].shape[0], cols = nodes_[n.inputs[0]].shape[1];
                const int w = n.col_hi - n.col_lo;
                Array& g = grad_of(ws, n.inputs[0]);
                for (int r = 0; r < rows; ++r)
                    for (int j = 0; j < w; ++j)
                        g[static_cast<int64_t>(r) * cols + n.col_lo + j] += gy[static_cast<int64_t>(r) * w + j];
                break;
            }
            default:
                throw std::logic_error("backward: unhandled op");
        }
    }

    static double stable_sigmoid(double x) {
        if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
        const double e = std::exp(x);
        return e / (1.0 + e);
    }

    static double stable_softplus(double x) {
        if (x > 30.0) return x;
        if (x < -30.0) return std::exp(x);
        return std::log1p(std::exp(x));
    }

    void broadcast_fwd(const Array& x, Array& y) const {
        const Shape& from = x.shape();
        const Shape& to = y.shape();
        // row tiling ([1, rest...] -> [n, rest...]) is the hot case
        bool tail_equal = true;
        for (size_t d = 1; d < to.size(); ++d) tail_equal = tail_equal && from[d] == to[d];
        if (from[0] == 1 && tail_equal) {
            const int64_t row = x.size();
            for (int64_t r = 0; r < to[0]; ++r) std::copy(x.data(), x.data() + row, y.data() + r * row);
            return;
        }
        // column tiling: [n, 1] -> [n, m]
        if (to.size() == 2 && from[0] == to[0] && from[1] == 1) {
            const int64_t m = to[1];
            for (int64_t r = 0; r < to[0]; ++r) {
                const double v = x[r];
                double* dst = y.data() + r * m;
                for (int64_t j = 0; j < m; ++j) dst[j] = v;
            }
            return;
        }
        const int r = static_cast<int>(to.size());
        std::vector<int64_t> xstride(r, 0);
        int64_t s = 1;
        for (int d = r - 1; d >= 0; --d) {
            xstride[d] = (from[d] == 1) ? 0 : s;
            s *= from[d];
        }
        std::vector<int> idx(r, 0);
        for (int64_t i = 0; i < y.size(); ++i) {
            int64_t src = 0;
            for (int d = 0; d < r; ++d) src += idx[d] * xstride[d];
            y[i] = x[src];
            for (int d = r - 1; d >= 0; --d) {
                if (++idx[d] < to[d]) break;
                idx[d] = 0;
            }
        }
    }

    void broadcast_bwd(const Array& gy, Array& gx) const {
        const Shape& from = gx.shape();
        const Shape& to = gy.shape();
        bool tail_equal = true;
        for (size_t d = 1; d < to.size(); ++d) tail_equal = tail_equal && from[d] == to[d];
        if (from[0] == 1 && tail_equal) {
            const int64_t row = gx.size();
            for (int64_t r = 0; r < to[0]; ++r) {
                const double* src = gy.data() + r * row;
                for (int64_t j = 0; j < row; ++j) gx[j] += src[j];
            }
            return;
        }
        if (to.size() == 2 && from[0] == to[0] && from[1] == 1) {
            const int64_t m = to[1];
            for (int64_t r = 0; r < to[0]; ++r) {
                const double* src = gy.data() + r * m;
                double acc = 0.0;
                for (int64_t j = 0; j < m; ++j) acc += src[j];
                gx[r] += acc;
            }
            return;
        }
        const int r = static_cast<int>(to.size());
        std::vector<int64_t> xstride(r, 0);
        int64_t s = 1;
        for (int d = r - 1; d >= 0; --d) {
            xstride[d] = (from[d] == 1) ? 0 : s;
            s *= from[d];
        }
        std::vector<int> idx(r, 0);
        for (int64_t i = 0; i < gy.size(); ++i) {
            int64_t src = 0;
            for (int d = 0; d < r; ++d) src += idx[d] * xstride[d];
            gx[src] += gy[i];
            for (int d = r - 1; d >= 0; --d) {
                if (++idx[d] < to[d]) break;
                idx[d] = 0;
            }
        }
    }

    void concat_fwd(Workspace& ws, const Node& n, Array& y) const {
        const int axis = n.axis;
        const Shape& out = n.shape;
        int64_t outer = 1, inner = 1;
        for (int d = 0; d < axis; ++d) outer *= out[d];
        for (int d = axis + 1; d < static_cast<int>(out.size()); ++d) inner *= out[d];
        int64_t off = 0;
        for (int in : n.inputs) {
            const Array& x = *ws.val_[in];
            const int64_t ax = x.shape()[axis];
            for (int64_t o = 0; o < outer; ++o)
                std::copy(x.data() + o * ax * inner, x.data() + (o + 1) * ax * inner,
                          y.data() + (o * out[axis] + off) * inner);
            off += ax;
        }
    }

    void concat_bwd(Workspace& ws, const Node& n, const Array& gy) const {
        const int axis = n.axis;
        const Shape& out = n.shape;
        int64_t outer = 1, inner = 1;
        for (int d = 0; d < axis; ++d) outer *= out[d];
        for (int d = axis + 1; d < static_cast<int>(out.size()); ++d) inner *= out[d];
        int64_t off = 0;
        for (int in : n.inputs) {
            const int64_t ax = nodes_[in].shape[axis];
            if (nodes_[in].requires_grad) {
                Array& g = grad_of(ws, in);
                for (int64_t o = 0; o < outer; ++o) {
                    const double* src = gy.data() + (o * out[axis] + off) * inner;
                    double* dst = g.data() + o * ax * inner;
                    for (int64_t i = 0; i < ax * inner; ++i) dst[i] += src[i];
                }
            }
            off += ax;
        }
    }

    void sum_axis_fwd(const Array& x, Array& y, int axis) const {
        const Shape& s = x.shape();
        int64_t outer = 1, inner = 1;
        const int64_t ax = s[axis];
        for (int d = 0; d < axis; ++d) outer *= s[d];
        for (int d = axis + 1; d < static_cast<int>(s.size()); ++d) inner *= s[d];
        y.fill(0.0);
        for (int64_t o = 0; o < outer; ++o)
            for (int64_t a = 0; a < ax; ++a) {
                const double* src = x.data() + (o * ax + a) * inner;
                double* dst = y.data() + o * inner;
                for (int64_t i = 0; i < inner; ++i) dst[i] += src[i];
            }
    }

    void sum_axis_bwd(Workspace& ws, const Node& n, const Array& gy) const {
        const Shape& s = nodes_[n.inputs[0]].shape;
        const int axis = n.axis;
        int64_t outer = 1, inner = 1;
        const int64_t ax = s[axis];
        for (int d = 0; d < axis; ++d) outer *= s[d];
        for (int d = axis + 1; d < static_cast<int>(s.size()); ++d) inner *= s[d];
        Array& g = grad_of(ws, n.inputs[0]);
        for (int64_t o = 0; o < outer; ++o)
            for (int64_t a = 0; a < ax; ++a) {
                double* dst = g.data() + (o * ax + a) * inner;
                const double* src = gy.data() + o * inner;
                for (int64_t i = 0; i < inner; ++i) dst[i] += src[i];
            }
    }
};

}  // namespace finv
