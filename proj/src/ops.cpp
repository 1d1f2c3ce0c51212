#include "headspec/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace headspec {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

Tensor make_op(Shape shape, Eigen::ArrayXd vals, const char* op,
               const std::vector<Tensor>& inputs, std::function<void(Node&)> bw) {
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->values = std::move(vals);
    n->op = op;
    bool track = grad_enabled();
    if (track) {
        track = false;
        for (const auto& t : inputs)
            if (t.node()->requires_grad) track = true;
    }
    if (track) {
        n->requires_grad = true;
        for (const auto& t : inputs) n->parents.push_back(t.node());
        n->backward_fn = std::move(bw);
    }
    return Tensor(std::move(n));
}

std::vector<int> row_strides(const Shape& s) {
    std::vector<int> st(s.size(), 1);
    for (int i = static_cast<int>(s.size()) - 2; i >= 0; i--)
        st[static_cast<size_t>(i)] = st[static_cast<size_t>(i) + 1] * s[static_cast<size_t>(i) + 1];
    return st;
}

struct BroadcastPlan {
    Shape out;
    std::vector<int> stride_a;  // 0 on broadcast dims
    std::vector<int> stride_b;
};

BroadcastPlan broadcast_shapes(const char* op, const Shape& a, const Shape& b) {
    const size_t nd = std::max(a.size(), b.size());
    Shape pa(nd, 1), pb(nd, 1);
    std::copy(a.begin(), a.end(), pa.begin() + static_cast<long>(nd - a.size()));
    std::copy(b.begin(), b.end(), pb.begin() + static_cast<long>(nd - b.size()));
    BroadcastPlan plan;
    plan.out.resize(nd);
    for (size_t i = 0; i < nd; i++) {
        if (pa[i] == pb[i] || pa[i] == 1 || pb[i] == 1) {
            plan.out[i] = std::max(pa[i], pb[i]);
        } else {
            throw std::invalid_argument(std::string(op) + ": shapes not broadcastable " +
                                        shape_str(a) + " vs " + shape_str(b));
        }
    }
    auto sa = row_strides(pa);
    auto sb = row_strides(pb);
    plan.stride_a.resize(nd);
    plan.stride_b.resize(nd);
    for (size_t i = 0; i < nd; i++) {
        plan.stride_a[i] = pa[i] == 1 ? 0 : sa[i];
        plan.stride_b[i] = pb[i] == 1 ? 0 : sb[i];
    }
    return plan;
}

// Walk the output index space once, handing flat offsets for both operands.
template <typename F>
void broadcast_walk(const BroadcastPlan& plan, F&& fn) {
    const size_t nd = plan.out.size();
    const int total = shape_numel(plan.out);
    std::vector<int> coord(nd, 0);
    int ia = 0, ib = 0;
    for (int o = 0; o < total; o++) {
        fn(o, ia, ib);
        for (int d = static_cast<int>(nd) - 1; d >= 0; d--) {
            size_t du = static_cast<size_t>(d);
            coord[du]++;
            ia += plan.stride_a[du];
            ib += plan.stride_b[du];
            if (coord[du] < plan.out[du]) break;
            ia -= plan.stride_a[du] * plan.out[du];
            ib -= plan.stride_b[du] * plan.out[du];
            coord[du] = 0;
        }
    }
}

// fwd(x,y) -> out; bwa/bwb(g, x, y, out) -> per-element gradient contribution.
template <typename FwdOp, typename BwdA, typename BwdB>
Tensor binary_op(const char* name, const Tensor& a, const Tensor& b, FwdOp fwd, BwdA bwa,
                 BwdB bwb) {
    auto an = a.node();
    auto bn = b.node();
    if (a.shape() == b.shape()) {
        Eigen::ArrayXd out = a.values().binaryExpr(b.values(), fwd);
        return make_op(a.shape(), std::move(out), name, {a, b}, [an, bn, bwa, bwb](Node& n) {
            const long sz = n.values.size();
            if (an->requires_grad) {
                an->ensure_grad();
                for (long i = 0; i < sz; i++)
                    an->grad[i] += bwa(n.grad[i], an->values[i], bn->values[i], n.values[i]);
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (long i = 0; i < sz; i++)
                    bn->grad[i] += bwb(n.grad[i], an->values[i], bn->values[i], n.values[i]);
            }
        });
    }
    BroadcastPlan plan = broadcast_shapes(name, a.shape(), b.shape());
    Eigen::ArrayXd out(shape_numel(plan.out));
    const auto& av = a.values();
    const auto& bv = b.values();
    broadcast_walk(plan, [&](int o, int ia, int ib) { out[o] = fwd(av[ia], bv[ib]); });
    return make_op(plan.out, std::move(out), name, {a, b}, [an, bn, plan, bwa, bwb](Node& n) {
        const bool ga = an->requires_grad;
        const bool gb = bn->requires_grad;
        if (ga) an->ensure_grad();
        if (gb) bn->ensure_grad();
        broadcast_walk(plan, [&](int o, int ia, int ib) {
            if (ga) an->grad[ia] += bwa(n.grad[o], an->values[ia], bn->values[ib], n.values[o]);
            if (gb) bn->grad[ib] += bwb(n.grad[o], an->values[ia], bn->values[ib], n.values[o]);
        });
    });
}

template <typename FwdOp, typename BwdOp>
Tensor unary_op(const char* name, const Tensor& x, FwdOp fwd, BwdOp bw) {
    Eigen::ArrayXd out = fwd(x.values());
    auto xn = x.node();
    return make_op(x.shape(), std::move(out), name, {x}, [xn, bw](Node& n) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        xn->grad += bw(n.grad, xn->values, n.values);
    });
}

void check_matmul_dims(const char* name, const Tensor& a, const Tensor& b, bool transpose_b) {
    if (a.ndim() < 2 || b.ndim() < 2)
        throw std::invalid_argument(std::string(name) + ": operands must have >=2 dims, got " +
                                    shape_str(a.shape()) + " and " + shape_str(b.shape()));
    const int ka = a.dim(a.ndim() - 1);
    const int kb = transpose_b ? b.dim(b.ndim() - 1) : b.dim(b.ndim() - 2);
    if (ka != kb)
        throw std::invalid_argument(std::string(name) + ": inner extents differ, lhs " +
                                    shape_str(a.shape()) + " rhs " + shape_str(b.shape()));
    if (b.ndim() != 2) {
        if (a.ndim() != b.ndim())
            throw std::invalid_argument(std::string(name) + ": batch ranks differ, lhs " +
                                        shape_str(a.shape()) + " rhs " + shape_str(b.shape()));
        for (int i = 0; i < a.ndim() - 2; i++)
            if (a.dim(i) != b.dim(i))
                throw std::invalid_argument(std::string(name) + ": batch extents differ, lhs " +
                                            shape_str(a.shape()) + " rhs " +
                                            shape_str(b.shape()));
    }
}

Tensor matmul_impl(const char* name, const Tensor& a, const Tensor& b, bool transpose_b,
                   double scale = 1.0) {
    check_matmul_dims(name, a, b, transpose_b);
    const int m = a.dim(a.ndim() - 2);
    const int k = a.dim(a.ndim() - 1);
    const int n = transpose_b ? b.dim(b.ndim() - 2) : b.dim(b.ndim() - 1);
    const bool shared_b = b.ndim() == 2;
    const int batch = a.size() / (m * k);

    Shape out_shape(a.shape().begin(), a.shape().end() - 2);
    out_shape.push_back(m);
    out_shape.push_back(n);

    // NT with row-major operands reads both sides contiguously, so the
    // coefficient path beats GEMM setup on small slices.
    const bool lazy = transpose_b && static_cast<long>(m) * n * k <= 64 * 1024;
    Eigen::ArrayXd out(batch * m * n);
    const double* ap = a.values().data();
    const double* bp = b.values().data();
    for (int i = 0; i < batch; i++) {
        ConstMatMap A(ap + static_cast<long>(i) * m * k, m, k);
        const double* bslice = shared_b ? bp : bp + static_cast<long>(i) * n * k;
        MatMap C(out.data() + static_cast<long>(i) * m * n, m, n);
        if (transpose_b) {
            ConstMatMap B(bslice, n, k);
            if (lazy)
                C.noalias() = A.lazyProduct(B.transpose());
            else
                C.noalias() = A * B.transpose();
        } else {
            ConstMatMap B(bslice, k, n);
            C.noalias() = A * B;
        }
    }
    if (scale != 1.0) out *= scale;

    auto an = a.node();
    auto bn = b.node();
    return make_op(out_shape, std::move(out), name, {a, b},
                   [an, bn, m, k, n, batch, shared_b, transpose_b, scale](Node& node) {
                       const double* gp = node.grad.data();
                       if (an->requires_grad) an->ensure_grad();
                       if (bn->requires_grad) bn->ensure_grad();
                       for (int i = 0; i < batch; i++) {
                           ConstMatMap G(gp + static_cast<long>(i) * m * n, m, n);
                           const double* aslice = an->values.data() + static_cast<long>(i) * m * k;
                           const double* bslice =
                               bn->values.data() + (shared_b ? 0 : static_cast<long>(i) * n * k);
                           ConstMatMap A(aslice, m, k);
                           if (an->requires_grad) {
                               MatMap dA(an->grad.data() + static_cast<long>(i) * m * k, m, k);
                               if (transpose_b) {
                                   ConstMatMap B(bslice, n, k);
                                   dA.noalias() += scale * (G * B);
                               } else {
                                   ConstMatMap B(bslice, k, n);
                                   dA.noalias() += scale * (G * B.transpose());
                               }
                           }
                           if (bn->requires_grad) {
                               double* bg =
                                   bn->grad.data() + (shared_b ? 0 : static_cast<long>(i) * n * k);
                               if (transpose_b) {
                                   MatMap dB(bg, n, k);
                                   dB.noalias() += scale * (G.transpose() * A);
                               } else {
                                   MatMap dB(bg, k, n);
                                   dB.noalias() += scale * (A.transpose() * G);
                               }
                           }
                       }
                   });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    return binary_op(
        "add", a, b, [](double x, double y) { return x + y; },
        [](double g, double, double, double) { return g; },
        [](double g, double, double, double) { return g; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    return binary_op(
        "sub", a, b, [](double x, double y) { return x - y; },
        [](double g, double, double, double) { return g; },
        [](double g, double, double, double) { return -g; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    return binary_op(
        "mul", a, b, [](double x, double y) { return x * y; },
        [](double g, double, double y, double) { return g * y; },
        [](double g, double x, double, double) { return g * x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
    return binary_op(
        "div", a, b, [](double x, double y) { return x / y; },
        [](double g, double, double y, double) { return g / y; },
        [](double g, double x, double y, double) { return -g * x / (y * y); });
}

Tensor add_scalar(const Tensor& x, double c) {
    return unary_op(
        "add_scalar", x, [c](const auto& v) -> Eigen::ArrayXd { return v + c; },
        [](const auto& g, const auto&, const auto&) -> Eigen::ArrayXd { return g; });
}

Tensor mul_scalar(const Tensor& x, double c) {
    return unary_op(
        "mul_scalar", x, [c](const auto& v) -> Eigen::ArrayXd { return v * c; },
        [c](const auto& g, const auto&, const auto&) -> Eigen::ArrayXd { return g * c; });
}

Tensor neg(const Tensor& x) { return mul_scalar(x, -1.0); }

Tensor log(const Tensor& x) {
    return unary_op(
        "log", x, [](const auto& v) -> Eigen::ArrayXd { return v.log(); },
        [](const auto& g, const auto& v, const auto&) -> Eigen::ArrayXd { return g / v; });
}

Tensor exp(const Tensor& x) {
    return unary_op(
        "exp", x, [](const auto& v) -> Eigen::ArrayXd { return v.exp(); },
        [](const auto& g, const auto&, const auto& y) -> Eigen::ArrayXd { return g * y; });
}

Tensor tanh(const Tensor& x) {
    return unary_op(
        "tanh", x, [](const auto& v) -> Eigen::ArrayXd { return v.tanh(); },
        [](const auto& g, const auto&, const auto& y) -> Eigen::ArrayXd {
            return g * (1.0 - y * y);
        });
}

Tensor sqrt(const Tensor& x) {
    return unary_op(
        "sqrt", x, [](const auto& v) -> Eigen::ArrayXd { return v.sqrt(); },
        [](const auto& g, const auto&, const auto& y) -> Eigen::ArrayXd { return g / (2.0 * y); });
}

Tensor clamp_min(const Tensor& x, double lo) {
    return unary_op(
        "clamp_min", x, [lo](const auto& v) -> Eigen::ArrayXd { return v.max(lo); },
        [lo](const auto& g, const auto& v, const auto&) -> Eigen::ArrayXd {
            return (v >= lo).select(g, Eigen::ArrayXd::Zero(g.size()));
        });
}

Tensor safe_log(const Tensor& x, double lo) { return log(clamp_min(x, lo)); }

Tensor softmax_lastdim(const Tensor& x) {
    if (x.ndim() < 1)
        throw std::invalid_argument("softmax: scalar input");
    const int cols = x.dim(x.ndim() - 1);
    if (cols == 0) throw std::invalid_argument("softmax: empty last axis");
    const int rows = x.size() / cols;
    Eigen::ArrayXd out(x.size());
    const double* in = x.values().data();
    double* op = out.data();
    for (int r = 0; r < rows; r++) {
        Eigen::Map<const Eigen::ArrayXd> row(in + static_cast<long>(r) * cols, cols);
        if (!row.isFinite().all())
            throw std::invalid_argument("softmax: non-finite input row");
        const double mx = row.maxCoeff();
        Eigen::Map<Eigen::ArrayXd> orow(op + static_cast<long>(r) * cols, cols);
        orow = (row - mx).exp();
        orow /= orow.sum();
    }
    auto xn = x.node();
    return make_op(x.shape(), std::move(out), "softmax", {x}, [xn, rows, cols](Node& n) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        for (int r = 0; r < rows; r++) {
            auto y = n.values.segment(static_cast<long>(r) * cols, cols);
            auto g = n.grad.segment(static_cast<long>(r) * cols, cols);
            double dot = (g * y).sum();
            xn->grad.segment(static_cast<long>(r) * cols, cols) += y * (g - dot);
        }
    });
}

Tensor log_softmax_lastdim(const Tensor& x) {
    if (x.ndim() < 1) throw std::invalid_argument("log_softmax: scalar input");
    const int cols = x.dim(x.ndim() - 1);
    if (cols == 0) throw std::invalid_argument("log_softmax: empty last axis");
    const int rows = x.size() / cols;
    Shape cshape = x.shape();
    cshape.back() = 1;
    Eigen::ArrayXd cmax(rows);
    for (int r = 0; r < rows; r++)
        cmax[r] = x.values().segment(static_cast<long>(r) * cols, cols).maxCoeff();
    Tensor shift = Tensor::from_array(cshape, std::move(cmax));  // constant; exact for any shift
    Tensor z = exp(sub(x, shift));
    Tensor lse = add(log(reduce_sum(z, {x.ndim() - 1}, true)), shift);
    return sub(x, lse);
}

namespace {

// Single-axis reduction with contiguous segment arithmetic. Multi-axis
// reductions chain these (highest axis first, so indices stay valid).
Tensor reduce_sum_axis(const Tensor& x, int axis, bool keepdims) {
    const int nd = x.ndim();
    const int n = x.dim(axis);
    int outer = 1, inner = 1;
    for (int i = 0; i < axis; i++) outer *= x.dim(i);
    for (int i = axis + 1; i < nd; i++) inner *= x.dim(i);

    Shape out_shape;
    for (int i = 0; i < nd; i++) {
        if (i != axis)
            out_shape.push_back(x.dim(i));
        else if (keepdims)
            out_shape.push_back(1);
    }

    Eigen::ArrayXd out(static_cast<long>(outer) * inner);
    const double* in = x.values().data();
    if (inner == 1) {
        for (int o = 0; o < outer; o++)
            out[o] = Eigen::Map<const Eigen::ArrayXd>(in + static_cast<long>(o) * n, n).sum();
    } else {
        for (int o = 0; o < outer; o++) {
            Eigen::Map<Eigen::ArrayXd> dst(out.data() + static_cast<long>(o) * inner, inner);
            dst = Eigen::Map<const Eigen::ArrayXd>(in + static_cast<long>(o) * n * inner, inner);
            for (int a = 1; a < n; a++)
                dst += Eigen::Map<const Eigen::ArrayXd>(
                    in + (static_cast<long>(o) * n + a) * inner, inner);
        }
    }

    auto xn = x.node();
    return make_op(out_shape, std::move(out), "reduce_sum", {x},
                   [xn, outer, n, inner](Node& node) {
                       if (!xn->requires_grad) return;
                       xn->ensure_grad();
                       double* g = xn->grad.data();
                       const double* og = node.grad.data();
                       if (inner == 1) {
                           for (int o = 0; o < outer; o++)
                               Eigen::Map<Eigen::ArrayXd>(g + static_cast<long>(o) * n, n) +=
                                   og[o];
                       } else {
                           for (int o = 0; o < outer; o++) {
                               Eigen::Map<const Eigen::ArrayXd> src(
                                   og + static_cast<long>(o) * inner, inner);
                               for (int a = 0; a < n; a++)
                                   Eigen::Map<Eigen::ArrayXd>(
                                       g + (static_cast<long>(o) * n + a) * inner, inner) += src;
                           }
                       }
                   });
}

}  // namespace

Tensor reduce_sum(const Tensor& x, const std::vector<int>& axes, bool keepdims) {
    const int nd = x.ndim();
    for (int a : axes)
        if (a < 0 || a >= nd)
            throw std::invalid_argument("reduce_sum: axis " + std::to_string(a) +
                                        " out of range for " + shape_str(x.shape()));
    std::vector<int> sorted = axes;
    std::sort(sorted.begin(), sorted.end(), std::greater<int>());
    Tensor cur = x;
    for (size_t i = 0; i < sorted.size(); i++) {
        if (i > 0 && sorted[i] == sorted[i - 1])
            throw std::invalid_argument("reduce_sum: duplicate axis");
        cur = reduce_sum_axis(cur, sorted[i], keepdims);
    }
    return cur;
}

Tensor reduce_mean(const Tensor& x, const std::vector<int>& axes, bool keepdims) {
    int count = 1;
    for (int a : axes) count *= x.dim(a);
    if (count == 0) throw std::invalid_argument("reduce_mean: zero-extent reduction");
    return mul_scalar(reduce_sum(x, axes, keepdims), 1.0 / count);
}

Tensor sum_all(const Tensor& x) {
    std::vector<int> axes(static_cast<size_t>(x.ndim()));
    std::iota(axes.begin(), axes.end(), 0);
    return reduce_sum(x, axes, false);
}

Tensor mean_all(const Tensor& x) {
    if (x.size() == 0) throw std::invalid_argument("mean_all: empty tensor");
    return mul_scalar(sum_all(x), 1.0 / x.size());
}

Tensor index_select(const Tensor& x, int axis, const std::vector<int>& idx) {
    const int nd = x.ndim();
    if (axis < 0 || axis >= nd)
        throw std::invalid_argument("index_select: axis out of range");
    const int axis_len = x.dim(axis);
    for (int j : idx)
        if (j < 0 || j >= axis_len)
            throw std::invalid_argument("index_select: index " + std::to_string(j) +
                                        " out of range [0," + std::to_string(axis_len) + ")");
    int outer = 1, inner = 1;
    for (int i = 0; i < axis; i++) outer *= x.dim(i);
    for (int i = axis + 1; i < nd; i++) inner *= x.dim(i);
    Shape out_shape = x.shape();
    out_shape[static_cast<size_t>(axis)] = static_cast<int>(idx.size());
    const int m = static_cast<int>(idx.size());
    Eigen::ArrayXd out(static_cast<long>(outer) * m * inner);
    for (int o = 0; o < outer; o++)
        for (int j = 0; j < m; j++)
            out.segment((static_cast<long>(o) * m + j) * inner, inner) =
                x.values().segment((static_cast<long>(o) * axis_len + idx[static_cast<size_t>(j)]) * inner, inner);
    auto xn = x.node();
    return make_op(out_shape, std::move(out), "index_select", {x},
                   [xn, idx, outer, inner, m, axis_len](Node& n) {
                       if (!xn->requires_grad) return;
                       xn->ensure_grad();
                       for (int o = 0; o < outer; o++)
                           for (int j = 0; j < m; j++)
                               xn->grad.segment(
                                   (static_cast<long>(o) * axis_len + idx[static_cast<size_t>(j)]) * inner, inner) +=
                                   n.grad.segment((static_cast<long>(o) * m + j) * inner, inner);
                   });
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
    if (parts.empty()) throw std::invalid_argument("concat: no inputs");
    const int nd = parts[0].ndim();
    if (axis < 0 || axis >= nd) throw std::invalid_argument("concat: axis out of range");
    int axis_total = 0;
    for (const auto& p : parts) {
        if (p.ndim() != nd)
            throw std::invalid_argument("concat: rank mismatch " + shape_str(p.shape()));
        for (int i = 0; i < nd; i++)
            if (i != axis && p.dim(i) != parts[0].dim(i))
                throw std::invalid_argument("concat: extent mismatch " + shape_str(p.shape()) +
                                            " vs " + shape_str(parts[0].shape()));
        axis_total += p.dim(axis);
    }
    Shape out_shape = parts[0].shape();
    out_shape[static_cast<size_t>(axis)] = axis_total;
    int outer = 1, inner = 1;
    for (int i = 0; i < axis; i++) outer *= parts[0].dim(i);
    for (int i = axis + 1; i < nd; i++) inner *= parts[0].dim(i);
    Eigen::ArrayXd out(shape_numel(out_shape));
    std::vector<int> axis_sizes;
    int off = 0;
    for (const auto& p : parts) {
        const int a = p.dim(axis);
        axis_sizes.push_back(a);
        for (int o = 0; o < outer; o++)
            out.segment((static_cast<long>(o) * axis_total + off) * inner, static_cast<long>(a) * inner) =
                p.values().segment(static_cast<long>(o) * a * inner, static_cast<long>(a) * inner);
        off += a;
    }
    std::vector<std::shared_ptr<Node>> pnodes;
    for (const auto& p : parts) pnodes.push_back(p.node());
    return make_op(out_shape, std::move(out), "concat", parts,
                   [pnodes, axis_sizes, outer, inner, axis_total](Node& n) {
                       int off2 = 0;
                       for (size_t pi = 0; pi < pnodes.size(); pi++) {
                           const int a = axis_sizes[pi];
                           auto& pn = pnodes[pi];
                           if (pn->requires_grad) {
                               pn->ensure_grad();
                               for (int o = 0; o < outer; o++)
                                   pn->grad.segment(static_cast<long>(o) * a * inner, static_cast<long>(a) * inner) +=
                                       n.grad.segment((static_cast<long>(o) * axis_total + off2) * inner,
                                                      static_cast<long>(a) * inner);
                           }
                           off2 += a;
                       }
                   });
}

Tensor reshape(const Tensor& x, const Shape& s) {
    if (shape_numel(s) != x.size())
        throw std::invalid_argument("reshape: cannot view " + shape_str(x.shape()) + " as " +
                                    shape_str(s));
    auto xn = x.node();
    return make_op(s, x.values(), "reshape", {x}, [xn](Node& n) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        xn->grad += n.grad;
    });
}

Tensor split_heads(const Tensor& x, int heads) {
    if (x.ndim() != 3)
        throw std::invalid_argument("split_heads: want [B,T,H*D], got " + shape_str(x.shape()));
    const int B = x.dim(0), T = x.dim(1), HD = x.dim(2);
    if (heads <= 0 || HD % heads != 0)
        throw std::invalid_argument("split_heads: feature extent " + std::to_string(HD) +
                                    " not divisible by " + std::to_string(heads) + " heads");
    const int D = HD / heads;
    Eigen::ArrayXd out(x.size());
    const auto& v = x.values();
    for (int b = 0; b < B; b++)
        for (int h = 0; h < heads; h++)
            for (int t = 0; t < T; t++)
                out.segment(((static_cast<long>(b) * heads + h) * T + t) * D, D) =
                    v.segment((static_cast<long>(b) * T + t) * HD + static_cast<long>(h) * D, D);
    auto xn = x.node();
    const int H = heads;
    return make_op({B, H, T, D}, std::move(out), "split_heads", {x}, [xn, B, H, T, D](Node& n) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        for (int b = 0; b < B; b++)
            for (int h = 0; h < H; h++)
                for (int t = 0; t < T; t++)
                    xn->grad.segment((static_cast<long>(b) * T + t) * H * D + static_cast<long>(h) * D, D) +=
                        n.grad.segment(((static_cast<long>(b) * H + h) * T + t) * D, D);
    });
}

Tensor merge_heads(const Tensor& x) {
    if (x.ndim() != 4)
        throw std::invalid_argument("merge_heads: want [B,H,T,D], got " + shape_str(x.shape()));
    const int B = x.dim(0), H = x.dim(1), T = x.dim(2), D = x.dim(3);
    Eigen::ArrayXd out(x.size());
    const auto& v = x.values();
    for (int b = 0; b < B; b++)
        for (int h = 0; h < H; h++)
            for (int t = 0; t < T; t++)
                out.segment((static_cast<long>(b) * T + t) * H * D + static_cast<long>(h) * D, D) =
                    v.segment(((static_cast<long>(b) * H + h) * T + t) * D, D);
    auto xn = x.node();
    return make_op({B, T, H * D}, std::move(out), "merge_heads", {x}, [xn, B, H, T, D](Node& n) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        for (int b = 0; b < B; b++)
            for (int h = 0; h < H; h++)
                for (int t = 0; t < T; t++)
                    xn->grad.segment(((static_cast<long>(b) * H + h) * T + t) * D, D) +=
                        n.grad.segment((static_cast<long>(b) * T + t) * H * D + static_cast<long>(h) * D, D);
    });
}

Tensor matmul(const Tensor& a, const Tensor& b) { return matmul_impl("matmul", a, b, false); }

Tensor matmul_nt(const Tensor& a, const Tensor& b) { return matmul_impl("matmul_nt", a, b, true); }

Tensor matmul_nt_scaled(const Tensor& a, const Tensor& b, double scale) {
    return matmul_impl("matmul_nt", a, b, true, scale);
}

Tensor rmsnorm(const Tensor& x, double eps) {
    Tensor ms = reduce_mean(mul(x, x), {x.ndim() - 1}, /*keepdims=*/true);
    return div(x, sqrt(add_scalar(ms, eps)));
}

}  // namespace headspec
