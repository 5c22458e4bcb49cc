#include "stella/numcore/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

namespace stella::nc {

namespace {

using detail::Node;
using BackFn = std::function<void(Node&)>;
using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

std::size_t norm_axis(int axis, std::size_t rank) {
    int r = static_cast<int>(rank);
    int a = axis < 0 ? axis + r : axis;
    if (a < 0 || a >= r) {
        throw ShapeError("axis " + std::to_string(axis) + " out of range for rank " + std::to_string(rank));
    }
    return static_cast<std::size_t>(a);
}

void require_finite(std::span<const double> values, const char* op) {
    // x * 0 is NaN exactly when x is NaN or infinite.
    double acc0 = 0.0, acc1 = 0.0;
    std::size_t i = 0;
    for (; i + 1 < values.size(); i += 2) {
        acc0 += values[i] * 0.0;
        acc1 += values[i + 1] * 0.0;
    }
    for (; i < values.size(); ++i) acc0 += values[i] * 0.0;
    if (std::isnan(acc0 + acc1)) {
        throw NumericError(std::string(op) + ": non-finite value");
    }
}

Tensor make_result(Shape shape, std::vector<double> data, std::initializer_list<const Tensor*> inputs, BackFn fn,
                   const char* op) {
    require_finite(data, op);
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->data = std::move(data);
    if (grad_enabled()) {
        bool any = false;
        for (const Tensor* in : inputs) {
            any = any || in->requires_grad();
        }
        if (any) {
            for (const Tensor* in : inputs) {
                node->inputs.push_back(in->node());
            }
            node->requires_grad = true;
            node->backward_fn = std::move(fn);
        }
    }
    return Tensor(std::move(node));
}

Tensor make_result_n(Shape shape, std::vector<double> data, const std::vector<Tensor>& inputs, BackFn fn,
                     const char* op) {
    require_finite(data, op);
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->data = std::move(data);
    if (grad_enabled()) {
        bool any = std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) { return t.requires_grad(); });
        if (any) {
            for (const auto& in : inputs) {
                node->inputs.push_back(in.node());
            }
            node->requires_grad = true;
            node->backward_fn = std::move(fn);
        }
    }
    return Tensor(std::move(node));
}

// Accumulation target for input i, or nullptr when it does not need grad.
std::vector<double>* grad_of(Node& self, std::size_t i) {
    Node& in = *self.inputs[i];
    return in.requires_grad ? &in.grad_buffer() : nullptr;
}

void require_input_finite(const Tensor& t, const char* op) { require_finite(t.data(), op); }

// [outer, n, inner] decomposition around an axis.
struct AxisSplit {
    std::size_t outer = 1;
    std::size_t n = 1;
    std::size_t inner = 1;
};

AxisSplit split_at(const Shape& s, std::size_t axis) {
    AxisSplit r;
    for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
    r.n = s[axis];
    for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
    return r;
}

// ---- broadcasting -------------------------------------------------------

struct Broadcast {
    Shape out;
    std::vector<std::size_t> sa;  // per-axis stride into a (0 when broadcast)
    std::vector<std::size_t> sb;
    bool same = false;
};

Broadcast broadcast(const Shape& a, const Shape& b) {
    Broadcast bc;
    if (a == b) {
        bc.out = a;
        bc.same = true;
        return bc;
    }
    std::size_t rank = std::max(a.size(), b.size());
    Shape pa(rank, 1), pb(rank, 1);
    std::copy(a.begin(), a.end(), pa.begin() + static_cast<long>(rank - a.size()));
    std::copy(b.begin(), b.end(), pb.begin() + static_cast<long>(rank - b.size()));
    bc.out.resize(rank);
    for (std::size_t i = 0; i < rank; ++i) {
        if (pa[i] != pb[i] && pa[i] != 1 && pb[i] != 1) {
            throw ShapeError("cannot broadcast " + shape_str(a) + " with " + shape_str(b));
        }
        bc.out[i] = std::max(pa[i], pb[i]);
    }
    bc.sa.resize(rank);
    bc.sb.resize(rank);
    std::size_t acc_a = 1, acc_b = 1;
    for (std::size_t i = rank; i-- > 0;) {
        bc.sa[i] = pa[i] == 1 ? 0 : acc_a;
        bc.sb[i] = pb[i] == 1 ? 0 : acc_b;
        acc_a *= pa[i];
        acc_b *= pb[i];
    }
    return bc;
}

// Calls f(i, ia, ib) for every output element in row-major order.
template <typename F>
void walk(const Broadcast& bc, F&& f) {
    std::size_t n = numel_of(bc.out);
    if (bc.same) {
        for (std::size_t i = 0; i < n; ++i) f(i, i, i);
        return;
    }
    const std::size_t rank = bc.out.size();
    const std::size_t inner = rank == 0 ? 1 : bc.out[rank - 1];
    const std::size_t ia_step = rank == 0 ? 0 : bc.sa[rank - 1];
    const std::size_t ib_step = rank == 0 ? 0 : bc.sb[rank - 1];
    std::vector<std::size_t> idx(rank, 0);
    std::size_t oa = 0, ob = 0;
    for (std::size_t lin = 0; lin < n; lin += inner) {
        for (std::size_t j = 0; j < inner; ++j) f(lin + j, oa + j * ia_step, ob + j * ib_step);
        for (std::size_t d = rank - 1; d-- > 0;) {
            if (++idx[d] < bc.out[d]) {
                oa += bc.sa[d];
                ob += bc.sb[d];
                break;
            }
            oa -= bc.sa[d] * (bc.out[d] - 1);
            ob -= bc.sb[d] * (bc.out[d] - 1);
            idx[d] = 0;
        }
    }
}

template <typename Fwd, typename DA, typename DB>
Tensor binary_op(const Tensor& a, const Tensor& b, Fwd fwd, DA da, DB db, const char* name) {
    auto bc = std::make_shared<Broadcast>(broadcast(a.shape(), b.shape()));
    const double* A = a.data().data();
    const double* B = b.data().data();
    std::vector<double> out(numel_of(bc->out));
    walk(*bc, [&](std::size_t i, std::size_t ia, std::size_t ib) { out[i] = fwd(A[ia], B[ib]); });
    return make_result(
        bc->out, std::move(out), {&a, &b},
        [bc, da, db](Node& self) {
            const auto& xa = self.inputs[0]->data;
            const auto& xb = self.inputs[1]->data;
            auto* ga = grad_of(self, 0);
            auto* gb = grad_of(self, 1);
            walk(*bc, [&](std::size_t i, std::size_t ia, std::size_t ib) {
                double g = self.grad[i];
                if (ga) (*ga)[ia] += g * da(xa[ia], xb[ib]);
                if (gb) (*gb)[ib] += g * db(xa[ia], xb[ib]);
            });
        },
        name);
}

template <typename Fwd, typename Deriv>
Tensor unary_op(const Tensor& t, Fwd fwd, Deriv deriv, const char* name) {
    require_input_finite(t, name);
    auto x = t.data();
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = fwd(x[i]);
    return make_result(
        t.shape(), std::move(out), {&t},
        [deriv](Node& self) {
            auto* g = grad_of(self, 0);
            if (!g) return;
            const auto& xi = self.inputs[0]->data;
            for (std::size_t i = 0; i < self.grad.size(); ++i) {
                (*g)[i] += self.grad[i] * deriv(xi[i], self.data[i]);
            }
        },
        name);
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    return binary_op(
        a, b, [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
        [](double, double) { return 1.0; }, "add");
}

Tensor sub(const Tensor& a, const Tensor& b) {
    return binary_op(
        a, b, [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
        [](double, double) { return -1.0; }, "sub");
}

Tensor mul(const Tensor& a, const Tensor& b) {
    return binary_op(
        a, b, [](double x, double y) { return x * y; }, [](double, double y) { return y; },
        [](double x, double) { return x; }, "mul");
}

Tensor div(const Tensor& a, const Tensor& b) {
    return binary_op(
        a, b, [](double x, double y) { return x / y; }, [](double, double y) { return 1.0 / y; },
        [](double x, double y) { return -x / (y * y); }, "div");
}

Tensor scale(const Tensor& t, double factor) {
    return unary_op(
        t, [factor](double x) { return x * factor; }, [factor](double, double) { return factor; }, "scale");
}

Tensor div_scalar(const Tensor& t, double divisor) {
    if (divisor == 0.0) {
        throw NumericError("div_scalar: division by zero");
    }
    return unary_op(
        t, [divisor](double x) { return x / divisor; }, [divisor](double, double) { return 1.0 / divisor; },
        "div_scalar");
}

Tensor add_scalar(const Tensor& t, double value) {
    return unary_op(
        t, [value](double x) { return x + value; }, [](double, double) { return 1.0; }, "add_scalar");
}

Tensor neg(const Tensor& t) { return scale(t, -1.0); }

Tensor square(const Tensor& t) {
    return unary_op(
        t, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; }, "square");
}

Tensor exp(const Tensor& t) {
    return unary_op(
        t, [](double x) { return std::exp(x); }, [](double, double y) { return y; }, "exp");
}

Tensor log(const Tensor& t) {
    for (double v : t.data()) {
        if (!(v > 0.0)) {
            throw NumericError("log: non-positive input");
        }
    }
    return unary_op(
        t, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; }, "log");
}

Tensor sigmoid(const Tensor& t) {
    return unary_op(
        t,
        [](double x) {
            if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
            double e = std::exp(x);
            return e / (1.0 + e);
        },
        [](double, double y) { return y * (1.0 - y); }, "sigmoid");
}

Tensor gelu(const Tensor& t) {
    // tanh approximation
    constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
    constexpr double k = 0.044715;
    return unary_op(
        t,
        [](double x) { return 0.5 * x * (1.0 + std::tanh(c * (x + k * x * x * x))); },
        [](double x, double) {
            double u = c * (x + k * x * x * x);
            double th = std::tanh(u);
            double du = c * (1.0 + 3.0 * k * x * x);
            return 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du;
        },
        "gelu");
}

Tensor clamp(const Tensor& t, double lo, double hi) {
    return unary_op(
        t, [lo, hi](double x) { return std::clamp(x, lo, hi); },
        [lo, hi](double x, double) { return (x >= lo && x <= hi) ? 1.0 : 0.0; }, "clamp");
}

// ---- reductions ---------------------------------------------------------

Tensor sum(const Tensor& t, int axis, bool keepdim) {
    std::size_t ax = norm_axis(axis, t.rank());
    auto sp = split_at(t.shape(), ax);
    auto x = t.data();
    std::vector<double> out(sp.outer * sp.inner, 0.0);
    for (std::size_t o = 0; o < sp.outer; ++o)
        for (std::size_t j = 0; j < sp.n; ++j)
            for (std::size_t i = 0; i < sp.inner; ++i) out[o * sp.inner + i] += x[(o * sp.n + j) * sp.inner + i];
    Shape shape = t.shape();
    if (keepdim) {
        shape[ax] = 1;
    } else {
        shape.erase(shape.begin() + static_cast<long>(ax));
    }
    return make_result(
        shape, std::move(out), {&t},
        [sp](Node& self) {
            auto* g = grad_of(self, 0);
            if (!g) return;
            for (std::size_t o = 0; o < sp.outer; ++o)
                for (std::size_t j = 0; j < sp.n; ++j)
                    for (std::size_t i = 0; i < sp.inner; ++i)
                        (*g)[(o * sp.n + j) * sp.inner + i] += self.grad[o * sp.inner + i];
        },
        "sum");
}

Tensor mean(const Tensor& t, int axis, bool keepdim) {
    auto n = t.dim(axis);
    return scale(sum(t, axis, keepdim), 1.0 / static_cast<double>(n));
}

Tensor sum_all(const Tensor& t) {
    auto x = t.data();
    double s = std::accumulate(x.begin(), x.end(), 0.0);
    return make_result(
        {}, {s}, {&t},
        [](Node& self) {
            auto* g = grad_of(self, 0);
            if (!g) return;
            for (auto& v : *g) v += self.grad[0];
        },
        "sum_all");
}

Tensor mean_all(const Tensor& t) { return scale(sum_all(t), 1.0 / static_cast<double>(t.numel())); }

Tensor softmax(const Tensor& t, int axis) {
    std::size_t ax = norm_axis(axis, t.rank());
    require_input_finite(t, "softmax");
    auto sp = split_at(t.shape(), ax);
    auto x = t.data();
    std::vector<double> out(x.size());
    for (std::size_t o = 0; o < sp.outer; ++o) {
        for (std::size_t i = 0; i < sp.inner; ++i) {
            std::size_t base = o * sp.n * sp.inner + i;
            double mx = x[base];
            for (std::size_t j = 1; j < sp.n; ++j) mx = std::max(mx, x[base + j * sp.inner]);
            double z = 0.0;
            for (std::size_t j = 0; j < sp.n; ++j) {
                double e = std::exp(x[base + j * sp.inner] - mx);
                out[base + j * sp.inner] = e;
                z += e;
            }
            for (std::size_t j = 0; j < sp.n; ++j) out[base + j * sp.inner] /= z;
        }
    }
    return make_result(
        t.shape(), std::move(out), {&t},
        [sp](Node& self) {
            auto* g = grad_of(self, 0);
            if (!g) return;
            const auto& y = self.data;
            for (std::size_t o = 0; o < sp.outer; ++o) {
                for (std::size_t i = 0; i < sp.inner; ++i) {
                    std::size_t base = o * sp.n * sp.inner + i;
                    double dot = 0.0;
                    for (std::size_t j = 0; j < sp.n; ++j) {
                        dot += self.grad[base + j * sp.inner] * y[base + j * sp.inner];
                    }
                    for (std::size_t j = 0; j < sp.n; ++j) {
                        std::size_t k = base + j * sp.inner;
                        (*g)[k] += y[k] * (self.grad[k] - dot);
                    }
                }
            }
        },
        "softmax");
}

Tensor log_softmax(const Tensor& t, int axis) {
    std::size_t ax = norm_axis(axis, t.rank());
    require_input_finite(t, "log_softmax");
    auto sp = split_at(t.shape(), ax);
    auto x = t.data();
    std::vector<double> out(x.size());
    for (std::size_t o = 0; o < sp.outer; ++o) {
        for (std::size_t i = 0; i < sp.inner; ++i) {
            std::size_t base = o * sp.n * sp.inner + i;
            double mx = x[base];
            for (std::size_t j = 1; j < sp.n; ++j) mx = std::max(mx, x[base + j * sp.inner]);
            double z = 0.0;
            for (std::size_t j = 0; j < sp.n; ++j) z += std::exp(x[base + j * sp.inner] - mx);
            double lz = mx + std::log(z);
            for (std::size_t j = 0; j < sp.n; ++j) out[base + j * sp.inner] = x[base + j * sp.inner] - lz;
        }
    }
    return make_result(
        t.shape(), std::move(out), {&t},
        [sp](Node& self) {
            auto* g = grad_of(self, 0);
            if (!g) return;
            const auto& y = self.data;
            for (std::size_t o = 0; o < sp.outer; ++o) {
                for (std::size_t i = 0; i < sp.inner; ++i) {
                    std::size_t base = o * sp.n * sp.inner + i;
                    double gs = 0.0;
                    for (std::size_t j = 0; j < sp.n; ++j) gs += self.grad[base + j * sp.inner];
                    for (std::size_t j = 0; j < sp.n; ++j) {
                        std::size_t k = base + j * sp.inner;
                        (*g)[k] += self.grad[k] - std::exp(y[k]) * gs;
                    }
                }
            }
        },
        "log_softmax");
}

// ---- linear algebra -----------------------------------------------------

// out = a * b for row-major [n, k] x [k, m]. Short inner extents go through
// the coefficient-based kernel, which skips the gemm zero-fill and packing.
void product_into(double* out, const double* a, const double* b, std::size_t n, std::size_t k, std::size_t m) {
    const long N = static_cast<long>(n), K = static_cast<long>(k), M = static_cast<long>(m);
    if (k <= 64) {
        MutMap(out, N, M).noalias() = ConstMap(a, N, K).lazyProduct(ConstMap(b, K, M));
    } else {
        MutMap(out, N, M).noalias() = ConstMap(a, N, K) * ConstMap(b, K, M);
    }
}

template <typename Dst, typename L, typename R>
void accumulate_product(Dst&& dst, const L& lhs, const R& rhs) {
    if (lhs.cols() <= 64) {
        dst.noalias() += lhs.lazyProduct(rhs);
    } else {
        dst.noalias() += lhs * rhs;
    }
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() < 2 || b.rank() < 2) {
        throw ShapeError("matmul requires rank >= 2 operands");
    }
    const auto& sa = a.shape();
    const auto& sb = b.shape();
    std::size_t n = sa[sa.size() - 2];
    std::size_t k = sa.back();
    std::size_t k2 = sb[sb.size() - 2];
    std::size_t m = sb.back();
    if (k != k2) {
        throw ShapeError("matmul inner extents differ: " + shape_str(sa) + " x " + shape_str(sb));
    }
    bool shared_rhs = sb.size() == 2;
    if (!shared_rhs && !std::equal(sa.begin(), sa.end() - 2, sb.begin(), sb.end() - 2)) {
        throw ShapeError("matmul batch extents differ: " + shape_str(sa) + " x " + shape_str(sb));
    }
    std::size_t batch = numel_of(Shape(sa.begin(), sa.end() - 2));
    Shape out_shape(sa.begin(), sa.end() - 2);
    out_shape.push_back(n);
    out_shape.push_back(m);
    std::vector<double> out(batch * n * m);
    if (shared_rhs) {
        product_into(out.data(), a.data().data(), b.data().data(), batch * n, k, m);
    } else {
        for (std::size_t i = 0; i < batch; ++i) {
            product_into(out.data() + i * n * m, a.data().data() + i * n * k, b.data().data() + i * k * m, n, k, m);
        }
    }
    return make_result(
        out_shape, std::move(out), {&a, &b},
        [batch, n, k, m, shared_rhs](Node& self) {
            const auto& A = self.inputs[0]->data;
            const auto& B = self.inputs[1]->data;
            auto* ga = grad_of(self, 0);
            auto* gb = grad_of(self, 1);
            const long N = static_cast<long>(n), K = static_cast<long>(k), Mm = static_cast<long>(m);
            if (shared_rhs) {
                const long BN = static_cast<long>(batch * n);
                ConstMap G(self.grad.data(), BN, Mm);
                if (ga) accumulate_product(MutMap(ga->data(), BN, K), G, ConstMap(B.data(), K, Mm).transpose());
                if (gb) accumulate_product(MutMap(gb->data(), K, Mm), ConstMap(A.data(), BN, K).transpose(), G);
                return;
            }
            for (std::size_t i = 0; i < batch; ++i) {
                ConstMap G(self.grad.data() + i * n * m, N, Mm);
                if (ga)
                    accumulate_product(MutMap(ga->data() + i * n * k, N, K), G,
                                       ConstMap(B.data() + i * k * m, K, Mm).transpose());
                if (gb)
                    accumulate_product(MutMap(gb->data() + i * k * m, K, Mm),
                                       ConstMap(A.data() + i * n * k, N, K).transpose(), G);
            }
        },
        "matmul");
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
    if (weight.rank() != 2 || bias.rank() != 1 || bias.dim(0) != weight.dim(1)) {
        throw ShapeError("linear: weight must be [in,out] and bias [out]");
    }
    return add(matmul(x, weight), bias);
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
    std::size_t d = x.dim(-1);
    if (gamma.shape() != Shape{d} || beta.shape() != Shape{d}) {
        throw ShapeError("layer_norm: gamma/beta must be [" + std::to_string(d) + "]");
    }
    require_input_finite(x, "layer_norm");
    std::size_t rows = x.numel() / d;
    auto X = x.data();
    auto G = gamma.data();
    auto Bt = beta.data();
    std::vector<double> out(x.numel());
    auto xhat = std::make_shared<std::vector<double>>(x.numel());
    auto inv_std = std::make_shared<std::vector<double>>(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const double* row = X.data() + r * d;
        double mu = 0.0;
        for (std::size_t j = 0; j < d; ++j) mu += row[j];
        mu /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
        var /= static_cast<double>(d);
        double is = 1.0 / std::sqrt(var + eps);
        (*inv_std)[r] = is;
        for (std::size_t j = 0; j < d; ++j) {
            double h = (row[j] - mu) * is;
            (*xhat)[r * d + j] = h;
            out[r * d + j] = G[j] * h + Bt[j];
        }
    }
    return make_result(
        x.shape(), std::move(out), {&x, &gamma, &beta},
        [rows, d, xhat, inv_std](Node& self) {
            const auto& Gm = self.inputs[1]->data;
            auto* gx = grad_of(self, 0);
            auto* gg = grad_of(self, 1);
            auto* gbeta = grad_of(self, 2);
            std::vector<double> dh(d);
            for (std::size_t r = 0; r < rows; ++r) {
                const double* dy = self.grad.data() + r * d;
                const double* h = xhat->data() + r * d;
                double m1 = 0.0, m2 = 0.0;
                for (std::size_t j = 0; j < d; ++j) {
                    dh[j] = dy[j] * Gm[j];
                    m1 += dh[j];
                    m2 += dh[j] * h[j];
                    if (gg) (*gg)[j] += dy[j] * h[j];
                    if (gbeta) (*gbeta)[j] += dy[j];
                }
                if (gx) {
                    m1 /= static_cast<double>(d);
                    m2 /= static_cast<double>(d);
                    for (std::size_t j = 0; j < d; ++j) {
                        (*gx)[r * d + j] += (*inv_std)[r] * (dh[j] - m1 - h[j] * m2);
                    }
                }
            }
        },
        "layer_norm");
}

// ---- shape ops ----------------------------------------------------------

Tensor reshape(const Tensor& t, Shape shape) {
    if (numel_of(shape) != t.numel()) {
        throw ShapeError("reshape " + shape_str(t.shape()) + " -> " + shape_str(shape));
    }
    std::vector<double> out(t.data().begin(), t.data().end());
    return make_result(
        std::move(shape), std::move(out), {&t},
        [](Node& self) {
            auto* g = grad_of(self, 0);
            if (!g) return;
            for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[i] += self.grad[i];
        },
        "reshape");
}

Tensor permute(const Tensor& t, const std::vector<std::size_t>& perm) {
    const auto& s = t.shape();
    std::size_t rank = s.size();
    if (perm.size() != rank) {
        throw ShapeError("permute: permutation rank mismatch");
    }
    std::vector<bool> seen(rank, false);
    for (auto p : perm) {
        if (p >= rank || seen[p]) throw ShapeError("permute: invalid permutation");
        seen[p] = true;
    }
    Shape out_shape(rank);
    for (std::size_t i = 0; i < rank; ++i) out_shape[i] = s[perm[i]];
    std::vector<std::size_t> in_stride(rank);
    std::size_t acc = 1;
    for (std::size_t i = rank; i-- > 0;) {
        in_stride[i] = acc;
        acc *= s[i];
    }
    std::size_t n = t.numel();
    auto src = std::make_shared<std::vector<std::size_t>>(n);
    std::vector<std::size_t> idx(rank, 0);
    std::size_t off = 0;
    for (std::size_t lin = 0; lin < n; ++lin) {
        (*src)[lin] = off;
        for (std::size_t d = rank; d-- > 0;) {
            if (++idx[d] < out_shape[d]) {
                off += in_stride[perm[d]];
                break;
            }
            off -= in_stride[perm[d]] * (out_shape[d] - 1);
            idx[d] = 0;
        }
    }
    auto x = t.data();
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = x[(*src)[i]];
    return make_result(
        out_shape, std::move(out), {&t},
        [src](Node& self) {
            auto* g = grad_of(self, 0);
            if (!g) return;
            for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[(*src)[i]] += self.grad[i];
        },
        "permute");
}

Tensor transpose(const Tensor& t, int axis0, int axis1) {
    std::size_t a0 = norm_axis(axis0, t.rank());
    std::size_t a1 = norm_axis(axis1, t.rank());
    std::vector<std::size_t> perm(t.rank());
    std::iota(perm.begin(), perm.end(), 0);
    std::swap(perm[a0], perm[a1]);
    return permute(t, perm);
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
    if (parts.empty()) {
        throw ShapeError("concat of nothing");
    }
    std::size_t ax = norm_axis(axis, parts[0].rank());
    Shape out_shape = parts[0].shape();
    out_shape[ax] = 0;
    std::vector<std::size_t> widths;
    for (const auto& p : parts) {
        Shape s = p.shape();
        if (s.size() != out_shape.size()) throw ShapeError("concat rank mismatch");
        for (std::size_t i = 0; i < s.size(); ++i) {
            if (i != ax && s[i] != parts[0].shape()[i]) {
                throw ShapeError("concat extent mismatch: " + shape_str(s) + " vs " + shape_str(parts[0].shape()));
            }
        }
        out_shape[ax] += s[ax];
        widths.push_back(s[ax]);
    }
    auto sp = split_at(out_shape, ax);
    std::vector<double> out(numel_of(out_shape));
    std::size_t col = 0;
    for (std::size_t pi = 0; pi < parts.size(); ++pi) {
        auto x = parts[pi].data();
        std::size_t w = widths[pi];
        for (std::size_t o = 0; o < sp.outer; ++o) {
            std::copy_n(x.begin() + static_cast<long>(o * w * sp.inner), w * sp.inner,
                        out.begin() + static_cast<long>((o * sp.n + col) * sp.inner));
        }
        col += w;
    }
    return make_result_n(
        out_shape, std::move(out), parts,
        [sp, widths](Node& self) {
            std::size_t c = 0;
            for (std::size_t pi = 0; pi < widths.size(); ++pi) {
                std::size_t w = widths[pi];
                auto* g = grad_of(self, pi);
                if (g) {
                    for (std::size_t o = 0; o < sp.outer; ++o)
                        for (std::size_t e = 0; e < w * sp.inner; ++e)
                            (*g)[o * w * sp.inner + e] += self.grad[(o * sp.n + c) * sp.inner + e];
                }
                c += w;
            }
        },
        "concat");
}

Tensor stack(const std::vector<Tensor>& parts) {
    if (parts.empty()) {
        throw ShapeError("stack of nothing");
    }
    std::vector<Tensor> expanded;
    expanded.reserve(parts.size());
    for (const auto& p : parts) {
        if (p.shape() != parts[0].shape()) {
            throw ShapeError("stack extent mismatch");
        }
        Shape s = p.shape();
        s.insert(s.begin(), 1);
        expanded.push_back(reshape(p, s));
    }
    return concat(expanded, 0);
}

Tensor slice(const Tensor& t, int axis, std::size_t begin, std::size_t end) {
    std::size_t ax = norm_axis(axis, t.rank());
    if (begin >= end || end > t.shape()[ax]) {
        throw ShapeError("slice bounds out of range");
    }
    std::vector<std::size_t> idx(end - begin);
    std::iota(idx.begin(), idx.end(), begin);
    return index_select(t, axis, idx);
}

Tensor index_select(const Tensor& t, int axis, const std::vector<std::size_t>& indices) {
    std::size_t ax = norm_axis(axis, t.rank());
    if (indices.empty()) {
        throw ShapeError("index_select: empty index list");
    }
    auto sp = split_at(t.shape(), ax);
    for (auto i : indices) {
        if (i >= sp.n) throw ShapeError("index_select: index out of range");
    }
    Shape out_shape = t.shape();
    out_shape[ax] = indices.size();
    std::size_t k = indices.size();
    auto x = t.data();
    std::vector<double> out(sp.outer * k * sp.inner);
    for (std::size_t o = 0; o < sp.outer; ++o)
        for (std::size_t j = 0; j < k; ++j)
            std::copy_n(x.begin() + static_cast<long>((o * sp.n + indices[j]) * sp.inner), sp.inner,
                        out.begin() + static_cast<long>((o * k + j) * sp.inner));
    return make_result(
        out_shape, std::move(out), {&t},
        [sp, indices, k](Node& self) {
            auto* g = grad_of(self, 0);
            if (!g) return;
            for (std::size_t o = 0; o < sp.outer; ++o)
                for (std::size_t j = 0; j < k; ++j)
                    for (std::size_t e = 0; e < sp.inner; ++e)
                        (*g)[(o * sp.n + indices[j]) * sp.inner + e] += self.grad[(o * k + j) * sp.inner + e];
        },
        "index_select");
}

Tensor gather_rows(const Tensor& t, const std::vector<std::size_t>& idx, std::size_t k) {
    if (t.rank() < 2) throw ShapeError("gather_rows requires rank >= 2");
    auto sp = split_at(t.shape(), 1);
    if (idx.size() != sp.outer * k || k == 0) {
        throw ShapeError("gather_rows: index table must be B x k");
    }
    for (auto i : idx) {
        if (i >= sp.n) throw ShapeError("gather_rows: index out of range");
    }
    Shape out_shape = t.shape();
    out_shape[1] = k;
    auto x = t.data();
    std::vector<double> out(sp.outer * k * sp.inner);
    for (std::size_t b = 0; b < sp.outer; ++b)
        for (std::size_t j = 0; j < k; ++j)
            std::copy_n(x.begin() + static_cast<long>((b * sp.n + idx[b * k + j]) * sp.inner), sp.inner,
                        out.begin() + static_cast<long>((b * k + j) * sp.inner));
    return make_result(
        out_shape, std::move(out), {&t},
        [sp, idx, k](Node& self) {
            auto* g = grad_of(self, 0);
            if (!g) return;
            for (std::size_t b = 0; b < sp.outer; ++b)
                for (std::size_t j = 0; j < k; ++j)
                    for (std::size_t e = 0; e < sp.inner; ++e)
                        (*g)[(b * sp.n + idx[b * k + j]) * sp.inner + e] += self.grad[(b * k + j) * sp.inner + e];
        },
        "gather_rows");
}

Tensor scatter_rows(const Tensor& base, const Tensor& src, const std::vector<std::size_t>& idx, std::size_t k) {
    auto sp = split_at(base.shape(), 1);
    if (src.rank() != base.rank() || src.dim(0) != sp.outer || src.dim(1) != k || idx.size() != sp.outer * k) {
        throw ShapeError("scatter_rows: shape mismatch");
    }
    std::vector<double> out(base.data().begin(), base.data().end());
    auto s = src.data();
    for (std::size_t b = 0; b < sp.outer; ++b)
        for (std::size_t j = 0; j < k; ++j) {
            if (idx[b * k + j] >= sp.n) throw ShapeError("scatter_rows: index out of range");
            std::copy_n(s.begin() + static_cast<long>((b * k + j) * sp.inner), sp.inner,
                        out.begin() + static_cast<long>((b * sp.n + idx[b * k + j]) * sp.inner));
        }
    return Tensor::from(base.shape(), std::move(out));
}

// ---- composite ops ------------------------------------------------------

Tensor l2_normalize(const Tensor& t, int axis, double eps) {
    std::size_t ax = norm_axis(axis, t.rank());
    require_input_finite(t, "l2_normalize");
    auto sp = split_at(t.shape(), ax);
    auto x = t.data();
    std::vector<double> out(x.size());
    auto norms = std::make_shared<std::vector<double>>(sp.outer * sp.inner);
    for (std::size_t o = 0; o < sp.outer; ++o)
        for (std::size_t i = 0; i < sp.inner; ++i) {
            std::size_t base = o * sp.n * sp.inner + i;
            double ss = 0.0;
            for (std::size_t j = 0; j < sp.n; ++j) ss += x[base + j * sp.inner] * x[base + j * sp.inner];
            double s = std::sqrt(ss + eps);
            (*norms)[o * sp.inner + i] = s;
            for (std::size_t j = 0; j < sp.n; ++j) out[base + j * sp.inner] = x[base + j * sp.inner] / s;
        }
    return make_result(
        t.shape(), std::move(out), {&t},
        [sp, norms](Node& self) {
            auto* g = grad_of(self, 0);
            if (!g) return;
            const auto& y = self.data;
            for (std::size_t o = 0; o < sp.outer; ++o)
                for (std::size_t i = 0; i < sp.inner; ++i) {
                    std::size_t base = o * sp.n * sp.inner + i;
                    double s = (*norms)[o * sp.inner + i];
                    double dot = 0.0;
                    for (std::size_t j = 0; j < sp.n; ++j) dot += y[base + j * sp.inner] * self.grad[base + j * sp.inner];
                    for (std::size_t j = 0; j < sp.n; ++j) {
                        std::size_t k = base + j * sp.inner;
                        (*g)[k] += (self.grad[k] - y[k] * dot) / s;
                    }
                }
        },
        "l2_normalize");
}

Tensor mse(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        throw ShapeError("mse shape mismatch: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
    return mean_all(square(sub(a, b)));
}

Tensor binary_cross_entropy(const Tensor& prob, const Tensor& target, double eps) {
    if (prob.shape() != target.shape()) {
        throw ShapeError("binary_cross_entropy shape mismatch");
    }
    require_input_finite(prob, "binary_cross_entropy");
    auto p = prob.data();
    auto y = target.data();
    double n = static_cast<double>(p.size());
    double total = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        if (y[i] != 0.0 && y[i] != 1.0) {
            throw std::invalid_argument("binary_cross_entropy: targets must be 0 or 1");
        }
        double pc = std::max(p[i], eps);
        double qc = std::max(1.0 - p[i], eps);
        total -= y[i] * std::log(pc) + (1.0 - y[i]) * std::log(qc);
    }
    return make_result(
        {}, {total / n}, {&prob, &target},
        [eps, n](Node& self) {
            auto* g = grad_of(self, 0);
            if (!g) return;
            const auto& P = self.inputs[0]->data;
            const auto& Y = self.inputs[1]->data;
            for (std::size_t i = 0; i < P.size(); ++i) {
                double d = 0.0;
                if (Y[i] == 1.0 && P[i] > eps) d = -1.0 / P[i];
                if (Y[i] == 0.0 && 1.0 - P[i] > eps) d = 1.0 / (1.0 - P[i]);
                (*g)[i] += self.grad[0] * d / n;
            }
        },
        "binary_cross_entropy");
}

Tensor weighted_mean_pool(const Tensor& t, int axis, const std::optional<Tensor>& weights) {
    std::size_t ax = norm_axis(axis, t.rank());
    if (!weights) {
        return mean(t, static_cast<int>(ax));
    }
    const Tensor& w = *weights;
    for (double v : w.data()) {
        if (!(v >= 0.0)) throw std::invalid_argument("weighted_mean_pool: weights must be non-negative");
    }
    Tensor wb = w;
    if (w.rank() == 1 && t.rank() > 1) {
        if (w.dim(0) != t.shape()[ax]) throw ShapeError("weighted_mean_pool: weight extent mismatch");
        Shape s(t.rank(), 1);
        s[ax] = w.dim(0);
        wb = reshape(w, s);
    }
    Tensor ones = Tensor::full(t.shape(), 1.0);
    Tensor den = sum(mul(ones, wb), static_cast<int>(ax));
    for (double v : den.data()) {
        if (!(v > 0.0)) throw std::invalid_argument("weighted_mean_pool: zero total weight");
    }
    Tensor num = sum(mul(t, wb), static_cast<int>(ax));
    return div(num, den);
}

Tensor attention_logits(const Tensor& q, const Tensor& k, double beta) {
    if (!(beta > 0.0)) {
        throw std::invalid_argument("attention_logits: beta must be positive");
    }
    if (q.rank() != 4 || k.rank() != 4) {
        throw ShapeError("attention_logits expects q[B,H,nq,d] and k[B,H,nk,d]");
    }
    const auto& sq = q.shape();
    const auto& sk = k.shape();
    if (sq[0] != sk[0] || sq[1] != sk[1] || sq[3] != sk[3]) {
        throw ShapeError("attention_logits: " + shape_str(sq) + " vs " + shape_str(sk));
    }
    // Divide by sqrt(d) first and beta last so beta acts as an exact scale.
    Tensor raw = div_scalar(matmul(q, transpose(k, -1, -2)), std::sqrt(static_cast<double>(sq[3])));
    return div_scalar(raw, beta);
}

}  // namespace stella::nc
