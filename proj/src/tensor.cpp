#include "prefopt/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

namespace prefopt {

namespace {

using MatRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<MatRM>;
using CMapM = Eigen::Map<const MatRM>;

thread_local bool g_grad_enabled = true;

int shape_numel(const std::vector<int>& shape) {
    int n = 1;
    for (int d : shape) n *= d;
    return n;
}

std::string format_shape(const std::vector<int>& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ' ';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

void require(bool ok, const std::string& msg) {
    if (!ok) throw std::invalid_argument(msg);
}

Tensor make_output(std::vector<int> shape, bool requires_grad) {
    Tensor t;
    const int n = shape_numel(shape);
    t.shape = std::move(shape);
    t.data = std::make_shared<std::vector<double>>(static_cast<std::size_t>(n), 0.0);
    t.requires_grad = requires_grad;
    if (requires_grad) {
        t.grad = std::make_shared<std::vector<double>>(static_cast<std::size_t>(n), 0.0);
        t.node = std::make_shared<Node>();
    }
    return t;
}

bool track(const Tensor& a) { return g_grad_enabled && a.requires_grad; }

void accumulate(const Tensor& parent, const std::vector<double>& contribution) {
    if (!parent.requires_grad) return;
    auto& g = *parent.grad;
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += contribution[i];
}

}  // namespace

// ---- Tensor basics ----

int Tensor::numel() const { return data ? static_cast<int>(data->size()) : 0; }

int Tensor::rows() const {
    if (shape.size() == 2) return shape[0];
    if (shape.size() == 1) return 1;
    throw std::invalid_argument("Tensor::rows: rank must be 1 or 2, shape " + shape_str());
}

int Tensor::cols() const {
    if (shape.size() == 2) return shape[1];
    if (shape.size() == 1) return shape[0];
    throw std::invalid_argument("Tensor::cols: rank must be 1 or 2, shape " + shape_str());
}

double Tensor::item() const {
    if (numel() != 1)
        throw std::invalid_argument("Tensor::item: expected scalar, shape " + shape_str());
    return (*data)[0];
}

double Tensor::at(int r, int c) const { return (*data)[static_cast<std::size_t>(r) * cols() + c]; }

std::string Tensor::shape_str() const { return format_shape(shape); }

const std::vector<double>& Tensor::grad_values() const {
    if (!grad) throw std::logic_error("Tensor::grad_values: gradient buffer not allocated");
    return *grad;
}

void Tensor::zero_grad() {
    if (grad) std::fill(grad->begin(), grad->end(), 0.0);
}

Tensor Tensor::grad_alias() const {
    Tensor t = *this;
    t.node.reset();
    if (t.requires_grad) t.grad = std::make_shared<std::vector<double>>(data->size(), 0.0);
    return t;
}

Tensor Tensor::zeros(std::vector<int> shape, bool requires_grad) {
    for (int d : shape)
        require(d >= 0, "Tensor::zeros: negative dimension in " + format_shape(shape));
    Tensor t;
    const int n = shape_numel(shape);
    t.shape = std::move(shape);
    t.data = std::make_shared<std::vector<double>>(static_cast<std::size_t>(n), 0.0);
    t.requires_grad = requires_grad;
    if (requires_grad) t.grad = std::make_shared<std::vector<double>>(static_cast<std::size_t>(n), 0.0);
    return t;
}

Tensor Tensor::full(std::vector<int> shape, double value, bool requires_grad) {
    Tensor t = zeros(std::move(shape), requires_grad);
    std::fill(t.data->begin(), t.data->end(), value);
    return t;
}

Tensor Tensor::of(std::vector<int> shape, std::vector<double> values, bool requires_grad) {
    require(shape_numel(shape) == static_cast<int>(values.size()),
            "Tensor::of: " + std::to_string(values.size()) + " values do not fill shape " +
                format_shape(shape));
    Tensor t = zeros(std::move(shape), requires_grad);
    *t.data = std::move(values);
    return t;
}

Tensor Tensor::scalar(double value, bool requires_grad) {
    return of({1}, {value}, requires_grad);
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

// ---- elementwise ----

namespace {

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    require(a.shape == b.shape, std::string(op) + ": shape mismatch " + format_shape(a.shape) +
                                    " vs " + format_shape(b.shape));
}

template <class Fwd, class Bwd>
Tensor unary_op(const Tensor& x, const char* name, Fwd fwd, Bwd bwd_factor) {
    require(x.defined(), std::string(name) + ": undefined input");
    Tensor out = make_output(x.shape, track(x));
    const auto& xv = *x.data;
    auto& ov = *out.data;
    for (std::size_t i = 0; i < xv.size(); ++i) ov[i] = fwd(xv[i]);
    if (out.node) {
        out.node->parents = {x};
        auto og = out.grad;
        auto xd = x.data;
        auto xg = x.grad;
        out.node->backprop = [og, xd, xg, bwd_factor]() {
            const auto& g = *og;
            const auto& v = *xd;
            auto& dst = *xg;
            for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i] * bwd_factor(v[i]);
        };
    }
    return out;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "add");
    Tensor out = make_output(a.shape, track(a) || track(b));
    const auto& av = *a.data;
    const auto& bv = *b.data;
    auto& ov = *out.data;
    for (std::size_t i = 0; i < av.size(); ++i) ov[i] = av[i] + bv[i];
    if (out.node) {
        out.node->parents = {a, b};
        auto og = out.grad;
        auto pa = a, pb = b;
        out.node->backprop = [og, pa, pb]() {
            accumulate(pa, *og);
            accumulate(pb, *og);
        };
    }
    return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "sub");
    Tensor out = make_output(a.shape, track(a) || track(b));
    const auto& av = *a.data;
    const auto& bv = *b.data;
    auto& ov = *out.data;
    for (std::size_t i = 0; i < av.size(); ++i) ov[i] = av[i] - bv[i];
    if (out.node) {
        out.node->parents = {a, b};
        auto og = out.grad;
        auto pa = a, pb = b;
        out.node->backprop = [og, pa, pb]() {
            accumulate(pa, *og);
            if (pb.requires_grad) {
                auto& g = *pb.grad;
                const auto& src = *og;
                for (std::size_t i = 0; i < g.size(); ++i) g[i] -= src[i];
            }
        };
    }
    return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "mul");
    Tensor out = make_output(a.shape, track(a) || track(b));
    const auto& av = *a.data;
    const auto& bv = *b.data;
    auto& ov = *out.data;
    for (std::size_t i = 0; i < av.size(); ++i) ov[i] = av[i] * bv[i];
    if (out.node) {
        out.node->parents = {a, b};
        auto og = out.grad;
        auto pa = a, pb = b;
        out.node->backprop = [og, pa, pb]() {
            const auto& g = *og;
            if (pa.requires_grad) {
                auto& ga = *pa.grad;
                const auto& bvv = *pb.data;
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bvv[i];
            }
            if (pb.requires_grad) {
                auto& gb = *pb.grad;
                const auto& avv = *pa.data;
                for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * avv[i];
            }
        };
    }
    return out;
}

Tensor scale(const Tensor& a, double c) {
    return unary_op(
        a, "scale", [c](double v) { return v * c; }, [c](double) { return c; });
}

Tensor add_bias(const Tensor& m, const Tensor& bias) {
    require(m.shape.size() == 2, "add_bias: matrix must be rank 2, got " + m.shape_str());
    require(bias.shape.size() == 1 && bias.shape[0] == m.shape[1],
            "add_bias: bias " + bias.shape_str() + " does not match matrix " + m.shape_str());
    const int R = m.shape[0], C = m.shape[1];
    Tensor out = make_output(m.shape, track(m) || track(bias));
    const auto& mv = *m.data;
    const auto& bv = *bias.data;
    auto& ov = *out.data;
    for (int r = 0; r < R; ++r)
        for (int c = 0; c < C; ++c) ov[static_cast<std::size_t>(r) * C + c] = mv[static_cast<std::size_t>(r) * C + c] + bv[c];
    if (out.node) {
        out.node->parents = {m, bias};
        auto og = out.grad;
        auto pm = m, pb = bias;
        out.node->backprop = [og, pm, pb, R, C]() {
            const auto& g = *og;
            if (pm.requires_grad) accumulate(pm, g);
            if (pb.requires_grad) {
                auto& gb = *pb.grad;
                for (int r = 0; r < R; ++r)
                    for (int c = 0; c < C; ++c) gb[c] += g[static_cast<std::size_t>(r) * C + c];
            }
        };
    }
    return out;
}

// ---- linear algebra ----

Tensor matmul(const Tensor& a, const Tensor& b) {
    require(a.shape.size() == 2 && b.shape.size() == 2,
            "matmul: both inputs must be rank 2, got " + a.shape_str() + " and " + b.shape_str());
    require(a.shape[1] == b.shape[0],
            "matmul: inner dimensions differ, " + a.shape_str() + " x " + b.shape_str());
    const int M = a.shape[0], K = a.shape[1], N = b.shape[1];
    Tensor out = make_output({M, N}, track(a) || track(b));
    CMapM ma(a.data->data(), M, K);
    CMapM mb(b.data->data(), K, N);
    MapM mo(out.data->data(), M, N);
    mo.noalias() = ma * mb;
    if (out.node) {
        out.node->parents = {a, b};
        auto og = out.grad;
        auto pa = a, pb = b;
        out.node->backprop = [og, pa, pb, M, K, N]() {
            CMapM g(og->data(), M, N);
            if (pa.requires_grad) {
                MapM ga(pa.grad->data(), M, K);
                CMapM bv(pb.data->data(), K, N);
                ga.noalias() += g * bv.transpose();
            }
            if (pb.requires_grad) {
                MapM gb(pb.grad->data(), K, N);
                CMapM av(pa.data->data(), M, K);
                gb.noalias() += av.transpose() * g;
            }
        };
    }
    return out;
}

Tensor transpose(const Tensor& m) {
    require(m.shape.size() == 2, "transpose: input must be rank 2, got " + m.shape_str());
    const int R = m.shape[0], C = m.shape[1];
    Tensor out = make_output({C, R}, track(m));
    CMapM mm(m.data->data(), R, C);
    MapM mo(out.data->data(), C, R);
    mo.noalias() = mm.transpose();
    if (out.node) {
        out.node->parents = {m};
        auto og = out.grad;
        auto pm = m;
        out.node->backprop = [og, pm, R, C]() {
            CMapM g(og->data(), C, R);
            MapM gm(pm.grad->data(), R, C);
            gm.noalias() += g.transpose();
        };
    }
    return out;
}

// ---- softmax family ----

namespace {

void softmax_row_inplace(const double* x, double* y, int n) {
    double mx = x[0];
    for (int i = 1; i < n; ++i) mx = std::max(mx, x[i]);
    double s = 0.0;
    for (int i = 0; i < n; ++i) {
        y[i] = std::exp(x[i] - mx);
        s += y[i];
    }
    const double inv = 1.0 / s;
    for (int i = 0; i < n; ++i) y[i] *= inv;
}

}  // namespace

Tensor row_softmax(const Tensor& m) {
    require(m.shape.size() == 2, "row_softmax: input must be rank 2, got " + m.shape_str());
    require(m.shape[1] > 0, "row_softmax: empty rows, shape " + m.shape_str());
    const int R = m.shape[0], C = m.shape[1];
    Tensor out = make_output(m.shape, track(m));
    for (int r = 0; r < R; ++r)
        softmax_row_inplace(m.data->data() + static_cast<std::size_t>(r) * C,
                            out.data->data() + static_cast<std::size_t>(r) * C, C);
    if (out.node) {
        out.node->parents = {m};
        auto og = out.grad;
        auto od = out.data;
        auto pm = m;
        out.node->backprop = [og, od, pm, R, C]() {
            auto& gm = *pm.grad;
            for (int r = 0; r < R; ++r) {
                const double* y = od->data() + static_cast<std::size_t>(r) * C;
                const double* g = og->data() + static_cast<std::size_t>(r) * C;
                double dot = 0.0;
                for (int c = 0; c < C; ++c) dot += g[c] * y[c];
                double* dst = gm.data() + static_cast<std::size_t>(r) * C;
                for (int c = 0; c < C; ++c) dst[c] += y[c] * (g[c] - dot);
            }
        };
    }
    return out;
}

Tensor row_log_softmax(const Tensor& m) {
    require(m.shape.size() == 2, "row_log_softmax: input must be rank 2, got " + m.shape_str());
    require(m.shape[1] > 0, "row_log_softmax: empty rows, shape " + m.shape_str());
    const int R = m.shape[0], C = m.shape[1];
    Tensor out = make_output(m.shape, track(m));
    for (int r = 0; r < R; ++r) {
        const double* x = m.data->data() + static_cast<std::size_t>(r) * C;
        double* y = out.data->data() + static_cast<std::size_t>(r) * C;
        double mx = x[0];
        for (int c = 1; c < C; ++c) mx = std::max(mx, x[c]);
        double s = 0.0;
        for (int c = 0; c < C; ++c) s += std::exp(x[c] - mx);
        const double lse = mx + std::log(s);
        for (int c = 0; c < C; ++c) y[c] = x[c] - lse;
    }
    if (out.node) {
        out.node->parents = {m};
        auto og = out.grad;
        auto od = out.data;
        auto pm = m;
        out.node->backprop = [og, od, pm, R, C]() {
            auto& gm = *pm.grad;
            for (int r = 0; r < R; ++r) {
                const double* y = od->data() + static_cast<std::size_t>(r) * C;
                const double* g = og->data() + static_cast<std::size_t>(r) * C;
                double gsum = 0.0;
                for (int c = 0; c < C; ++c) gsum += g[c];
                double* dst = gm.data() + static_cast<std::size_t>(r) * C;
                for (int c = 0; c < C; ++c) dst[c] += g[c] - std::exp(y[c]) * gsum;
            }
        };
    }
    return out;
}

Tensor causal_row_softmax(const Tensor& m) {
    require(m.shape.size() == 2 && m.shape[0] == m.shape[1],
            "causal_row_softmax: input must be square, got " + m.shape_str());
    require(m.shape[0] > 0, "causal_row_softmax: empty matrix");
    const int T = m.shape[0];
    Tensor out = make_output(m.shape, track(m));
    for (int t = 0; t < T; ++t)
        softmax_row_inplace(m.data->data() + static_cast<std::size_t>(t) * T,
                            out.data->data() + static_cast<std::size_t>(t) * T, t + 1);
    if (out.node) {
        out.node->parents = {m};
        auto og = out.grad;
        auto od = out.data;
        auto pm = m;
        out.node->backprop = [og, od, pm, T]() {
            auto& gm = *pm.grad;
            for (int t = 0; t < T; ++t) {
                const double* y = od->data() + static_cast<std::size_t>(t) * T;
                const double* g = og->data() + static_cast<std::size_t>(t) * T;
                double dot = 0.0;
                for (int c = 0; c <= t; ++c) dot += g[c] * y[c];
                double* dst = gm.data() + static_cast<std::size_t>(t) * T;
                for (int c = 0; c <= t; ++c) dst[c] += y[c] * (g[c] - dot);
            }
        };
    }
    return out;
}

// ---- indexing ----

Tensor gather_cols(const Tensor& m, const std::vector<int>& idx) {
    require(m.shape.size() == 2, "gather_cols: input must be rank 2, got " + m.shape_str());
    const int R = m.shape[0], C = m.shape[1];
    require(static_cast<int>(idx.size()) == R,
            "gather_cols: " + std::to_string(idx.size()) + " indices for " + std::to_string(R) +
                " rows");
    for (int r = 0; r < R; ++r)
        if (idx[r] < 0 || idx[r] >= C)
            throw std::invalid_argument("gather_cols: index " + std::to_string(idx[r]) +
                                        " out of range [0," + std::to_string(C) + ") at row " +
                                        std::to_string(r));
    Tensor out = make_output({R}, track(m));
    for (int r = 0; r < R; ++r) (*out.data)[r] = (*m.data)[static_cast<std::size_t>(r) * C + idx[r]];
    if (out.node) {
        out.node->parents = {m};
        auto og = out.grad;
        auto pm = m;
        out.node->backprop = [og, pm, idx, C]() {
            auto& gm = *pm.grad;
            for (std::size_t r = 0; r < og->size(); ++r) gm[r * C + idx[r]] += (*og)[r];
        };
    }
    return out;
}

Tensor embedding(const Tensor& table, const std::vector<int>& ids) {
    require(table.shape.size() == 2, "embedding: table must be rank 2, got " + table.shape_str());
    const int V = table.shape[0], D = table.shape[1];
    for (std::size_t i = 0; i < ids.size(); ++i)
        if (ids[i] < 0 || ids[i] >= V)
            throw std::invalid_argument("embedding: id " + std::to_string(ids[i]) +
                                        " out of range [0," + std::to_string(V) + ") at position " +
                                        std::to_string(i));
    const int T = static_cast<int>(ids.size());
    Tensor out = make_output({T, D}, track(table));
    for (int t = 0; t < T; ++t)
        std::copy_n(table.data->data() + static_cast<std::size_t>(ids[t]) * D, D,
                    out.data->data() + static_cast<std::size_t>(t) * D);
    if (out.node) {
        out.node->parents = {table};
        auto og = out.grad;
        auto pt = table;
        out.node->backprop = [og, pt, ids, D]() {
            auto& gt = *pt.grad;
            for (std::size_t t = 0; t < ids.size(); ++t) {
                const double* g = og->data() + t * D;
                double* dst = gt.data() + static_cast<std::size_t>(ids[t]) * D;
                for (int d = 0; d < D; ++d) dst[d] += g[d];
            }
        };
    }
    return out;
}

Tensor slice_rows(const Tensor& m, int row_begin, int n_rows) {
    require(m.shape.size() == 2, "slice_rows: input must be rank 2, got " + m.shape_str());
    const int R = m.shape[0], C = m.shape[1];
    require(row_begin >= 0 && n_rows >= 0 && row_begin + n_rows <= R,
            "slice_rows: rows [" + std::to_string(row_begin) + "," +
                std::to_string(row_begin + n_rows) + ") out of range for " + m.shape_str());
    Tensor out = make_output({n_rows, C}, track(m));
    std::copy_n(m.data->data() + static_cast<std::size_t>(row_begin) * C,
                static_cast<std::size_t>(n_rows) * C, out.data->data());
    if (out.node) {
        out.node->parents = {m};
        auto og = out.grad;
        auto pm = m;
        out.node->backprop = [og, pm, row_begin, n_rows, C]() {
            auto& gm = *pm.grad;
            const double* g = og->data();
            double* dst = gm.data() + static_cast<std::size_t>(row_begin) * C;
            for (std::size_t i = 0; i < static_cast<std::size_t>(n_rows) * C; ++i) dst[i] += g[i];
        };
    }
    return out;
}

Tensor stack_scalars(const std::vector<Tensor>& xs) {
    require(!xs.empty(), "stack_scalars: empty input");
    bool req = false;
    for (const auto& x : xs) {
        require(x.numel() == 1, "stack_scalars: all inputs must be scalars, got " + x.shape_str());
        req = req || track(x);
    }
    Tensor out = make_output({static_cast<int>(xs.size())}, req);
    for (std::size_t i = 0; i < xs.size(); ++i) (*out.data)[i] = (*xs[i].data)[0];
    if (out.node) {
        out.node->parents = xs;
        auto og = out.grad;
        auto parents = xs;
        out.node->backprop = [og, parents]() {
            for (std::size_t i = 0; i < parents.size(); ++i)
                if (parents[i].requires_grad) (*parents[i].grad)[0] += (*og)[i];
        };
    }
    return out;
}

// ---- nonlinearities ----

Tensor gelu(const Tensor& x) {
    constexpr double inv_sqrt2 = 0.70710678118654752440;
    constexpr double inv_sqrt2pi = 0.39894228040143267794;
    return unary_op(
        x, "gelu",
        [](double v) { return 0.5 * v * (1.0 + std::erf(v * inv_sqrt2)); },
        [](double v) {
            const double cdf = 0.5 * (1.0 + std::erf(v * inv_sqrt2));
            return cdf + v * inv_sqrt2pi * std::exp(-0.5 * v * v);
        });
}

Tensor relu(const Tensor& x) {
    return unary_op(
        x, "relu", [](double v) { return v > 0.0 ? v : 0.0; },
        [](double v) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor sigmoid(const Tensor& x) {
    return unary_op(
        x, "sigmoid",
        [](double v) { return v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v)); },
        [](double v) {
            const double s = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
            return s * (1.0 - s);
        });
}

Tensor log_sigmoid(const Tensor& x) {
    return unary_op(
        x, "log_sigmoid",
        [](double v) { return v >= 0.0 ? -std::log1p(std::exp(-v)) : v - std::log1p(std::exp(v)); },
        [](double v) {
            // d/dv log sigma(v) = sigma(-v)
            return v >= 0.0 ? std::exp(-v) / (1.0 + std::exp(-v)) : 1.0 / (1.0 + std::exp(v));
        });
}

Tensor log(const Tensor& x) {
    const auto& xv = *x.data;
    for (std::size_t i = 0; i < xv.size(); ++i)
        if (!(xv[i] > 0.0))
            throw std::invalid_argument("log: non-positive input " + std::to_string(xv[i]) +
                                        " at index " + std::to_string(i));
    return unary_op(
        x, "log", [](double v) { return std::log(v); }, [](double v) { return 1.0 / v; });
}

// ---- layer norm ----

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
    require(x.shape.size() == 2, "layer_norm: input must be rank 2, got " + x.shape_str());
    const int R = x.shape[0], C = x.shape[1];
    require(gain.shape.size() == 1 && gain.shape[0] == C,
            "layer_norm: gain " + gain.shape_str() + " does not match input " + x.shape_str());
    require(bias.shape.size() == 1 && bias.shape[0] == C,
            "layer_norm: bias " + bias.shape_str() + " does not match input " + x.shape_str());
    Tensor out = make_output(x.shape, track(x) || track(gain) || track(bias));
    auto xhat = std::make_shared<std::vector<double>>(static_cast<std::size_t>(R) * C);
    auto inv_std = std::make_shared<std::vector<double>>(R);
    const auto& xv = *x.data;
    const auto& gv = *gain.data;
    const auto& bv = *bias.data;
    auto& ov = *out.data;
    for (int r = 0; r < R; ++r) {
        const double* row = xv.data() + static_cast<std::size_t>(r) * C;
        double mu = 0.0;
        for (int c = 0; c < C; ++c) mu += row[c];
        mu /= C;
        double var = 0.0;
        for (int c = 0; c < C; ++c) {
            const double d = row[c] - mu;
            var += d * d;
        }
        var /= C;
        const double is = 1.0 / std::sqrt(var + eps);
        (*inv_std)[r] = is;
        double* xh = xhat->data() + static_cast<std::size_t>(r) * C;
        double* o = ov.data() + static_cast<std::size_t>(r) * C;
        for (int c = 0; c < C; ++c) {
            xh[c] = (row[c] - mu) * is;
            o[c] = gv[c] * xh[c] + bv[c];
        }
    }
    if (out.node) {
        out.node->parents = {x, gain, bias};
        auto og = out.grad;
        auto px = x, pg = gain, pb = bias;
        out.node->backprop = [og, px, pg, pb, xhat, inv_std, R, C]() {
            const auto& gv = *pg.data;
            for (int r = 0; r < R; ++r) {
                const double* g = og->data() + static_cast<std::size_t>(r) * C;
                const double* xh = xhat->data() + static_cast<std::size_t>(r) * C;
                if (pg.requires_grad) {
                    auto& gg = *pg.grad;
                    for (int c = 0; c < C; ++c) gg[c] += g[c] * xh[c];
                }
                if (pb.requires_grad) {
                    auto& gb = *pb.grad;
                    for (int c = 0; c < C; ++c) gb[c] += g[c];
                }
                if (px.requires_grad) {
                    double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
                    for (int c = 0; c < C; ++c) {
                        const double dxh = g[c] * gv[c];
                        sum_dxhat += dxh;
                        sum_dxhat_xhat += dxh * xh[c];
                    }
                    const double is = (*inv_std)[r];
                    double* dst = px.grad->data() + static_cast<std::size_t>(r) * C;
                    for (int c = 0; c < C; ++c) {
                        const double dxh = g[c] * gv[c];
                        dst[c] += is * (dxh - (sum_dxhat + xh[c] * sum_dxhat_xhat) / C);
                    }
                }
            }
        };
    }
    return out;
}

// ---- reductions ----

Tensor sum(const Tensor& x) {
    require(x.defined() && x.numel() > 0, "sum: empty input");
    Tensor out = make_output({1}, track(x));
    double s = 0.0;
    for (double v : *x.data) s += v;
    (*out.data)[0] = s;
    if (out.node) {
        out.node->parents = {x};
        auto og = out.grad;
        auto px = x;
        out.node->backprop = [og, px]() {
            const double g = (*og)[0];
            auto& dst = *px.grad;
            for (auto& d : dst) d += g;
        };
    }
    return out;
}

Tensor mean(const Tensor& x) {
    require(x.defined() && x.numel() > 0, "mean: empty input");
    const double inv_n = 1.0 / x.numel();
    Tensor out = make_output({1}, track(x));
    double s = 0.0;
    for (double v : *x.data) s += v;
    (*out.data)[0] = s * inv_n;
    if (out.node) {
        out.node->parents = {x};
        auto og = out.grad;
        auto px = x;
        out.node->backprop = [og, px, inv_n]() {
            const double g = (*og)[0] * inv_n;
            auto& dst = *px.grad;
            for (auto& d : dst) d += g;
        };
    }
    return out;
}

// ---- fused attention ----

Tensor multihead_causal_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                                  int batch, int seq_len, int n_heads) {
    require(q.shape.size() == 2, "attention: q must be rank 2, got " + q.shape_str());
    require_same_shape(q, k, "attention(q,k)");
    require_same_shape(q, v, "attention(q,v)");
    const int D = q.shape[1];
    require(batch > 0 && seq_len > 0 && q.shape[0] == batch * seq_len,
            "attention: rows " + std::to_string(q.shape[0]) + " != batch " + std::to_string(batch) +
                " * seq_len " + std::to_string(seq_len));
    require(n_heads > 0 && D % n_heads == 0,
            "attention: d_model " + std::to_string(D) + " not divisible by " +
                std::to_string(n_heads) + " heads");
    const int hd = D / n_heads;
    const double att_scale = 1.0 / std::sqrt(static_cast<double>(hd));

    Tensor out = make_output(q.shape, track(q) || track(k) || track(v));
    // Attention weights are kept for the backward pass.
    const bool keep_probs = static_cast<bool>(out.node);
    auto probs = keep_probs ? std::make_shared<std::vector<double>>(
                                  static_cast<std::size_t>(batch) * n_heads * seq_len * seq_len)
                            : nullptr;

    std::vector<double> scores(static_cast<std::size_t>(seq_len) * seq_len);
    for (int b = 0; b < batch; ++b) {
        for (int h = 0; h < n_heads; ++h) {
            const std::size_t row0 = static_cast<std::size_t>(b) * seq_len;
            const std::size_t col0 = static_cast<std::size_t>(h) * hd;
            CMapM qm(q.data->data(), batch * seq_len, D);
            CMapM km(k.data->data(), batch * seq_len, D);
            CMapM vm(v.data->data(), batch * seq_len, D);
            MapM sm(scores.data(), seq_len, seq_len);
            sm.noalias() = att_scale * qm.block(row0, col0, seq_len, hd) *
                           km.block(row0, col0, seq_len, hd).transpose();
            double* p = keep_probs
                            ? probs->data() + ((static_cast<std::size_t>(b) * n_heads + h) *
                                               seq_len * seq_len)
                            : scores.data();
            for (int t = 0; t < seq_len; ++t) {
                softmax_row_inplace(scores.data() + static_cast<std::size_t>(t) * seq_len,
                                    p + static_cast<std::size_t>(t) * seq_len, t + 1);
                std::fill(p + static_cast<std::size_t>(t) * seq_len + t + 1,
                          p + static_cast<std::size_t>(t + 1) * seq_len, 0.0);
            }
            CMapM pm(p, seq_len, seq_len);
            MapM om(out.data->data(), batch * seq_len, D);
            om.block(row0, col0, seq_len, hd).noalias() =
                pm * vm.block(row0, col0, seq_len, hd);
        }
    }

    if (out.node) {
        out.node->parents = {q, k, v};
        auto og = out.grad;
        auto pq = q, pk = k, pv = v;
        out.node->backprop = [og, pq, pk, pv, probs, batch, seq_len, n_heads, hd, D,
                              att_scale]() {
            CMapM g(og->data(), batch * seq_len, D);
            CMapM qm(pq.data->data(), batch * seq_len, D);
            CMapM km(pk.data->data(), batch * seq_len, D);
            CMapM vm(pv.data->data(), batch * seq_len, D);
            MapM gq(pq.grad->data(), batch * seq_len, D);
            MapM gk(pk.grad->data(), batch * seq_len, D);
            MapM gv(pv.grad->data(), batch * seq_len, D);
            MatRM dp(seq_len, seq_len), ds(seq_len, seq_len);
            for (int b = 0; b < batch; ++b) {
                for (int h = 0; h < n_heads; ++h) {
                    const std::size_t row0 = static_cast<std::size_t>(b) * seq_len;
                    const std::size_t col0 = static_cast<std::size_t>(h) * hd;
                    CMapM pm(probs->data() +
                                 (static_cast<std::size_t>(b) * n_heads + h) * seq_len * seq_len,
                             seq_len, seq_len);
                    gv.block(row0, col0, seq_len, hd).noalias() +=
                        pm.transpose() * g.block(row0, col0, seq_len, hd);
                    dp.noalias() = g.block(row0, col0, seq_len, hd) *
                                   vm.block(row0, col0, seq_len, hd).transpose();
                    for (int t = 0; t < seq_len; ++t) {
                        double dot = 0.0;
                        for (int c = 0; c <= t; ++c) dot += dp(t, c) * pm(t, c);
                        for (int c = 0; c <= t; ++c) ds(t, c) = pm(t, c) * (dp(t, c) - dot);
                        for (int c = t + 1; c < seq_len; ++c) ds(t, c) = 0.0;
                    }
                    gq.block(row0, col0, seq_len, hd).noalias() +=
                        att_scale * ds * km.block(row0, col0, seq_len, hd);
                    gk.block(row0, col0, seq_len, hd).noalias() +=
                        att_scale * ds.transpose() * qm.block(row0, col0, seq_len, hd);
                }
            }
        };
    }
    return out;
}

// ---- backward ----

void backward(const Tensor& loss) {
    if (!loss.defined() || loss.numel() != 1)
        throw std::invalid_argument("backward: loss must be a defined scalar, got shape " +
                                    loss.shape_str());
    if (!loss.node) {
        if (loss.requires_grad && loss.grad) {
            (*loss.grad)[0] += 1.0;
            return;
        }
        throw std::logic_error("backward: loss is not connected to a graph");
    }

    // Iterative post-order DFS; reverse order is a valid reverse topological order.
    std::vector<Node*> topo;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, std::size_t>> stack;
    stack.emplace_back(loss.node.get(), 0);
    visited.insert(loss.node.get());
    while (!stack.empty()) {
        auto& [node, next_child] = stack.back();
        if (node->done)
            throw std::logic_error(
                "backward: graph already consumed; run a new forward pass before backward");
        bool descended = false;
        while (next_child < node->parents.size()) {
            Node* child = node->parents[next_child].node.get();
            ++next_child;
            if (child && !visited.count(child)) {
                visited.insert(child);
                stack.emplace_back(child, 0);
                descended = true;
                break;
            }
        }
        if (!descended && (stack.back().second >= stack.back().first->parents.size())) {
            topo.push_back(stack.back().first);
            stack.pop_back();
        }
    }

    (*loss.grad)[0] = 1.0;
    for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
        Node* n = *it;
        if (n->backprop) n->backprop();
        n->done = true;
    }
}

}  // namespace prefopt
