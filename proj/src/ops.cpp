#include "flowgate/ops.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <cstring>

namespace flowgate {

namespace {

template <typename T>
using MatRM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using ArrX = Eigen::Array<T, Eigen::Dynamic, 1>;
template <typename T>
using MapMat = Eigen::Map<MatRM<T>>;
template <typename T>
using MapCMat = Eigen::Map<const MatRM<T>>;
template <typename T>
using MapArr = Eigen::Map<ArrX<T>>;
template <typename T>
using MapCArr = Eigen::Map<const ArrX<T>>;
using StrideD = Eigen::Stride<Eigen::Dynamic, 1>;
template <typename T>
using MapBlk = Eigen::Map<MatRM<T>, 0, StrideD>;
template <typename T>
using MapCBlk = Eigen::Map<const MatRM<T>, 0, StrideD>;

void require(bool ok, const std::string& msg) {
    if (!ok) throw ShapeError(msg);
}

bool grad_needed(std::initializer_list<const Tensor*> ins) {
    if (NoGradGuard::active()) return false;
    for (const Tensor* t : ins)
        if (t->requires_grad()) return true;
    return false;
}

void attach(Tensor& out, std::initializer_list<const Tensor*> parents,
            std::function<void()> fn) {
    out.node()->requires_grad = true;
    for (const Tensor* p : parents) out.node()->parents.push_back(p->ptr());
    out.node()->backward_fn = std::move(fn);
}

Shape broadcast_shape(const char* op, const Shape& a, const Shape& b) {
    size_t n = std::max(a.size(), b.size());
    Shape out(n, 1);
    for (size_t i = 0; i < n; ++i) {
        int64_t da = i < n - a.size() ? 1 : a[i - (n - a.size())];
        int64_t db = i < n - b.size() ? 1 : b[i - (n - b.size())];
        require(da == db || da == 1 || db == 1,
                std::string(op) + ": incompatible shapes " + shape_str(a) + " vs " + shape_str(b));
        out[i] = std::max(da, db);
    }
    return out;
}

// Broadcast classification relative to a full-shape output.
enum class BKind { Same, Suffix, LastDimOne, Scalar, Generic };

BKind classify(const Shape& full, const Shape& small) {
    if (small == full) return BKind::Same;
    if (shape_numel(small) == 1) return BKind::Scalar;
    // suffix: small matches the trailing axes of full
    if (small.size() <= full.size()) {
        bool suffix = true;
        for (size_t i = 0; i < small.size(); ++i) {
            if (small[small.size() - 1 - i] != full[full.size() - 1 - i]) {
                suffix = false;
                break;
            }
        }
        if (suffix) return BKind::Suffix;
    }
    if (small.size() == full.size() && small.back() == 1) {
        bool rest = true;
        for (size_t i = 0; i + 1 < small.size(); ++i)
            if (small[i] != full[i]) rest = false;
        if (rest) return BKind::LastDimOne;
    }
    return BKind::Generic;
}

// Strides for iterating `shape` as if broadcast to `out` (0 on expanded axes).
std::vector<int64_t> bcast_strides(const Shape& out, const Shape& shape) {
    std::vector<int64_t> st(out.size(), 0);
    int64_t acc = 1;
    for (int i = static_cast<int>(shape.size()) - 1; i >= 0; --i) {
        size_t oi = out.size() - shape.size() + static_cast<size_t>(i);
        st[oi] = (shape[static_cast<size_t>(i)] == 1) ? 0 : acc;
        acc *= shape[static_cast<size_t>(i)];
    }
    return st;
}

template <typename T, class F>
void generic_bcast(const Shape& out, const Shape& as, const T* a, const Shape& bs, const T* b,
                   T* o, F f) {
    auto sa = bcast_strides(out, as);
    auto sb = bcast_strides(out, bs);
    std::vector<int64_t> idx(out.size(), 0);
    int64_t n = shape_numel(out);
    int64_t ia = 0, ib = 0;
    for (int64_t lin = 0; lin < n; ++lin) {
        o[lin] = f(a[ia], b[ib]);
        for (int d = static_cast<int>(out.size()) - 1; d >= 0; --d) {
            idx[d]++;
            ia += sa[d];
            ib += sb[d];
            if (idx[d] < out[d]) break;
            ia -= sa[d] * out[d];
            ib -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

// dst (small shape) += reduction of src (full shape), fixed iteration order.
template <typename T>
void generic_reduce_into(const Shape& full, const T* src, const Shape& small, T* dst) {
    auto sd = bcast_strides(full, small);
    std::vector<int64_t> idx(full.size(), 0);
    int64_t n = shape_numel(full);
    int64_t id = 0;
    for (int64_t lin = 0; lin < n; ++lin) {
        dst[id] += src[lin];
        for (int d = static_cast<int>(full.size()) - 1; d >= 0; --d) {
            idx[d]++;
            id += sd[d];
            if (idx[d] < full[d]) break;
            id -= sd[d] * full[d];
            idx[d] = 0;
        }
    }
}

enum class BinOp { Add, Sub, Mul, Div };

template <typename T>
void binary_forward(BinOp op, const Shape& os, const Shape& as, const T* a, const Shape& bs,
                    const T* b, T* o) {
    int64_t n = shape_numel(os);
    // Fast path requires one side to own the full output shape.
    if (as == os) {
        BKind k = classify(os, bs);
        int64_t bn = shape_numel(bs);
        if (k == BKind::Same) {
            MapCArr<T> A(a, n), B(b, n);
            MapArr<T> O(o, n);
            switch (op) {
                case BinOp::Add: O = A + B; return;
                case BinOp::Sub: O = A - B; return;
                case BinOp::Mul: O = A * B; return;
                case BinOp::Div: O = A / B; return;
            }
        }
        if (k == BKind::Scalar) {
            T s = b[0];
            MapCArr<T> A(a, n);
            MapArr<T> O(o, n);
            switch (op) {
                case BinOp::Add: O = A + s; return;
                case BinOp::Sub: O = A - s; return;
                case BinOp::Mul: O = A * s; return;
                case BinOp::Div: O = A / s; return;
            }
        }
        if (k == BKind::Suffix) {
            int64_t rows = n / bn;
            MapCArr<T> B(b, bn);
            for (int64_t r = 0; r < rows; ++r) {
                MapCArr<T> A(a + r * bn, bn);
                MapArr<T> O(o + r * bn, bn);
                switch (op) {
                    case BinOp::Add: O = A + B; break;
                    case BinOp::Sub: O = A - B; break;
                    case BinOp::Mul: O = A * B; break;
                    case BinOp::Div: O = A / B; break;
                }
            }
            return;
        }
        if (k == BKind::LastDimOne) {
            int64_t d = os.back();
            int64_t rows = n / d;
            for (int64_t r = 0; r < rows; ++r) {
                T s = b[r];
                MapCArr<T> A(a + r * d, d);
                MapArr<T> O(o + r * d, d);
                switch (op) {
                    case BinOp::Add: O = A + s; break;
                    case BinOp::Sub: O = A - s; break;
                    case BinOp::Mul: O = A * s; break;
                    case BinOp::Div: O = A / s; break;
                }
            }
            return;
        }
    }
    switch (op) {
        case BinOp::Add: generic_bcast<T>(os, as, a, bs, b, o, [](T x, T y) { return x + y; }); break;
        case BinOp::Sub: generic_bcast<T>(os, as, a, bs, b, o, [](T x, T y) { return x - y; }); break;
        case BinOp::Mul: generic_bcast<T>(os, as, a, bs, b, o, [](T x, T y) { return x * y; }); break;
        case BinOp::Div: generic_bcast<T>(os, as, a, bs, b, o, [](T x, T y) { return x / y; }); break;
    }
}

// Accumulates `src` (full output shape) into a gradient buffer of shape `to`.
template <typename T>
void reduce_accumulate(const Shape& full, const T* src, const Shape& to, T* dst) {
    int64_t n = shape_numel(full);
    BKind k = classify(full, to);
    if (k == BKind::Same) {
        MapArr<T> D(dst, n);
        D += MapCArr<T>(src, n);
        return;
    }
    if (k == BKind::Scalar) {
        T acc = 0;
        for (int64_t i = 0; i < n; ++i) acc += src[i];
        dst[0] += acc;
        return;
    }
    if (k == BKind::Suffix) {
        int64_t bn = shape_numel(to);
        int64_t rows = n / bn;
        MapArr<T> D(dst, bn);
        for (int64_t r = 0; r < rows; ++r) D += MapCArr<T>(src + r * bn, bn);
        return;
    }
    if (k == BKind::LastDimOne) {
        int64_t d = full.back();
        int64_t rows = n / d;
        for (int64_t r = 0; r < rows; ++r) dst[r] += MapCArr<T>(src + r * d, d).sum();
        return;
    }
    generic_reduce_into<T>(full, src, to, dst);
}

template <typename T>
Tensor binary_impl(BinOp op, const char* name, const Tensor& a, const Tensor& b) {
    Shape os = broadcast_shape(name, a.shape(), b.shape());
    Tensor out(make_node(os, a.dtype(), name));
    binary_forward<T>(op, os, a.shape(), a.vals<T>().data(), b.shape(), b.vals<T>().data(),
                      out.vals<T>().data());
    if (grad_needed({&a, &b})) {
        Node* an = a.node();
        Node* bn = b.node();
        Node* on = out.node();
        attach(out, {&a, &b}, [op, an, bn, on, os = std::move(os)]() {
            const T* g = on->grad<T>().data();
            int64_t n = shape_numel(os);
            AVec<T> tmp;
            if (an->requires_grad) {
                switch (op) {
                    case BinOp::Add:
                    case BinOp::Sub:
                        reduce_accumulate<T>(os, g, an->shape, an->grad<T>().data());
                        break;
                    case BinOp::Mul:
                        tmp.resize(static_cast<size_t>(n));
                        binary_forward<T>(BinOp::Mul, os, os, g, bn->shape, bn->vals<T>().data(),
                                          tmp.data());
                        reduce_accumulate<T>(os, tmp.data(), an->shape, an->grad<T>().data());
                        break;
                    case BinOp::Div:
                        tmp.resize(static_cast<size_t>(n));
                        binary_forward<T>(BinOp::Div, os, os, g, bn->shape, bn->vals<T>().data(),
                                          tmp.data());
                        reduce_accumulate<T>(os, tmp.data(), an->shape, an->grad<T>().data());
                        break;
                }
            }
            if (bn->requires_grad) {
                tmp.resize(static_cast<size_t>(n));
                switch (op) {
                    case BinOp::Add:
                        reduce_accumulate<T>(os, g, bn->shape, bn->grad<T>().data());
                        break;
                    case BinOp::Sub: {
                        MapCArr<T> G(g, n);
                        MapArr<T> Tm(tmp.data(), n);
                        Tm = -G;
                        reduce_accumulate<T>(os, tmp.data(), bn->shape, bn->grad<T>().data());
                        break;
                    }
                    case BinOp::Mul:
                        binary_forward<T>(BinOp::Mul, os, os, g, an->shape, an->vals<T>().data(),
                                          tmp.data());
                        reduce_accumulate<T>(os, tmp.data(), bn->shape, bn->grad<T>().data());
                        break;
                    case BinOp::Div: {
                        // d/db (a/b) = -a / b^2
                        AVec<T> q(static_cast<size_t>(n));
                        binary_forward<T>(BinOp::Div, os, an->shape, an->vals<T>().data(),
                                          bn->shape, bn->vals<T>().data(), q.data());
                        binary_forward<T>(BinOp::Div, os, os, q.data(), bn->shape,
                                          bn->vals<T>().data(), tmp.data());
                        MapArr<T> Tm(tmp.data(), n);
                        Tm = -Tm * MapCArr<T>(g, n);
                        reduce_accumulate<T>(os, tmp.data(), bn->shape, bn->grad<T>().data());
                        break;
                    }
                }
            }
        });
    }
    return out;
}

Tensor binary_dispatch(BinOp op, const char* name, const Tensor& a, const Tensor& b) {
    require(a.dtype() == b.dtype(), std::string(name) + ": dtype mismatch");
    return a.dtype() == DType::F32 ? binary_impl<float>(op, name, a, b)
                                   : binary_impl<double>(op, name, a, b);
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary_dispatch(BinOp::Add, "add", a, b); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary_dispatch(BinOp::Sub, "sub", a, b); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary_dispatch(BinOp::Mul, "mul", a, b); }
Tensor div(const Tensor& a, const Tensor& b) { return binary_dispatch(BinOp::Div, "div", a, b); }

namespace {

template <typename T>
Tensor scalar_impl(const Tensor& a, double c, bool is_mul) {
    Tensor out(make_node(a.shape(), a.dtype(), is_mul ? "mul_scalar" : "add_scalar"));
    int64_t n = a.numel();
    MapCArr<T> A(a.vals<T>().data(), n);
    MapArr<T> O(out.vals<T>().data(), n);
    if (is_mul)
        O = A * static_cast<T>(c);
    else
        O = A + static_cast<T>(c);
    if (grad_needed({&a})) {
        Node* an = a.node();
        Node* on = out.node();
        attach(out, {&a}, [an, on, c, is_mul, n]() {
            MapArr<T> GA(an->grad<T>().data(), n);
            MapCArr<T> G(on->grad<T>().data(), n);
            if (is_mul)
                GA += G * static_cast<T>(c);
            else
                GA += G;
        });
    }
    return out;
}

}  // namespace

Tensor add_scalar(const Tensor& a, double c) {
    return a.dtype() == DType::F32 ? scalar_impl<float>(a, c, false) : scalar_impl<double>(a, c, false);
}
Tensor mul_scalar(const Tensor& a, double c) {
    return a.dtype() == DType::F32 ? scalar_impl<float>(a, c, true) : scalar_impl<double>(a, c, true);
}

namespace {

enum class UnOp { Sigmoid, Silu, Log, Clamp };

template <typename T>
Tensor unary_impl(UnOp op, const char* name, const Tensor& x, double lo, double hi) {
    Tensor out(make_node(x.shape(), x.dtype(), name));
    int64_t n = x.numel();
    MapCArr<T> X(x.vals<T>().data(), n);
    MapArr<T> Y(out.vals<T>().data(), n);
    switch (op) {
        case UnOp::Sigmoid: Y = T(1) / (T(1) + (-X).exp()); break;
        case UnOp::Silu: Y = X / (T(1) + (-X).exp()); break;
        case UnOp::Log: Y = X.log(); break;
        case UnOp::Clamp: Y = X.cwiseMax(static_cast<T>(lo)).cwiseMin(static_cast<T>(hi)); break;
    }
    if (grad_needed({&x})) {
        Node* xn = x.node();
        Node* on = out.node();
        attach(out, {&x}, [op, xn, on, lo, hi, n]() {
            MapCArr<T> G(on->grad<T>().data(), n);
            MapCArr<T> X(xn->vals<T>().data(), n);
            MapCArr<T> Y(on->vals<T>().data(), n);
            MapArr<T> GX(xn->grad<T>().data(), n);
            switch (op) {
                case UnOp::Sigmoid: GX += G * Y * (T(1) - Y); break;
                case UnOp::Silu: {
                    // s = sigmoid(x); d = s * (1 + x * (1 - s))
                    ArrX<T> s = T(1) / (T(1) + (-X).exp());
                    GX += G * (s * (T(1) + X * (T(1) - s)));
                    break;
                }
                case UnOp::Log: GX += G / X; break;
                case UnOp::Clamp:
                    GX += G * ((X >= static_cast<T>(lo) && X <= static_cast<T>(hi))
                                   .template cast<T>());
                    break;
            }
        });
    }
    return out;
}

Tensor unary_dispatch(UnOp op, const char* name, const Tensor& x, double lo = 0, double hi = 0) {
    return x.dtype() == DType::F32 ? unary_impl<float>(op, name, x, lo, hi)
                                   : unary_impl<double>(op, name, x, lo, hi);
}

}  // namespace

Tensor sigmoid(const Tensor& x) { return unary_dispatch(UnOp::Sigmoid, "sigmoid", x); }
Tensor silu(const Tensor& x) { return unary_dispatch(UnOp::Silu, "silu", x); }
Tensor ln_op(const Tensor& x) { return unary_dispatch(UnOp::Log, "log", x); }
Tensor clamp(const Tensor& x, double lo, double hi) {
    return unary_dispatch(UnOp::Clamp, "clamp", x, lo, hi);
}

namespace {

template <typename T>
Tensor softmax_impl(const Tensor& x) {
    Tensor out(make_node(x.shape(), x.dtype(), "softmax"));
    int64_t d = x.dim(-1);
    int64_t rows = x.numel() / d;
    const T* xp = x.vals<T>().data();
    T* yp = out.vals<T>().data();
    for (int64_t r = 0; r < rows; ++r) {
        MapCArr<T> X(xp + r * d, d);
        MapArr<T> Y(yp + r * d, d);
        T m = X.maxCoeff();
        Y = (X - m).exp();
        Y /= Y.sum();
    }
    if (grad_needed({&x})) {
        Node* xn = x.node();
        Node* on = out.node();
        attach(out, {&x}, [xn, on, d, rows]() {
            const T* g = on->grad<T>().data();
            const T* y = on->vals<T>().data();
            T* gx = xn->grad<T>().data();
            for (int64_t r = 0; r < rows; ++r) {
                MapCArr<T> G(g + r * d, d), Y(y + r * d, d);
                MapArr<T> GX(gx + r * d, d);
                T dot = (G * Y).sum();
                GX += Y * (G - dot);
            }
        });
    }
    return out;
}

}  // namespace

Tensor softmax_lastdim(const Tensor& x) {
    return x.dtype() == DType::F32 ? softmax_impl<float>(x) : softmax_impl<double>(x);
}

namespace {

template <typename T>
Tensor layer_norm_impl(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
    int64_t d = x.dim(-1);
    require(gamma.numel() == d && beta.numel() == d,
            "layer_norm: affine shape " + shape_str(gamma.shape()) + " does not match last dim " +
                std::to_string(d));
    Tensor out(make_node(x.shape(), x.dtype(), "layer_norm"));
    int64_t rows = x.numel() / d;
    const T* xp = x.vals<T>().data();
    const T* gp = gamma.vals<T>().data();
    const T* bp = beta.vals<T>().data();
    T* yp = out.vals<T>().data();
    auto xhat = std::make_shared<AVec<T>>(static_cast<size_t>(x.numel()));
    auto inv = std::make_shared<std::vector<T>>(static_cast<size_t>(rows));
    MapCArr<T> Ga(gp, d), Be(bp, d);
    for (int64_t r = 0; r < rows; ++r) {
        MapCArr<T> X(xp + r * d, d);
        MapArr<T> H(xhat->data() + r * d, d);
        MapArr<T> Y(yp + r * d, d);
        T mu = X.mean();
        T var = (X - mu).square().mean();
        T iv = T(1) / std::sqrt(var + static_cast<T>(eps));
        (*inv)[static_cast<size_t>(r)] = iv;
        H = (X - mu) * iv;
        Y = H * Ga + Be;
    }
    if (grad_needed({&x, &gamma, &beta})) {
        Node* xn = x.node();
        Node* gn = gamma.node();
        Node* bn = beta.node();
        Node* on = out.node();
        attach(out, {&x, &gamma, &beta}, [xn, gn, bn, on, d, rows, xhat, inv]() {
            const T* g = on->grad<T>().data();
            MapCArr<T> Ga(gn->vals<T>().data(), d);
            for (int64_t r = 0; r < rows; ++r) {
                MapCArr<T> G(g + r * d, d);
                MapCArr<T> H(xhat->data() + r * d, d);
                T iv = (*inv)[static_cast<size_t>(r)];
                if (gn->requires_grad) {
                    MapArr<T> GG(gn->grad<T>().data(), d);
                    GG += G * H;
                }
                if (bn->requires_grad) {
                    MapArr<T> GB(bn->grad<T>().data(), d);
                    GB += G;
                }
                if (xn->requires_grad) {
                    MapArr<T> GX(xn->grad<T>().data() + r * d, d);
                    ArrX<T> gh = G * Ga;
                    T m1 = gh.mean();
                    T m2 = (gh * H).mean();
                    GX += iv * (gh - m1 - H * m2);
                }
            }
        });
    }
    return out;
}

}  // namespace

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
    require(x.dtype() == gamma.dtype() && x.dtype() == beta.dtype(), "layer_norm: dtype mismatch");
    return x.dtype() == DType::F32 ? layer_norm_impl<float>(x, gamma, beta, eps)
                                   : layer_norm_impl<double>(x, gamma, beta, eps);
}

namespace {

template <typename T>
Tensor matmul_impl(const Tensor& a, const Tensor& b, bool trans_b) {
    require(a.ndim() >= 2, "matmul: lhs must have >= 2 dims, got " + shape_str(a.shape()));
    int64_t M = a.dim(-2), K = a.dim(-1);
    bool batched_b = b.ndim() > 2;
    int64_t bK = trans_b ? b.dim(-1) : b.dim(-2);
    int64_t N = trans_b ? b.dim(-2) : b.dim(-1);
    require(bK == K, "matmul: inner dims differ, " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()) + (trans_b ? " (trans_b)" : ""));
    Shape os(a.shape());
    os.back() = N;
    int64_t batch = a.numel() / (M * K);
    if (batched_b) {
        Shape lead_a(a.shape().begin(), a.shape().end() - 2);
        Shape lead_b(b.shape().begin(), b.shape().end() - 2);
        require(lead_a == lead_b, "matmul: batch dims differ, " + shape_str(a.shape()) + " vs " +
                                      shape_str(b.shape()));
    }
    Tensor out(make_node(os, a.dtype(), "matmul"));
    const T* ap = a.vals<T>().data();
    const T* bp = b.vals<T>().data();
    T* op = out.vals<T>().data();
    int64_t bstep = batched_b ? K * N : 0;
    for (int64_t i = 0; i < batch; ++i) {
        MapCMat<T> A(ap + i * M * K, M, K);
        MapMat<T> O(op + i * M * N, M, N);
        if (trans_b) {
            MapCMat<T> B(bp + i * bstep, N, K);
            O.noalias() = A * B.transpose();
        } else {
            MapCMat<T> B(bp + i * bstep, K, N);
            O.noalias() = A * B;
        }
    }
    if (grad_needed({&a, &b})) {
        Node* an = a.node();
        Node* bn = b.node();
        Node* on = out.node();
        attach(out, {&a, &b}, [an, bn, on, M, K, N, batch, batched_b, trans_b]() {
            const T* g = on->grad<T>().data();
            const T* ap = an->vals<T>().data();
            const T* bp = bn->vals<T>().data();
            int64_t bstep = batched_b ? K * N : 0;
            for (int64_t i = 0; i < batch; ++i) {
                MapCMat<T> G(g + i * M * N, M, N);
                MapCMat<T> A(ap + i * M * K, M, K);
                if (an->requires_grad) {
                    MapMat<T> GA(an->grad<T>().data() + i * M * K, M, K);
                    if (trans_b) {
                        MapCMat<T> B(bp + i * bstep, N, K);
                        GA.noalias() += G * B;
                    } else {
                        MapCMat<T> B(bp + i * bstep, K, N);
                        GA.noalias() += G * B.transpose();
                    }
                }
                if (bn->requires_grad) {
                    T* gb = bn->grad<T>().data() + i * bstep;
                    if (trans_b) {
                        MapMat<T> GB(gb, N, K);
                        GB.noalias() += G.transpose() * A;
                    } else {
                        MapMat<T> GB(gb, K, N);
                        GB.noalias() += A.transpose() * G;
                    }
                }
            }
        });
    }
    return out;
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b, bool trans_b) {
    require(a.dtype() == b.dtype(), "matmul: dtype mismatch");
    return a.dtype() == DType::F32 ? matmul_impl<float>(a, b, trans_b)
                                   : matmul_impl<double>(a, b, trans_b);
}

namespace {

template <typename T>
Tensor attention_impl(const Tensor& q, const Tensor& k, const Tensor& v, int heads,
                      Tensor* probs_out) {
    require(q.ndim() == 3 && k.ndim() == 3 && v.ndim() == 3,
            "attention: expected [B,L,D] inputs, got " + shape_str(q.shape()) + " " +
                shape_str(k.shape()) + " " + shape_str(v.shape()));
    int64_t B = q.dim(0), Lq = q.dim(1), D = q.dim(2);
    int64_t Lk = k.dim(1);
    require(k.dim(0) == B && v.dim(0) == B && v.dim(1) == Lk && k.dim(2) == D && v.dim(2) == D,
            "attention: inconsistent shapes " + shape_str(q.shape()) + " " + shape_str(k.shape()) +
                " " + shape_str(v.shape()));
    require(D % heads == 0, "attention: dim " + std::to_string(D) + " not divisible by heads " +
                                std::to_string(heads));
    int64_t dh = D / heads;
    T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));

    Tensor out(make_node(q.shape(), q.dtype(), "attention"));
    bool needs_grad = grad_needed({&q, &k, &v});
    auto probs = std::make_shared<AVec<T>>();
    if (needs_grad || probs_out)
        probs->assign(static_cast<size_t>(B * heads * Lq * Lk), T(0));

    const T* qp = q.vals<T>().data();
    const T* kp = k.vals<T>().data();
    const T* vp = v.vals<T>().data();
    T* op = out.vals<T>().data();
    MatRM<T> S(Lq, Lk);
    for (int64_t b = 0; b < B; ++b) {
        for (int64_t h = 0; h < heads; ++h) {
            MapCBlk<T> Qh(qp + b * Lq * D + h * dh, Lq, dh, StrideD(D, 1));
            MapCBlk<T> Kh(kp + b * Lk * D + h * dh, Lk, dh, StrideD(D, 1));
            MapCBlk<T> Vh(vp + b * Lk * D + h * dh, Lk, dh, StrideD(D, 1));
            S.noalias() = Qh * Kh.transpose();
            S *= scale;
            for (int64_t r = 0; r < Lq; ++r) {
                MapArr<T> row(S.data() + r * Lk, Lk);
                T m = row.maxCoeff();
                row = (row - m).exp();
                row /= row.sum();
            }
            if (!probs->empty())
                std::memcpy(probs->data() + (b * heads + h) * Lq * Lk, S.data(),
                            sizeof(T) * static_cast<size_t>(Lq * Lk));
            MapBlk<T> Oh(op + b * Lq * D + h * dh, Lq, dh, StrideD(D, 1));
            Oh.noalias() = S * Vh;
        }
    }
    if (probs_out) {
        Tensor pt(make_node({B, heads, Lq, Lk}, q.dtype(), "attn_probs"));
        pt.vals<T>().assign(probs->begin(), probs->end());
        *probs_out = pt;
    }
    if (needs_grad) {
        Node* qn = q.node();
        Node* kn = k.node();
        Node* vn = v.node();
        Node* on = out.node();
        attach(out, {&q, &k, &v}, [qn, kn, vn, on, probs, B, heads, Lq, Lk, D, dh, scale]() {
            const T* g = on->grad<T>().data();
            const T* qp = qn->vals<T>().data();
            const T* kp = kn->vals<T>().data();
            const T* vp = vn->vals<T>().data();
            MatRM<T> dP(Lq, Lk), dS(Lq, Lk);
            for (int64_t b = 0; b < B; ++b) {
                for (int64_t h = 0; h < heads; ++h) {
                    MapCBlk<T> Gh(g + b * Lq * D + h * dh, Lq, dh, StrideD(D, 1));
                    MapCBlk<T> Qh(qp + b * Lq * D + h * dh, Lq, dh, StrideD(D, 1));
                    MapCBlk<T> Kh(kp + b * Lk * D + h * dh, Lk, dh, StrideD(D, 1));
                    MapCBlk<T> Vh(vp + b * Lk * D + h * dh, Lk, dh, StrideD(D, 1));
                    MapCMat<T> P(probs->data() + (b * heads + h) * Lq * Lk, Lq, Lk);
                    if (vn->requires_grad) {
                        MapBlk<T> GV(vn->grad<T>().data() + b * Lk * D + h * dh, Lk, dh,
                                     StrideD(D, 1));
                        GV.noalias() += P.transpose() * Gh;
                    }
                    dP.noalias() = Gh * Vh.transpose();
                    for (int64_t r = 0; r < Lq; ++r) {
                        MapCArr<T> dPr(dP.data() + r * Lk, Lk);
                        MapCArr<T> Pr(P.data() + r * Lk, Lk);
                        MapArr<T> dSr(dS.data() + r * Lk, Lk);
                        T dot = (dPr * Pr).sum();
                        dSr = Pr * (dPr - dot);
                    }
                    if (qn->requires_grad) {
                        MapBlk<T> GQ(qn->grad<T>().data() + b * Lq * D + h * dh, Lq, dh,
                                     StrideD(D, 1));
                        GQ.noalias() += (dS * Kh) * scale;
                    }
                    if (kn->requires_grad) {
                        MapBlk<T> GK(kn->grad<T>().data() + b * Lk * D + h * dh, Lk, dh,
                                     StrideD(D, 1));
                        GK.noalias() += (dS.transpose() * Qh) * scale;
                    }
                }
            }
        });
    }
    return out;
}

}  // namespace

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, int heads, Tensor* probs_out) {
    require(q.dtype() == k.dtype() && q.dtype() == v.dtype(), "attention: dtype mismatch");
    return q.dtype() == DType::F32 ? attention_impl<float>(q, k, v, heads, probs_out)
                                   : attention_impl<double>(q, k, v, heads, probs_out);
}

namespace {

template <typename T>
Tensor embedding_impl(const Tensor& table, const std::vector<int64_t>& ids, const Shape& prefix) {
    require(table.ndim() == 2, "embedding: table must be 2D, got " + shape_str(table.shape()));
    int64_t V = table.dim(0), D = table.dim(1);
    require(shape_numel(prefix) == static_cast<int64_t>(ids.size()),
            "embedding: prefix shape " + shape_str(prefix) + " does not cover " +
                std::to_string(ids.size()) + " ids");
    for (int64_t id : ids)
        require(id >= 0 && id < V, "embedding: id " + std::to_string(id) + " out of range [0," +
                                       std::to_string(V) + ")");
    Shape os(prefix);
    os.push_back(D);
    Tensor out(make_node(os, table.dtype(), "embedding"));
    const T* tp = table.vals<T>().data();
    T* op = out.vals<T>().data();
    for (size_t i = 0; i < ids.size(); ++i)
        std::memcpy(op + static_cast<int64_t>(i) * D, tp + ids[i] * D,
                    sizeof(T) * static_cast<size_t>(D));
    if (grad_needed({&table})) {
        Node* tn = table.node();
        Node* on = out.node();
        attach(out, {&table}, [tn, on, ids, D]() {
            const T* g = on->grad<T>().data();
            T* gt = tn->grad<T>().data();
            for (size_t i = 0; i < ids.size(); ++i) {
                MapArr<T> row(gt + ids[i] * D, D);
                row += MapCArr<T>(g + static_cast<int64_t>(i) * D, D);
            }
        });
    }
    return out;
}

}  // namespace

Tensor embedding(const Tensor& table, const std::vector<int64_t>& ids, const Shape& prefix) {
    return table.dtype() == DType::F32 ? embedding_impl<float>(table, ids, prefix)
                                       : embedding_impl<double>(table, ids, prefix);
}

namespace {

template <typename T>
Tensor reduce_all_impl(const Tensor& x, bool mean) {
    Tensor out(make_node({1}, x.dtype(), mean ? "mean_all" : "sum_all"));
    int64_t n = x.numel();
    T s = MapCArr<T>(x.vals<T>().data(), n).sum();
    out.vals<T>()[0] = mean ? s / static_cast<T>(n) : s;
    if (grad_needed({&x})) {
        Node* xn = x.node();
        Node* on = out.node();
        attach(out, {&x}, [xn, on, n, mean]() {
            T g = on->grad<T>()[0];
            if (mean) g /= static_cast<T>(n);
            MapArr<T> GX(xn->grad<T>().data(), n);
            GX += g;
        });
    }
    return out;
}

template <typename T>
Tensor reduce_axis_impl(const Tensor& x, int axis, bool mean) {
    int nd = x.ndim();
    if (axis < 0) axis += nd;
    require(axis >= 0 && axis < nd, "reduce: axis out of range for " + shape_str(x.shape()));
    int64_t outer = 1, inner = 1, n = x.shape()[static_cast<size_t>(axis)];
    for (int i = 0; i < axis; ++i) outer *= x.shape()[static_cast<size_t>(i)];
    for (int i = axis + 1; i < nd; ++i) inner *= x.shape()[static_cast<size_t>(i)];
    Shape os;
    for (int i = 0; i < nd; ++i)
        if (i != axis) os.push_back(x.shape()[static_cast<size_t>(i)]);
    if (os.empty()) os.push_back(1);
    Tensor out(make_node(os, x.dtype(), mean ? "mean_axis" : "sum_axis"));
    const T* xp = x.vals<T>().data();
    T* op = out.vals<T>().data();
    for (int64_t o = 0; o < outer; ++o) {
        MapArr<T> acc(op + o * inner, inner);
        acc.setZero();
        for (int64_t j = 0; j < n; ++j) acc += MapCArr<T>(xp + (o * n + j) * inner, inner);
        if (mean) acc /= static_cast<T>(n);
    }
    if (grad_needed({&x})) {
        Node* xn = x.node();
        Node* on = out.node();
        attach(out, {&x}, [xn, on, outer, inner, n, mean]() {
            const T* g = on->grad<T>().data();
            T* gx = xn->grad<T>().data();
            T inv = mean ? T(1) / static_cast<T>(n) : T(1);
            for (int64_t o = 0; o < outer; ++o) {
                MapCArr<T> G(g + o * inner, inner);
                for (int64_t j = 0; j < n; ++j) {
                    MapArr<T> GX(gx + (o * n + j) * inner, inner);
                    GX += G * inv;
                }
            }
        });
    }
    return out;
}

}  // namespace

Tensor sum_all(const Tensor& x) {
    return x.dtype() == DType::F32 ? reduce_all_impl<float>(x, false)
                                   : reduce_all_impl<double>(x, false);
}
Tensor mean_all(const Tensor& x) {
    return x.dtype() == DType::F32 ? reduce_all_impl<float>(x, true)
                                   : reduce_all_impl<double>(x, true);
}
Tensor sum_axis(const Tensor& x, int axis) {
    return x.dtype() == DType::F32 ? reduce_axis_impl<float>(x, axis, false)
                                   : reduce_axis_impl<double>(x, axis, false);
}
Tensor mean_axis(const Tensor& x, int axis) {
    return x.dtype() == DType::F32 ? reduce_axis_impl<float>(x, axis, true)
                                   : reduce_axis_impl<double>(x, axis, true);
}

namespace {

template <typename T>
Tensor concat_impl(const std::vector<Tensor>& xs, int axis) {
    int nd = xs[0].ndim();
    if (axis < 0) axis += nd;
    Shape os = xs[0].shape();
    int64_t total = 0;
    for (const Tensor& t : xs) {
        require(t.ndim() == nd, "concat: rank mismatch");
        for (int i = 0; i < nd; ++i)
            if (i != axis)
                require(t.shape()[static_cast<size_t>(i)] == os[static_cast<size_t>(i)],
                        "concat: shape mismatch " + shape_str(t.shape()) + " vs " + shape_str(os));
        total += t.shape()[static_cast<size_t>(axis)];
    }
    os[static_cast<size_t>(axis)] = total;
    int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= os[static_cast<size_t>(i)];
    for (int i = axis + 1; i < nd; ++i) inner *= os[static_cast<size_t>(i)];
    Tensor out(make_node(os, xs[0].dtype(), "concat"));
    T* op = out.vals<T>().data();
    int64_t off = 0;
    for (const Tensor& t : xs) {
        int64_t na = t.shape()[static_cast<size_t>(axis)];
        const T* tp = t.vals<T>().data();
        for (int64_t o = 0; o < outer; ++o)
            std::memcpy(op + (o * total + off) * inner, tp + o * na * inner,
                        sizeof(T) * static_cast<size_t>(na * inner));
        off += na;
    }
    bool needs = false;
    for (const Tensor& t : xs)
        if (t.requires_grad()) needs = true;
    if (needs && !NoGradGuard::active()) {
        std::vector<Node*> pn;
        for (const Tensor& t : xs) pn.push_back(t.node());
        Node* on = out.node();
        out.node()->requires_grad = true;
        for (const Tensor& t : xs) out.node()->parents.push_back(t.ptr());
        out.node()->backward_fn = [pn, on, outer, inner, total, axis]() {
            const T* g = on->grad<T>().data();
            int64_t off = 0;
            for (Node* p : pn) {
                int64_t na = p->shape[static_cast<size_t>(axis)];
                if (p->requires_grad) {
                    T* gp = p->grad<T>().data();
                    for (int64_t o = 0; o < outer; ++o) {
                        MapArr<T> GP(gp + o * na * inner, na * inner);
                        GP += MapCArr<T>(g + (o * total + off) * inner, na * inner);
                    }
                }
                off += na;
            }
        };
    }
    return out;
}

}  // namespace

Tensor concat(const std::vector<Tensor>& xs, int axis) {
    require(!xs.empty(), "concat: no inputs");
    for (const Tensor& t : xs) require(t.dtype() == xs[0].dtype(), "concat: dtype mismatch");
    return xs[0].dtype() == DType::F32 ? concat_impl<float>(xs, axis)
                                       : concat_impl<double>(xs, axis);
}

namespace {

template <typename T>
Tensor reshape_impl(const Tensor& x, const Shape& s) {
    require(shape_numel(s) == x.numel(), "reshape: cannot view " + shape_str(x.shape()) + " as " +
                                             shape_str(s));
    Tensor out(make_node(s, x.dtype(), "reshape"));
    out.vals<T>() = x.vals<T>();
    if (grad_needed({&x})) {
        Node* xn = x.node();
        Node* on = out.node();
        attach(out, {&x}, [xn, on]() {
            int64_t n = xn->numel();
            MapArr<T> GX(xn->grad<T>().data(), n);
            GX += MapCArr<T>(on->grad<T>().data(), n);
        });
    }
    return out;
}

std::vector<int64_t> row_strides(const Shape& s) {
    std::vector<int64_t> st(s.size());
    int64_t acc = 1;
    for (int i = static_cast<int>(s.size()) - 1; i >= 0; --i) {
        st[static_cast<size_t>(i)] = acc;
        acc *= s[static_cast<size_t>(i)];
    }
    return st;
}

template <typename T>
void permute_copy(const Shape& in_shape, const T* in, const std::vector<int>& perm, T* out) {
    size_t nd = in_shape.size();
    Shape os(nd);
    for (size_t i = 0; i < nd; ++i) os[i] = in_shape[static_cast<size_t>(perm[i])];
    auto ist = row_strides(in_shape);
    std::vector<int64_t> stride_for_out(nd);
    for (size_t i = 0; i < nd; ++i) stride_for_out[i] = ist[static_cast<size_t>(perm[i])];
    std::vector<int64_t> idx(nd, 0);
    int64_t n = shape_numel(in_shape);
    int64_t src = 0;
    for (int64_t lin = 0; lin < n; ++lin) {
        out[lin] = in[src];
        for (int d = static_cast<int>(nd) - 1; d >= 0; --d) {
            idx[static_cast<size_t>(d)]++;
            src += stride_for_out[static_cast<size_t>(d)];
            if (idx[static_cast<size_t>(d)] < os[static_cast<size_t>(d)]) break;
            src -= stride_for_out[static_cast<size_t>(d)] * os[static_cast<size_t>(d)];
            idx[static_cast<size_t>(d)] = 0;
        }
    }
}

template <typename T>
Tensor permute_impl(const Tensor& x, const std::vector<int>& perm) {
    size_t nd = static_cast<size_t>(x.ndim());
    require(perm.size() == nd, "permute: perm size mismatch for " + shape_str(x.shape()));
    Shape os(nd);
    for (size_t i = 0; i < nd; ++i) os[i] = x.shape()[static_cast<size_t>(perm[i])];
    Tensor out(make_node(os, x.dtype(), "permute"));
    permute_copy<T>(x.shape(), x.vals<T>().data(), perm, out.vals<T>().data());
    if (grad_needed({&x})) {
        std::vector<int> inv(nd);
        for (size_t i = 0; i < nd; ++i) inv[static_cast<size_t>(perm[i])] = static_cast<int>(i);
        Node* xn = x.node();
        Node* on = out.node();
        attach(out, {&x}, [xn, on, inv, os]() {
            AVec<T> tmp(static_cast<size_t>(xn->numel()));
            permute_copy<T>(os, on->grad<T>().data(), inv, tmp.data());
            int64_t n = xn->numel();
            MapArr<T> GX(xn->grad<T>().data(), n);
            GX += MapCArr<T>(tmp.data(), n);
        });
    }
    return out;
}

template <typename T>
Tensor slice_impl(const Tensor& x, int axis, int64_t start, int64_t len) {
    int nd = x.ndim();
    if (axis < 0) axis += nd;
    int64_t dim = x.shape()[static_cast<size_t>(axis)];
    require(start >= 0 && len >= 0 && start + len <= dim,
            "slice: range [" + std::to_string(start) + "," + std::to_string(start + len) +
                ") out of bounds for axis " + std::to_string(axis) + " of " +
                shape_str(x.shape()));
    Shape os = x.shape();
    os[static_cast<size_t>(axis)] = len;
    int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= x.shape()[static_cast<size_t>(i)];
    for (int i = axis + 1; i < nd; ++i) inner *= x.shape()[static_cast<size_t>(i)];
    Tensor out(make_node(os, x.dtype(), "slice"));
    const T* xp = x.vals<T>().data();
    T* op = out.vals<T>().data();
    for (int64_t o = 0; o < outer; ++o)
        std::memcpy(op + o * len * inner, xp + (o * dim + start) * inner,
                    sizeof(T) * static_cast<size_t>(len * inner));
    if (grad_needed({&x})) {
        Node* xn = x.node();
        Node* on = out.node();
        attach(out, {&x}, [xn, on, outer, inner, dim, start, len]() {
            const T* g = on->grad<T>().data();
            T* gx = xn->grad<T>().data();
            for (int64_t o = 0; o < outer; ++o) {
                MapArr<T> GX(gx + (o * dim + start) * inner, len * inner);
                GX += MapCArr<T>(g + o * len * inner, len * inner);
            }
        });
    }
    return out;
}

}  // namespace

Tensor reshape(const Tensor& x, const Shape& s) {
    return x.dtype() == DType::F32 ? reshape_impl<float>(x, s) : reshape_impl<double>(x, s);
}
Tensor permute(const Tensor& x, const std::vector<int>& perm) {
    return x.dtype() == DType::F32 ? permute_impl<float>(x, perm) : permute_impl<double>(x, perm);
}
Tensor slice(const Tensor& x, int axis, int64_t start, int64_t len) {
    return x.dtype() == DType::F32 ? slice_impl<float>(x, axis, start, len)
                                   : slice_impl<double>(x, axis, start, len);
}

namespace {

template <typename T>
Tensor area_down_impl(const Tensor& x, int k) {
    require(x.ndim() >= 3, "area_downsample2d: expected [...,H,W,C], got " + shape_str(x.shape()));
    int64_t C = x.dim(-1), W = x.dim(-2), H = x.dim(-3);
    require(H % k == 0 && W % k == 0, "area_downsample2d: " + shape_str(x.shape()) +
                                          " not divisible by factor " + std::to_string(k));
    int64_t N = x.numel() / (H * W * C);
    int64_t Ho = H / k, Wo = W / k;
    Shape os = x.shape();
    os[os.size() - 3] = Ho;
    os[os.size() - 2] = Wo;
    Tensor out(make_node(os, x.dtype(), "area_downsample2d"));
    const T* xp = x.vals<T>().data();
    T* op = out.vals<T>().data();
    T inv = T(1) / static_cast<T>(k * k);
    for (int64_t nIdx = 0; nIdx < N; ++nIdx) {
        const T* xb = xp + nIdx * H * W * C;
        T* ob = op + nIdx * Ho * Wo * C;
        for (int64_t y = 0; y < Ho; ++y)
            for (int64_t xcol = 0; xcol < Wo; ++xcol) {
                MapArr<T> acc(ob + (y * Wo + xcol) * C, C);
                acc.setZero();
                for (int dy = 0; dy < k; ++dy)
                    for (int dx = 0; dx < k; ++dx)
                        acc += MapCArr<T>(xb + ((y * k + dy) * W + (xcol * k + dx)) * C, C);
                acc *= inv;
            }
    }
    if (grad_needed({&x})) {
        Node* xn = x.node();
        Node* on = out.node();
        attach(out, {&x}, [xn, on, N, H, W, C, Ho, Wo, k, inv]() {
            const T* g = on->grad<T>().data();
            T* gx = xn->grad<T>().data();
            for (int64_t nIdx = 0; nIdx < N; ++nIdx) {
                const T* gb = g + nIdx * Ho * Wo * C;
                T* gxb = gx + nIdx * H * W * C;
                for (int64_t y = 0; y < Ho; ++y)
                    for (int64_t xcol = 0; xcol < Wo; ++xcol) {
                        MapCArr<T> G(gb + (y * Wo + xcol) * C, C);
                        for (int dy = 0; dy < k; ++dy)
                            for (int dx = 0; dx < k; ++dx) {
                                MapArr<T> GX(gxb + ((y * k + dy) * W + (xcol * k + dx)) * C, C);
                                GX += G * inv;
                            }
                    }
            }
        });
    }
    return out;
}

template <typename T>
Tensor bilinear_up_impl(const Tensor& x, int k) {
    require(x.ndim() >= 3, "bilinear_upsample2d: expected [...,H,W,C], got " + shape_str(x.shape()));
    int64_t C = x.dim(-1), w = x.dim(-2), h = x.dim(-3);
    int64_t N = x.numel() / (h * w * C);
    int64_t Ho = h * k, Wo = w * k;
    Shape os = x.shape();
    os[os.size() - 3] = Ho;
    os[os.size() - 2] = Wo;
    Tensor out(make_node(os, x.dtype(), "bilinear_upsample2d"));

    // Sample positions (align_corners = false), clamped at borders.
    struct Tap {
        int64_t i0, i1;
        T w0, w1;
    };
    auto make_taps = [&](int64_t in_n, int64_t out_n) {
        std::vector<Tap> taps(static_cast<size_t>(out_n));
        for (int64_t o = 0; o < out_n; ++o) {
            double s = (static_cast<double>(o) + 0.5) / k - 0.5;
            double fl = std::floor(s);
            int64_t i0 = static_cast<int64_t>(fl);
            T f = static_cast<T>(s - fl);
            int64_t i1 = i0 + 1;
            if (i0 < 0) i0 = 0;
            if (i1 < 0) i1 = 0;
            if (i0 > in_n - 1) i0 = in_n - 1;
            if (i1 > in_n - 1) i1 = in_n - 1;
            taps[static_cast<size_t>(o)] = {i0, i1, T(1) - f, f};
        }
        return taps;
    };
    auto ty = std::make_shared<std::vector<Tap>>(make_taps(h, Ho));
    auto tx = std::make_shared<std::vector<Tap>>(make_taps(w, Wo));

    const T* xp = x.vals<T>().data();
    T* op = out.vals<T>().data();
    for (int64_t nIdx = 0; nIdx < N; ++nIdx) {
        const T* xb = xp + nIdx * h * w * C;
        T* ob = op + nIdx * Ho * Wo * C;
        for (int64_t y = 0; y < Ho; ++y) {
            const Tap& a = (*ty)[static_cast<size_t>(y)];
            for (int64_t xcol = 0; xcol < Wo; ++xcol) {
                const Tap& b = (*tx)[static_cast<size_t>(xcol)];
                MapArr<T> O(ob + (y * Wo + xcol) * C, C);
                O = a.w0 * b.w0 * MapCArr<T>(xb + (a.i0 * w + b.i0) * C, C) +
                    a.w0 * b.w1 * MapCArr<T>(xb + (a.i0 * w + b.i1) * C, C) +
                    a.w1 * b.w0 * MapCArr<T>(xb + (a.i1 * w + b.i0) * C, C) +
                    a.w1 * b.w1 * MapCArr<T>(xb + (a.i1 * w + b.i1) * C, C);
            }
        }
    }
    if (grad_needed({&x})) {
        Node* xn = x.node();
        Node* on = out.node();
        attach(out, {&x}, [xn, on, N, h, w, C, Ho, Wo, ty, tx]() {
            const T* g = on->grad<T>().data();
            T* gx = xn->grad<T>().data();
            for (int64_t nIdx = 0; nIdx < N; ++nIdx) {
                const T* gb = g + nIdx * Ho * Wo * C;
                T* gxb = gx + nIdx * h * w * C;
                for (int64_t y = 0; y < Ho; ++y) {
                    const Tap& a = (*ty)[static_cast<size_t>(y)];
                    for (int64_t xcol = 0; xcol < Wo; ++xcol) {
                        const Tap& b = (*tx)[static_cast<size_t>(xcol)];
                        MapCArr<T> G(gb + (y * Wo + xcol) * C, C);
                        MapArr<T>(gxb + (a.i0 * w + b.i0) * C, C) += a.w0 * b.w0 * G;
                        MapArr<T>(gxb + (a.i0 * w + b.i1) * C, C) += a.w0 * b.w1 * G;
                        MapArr<T>(gxb + (a.i1 * w + b.i0) * C, C) += a.w1 * b.w0 * G;
                        MapArr<T>(gxb + (a.i1 * w + b.i1) * C, C) += a.w1 * b.w1 * G;
                    }
                }
            }
        });
    }
    return out;
}

template <typename T>
Tensor conv3x3_impl(const Tensor& x, const Tensor& wt, const Tensor& bias) {
    require(x.ndim() == 4, "conv3x3: input must be [B,H,W,C], got " + shape_str(x.shape()));
    require(wt.ndim() == 4 && wt.dim(0) == 3 && wt.dim(1) == 3,
            "conv3x3: weight must be [3,3,Ci,Co], got " + shape_str(wt.shape()));
    int64_t B = x.dim(0), H = x.dim(1), W = x.dim(2), Ci = x.dim(3);
    int64_t Co = wt.dim(3);
    require(wt.dim(2) == Ci, "conv3x3: channel mismatch " + shape_str(x.shape()) + " vs " +
                                 shape_str(wt.shape()));
    require(bias.numel() == Co, "conv3x3: bias shape " + shape_str(bias.shape()));
    Tensor out(make_node({B, H, W, Co}, x.dtype(), "conv3x3"));
    const T* xp = x.vals<T>().data();
    const T* wp = wt.vals<T>().data();
    const T* bp = bias.vals<T>().data();
    T* op = out.vals<T>().data();
    // bias fill
    for (int64_t i = 0; i < B * H * W; ++i)
        std::memcpy(op + i * Co, bp, sizeof(T) * static_cast<size_t>(Co));
    for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
            MapCMat<T> Wk(wp + ((dy + 1) * 3 + (dx + 1)) * Ci * Co, Ci, Co);
            int64_t x0 = std::max<int64_t>(0, -dx), x1 = std::min<int64_t>(W, W - dx);
            if (x1 <= x0) continue;
            for (int64_t b = 0; b < B; ++b)
                for (int64_t y = 0; y < H; ++y) {
                    int64_t ys = y + dy;
                    if (ys < 0 || ys >= H) continue;
                    MapCMat<T> Xrow(xp + ((b * H + ys) * W + (x0 + dx)) * Ci, x1 - x0, Ci);
                    MapMat<T> Orow(op + ((b * H + y) * W + x0) * Co, x1 - x0, Co);
                    Orow.noalias() += Xrow * Wk;
                }
        }
    if (grad_needed({&x, &wt, &bias})) {
        Node* xn = x.node();
        Node* wn = wt.node();
        Node* bn = bias.node();
        Node* on = out.node();
        attach(out, {&x, &wt, &bias}, [xn, wn, bn, on, B, H, W, Ci, Co]() {
            const T* g = on->grad<T>().data();
            const T* xp = xn->vals<T>().data();
            const T* wp = wn->vals<T>().data();
            if (bn->requires_grad) {
                MapArr<T> GB(bn->grad<T>().data(), Co);
                for (int64_t i = 0; i < B * H * W; ++i) GB += MapCArr<T>(g + i * Co, Co);
            }
            for (int dy = -1; dy <= 1; ++dy)
                for (int dx = -1; dx <= 1; ++dx) {
                    int64_t x0 = std::max<int64_t>(0, -dx), x1 = std::min<int64_t>(W, W - dx);
                    if (x1 <= x0) continue;
                    MapCMat<T> Wk(wp + ((dy + 1) * 3 + (dx + 1)) * Ci * Co, Ci, Co);
                    for (int64_t b = 0; b < B; ++b)
                        for (int64_t y = 0; y < H; ++y) {
                            int64_t ys = y + dy;
                            if (ys < 0 || ys >= H) continue;
                            MapCMat<T> Grow(g + ((b * H + y) * W + x0) * Co, x1 - x0, Co);
                            if (xn->requires_grad) {
                                MapMat<T> GX(xn->grad<T>().data() +
                                                 ((b * H + ys) * W + (x0 + dx)) * Ci,
                                             x1 - x0, Ci);
                                GX.noalias() += Grow * Wk.transpose();
                            }
                            if (wn->requires_grad) {
                                MapCMat<T> Xrow(xp + ((b * H + ys) * W + (x0 + dx)) * Ci, x1 - x0,
                                                Ci);
                                MapMat<T> GW(wn->grad<T>().data() +
                                                 ((dy + 1) * 3 + (dx + 1)) * Ci * Co,
                                             Ci, Co);
                                GW.noalias() += Xrow.transpose() * Grow;
                            }
                        }
                }
        });
    }
    return out;
}

}  // namespace

Tensor area_downsample2d(const Tensor& x, int k) {
    return x.dtype() == DType::F32 ? area_down_impl<float>(x, k) : area_down_impl<double>(x, k);
}
Tensor bilinear_upsample2d(const Tensor& x, int k) {
    return x.dtype() == DType::F32 ? bilinear_up_impl<float>(x, k) : bilinear_up_impl<double>(x, k);
}
Tensor conv3x3(const Tensor& x, const Tensor& w, const Tensor& b) {
    require(x.dtype() == w.dtype() && x.dtype() == b.dtype(), "conv3x3: dtype mismatch");
    return x.dtype() == DType::F32 ? conv3x3_impl<float>(x, w, b) : conv3x3_impl<double>(x, w, b);
}

Tensor stop_gradient(const Tensor& x) {
    Tensor out(make_node(x.shape(), x.dtype(), "stop_gradient"));
    if (x.dtype() == DType::F32)
        out.vals<float>() = x.vals<float>();
    else
        out.vals<double>() = x.vals<double>();
    return out;
}

}  // namespace flowgate
