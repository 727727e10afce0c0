#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <memory>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace choose {

using Shape = std::vector<int>;

namespace detail {

inline long numel_of(const Shape& s) {
    long n = 1;
    for (int d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << "]";
    return os.str();
}

}  // namespace detail

template <typename T>
struct TensorStorage {
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad;  // empty until first touched by backward
    bool requires_grad = false;
};

// Dense n-d array over a shared storage node. Values are immutable by
// convention once an op has produced them; only grad accumulates.
template <typename T>
class Tensor {
  public:
    Tensor() = default;

    static Tensor zeros(Shape shape) {
        Tensor t;
        t.d_ = std::make_shared<TensorStorage<T>>();
        t.d_->shape = std::move(shape);
        t.d_->value.assign(static_cast<std::size_t>(detail::numel_of(t.d_->shape)), T(0));
        return t;
    }

    static Tensor full(Shape shape, T v) {
        Tensor t = zeros(std::move(shape));
        for (auto& x : t.d_->value) x = v;
        return t;
    }

    static Tensor from(Shape shape, std::vector<T> data) {
        if (detail::numel_of(shape) != static_cast<long>(data.size())) {
            throw std::invalid_argument("Tensor::from: shape " + detail::shape_str(shape) +
                                        " does not match data length " + std::to_string(data.size()));
        }
        Tensor t;
        t.d_ = std::make_shared<TensorStorage<T>>();
        t.d_->shape = std::move(shape);
        t.d_->value = std::move(data);
        return t;
    }

    static Tensor scalar(T v) { return from({1}, {v}); }

    // trainable leaf
    static Tensor leaf(Shape shape, std::vector<T> data) {
        Tensor t = from(std::move(shape), std::move(data));
        t.d_->requires_grad = true;
        return t;
    }

    bool defined() const { return static_cast<bool>(d_); }
    const Shape& shape() const { return d_->shape; }
    long numel() const { return static_cast<long>(d_->value.size()); }
    int rows() const { return d_->shape.at(0); }
    int cols() const { return d_->shape.at(1); }

    std::vector<T>& value() { return d_->value; }
    const std::vector<T>& value() const { return d_->value; }

    bool requires_grad() const { return d_->requires_grad; }
    void set_requires_grad(bool b) { d_->requires_grad = b; }

    void ensure_grad() {
        if (d_->grad.size() != d_->value.size()) d_->grad.assign(d_->value.size(), T(0));
    }
    void zero_grad() { d_->grad.assign(d_->value.size(), T(0)); }
    std::vector<T>& grad() {
        ensure_grad();
        return d_->grad;
    }
    bool has_grad() const { return d_->grad.size() == d_->value.size(); }

    T item() const {
        if (numel() != 1) {
            throw std::invalid_argument("Tensor::item: tensor " + detail::shape_str(d_->shape) +
                                        " is not a scalar");
        }
        return d_->value[0];
    }

    std::shared_ptr<TensorStorage<T>> node() const { return d_; }

    bool same_node(const Tensor& o) const { return d_ == o.d_; }

  private:
    std::shared_ptr<TensorStorage<T>> d_;
};

// Records primitive applications in execution order (inputs always precede
// their consumers). backward() replays the rules once, in reverse.
template <typename T>
class Tape {
  public:
    void record(std::function<void()> rule) { nodes_.push_back(std::move(rule)); }

    std::size_t size() const { return nodes_.size(); }

    void backward(Tensor<T> loss) {
        if (loss.numel() != 1) {
            throw std::invalid_argument("Tape::backward: loss must be scalar, got " +
                                        detail::shape_str(loss.shape()));
        }
        loss.ensure_grad();
        loss.grad()[0] += T(1);
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
    }

  private:
    std::vector<std::function<void()>> nodes_;
};

// ---------------------------------------------------------------------------
// raw kernels
// ---------------------------------------------------------------------------

namespace kern {

// c (+)= a[m,k] * b[k,n]; ikj order keeps the inner loop contiguous
template <typename T, bool Accumulate>
void matmul(const T* a, const T* b, T* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        T* ci = c + static_cast<std::size_t>(i) * n;
        if constexpr (!Accumulate) {
            for (int j = 0; j < n; ++j) ci[j] = T(0);
        }
        const T* ai = a + static_cast<std::size_t>(i) * k;
        for (int l = 0; l < k; ++l) {
            const T ail = ai[l];
            const T* bl = b + static_cast<std::size_t>(l) * n;
            for (int j = 0; j < n; ++j) ci[j] += ail * bl[j];
        }
    }
}

// c (+)= a[m,k] * b[n,k]^T
template <typename T, bool Accumulate>
void matmul_nt(const T* a, const T* b, T* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const T* ai = a + static_cast<std::size_t>(i) * k;
        T* ci = c + static_cast<std::size_t>(i) * n;
        for (int j = 0; j < n; ++j) {
            const T* bj = b + static_cast<std::size_t>(j) * k;
            T acc = T(0);
            for (int l = 0; l < k; ++l) acc += ai[l] * bj[l];
            if constexpr (Accumulate) {
                ci[j] += acc;
            } else {
                ci[j] = acc;
            }
        }
    }
}

// c (+)= a[k,m]^T * b[k,n]
template <typename T, bool Accumulate>
void matmul_tn(const T* a, const T* b, T* c, int m, int k, int n) {
    if constexpr (!Accumulate) {
        for (long i = 0; i < static_cast<long>(m) * n; ++i) c[i] = T(0);
    }
    for (int l = 0; l < k; ++l) {
        const T* al = a + static_cast<std::size_t>(l) * m;
        const T* bl = b + static_cast<std::size_t>(l) * n;
        for (int i = 0; i < m; ++i) {
            const T ali = al[i];
            T* ci = c + static_cast<std::size_t>(i) * n;
            for (int j = 0; j < n; ++j) ci[j] += ali * bl[j];
        }
    }
}

}  // namespace kern

// ---------------------------------------------------------------------------
// primitives; each op computes forward eagerly and, when a tape is supplied,
// records its backward rule
// ---------------------------------------------------------------------------

namespace ops_detail {

inline void check_2d(const Shape& s, const char* op) {
    if (s.size() != 2) {
        throw std::invalid_argument(std::string(op) + ": expected 2-d tensor, got " +
                                    detail::shape_str(s));
    }
}

}  // namespace ops_detail

template <typename T>
Tensor<T> matmul(Tensor<T> a, Tensor<T> b, Tape<T>* tape = nullptr) {
    ops_detail::check_2d(a.shape(), "matmul");
    ops_detail::check_2d(b.shape(), "matmul");
    const int m = a.rows(), k = a.cols(), n = b.cols();
    if (b.rows() != k) {
        throw std::invalid_argument("matmul: inner dimensions disagree: " +
                                    detail::shape_str(a.shape()) + " vs " +
                                    detail::shape_str(b.shape()));
    }
    Tensor<T> out = Tensor<T>::zeros({m, n});
    kern::matmul<T, false>(a.value().data(), b.value().data(), out.value().data(), m, k, n);
    if (tape) {
        tape->record([a, b, out, m, k, n]() mutable {
            out.ensure_grad();
            const T* g = out.grad().data();
            a.ensure_grad();
            b.ensure_grad();
            kern::matmul_nt<T, true>(g, b.value().data(), a.grad().data(), m, n, k);
            kern::matmul_tn<T, true>(a.value().data(), g, b.grad().data(), k, m, n);
        });
    }
    return out;
}

// a[m,k] * b[n,k]^T -> [m,n]
template <typename T>
Tensor<T> matmul_nt(Tensor<T> a, Tensor<T> b, Tape<T>* tape = nullptr) {
    ops_detail::check_2d(a.shape(), "matmul_nt");
    ops_detail::check_2d(b.shape(), "matmul_nt");
    const int m = a.rows(), k = a.cols(), n = b.rows();
    if (b.cols() != k) {
        throw std::invalid_argument("matmul_nt: inner dimensions disagree: " +
                                    detail::shape_str(a.shape()) + " vs " +
                                    detail::shape_str(b.shape()));
    }
    Tensor<T> out = Tensor<T>::zeros({m, n});
    kern::matmul_nt<T, false>(a.value().data(), b.value().data(), out.value().data(), m, k, n);
    if (tape) {
        tape->record([a, b, out, m, k, n]() mutable {
            out.ensure_grad();
            const T* g = out.grad().data();
            a.ensure_grad();
            b.ensure_grad();
            // da += g * b ; db += g^T * a
            kern::matmul<T, true>(g, b.value().data(), a.grad().data(), m, n, k);
            kern::matmul_tn<T, true>(g, a.value().data(), b.grad().data(), n, m, k);
        });
    }
    return out;
}

template <typename T>
Tensor<T> add(Tensor<T> a, Tensor<T> b, Tape<T>* tape = nullptr) {
    if (a.shape() != b.shape()) {
        throw std::invalid_argument("add: shape mismatch " + detail::shape_str(a.shape()) + " vs " +
                                    detail::shape_str(b.shape()));
    }
    Tensor<T> out = Tensor<T>::zeros(a.shape());
    const long n = a.numel();
    for (long i = 0; i < n; ++i) out.value()[i] = a.value()[i] + b.value()[i];
    if (tape) {
        tape->record([a, b, out, n]() mutable {
            out.ensure_grad();
            a.ensure_grad();
            b.ensure_grad();
            for (long i = 0; i < n; ++i) {
                a.grad()[i] += out.grad()[i];
                b.grad()[i] += out.grad()[i];
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> sub(Tensor<T> a, Tensor<T> b, Tape<T>* tape = nullptr) {
    if (a.shape() != b.shape()) {
        throw std::invalid_argument("sub: shape mismatch " + detail::shape_str(a.shape()) + " vs " +
                                    detail::shape_str(b.shape()));
    }
    Tensor<T> out = Tensor<T>::zeros(a.shape());
    const long n = a.numel();
    for (long i = 0; i < n; ++i) out.value()[i] = a.value()[i] - b.value()[i];
    if (tape) {
        tape->record([a, b, out, n]() mutable {
            out.ensure_grad();
            a.ensure_grad();
            b.ensure_grad();
            for (long i = 0; i < n; ++i) {
                a.grad()[i] += out.grad()[i];
                b.grad()[i] -= out.grad()[i];
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> mul(Tensor<T> a, Tensor<T> b, Tape<T>* tape = nullptr) {
    if (a.shape() != b.shape()) {
        throw std::invalid_argument("mul: shape mismatch " + detail::shape_str(a.shape()) + " vs " +
                                    detail::shape_str(b.shape()));
    }
    Tensor<T> out = Tensor<T>::zeros(a.shape());
    const long n = a.numel();
    for (long i = 0; i < n; ++i) out.value()[i] = a.value()[i] * b.value()[i];
    if (tape) {
        tape->record([a, b, out, n]() mutable {
            out.ensure_grad();
            a.ensure_grad();
            b.ensure_grad();
            for (long i = 0; i < n; ++i) {
                a.grad()[i] += out.grad()[i] * b.value()[i];
                b.grad()[i] += out.grad()[i] * a.value()[i];
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> scale(Tensor<T> a, T s, Tape<T>* tape = nullptr) {
    Tensor<T> out = Tensor<T>::zeros(a.shape());
    const long n = a.numel();
    for (long i = 0; i < n; ++i) out.value()[i] = a.value()[i] * s;
    if (tape) {
        tape->record([a, out, s, n]() mutable {
            out.ensure_grad();
            a.ensure_grad();
            for (long i = 0; i < n; ++i) a.grad()[i] += out.grad()[i] * s;
        });
    }
    return out;
}

// x[r,c] + bias[c], broadcast over rows
template <typename T>
Tensor<T> add_bias(Tensor<T> x, Tensor<T> bias, Tape<T>* tape = nullptr) {
    ops_detail::check_2d(x.shape(), "add_bias");
    const int r = x.rows(), c = x.cols();
    if (bias.numel() != c) {
        throw std::invalid_argument("add_bias: bias length " + std::to_string(bias.numel()) +
                                    " does not match columns of " + detail::shape_str(x.shape()));
    }
    Tensor<T> out = Tensor<T>::zeros(x.shape());
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j)
            out.value()[static_cast<std::size_t>(i) * c + j] =
                x.value()[static_cast<std::size_t>(i) * c + j] + bias.value()[j];
    if (tape) {
        tape->record([x, bias, out, r, c]() mutable {
            out.ensure_grad();
            x.ensure_grad();
            bias.ensure_grad();
            for (int i = 0; i < r; ++i)
                for (int j = 0; j < c; ++j) {
                    const T g = out.grad()[static_cast<std::size_t>(i) * c + j];
                    x.grad()[static_cast<std::size_t>(i) * c + j] += g;
                    bias.grad()[j] += g;
                }
        });
    }
    return out;
}

template <typename T>
Tensor<T> sum_all(Tensor<T> x, Tape<T>* tape = nullptr) {
    T acc = T(0);
    for (const T v : x.value()) acc += v;
    Tensor<T> out = Tensor<T>::scalar(acc);
    if (tape) {
        tape->record([x, out]() mutable {
            out.ensure_grad();
            x.ensure_grad();
            const T g = out.grad()[0];
            for (auto& gi : x.grad()) gi += g;
        });
    }
    return out;
}

// softmax over the last axis after adding `mask` (entries 0 or -inf).
// mask shape must be [r,c] or [c] / [1,c] (broadcast over rows).
template <typename T>
Tensor<T> masked_softmax(Tensor<T> x, Tensor<T> mask, Tape<T>* tape = nullptr) {
    ops_detail::check_2d(x.shape(), "masked_softmax");
    const int r = x.rows(), c = x.cols();
    const long mn = mask.numel();
    const bool row_bcast = (mn == c);
    if (!row_bcast && mn != static_cast<long>(r) * c) {
        throw std::invalid_argument("masked_softmax: mask " + detail::shape_str(mask.shape()) +
                                    " not broadcastable to " + detail::shape_str(x.shape()));
    }
    Tensor<T> out = Tensor<T>::zeros(x.shape());
    const T* xv = x.value().data();
    const T* mv = mask.value().data();
    T* ov = out.value().data();
    constexpr T neg_inf = -std::numeric_limits<T>::infinity();
    for (int i = 0; i < r; ++i) {
        const T* xi = xv + static_cast<std::size_t>(i) * c;
        const T* mi = row_bcast ? mv : mv + static_cast<std::size_t>(i) * c;
        T* oi = ov + static_cast<std::size_t>(i) * c;
        T mx = neg_inf;
        for (int j = 0; j < c; ++j) {
            const T s = xi[j] + mi[j];
            if (s > mx) mx = s;
        }
        if (mx == neg_inf) {
            throw std::invalid_argument("masked_softmax: row " + std::to_string(i) +
                                        " is fully masked; no attendable position");
        }
        T denom = T(0);
        for (int j = 0; j < c; ++j) {
            const T e = std::exp(xi[j] + mi[j] - mx);
            oi[j] = e;
            denom += e;
        }
        const T inv = T(1) / denom;
        for (int j = 0; j < c; ++j) oi[j] *= inv;
    }
    if (tape) {
        tape->record([x, out, r, c]() mutable {
            out.ensure_grad();
            x.ensure_grad();
            for (int i = 0; i < r; ++i) {
                const T* p = out.value().data() + static_cast<std::size_t>(i) * c;
                const T* g = out.grad().data() + static_cast<std::size_t>(i) * c;
                T* xg = x.grad().data() + static_cast<std::size_t>(i) * c;
                T dot = T(0);
                for (int j = 0; j < c; ++j) dot += p[j] * g[j];
                for (int j = 0; j < c; ++j) xg[j] += p[j] * (g[j] - dot);
            }
        });
    }
    return out;
}

// per-row standardization, then affine: gain * (x-mu)/sqrt(var+eps) + bias
template <typename T>
Tensor<T> layer_norm(Tensor<T> x, Tensor<T> gain, Tensor<T> bias, T eps,
                     Tape<T>* tape = nullptr) {
    ops_detail::check_2d(x.shape(), "layer_norm");
    const int r = x.rows(), c = x.cols();
    if (gain.numel() != c || bias.numel() != c) {
        throw std::invalid_argument("layer_norm: gain/bias length does not match columns of " +
                                    detail::shape_str(x.shape()));
    }
    Tensor<T> out = Tensor<T>::zeros(x.shape());
    auto xhat = std::make_shared<std::vector<T>>(static_cast<std::size_t>(r) * c);
    auto inv_std = std::make_shared<std::vector<T>>(r);
    for (int i = 0; i < r; ++i) {
        const T* xi = x.value().data() + static_cast<std::size_t>(i) * c;
        T mean = T(0);
        for (int j = 0; j < c; ++j) mean += xi[j];
        mean /= static_cast<T>(c);
        T var = T(0);
        for (int j = 0; j < c; ++j) {
            const T d = xi[j] - mean;
            var += d * d;
        }
        var /= static_cast<T>(c);
        const T inv = T(1) / std::sqrt(var + eps);
        (*inv_std)[i] = inv;
        T* hi = xhat->data() + static_cast<std::size_t>(i) * c;
        T* oi = out.value().data() + static_cast<std::size_t>(i) * c;
        for (int j = 0; j < c; ++j) {
            hi[j] = (xi[j] - mean) * inv;
            oi[j] = gain.value()[j] * hi[j] + bias.value()[j];
        }
    }
    if (tape) {
        tape->record([x, gain, bias, out, xhat, inv_std, r, c]() mutable {
            out.ensure_grad();
            x.ensure_grad();
            gain.ensure_grad();
            bias.ensure_grad();
            for (int i = 0; i < r; ++i) {
                const T* g = out.grad().data() + static_cast<std::size_t>(i) * c;
                const T* hi = xhat->data() + static_cast<std::size_t>(i) * c;
                T* xg = x.grad().data() + static_cast<std::size_t>(i) * c;
                T sum_gy = T(0), sum_gyh = T(0);
                for (int j = 0; j < c; ++j) {
                    const T gy = g[j] * gain.value()[j];
                    sum_gy += gy;
                    sum_gyh += gy * hi[j];
                    gain.grad()[j] += g[j] * hi[j];
                    bias.grad()[j] += g[j];
                }
                const T mean_gy = sum_gy / static_cast<T>(c);
                const T mean_gyh = sum_gyh / static_cast<T>(c);
                const T inv = (*inv_std)[i];
                for (int j = 0; j < c; ++j) {
                    const T gy = g[j] * gain.value()[j];
                    xg[j] += (gy - mean_gy - hi[j] * mean_gyh) * inv;
                }
            }
        });
    }
    return out;
}

namespace ops_detail {
// tanh-approximation constants
template <typename T>
inline constexpr T kGeluRoot2OverPi = T(0.7978845608028653558798921198687637369L);
template <typename T>
inline constexpr T kGeluCubic = T(0.044715L);
}  // namespace ops_detail

// GELU, tanh approximation (GPT-2 convention):
//   0.5 * x * (1 + tanh(sqrt(2/pi) * (x + 0.044715 x^3)))
template <typename T>
Tensor<T> gelu(Tensor<T> x, Tape<T>* tape = nullptr) {
    Tensor<T> out = Tensor<T>::zeros(x.shape());
    const long n = x.numel();
    for (long i = 0; i < n; ++i) {
        const T v = x.value()[i];
        const T u = ops_detail::kGeluRoot2OverPi<T> *
                    (v + ops_detail::kGeluCubic<T> * v * v * v);
        out.value()[i] = T(0.5) * v * (T(1) + std::tanh(u));
    }
    if (tape) {
        tape->record([x, out, n]() mutable {
            out.ensure_grad();
            x.ensure_grad();
            for (long i = 0; i < n; ++i) {
                const T v = x.value()[i];
                const T u = ops_detail::kGeluRoot2OverPi<T> *
                            (v + ops_detail::kGeluCubic<T> * v * v * v);
                const T th = std::tanh(u);
                const T du = ops_detail::kGeluRoot2OverPi<T> *
                             (T(1) + T(3) * ops_detail::kGeluCubic<T> * v * v);
                const T d = T(0.5) * (T(1) + th) + T(0.5) * v * (T(1) - th * th) * du;
                x.grad()[i] += out.grad()[i] * d;
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> slice_cols(Tensor<T> x, int c0, int c1, Tape<T>* tape = nullptr) {
    ops_detail::check_2d(x.shape(), "slice_cols");
    const int r = x.rows(), c = x.cols();
    if (c0 < 0 || c1 > c || c0 >= c1) {
        throw std::invalid_argument("slice_cols: bad range [" + std::to_string(c0) + "," +
                                    std::to_string(c1) + ") for " + detail::shape_str(x.shape()));
    }
    const int w = c1 - c0;
    Tensor<T> out = Tensor<T>::zeros({r, w});
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < w; ++j)
            out.value()[static_cast<std::size_t>(i) * w + j] =
                x.value()[static_cast<std::size_t>(i) * c + c0 + j];
    if (tape) {
        tape->record([x, out, r, c, c0, w]() mutable {
            out.ensure_grad();
            x.ensure_grad();
            for (int i = 0; i < r; ++i)
                for (int j = 0; j < w; ++j)
                    x.grad()[static_cast<std::size_t>(i) * c + c0 + j] +=
                        out.grad()[static_cast<std::size_t>(i) * w + j];
        });
    }
    return out;
}

template <typename T>
Tensor<T> concat_cols(std::vector<Tensor<T>> parts, Tape<T>* tape = nullptr) {
    if (parts.empty()) throw std::invalid_argument("concat_cols: no parts");
    const int r = parts[0].rows();
    int c = 0;
    for (const auto& p : parts) {
        ops_detail::check_2d(p.shape(), "concat_cols");
        if (p.rows() != r) throw std::invalid_argument("concat_cols: row mismatch");
        c += p.cols();
    }
    Tensor<T> out = Tensor<T>::zeros({r, c});
    int off = 0;
    for (const auto& p : parts) {
        const int w = p.cols();
        for (int i = 0; i < r; ++i)
            for (int j = 0; j < w; ++j)
                out.value()[static_cast<std::size_t>(i) * c + off + j] =
                    p.value()[static_cast<std::size_t>(i) * w + j];
        off += w;
    }
    if (tape) {
        tape->record([parts, out, r, c]() mutable {
            out.ensure_grad();
            int off2 = 0;
            for (auto& p : parts) {
                const int w = p.cols();
                p.ensure_grad();
                for (int i = 0; i < r; ++i)
                    for (int j = 0; j < w; ++j)
                        p.grad()[static_cast<std::size_t>(i) * w + j] +=
                            out.grad()[static_cast<std::size_t>(i) * c + off2 + j];
                off2 += w;
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> concat_rows(std::vector<Tensor<T>> parts, Tape<T>* tape = nullptr) {
    if (parts.empty()) throw std::invalid_argument("concat_rows: no parts");
    const int c = parts[0].cols();
    int r = 0;
    for (const auto& p : parts) {
        ops_detail::check_2d(p.shape(), "concat_rows");
        if (p.cols() != c) throw std::invalid_argument("concat_rows: column mismatch");
        r += p.rows();
    }
    Tensor<T> out = Tensor<T>::zeros({r, c});
    long off = 0;
    for (const auto& p : parts) {
        for (long i = 0; i < p.numel(); ++i) out.value()[off + i] = p.value()[i];
        off += p.numel();
    }
    if (tape) {
        tape->record([parts, out]() mutable {
            out.ensure_grad();
            long off2 = 0;
            for (auto& p : parts) {
                p.ensure_grad();
                for (long i = 0; i < p.numel(); ++i) p.grad()[i] += out.grad()[off2 + i];
                off2 += p.numel();
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> gather_rows(Tensor<T> x, const std::vector<int>& idx, Tape<T>* tape = nullptr) {
    ops_detail::check_2d(x.shape(), "gather_rows");
    const int r = x.rows(), c = x.cols();
    Tensor<T> out = Tensor<T>::zeros({static_cast<int>(idx.size()), c});
    for (std::size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] < 0 || idx[i] >= r) {
            throw std::invalid_argument("gather_rows: index " + std::to_string(idx[i]) +
                                        " out of range for " + detail::shape_str(x.shape()));
        }
        for (int j = 0; j < c; ++j)
            out.value()[i * c + j] = x.value()[static_cast<std::size_t>(idx[i]) * c + j];
    }
    if (tape) {
        tape->record([x, out, idx, c]() mutable {
            out.ensure_grad();
            x.ensure_grad();
            for (std::size_t i = 0; i < idx.size(); ++i)
                for (int j = 0; j < c; ++j)
                    x.grad()[static_cast<std::size_t>(idx[i]) * c + j] += out.grad()[i * c + j];
        });
    }
    return out;
}

// copy of x with rows[idx[i]] replaced by rows.row(i); idx entries must be unique
template <typename T>
Tensor<T> set_rows(Tensor<T> x, const std::vector<int>& idx, Tensor<T> rows,
                   Tape<T>* tape = nullptr) {
    ops_detail::check_2d(x.shape(), "set_rows");
    const int r = x.rows(), c = x.cols();
    if (rows.rows() != static_cast<int>(idx.size()) || rows.cols() != c) {
        throw std::invalid_argument("set_rows: replacement shape " +
                                    detail::shape_str(rows.shape()) + " does not match");
    }
    Tensor<T> out = Tensor<T>::from(x.shape(), x.value());
    for (std::size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] < 0 || idx[i] >= r) {
            throw std::invalid_argument("set_rows: index out of range");
        }
        for (int j = 0; j < c; ++j)
            out.value()[static_cast<std::size_t>(idx[i]) * c + j] = rows.value()[i * c + j];
    }
    if (tape) {
        tape->record([x, rows, out, idx, c]() mutable {
            out.ensure_grad();
            x.ensure_grad();
            rows.ensure_grad();
            std::vector<char> replaced(static_cast<std::size_t>(x.rows()), 0);
            for (int i : idx) replaced[static_cast<std::size_t>(i)] = 1;
            for (int i = 0; i < x.rows(); ++i) {
                if (replaced[static_cast<std::size_t>(i)]) continue;
                for (int j = 0; j < c; ++j)
                    x.grad()[static_cast<std::size_t>(i) * c + j] +=
                        out.grad()[static_cast<std::size_t>(i) * c + j];
            }
            for (std::size_t i = 0; i < idx.size(); ++i)
                for (int j = 0; j < c; ++j)
                    rows.grad()[i * c + j] += out.grad()[static_cast<std::size_t>(idx[i]) * c + j];
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// gradient checking (64-bit)
// ---------------------------------------------------------------------------

// f must be a pure scalar-valued function of `inputs`, evaluated through
// whatever tape it is handed. Returns the max relative error between the
// taped gradient and central finite differences. When coords_per_input > 0,
// only that many coordinates per input are probed (pseudo-random but fixed).
inline double grad_check(
    const std::function<Tensor<double>(Tape<double>&, std::vector<Tensor<double>>&)>& f,
    std::vector<Tensor<double>> inputs, double h = 1e-5, int coords_per_input = 0) {
    for (auto& t : inputs) {
        t.set_requires_grad(true);
        t.zero_grad();
    }

    Tape<double> tape;
    Tensor<double> loss = f(tape, inputs);
    tape.backward(loss);
    std::vector<std::vector<double>> analytic;
    analytic.reserve(inputs.size());
    for (auto& t : inputs) analytic.push_back(t.grad());

    auto eval = [&](std::vector<Tensor<double>>& in) {
        Tape<double> scratch;
        return f(scratch, in).item();
    };

    double max_rel = 0.0;
    std::uint64_t pick = 0x2545F4914F6CDD1Dull;
    for (std::size_t ti = 0; ti < inputs.size(); ++ti) {
        const long n = inputs[ti].numel();
        std::vector<long> coords;
        if (coords_per_input <= 0 || coords_per_input >= n) {
            coords.resize(static_cast<std::size_t>(n));
            for (long i = 0; i < n; ++i) coords[static_cast<std::size_t>(i)] = i;
        } else {
            for (int i = 0; i < coords_per_input; ++i) {
                pick ^= pick << 13;
                pick ^= pick >> 7;
                pick ^= pick << 17;
                coords.push_back(static_cast<long>(pick % static_cast<std::uint64_t>(n)));
            }
        }
        for (long ci : coords) {
            const double keep = inputs[ti].value()[static_cast<std::size_t>(ci)];
            auto diff_at = [&](double step) {
                inputs[ti].value()[static_cast<std::size_t>(ci)] = keep + step;
                const double up = eval(inputs);
                inputs[ti].value()[static_cast<std::size_t>(ci)] = keep - step;
                const double dn = eval(inputs);
                inputs[ti].value()[static_cast<std::size_t>(ci)] = keep;
                return (up - dn) / (2.0 * step);
            };
            // Richardson-extrapolated central difference: cancels the h^2
            // truncation term so one step size serves every gradient scale
            const double numeric = (4.0 * diff_at(h / 2.0) - diff_at(h)) / 3.0;
            const double exact = analytic[ti][static_cast<std::size_t>(ci)];
            const double denom = std::max({std::abs(exact), std::abs(numeric), 1e-8});
            const double rel = std::abs(exact - numeric) / denom;
            if (rel > max_rel) max_rel = rel;
        }
    }
    return max_rel;
}

}  // namespace choose
