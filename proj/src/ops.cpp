#include "clu/ops.hpp"

#include "clu/errors.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

namespace clu {

namespace {

template <typename T>
using NodeT = detail::Node<T>;
template <typename T>
using NodePtr = std::shared_ptr<NodeT<T>>;
template <typename T>
using BackwardFn = std::function<void(NodeT<T>&)>;

// Builds the output node; the graph edge is recorded only when some input
// needs a gradient, so inference never allocates backward state.
template <typename T>
BasicTensor<T> record(Shape shape, std::vector<T> values, std::vector<NodePtr<T>> inputs, BackwardFn<T> fn) {
    auto node = std::make_shared<NodeT<T>>();
    node->shape = std::move(shape);
    node->values = std::move(values);
    bool any = std::any_of(inputs.begin(), inputs.end(), [](const NodePtr<T>& p) { return p->requires_grad; });
    if (any) {
        node->requires_grad = true;
        node->parents = std::move(inputs);
        node->backward_fn = std::move(fn);
    }
    return BasicTensor<T>::wrap(std::move(node));
}

[[noreturn]] void dim_error(const std::string& op, const Shape& a, const Shape& b) {
    throw DimensionError(op + ": incompatible shapes " + shape_str(a) + " and " + shape_str(b));
}

void require_rank(const std::string& op, const Shape& s, std::size_t rank) {
    if (s.size() != rank) {
        throw DimensionError(op + ": expected rank " + std::to_string(rank) + ", got " + shape_str(s));
    }
}

// C[m x n] += A[m x k] * B[k x n]. Each output element sums over k in order.
template <typename T>
void mm_nn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        T* crow = c + i * n;
        const T* arow = a + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const T av = arow[p];
            const T* brow = b + p * n;
            for (std::size_t j = 0; j < n; ++j) {
                crow[j] += av * brow[j];
            }
        }
    }
}

// C[k x n] += A[m x k]^T * B[m x n]
template <typename T>
void mm_tn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const T* arow = a + i * k;
        const T* brow = b + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const T av = arow[p];
            T* crow = c + p * n;
            for (std::size_t j = 0; j < n; ++j) {
                crow[j] += av * brow[j];
            }
        }
    }
}

// C[m x n] += A[m x k] * B[n x k]^T, via an explicit transpose of B.
template <typename T>
void mm_nt(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n, std::vector<T>& scratch) {
    scratch.resize(k * n);
    for (std::size_t j = 0; j < n; ++j) {
        for (std::size_t p = 0; p < k; ++p) {
            scratch[p * n + j] = b[j * k + p];
        }
    }
    mm_nn(a, scratch.data(), c, m, k, n);
}

template <typename T>
BasicTensor<T> gather_impl(const BasicTensor<T>& x, Shape out_shape, std::vector<std::size_t> index) {
    if (shape_numel(out_shape) != index.size()) {
        throw DimensionError("gather: index count does not match " + shape_str(out_shape));
    }
    auto xv = x.values();
    std::vector<T> out(index.size());
    for (std::size_t i = 0; i < index.size(); ++i) {
        if (index[i] >= xv.size()) {
            throw IndexError("gather: index " + std::to_string(index[i]) + " out of range for " +
                             shape_str(x.shape()));
        }
        out[i] = xv[index[i]];
    }
    return record<T>(std::move(out_shape), std::move(out), {x.node()}, [idx = std::move(index)](NodeT<T>& self) {
        auto& g = self.parents[0]->grad_buffer();
        for (std::size_t i = 0; i < idx.size(); ++i) {
            g[idx[i]] += self.grad[i];
        }
    });
}

}  // namespace

template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    require_rank("matmul", a.shape(), 2);
    require_rank("matmul", b.shape(), 2);
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    if (b.dim(0) != k) {
        dim_error("matmul", a.shape(), b.shape());
    }
    std::vector<T> out(m * n, T(0));
    mm_nn(a.values().data(), b.values().data(), out.data(), m, k, n);
    return record<T>({m, n}, std::move(out), {a.node(), b.node()}, [m, k, n](NodeT<T>& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        std::vector<T> scratch;
        if (pa.requires_grad) {
            mm_nt(self.grad.data(), pb.values.data(), pa.grad_buffer().data(), m, n, k, scratch);
        }
        if (pb.requires_grad) {
            mm_tn(pa.values.data(), self.grad.data(), pb.grad_buffer().data(), m, k, n);
        }
    });
}

template <typename T>
BasicTensor<T> linear(const BasicTensor<T>& x, const BasicTensor<T>& w) {
    require_rank("linear", x.shape(), 2);
    require_rank("linear", w.shape(), 2);
    const std::size_t rows = x.dim(0), k = x.dim(1), d = w.dim(0);
    if (w.dim(1) != k) {
        dim_error("linear", x.shape(), w.shape());
    }
    std::vector<T> out(rows * d, T(0));
    std::vector<T> scratch;
    mm_nt(x.values().data(), w.values().data(), out.data(), rows, k, d, scratch);
    return record<T>({rows, d}, std::move(out), {x.node(), w.node()}, [rows, k, d](NodeT<T>& self) {
        auto& px = *self.parents[0];
        auto& pw = *self.parents[1];
        if (px.requires_grad) {
            mm_nn(self.grad.data(), pw.values.data(), px.grad_buffer().data(), rows, d, k);
        }
        if (pw.requires_grad) {
            mm_tn(self.grad.data(), px.values.data(), pw.grad_buffer().data(), rows, d, k);
        }
    });
}

template <typename T>
BasicTensor<T> linear(const BasicTensor<T>& x, const BasicTensor<T>& w, const BasicTensor<T>& bias) {
    if (bias.numel() != w.shape().at(0)) {
        dim_error("linear bias", w.shape(), bias.shape());
    }
    auto xw = linear(x, w);
    return add_tiled(xw, reshape(bias, Shape{1, bias.numel()}));
}

template <typename T>
BasicTensor<T> bmm(const BasicTensor<T>& a, const BasicTensor<T>& b, bool transpose_b) {
    require_rank("bmm", a.shape(), 3);
    require_rank("bmm", b.shape(), 3);
    const std::size_t g = a.dim(0), m = a.dim(1), k = a.dim(2);
    const std::size_t n = transpose_b ? b.dim(1) : b.dim(2);
    const std::size_t bk = transpose_b ? b.dim(2) : b.dim(1);
    if (b.dim(0) != g || bk != k) {
        dim_error("bmm", a.shape(), b.shape());
    }
    std::vector<T> out(g * m * n, T(0));
    std::vector<T> scratch;
    const T* av = a.values().data();
    const T* bv = b.values().data();
    for (std::size_t i = 0; i < g; ++i) {
        if (transpose_b) {
            mm_nt(av + i * m * k, bv + i * n * k, out.data() + i * m * n, m, k, n, scratch);
        } else {
            mm_nn(av + i * m * k, bv + i * k * n, out.data() + i * m * n, m, k, n);
        }
    }
    return record<T>({g, m, n}, std::move(out), {a.node(), b.node()}, [g, m, k, n, transpose_b](NodeT<T>& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        std::vector<T> scratch;
        for (std::size_t i = 0; i < g; ++i) {
            const T* gi = self.grad.data() + i * m * n;
            if (transpose_b) {
                // out = a b^T with b[n x k]
                if (pa.requires_grad) {
                    mm_nn(gi, pb.values.data() + i * n * k, pa.grad_buffer().data() + i * m * k, m, n, k);
                }
                if (pb.requires_grad) {
                    mm_tn(gi, pa.values.data() + i * m * k, pb.grad_buffer().data() + i * n * k, m, n, k);
                }
            } else {
                if (pa.requires_grad) {
                    mm_nt(gi, pb.values.data() + i * k * n, pa.grad_buffer().data() + i * m * k, m, n, k, scratch);
                }
                if (pb.requires_grad) {
                    mm_tn(pa.values.data() + i * m * k, gi, pb.grad_buffer().data() + i * k * n, m, k, n);
                }
            }
        }
    });
}

template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    if (a.shape() != b.shape()) {
        dim_error("add", a.shape(), b.shape());
    }
    auto av = a.values();
    auto bv = b.values();
    std::vector<T> out(av.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = av[i] + bv[i];
    }
    return record<T>(a.shape(), std::move(out), {a.node(), b.node()}, [](NodeT<T>& self) {
        for (auto& p : self.parents) {
            if (p->requires_grad) {
                auto& g = p->grad_buffer();
                for (std::size_t i = 0; i < g.size(); ++i) {
                    g[i] += self.grad[i];
                }
            }
        }
    });
}

template <typename T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    if (a.shape() != b.shape()) {
        dim_error("mul", a.shape(), b.shape());
    }
    auto av = a.values();
    auto bv = b.values();
    std::vector<T> out(av.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = av[i] * bv[i];
    }
    return record<T>(a.shape(), std::move(out), {a.node(), b.node()}, [](NodeT<T>& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        if (pa.requires_grad) {
            auto& g = pa.grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) {
                g[i] += self.grad[i] * pb.values[i];
            }
        }
        if (pb.requires_grad) {
            auto& g = pb.grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) {
                g[i] += self.grad[i] * pa.values[i];
            }
        }
    });
}

template <typename T>
BasicTensor<T> scale(const BasicTensor<T>& a, T factor) {
    auto av = a.values();
    std::vector<T> out(av.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = av[i] * factor;
    }
    return record<T>(a.shape(), std::move(out), {a.node()}, [factor](NodeT<T>& self) {
        auto& g = self.parents[0]->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) {
            g[i] += self.grad[i] * factor;
        }
    });
}

template <typename T>
BasicTensor<T> add_tiled(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    require_rank("add_tiled", a.shape(), 2);
    require_rank("add_tiled", b.shape(), 2);
    const std::size_t n = a.dim(0), d = a.dim(1), m = b.dim(0);
    if (b.dim(1) != d || m == 0 || n % m != 0) {
        dim_error("add_tiled", a.shape(), b.shape());
    }
    auto av = a.values();
    auto bv = b.values();
    std::vector<T> out(av.size());
    for (std::size_t r = 0; r < n; ++r) {
        const std::size_t br = r % m;
        for (std::size_t j = 0; j < d; ++j) {
            out[r * d + j] = av[r * d + j] + bv[br * d + j];
        }
    }
    return record<T>(a.shape(), std::move(out), {a.node(), b.node()}, [n, d, m](NodeT<T>& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        if (pa.requires_grad) {
            auto& g = pa.grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) {
                g[i] += self.grad[i];
            }
        }
        if (pb.requires_grad) {
            auto& g = pb.grad_buffer();
            for (std::size_t r = 0; r < n; ++r) {
                const std::size_t br = r % m;
                for (std::size_t j = 0; j < d; ++j) {
                    g[br * d + j] += self.grad[r * d + j];
                }
            }
        }
    });
}

template <typename T>
BasicTensor<T> gelu(const BasicTensor<T>& x) {
    auto xv = x.values();
    std::vector<T> out(xv.size());
    const T inv_sqrt2 = T(1) / std::sqrt(T(2));
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = T(0.5) * xv[i] * (T(1) + std::erf(xv[i] * inv_sqrt2));
    }
    return record<T>(x.shape(), std::move(out), {x.node()}, [inv_sqrt2](NodeT<T>& self) {
        auto& p = *self.parents[0];
        auto& g = p.grad_buffer();
        const T inv_sqrt_2pi = T(1) / std::sqrt(T(2) * std::numbers::pi_v<T>);
        for (std::size_t i = 0; i < g.size(); ++i) {
            const T v = p.values[i];
            const T cdf = T(0.5) * (T(1) + std::erf(v * inv_sqrt2));
            const T pdf = inv_sqrt_2pi * std::exp(T(-0.5) * v * v);
            g[i] += self.grad[i] * (cdf + v * pdf);
        }
    });
}

template <typename T>
BasicTensor<T> layernorm(const BasicTensor<T>& x, const BasicTensor<T>& gamma, const BasicTensor<T>& beta) {
    if (x.rank() == 0) {
        throw DimensionError("layernorm: scalar input");
    }
    const std::size_t d = x.shape().back();
    if (d == 0 || gamma.numel() != d || beta.numel() != d) {
        dim_error("layernorm", x.shape(), gamma.shape());
    }
    const std::size_t rows = x.numel() / d;
    auto xv = x.values();
    auto gv = gamma.values();
    auto bv = beta.values();
    std::vector<T> normed(xv.size());
    std::vector<T> inv_std(rows);
    std::vector<T> out(xv.size());
    for (std::size_t r = 0; r < rows; ++r) {
        const T* row = xv.data() + r * d;
        T mean = 0;
        for (std::size_t j = 0; j < d; ++j) {
            mean += row[j];
        }
        mean /= T(d);
        T var = 0;
        for (std::size_t j = 0; j < d; ++j) {
            const T c = row[j] - mean;
            var += c * c;
        }
        var /= T(d);
        const T inv = T(1) / std::sqrt(var + T(kLayerNormEps));
        inv_std[r] = inv;
        for (std::size_t j = 0; j < d; ++j) {
            const T nv = (row[j] - mean) * inv;
            normed[r * d + j] = nv;
            out[r * d + j] = gv[j] * nv + bv[j];
        }
    }
    return record<T>(
        x.shape(), std::move(out), {x.node(), gamma.node(), beta.node()},
        [rows, d, normed = std::move(normed), inv_std = std::move(inv_std)](NodeT<T>& self) {
            auto& px = *self.parents[0];
            auto& pg = *self.parents[1];
            auto& pb = *self.parents[2];
            if (pg.requires_grad) {
                auto& g = pg.grad_buffer();
                for (std::size_t r = 0; r < rows; ++r) {
                    for (std::size_t j = 0; j < d; ++j) {
                        g[j] += self.grad[r * d + j] * normed[r * d + j];
                    }
                }
            }
            if (pb.requires_grad) {
                auto& g = pb.grad_buffer();
                for (std::size_t r = 0; r < rows; ++r) {
                    for (std::size_t j = 0; j < d; ++j) {
                        g[j] += self.grad[r * d + j];
                    }
                }
            }
            if (px.requires_grad) {
                auto& g = px.grad_buffer();
                std::vector<T> dn(d);
                for (std::size_t r = 0; r < rows; ++r) {
                    T mean_dn = 0;
                    T mean_dn_n = 0;
                    for (std::size_t j = 0; j < d; ++j) {
                        dn[j] = self.grad[r * d + j] * pg.values[j];
                        mean_dn += dn[j];
                        mean_dn_n += dn[j] * normed[r * d + j];
                    }
                    mean_dn /= T(d);
                    mean_dn_n /= T(d);
                    for (std::size_t j = 0; j < d; ++j) {
                        g[r * d + j] += inv_std[r] * (dn[j] - mean_dn - normed[r * d + j] * mean_dn_n);
                    }
                }
            }
        });
}

template <typename T>
BasicTensor<T> softmax(const BasicTensor<T>& x, std::size_t axis) {
    if (axis >= x.rank()) {
        throw IndexError("softmax: axis " + std::to_string(axis) + " out of range for " + shape_str(x.shape()));
    }
    const auto& s = x.shape();
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) {
        outer *= s[i];
    }
    for (std::size_t i = axis + 1; i < s.size(); ++i) {
        inner *= s[i];
    }
    const std::size_t len = s[axis];
    auto xv = x.values();
    std::vector<T> out(xv.size());
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t in = 0; in < inner; ++in) {
            const std::size_t base = o * len * inner + in;
            T mx = -std::numeric_limits<T>::infinity();
            for (std::size_t a = 0; a < len; ++a) {
                mx = std::max(mx, xv[base + a * inner]);
            }
            T total = 0;
            for (std::size_t a = 0; a < len; ++a) {
                const T e = std::exp(xv[base + a * inner] - mx);
                out[base + a * inner] = e;
                total += e;
            }
            for (std::size_t a = 0; a < len; ++a) {
                out[base + a * inner] /= total;
            }
        }
    }
    return record<T>(x.shape(), std::move(out), {x.node()}, [outer, inner, len](NodeT<T>& self) {
        auto& g = self.parents[0]->grad_buffer();
        const auto& y = self.values;
        for (std::size_t o = 0; o < outer; ++o) {
            for (std::size_t in = 0; in < inner; ++in) {
                const std::size_t base = o * len * inner + in;
                T dot = 0;
                for (std::size_t a = 0; a < len; ++a) {
                    dot += self.grad[base + a * inner] * y[base + a * inner];
                }
                for (std::size_t a = 0; a < len; ++a) {
                    const std::size_t i = base + a * inner;
                    g[i] += y[i] * (self.grad[i] - dot);
                }
            }
        }
    });
}

template <typename T>
BasicTensor<T> gather(const BasicTensor<T>& x, Shape out_shape, std::vector<std::size_t> index) {
    return gather_impl(x, std::move(out_shape), std::move(index));
}

template <typename T>
BasicTensor<T> reshape(const BasicTensor<T>& x, Shape shape) {
    if (shape_numel(shape) != x.numel()) {
        dim_error("reshape", x.shape(), shape);
    }
    std::vector<T> out(x.values().begin(), x.values().end());
    return record<T>(std::move(shape), std::move(out), {x.node()}, [](NodeT<T>& self) {
        auto& g = self.parents[0]->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) {
            g[i] += self.grad[i];
        }
    });
}

template <typename T>
BasicTensor<T> split_heads(const BasicTensor<T>& x, std::size_t batch, std::size_t seq, std::size_t heads) {
    require_rank("split_heads", x.shape(), 2);
    const std::size_t d = x.dim(1);
    if (x.dim(0) != batch * seq || heads == 0 || d % heads != 0) {
        throw DimensionError("split_heads: cannot split " + shape_str(x.shape()) + " into " +
                             std::to_string(heads) + " heads");
    }
    const std::size_t hd = d / heads;
    std::vector<std::size_t> index;
    index.reserve(x.numel());
    for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t h = 0; h < heads; ++h) {
            for (std::size_t s = 0; s < seq; ++s) {
                for (std::size_t e = 0; e < hd; ++e) {
                    index.push_back((b * seq + s) * d + h * hd + e);
                }
            }
        }
    }
    return gather_impl(x, Shape{batch * heads, seq, hd}, std::move(index));
}

template <typename T>
BasicTensor<T> merge_heads(const BasicTensor<T>& x, std::size_t batch, std::size_t seq, std::size_t heads) {
    require_rank("merge_heads", x.shape(), 3);
    if (x.dim(0) != batch * heads || x.dim(1) != seq) {
        throw DimensionError("merge_heads: unexpected shape " + shape_str(x.shape()));
    }
    const std::size_t hd = x.dim(2);
    const std::size_t d = hd * heads;
    std::vector<std::size_t> index;
    index.reserve(x.numel());
    for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t s = 0; s < seq; ++s) {
            for (std::size_t h = 0; h < heads; ++h) {
                for (std::size_t e = 0; e < hd; ++e) {
                    index.push_back(((b * heads + h) * seq + s) * hd + e);
                }
            }
        }
    }
    return gather_impl(x, Shape{batch * seq, d}, std::move(index));
}

template <typename T>
BasicTensor<T> mean_pool(const BasicTensor<T>& x, std::size_t seq) {
    require_rank("mean_pool", x.shape(), 2);
    const std::size_t rows = x.dim(0), d = x.dim(1);
    if (seq == 0 || rows % seq != 0) {
        throw DimensionError("mean_pool: " + std::to_string(rows) + " rows are not a multiple of seq " +
                             std::to_string(seq));
    }
    const std::size_t batch = rows / seq;
    auto xv = x.values();
    std::vector<T> out(batch * d, T(0));
    const T inv = T(1) / T(seq);
    for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t s = 0; s < seq; ++s) {
            for (std::size_t j = 0; j < d; ++j) {
                out[b * d + j] += xv[(b * seq + s) * d + j];
            }
        }
        for (std::size_t j = 0; j < d; ++j) {
            out[b * d + j] *= inv;
        }
    }
    return record<T>({batch, d}, std::move(out), {x.node()}, [batch, seq, d, inv](NodeT<T>& self) {
        auto& g = self.parents[0]->grad_buffer();
        for (std::size_t b = 0; b < batch; ++b) {
            for (std::size_t s = 0; s < seq; ++s) {
                for (std::size_t j = 0; j < d; ++j) {
                    g[(b * seq + s) * d + j] += self.grad[b * d + j] * inv;
                }
            }
        }
    });
}

template <typename T>
BasicTensor<T> stack_rows(std::span<const BasicTensor<T>> rows) {
    if (rows.empty()) {
        throw DimensionError("stack_rows: no rows");
    }
    const std::size_t n = rows[0].numel();
    std::vector<T> out;
    out.reserve(rows.size() * n);
    std::vector<NodePtr<T>> parents;
    parents.reserve(rows.size());
    for (const auto& r : rows) {
        if (r.numel() != n) {
            dim_error("stack_rows", rows[0].shape(), r.shape());
        }
        out.insert(out.end(), r.values().begin(), r.values().end());
        parents.push_back(r.node());
    }
    return record<T>({rows.size(), n}, std::move(out), std::move(parents), [n](NodeT<T>& self) {
        for (std::size_t r = 0; r < self.parents.size(); ++r) {
            auto& p = *self.parents[r];
            if (p.requires_grad) {
                auto& g = p.grad_buffer();
                for (std::size_t j = 0; j < n; ++j) {
                    g[j] += self.grad[r * n + j];
                }
            }
        }
    });
}

template <typename T>
BasicTensor<T> select_columns(const BasicTensor<T>& x, std::span<const std::size_t> cols) {
    require_rank("select_columns", x.shape(), 2);
    const std::size_t rows = x.dim(0), c = x.dim(1);
    std::vector<std::size_t> index;
    index.reserve(rows * cols.size());
    for (std::size_t r = 0; r < rows; ++r) {
        for (auto col : cols) {
            if (col >= c) {
                throw IndexError("select_columns: column " + std::to_string(col) + " out of range for " +
                                 shape_str(x.shape()));
            }
            index.push_back(r * c + col);
        }
    }
    return gather_impl(x, Shape{rows, cols.size()}, std::move(index));
}

template <typename T>
BasicTensor<T> sum(const BasicTensor<T>& x) {
    T total = 0;
    for (auto v : x.values()) {
        total += v;
    }
    return record<T>({}, {total}, {x.node()}, [](NodeT<T>& self) {
        auto& g = self.parents[0]->grad_buffer();
        for (auto& v : g) {
            v += self.grad[0];
        }
    });
}

template <typename T>
BasicTensor<T> softmax_cross_entropy(const BasicTensor<T>& logits, std::span<const std::int32_t> labels) {
    require_rank("softmax_cross_entropy", logits.shape(), 2);
    const std::size_t batch = logits.dim(0), classes = logits.dim(1);
    if (batch == 0) {
        throw ContractError("softmax_cross_entropy: empty batch");
    }
    if (labels.size() != batch) {
        throw DimensionError("softmax_cross_entropy: " + std::to_string(labels.size()) + " labels for logits " +
                             shape_str(logits.shape()));
    }
    auto zv = logits.values();
    std::vector<T> probs(zv.size());
    std::vector<std::int32_t> lab(labels.begin(), labels.end());
    T loss = 0;
    for (std::size_t b = 0; b < batch; ++b) {
        if (lab[b] < 0 || static_cast<std::size_t>(lab[b]) >= classes) {
            throw IndexError("softmax_cross_entropy: label " + std::to_string(lab[b]) + " outside [0, " +
                             std::to_string(classes) + ")");
        }
        const T* row = zv.data() + b * classes;
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t c = 0; c < classes; ++c) {
            mx = std::max(mx, row[c]);
        }
        T total = 0;
        for (std::size_t c = 0; c < classes; ++c) {
            const T e = std::exp(row[c] - mx);
            probs[b * classes + c] = e;
            total += e;
        }
        for (std::size_t c = 0; c < classes; ++c) {
            probs[b * classes + c] /= total;
        }
        loss += std::log(total) + mx - row[lab[b]];
    }
    loss /= T(batch);
    return record<T>({}, {loss}, {logits.node()},
                     [batch, classes, probs = std::move(probs), lab = std::move(lab)](NodeT<T>& self) {
                         auto& g = self.parents[0]->grad_buffer();
                         const T s = self.grad[0] / T(batch);
                         for (std::size_t b = 0; b < batch; ++b) {
                             for (std::size_t c = 0; c < classes; ++c) {
                                 T p = probs[b * classes + c];
                                 if (static_cast<std::int32_t>(c) == lab[b]) {
                                     p -= T(1);
                                 }
                                 g[b * classes + c] += s * p;
                             }
                         }
                     });
}

template <typename T>
BasicTensor<T> mse(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    if (a.shape() != b.shape()) {
        dim_error("mse", a.shape(), b.shape());
    }
    if (a.numel() == 0) {
        throw ContractError("mse: empty input");
    }
    auto av = a.values();
    auto bv = b.values();
    T total = 0;
    for (std::size_t i = 0; i < av.size(); ++i) {
        const T diff = av[i] - bv[i];
        total += diff * diff;
    }
    const std::size_t n = av.size();
    return record<T>({}, {total / T(n)}, {a.node(), b.node()}, [n](NodeT<T>& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        const T s = T(2) * self.grad[0] / T(n);
        if (pa.requires_grad) {
            auto& g = pa.grad_buffer();
            for (std::size_t i = 0; i < n; ++i) {
                g[i] += s * (pa.values[i] - pb.values[i]);
            }
        }
        if (pb.requires_grad) {
            auto& g = pb.grad_buffer();
            for (std::size_t i = 0; i < n; ++i) {
                g[i] -= s * (pa.values[i] - pb.values[i]);
            }
        }
    });
}

#define CLU_INSTANTIATE_OPS(T)                                                                              \
    template BasicTensor<T> matmul(const BasicTensor<T>&, const BasicTensor<T>&);                           \
    template BasicTensor<T> linear(const BasicTensor<T>&, const BasicTensor<T>&);                           \
    template BasicTensor<T> linear(const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>&);    \
    template BasicTensor<T> bmm(const BasicTensor<T>&, const BasicTensor<T>&, bool);                        \
    template BasicTensor<T> add(const BasicTensor<T>&, const BasicTensor<T>&);                              \
    template BasicTensor<T> mul(const BasicTensor<T>&, const BasicTensor<T>&);                              \
    template BasicTensor<T> scale(const BasicTensor<T>&, T);                                                \
    template BasicTensor<T> add_tiled(const BasicTensor<T>&, const BasicTensor<T>&);                        \
    template BasicTensor<T> gelu(const BasicTensor<T>&);                                                    \
    template BasicTensor<T> layernorm(const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>&); \
    template BasicTensor<T> softmax(const BasicTensor<T>&, std::size_t);                                    \
    template BasicTensor<T> gather(const BasicTensor<T>&, Shape, std::vector<std::size_t>);                 \
    template BasicTensor<T> reshape(const BasicTensor<T>&, Shape);                                          \
    template BasicTensor<T> split_heads(const BasicTensor<T>&, std::size_t, std::size_t, std::size_t);      \
    template BasicTensor<T> merge_heads(const BasicTensor<T>&, std::size_t, std::size_t, std::size_t);      \
    template BasicTensor<T> mean_pool(const BasicTensor<T>&, std::size_t);                                  \
    template BasicTensor<T> stack_rows(std::span<const BasicTensor<T>>);                                    \
    template BasicTensor<T> select_columns(const BasicTensor<T>&, std::span<const std::size_t>);            \
    template BasicTensor<T> sum(const BasicTensor<T>&);                                                     \
    template BasicTensor<T> softmax_cross_entropy(const BasicTensor<T>&, std::span<const std::int32_t>);    \
    template BasicTensor<T> mse(const BasicTensor<T>&, const BasicTensor<T>&);

CLU_INSTANTIATE_OPS(double)
CLU_INSTANTIATE_OPS(float)

#undef CLU_INSTANTIATE_OPS

}  // namespace clu
