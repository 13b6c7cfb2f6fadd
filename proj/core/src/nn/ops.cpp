#include "vcdm/nn/ops.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "vcdm/errors.hpp"

namespace vcdm::nn {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

int last_dim(const Shape& s) { return s.empty() ? 1 : s.back(); }

std::size_t leading_rows(const Shape& s) {
    const int cols = last_dim(s);
    return cols == 0 ? 0 : numel(s) / static_cast<std::size_t>(cols);
}

void require_same_shape(const Var& a, const Var& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw InvalidArgument(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                              shape_string(b.shape()));
    }
}

Node& parent(Node& self, std::size_t i) { return *self.parents[i]; }

// Accumulates scale * g into the parent's grad if it wants one.
void accumulate(Node& p, std::span<const double> g, double scale = 1.0) {
    if (!p.requires_grad) return;
    auto dst = p.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) dst[i] += scale * g[i];
}

std::size_t prod(const Shape& s, std::size_t begin, std::size_t end) {
    std::size_t n = 1;
    for (std::size_t i = begin; i < end; ++i) n *= static_cast<std::size_t>(s[i]);
    return n;
}

int normalize_axis(int axis, int rank) {
    if (axis < 0) axis += rank;
    if (axis < 0 || axis >= rank) throw InvalidArgument("axis out of range");
    return axis;
}

}  // namespace

Var add(const Var& a, const Var& b) {
    require_same_shape(a, b, "add");
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] + b.value()[i];
    return make_result(a.shape(), std::move(out), {a, b}, [](Node& self) {
        accumulate(parent(self, 0), self.grad);
        accumulate(parent(self, 1), self.grad);
    });
}

Var sub(const Var& a, const Var& b) {
    require_same_shape(a, b, "sub");
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] - b.value()[i];
    return make_result(a.shape(), std::move(out), {a, b}, [](Node& self) {
        accumulate(parent(self, 0), self.grad);
        accumulate(parent(self, 1), self.grad, -1.0);
    });
}

Var mul(const Var& a, const Var& b) {
    require_same_shape(a, b, "mul");
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * b.value()[i];
    return make_result(a.shape(), std::move(out), {a, b}, [](Node& self) {
        Node& pa = parent(self, 0);
        Node& pb = parent(self, 1);
        if (pa.requires_grad) {
            auto g = pa.grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pb.value[i];
        }
        if (pb.requires_grad) {
            auto g = pb.grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pa.value[i];
        }
    });
}

Var scale(const Var& a, double s) {
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = s * a.value()[i];
    return make_result(a.shape(), std::move(out), {a}, [s](Node& self) { accumulate(parent(self, 0), self.grad, s); });
}

Var add_bias(const Var& a, const Var& b) {
    const int cols = last_dim(a.shape());
    if (b.numel() != static_cast<std::size_t>(cols)) throw InvalidArgument("add_bias: bias size mismatch");
    std::vector<double> out(a.value().begin(), a.value().end());
    const std::size_t rows = leading_rows(a.shape());
    for (std::size_t r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) out[r * cols + c] += b.value()[c];
    return make_result(a.shape(), std::move(out), {a, b}, [rows, cols](Node& self) {
        accumulate(parent(self, 0), self.grad);
        Node& pb = parent(self, 1);
        if (pb.requires_grad) {
            auto g = pb.grad_buffer();
            for (std::size_t r = 0; r < rows; ++r)
                for (int c = 0; c < cols; ++c) g[c] += self.grad[r * cols + c];
        }
    });
}

Var scale_rows(const Var& a, std::span<const double> s) {
    if (a.rank() == 0 || static_cast<std::size_t>(a.dim(0)) != s.size()) {
        throw InvalidArgument("scale_rows: expected " + std::to_string(s.size()) + " leading rows, got shape " +
                              shape_string(a.shape()));
    }
    const std::size_t inner = s.empty() ? 0 : a.numel() / s.size();
    std::vector<double> factors(s.begin(), s.end());
    std::vector<double> out(a.numel());
    for (std::size_t r = 0; r < factors.size(); ++r)
        for (std::size_t j = 0; j < inner; ++j) out[r * inner + j] = factors[r] * a.value()[r * inner + j];
    return make_result(a.shape(), std::move(out), {a}, [factors = std::move(factors), inner](Node& self) {
        Node& pa = parent(self, 0);
        auto g = pa.grad_buffer();
        for (std::size_t r = 0; r < factors.size(); ++r)
            for (std::size_t j = 0; j < inner; ++j) g[r * inner + j] += factors[r] * self.grad[r * inner + j];
    });
}

Var add_channel(const Var& a, const Var& b) {
    if (a.rank() < 2 || b.rank() != 2 || a.dim(0) != b.dim(0) || a.dim(1) != b.dim(1)) {
        throw InvalidArgument("add_channel: incompatible shapes " + shape_string(a.shape()) + " and " +
                              shape_string(b.shape()));
    }
    const std::size_t planes = static_cast<std::size_t>(a.dim(0)) * a.dim(1);
    const std::size_t inner = a.numel() / planes;
    std::vector<double> out(a.value().begin(), a.value().end());
    for (std::size_t p = 0; p < planes; ++p)
        for (std::size_t j = 0; j < inner; ++j) out[p * inner + j] += b.value()[p];
    return make_result(a.shape(), std::move(out), {a, b}, [planes, inner](Node& self) {
        accumulate(parent(self, 0), self.grad);
        Node& pb = parent(self, 1);
        if (pb.requires_grad) {
            auto g = pb.grad_buffer();
            for (std::size_t p = 0; p < planes; ++p) {
                double acc = 0.0;
                for (std::size_t j = 0; j < inner; ++j) acc += self.grad[p * inner + j];
                g[p] += acc;
            }
        }
    });
}

Var matmul(const Var& a, const Var& b) {
    if (b.rank() != 2) throw InvalidArgument("matmul: right operand must be 2-D");
    const int k = last_dim(a.shape());
    if (k != b.dim(0)) {
        throw InvalidArgument("matmul: inner dimensions differ " + shape_string(a.shape()) + " x " +
                              shape_string(b.shape()));
    }
    const auto m = static_cast<Eigen::Index>(leading_rows(a.shape()));
    const int n = b.dim(1);
    Shape out_shape = a.shape();
    out_shape.back() = n;
    std::vector<double> out(static_cast<std::size_t>(m) * n);
    MatMap(out.data(), m, n).noalias() = ConstMatMap(a.value().data(), m, k) * ConstMatMap(b.value().data(), k, n);
    return make_result(std::move(out_shape), std::move(out), {a, b}, [m, k, n](Node& self) {
        Node& pa = parent(self, 0);
        Node& pb = parent(self, 1);
        ConstMatMap dy(self.grad.data(), m, n);
        if (pa.requires_grad) {
            MatMap(pa.grad_buffer().data(), m, k).noalias() += dy * ConstMatMap(pb.value.data(), k, n).transpose();
        }
        if (pb.requires_grad) {
            MatMap(pb.grad_buffer().data(), k, n).noalias() += ConstMatMap(pa.value.data(), m, k).transpose() * dy;
        }
    });
}

Var linear(const Var& x, const Var& weight, const Var& bias) {
    Var y = matmul(x, weight);
    return bias.defined() ? add_bias(y, bias) : y;
}

Var silu(const Var& a) {
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double x = a.value()[i];
        out[i] = x / (1.0 + std::exp(-x));
    }
    return make_result(a.shape(), std::move(out), {a}, [](Node& self) {
        Node& pa = parent(self, 0);
        auto g = pa.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) {
            const double x = pa.value[i];
            const double s = 1.0 / (1.0 + std::exp(-x));
            g[i] += self.grad[i] * (s + x * s * (1.0 - s));
        }
    });
}

Var gelu(const Var& a) {
    constexpr double inv_sqrt2 = 0.70710678118654752440;
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double x = a.value()[i];
        out[i] = 0.5 * x * (1.0 + std::erf(x * inv_sqrt2));
    }
    return make_result(a.shape(), std::move(out), {a}, [](Node& self) {
        Node& pa = parent(self, 0);
        auto g = pa.grad_buffer();
        const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
        for (std::size_t i = 0; i < g.size(); ++i) {
            const double x = pa.value[i];
            const double cdf = 0.5 * (1.0 + std::erf(x * inv_sqrt2));
            const double pdf = inv_sqrt_2pi * std::exp(-0.5 * x * x);
            g[i] += self.grad[i] * (cdf + x * pdf);
        }
    });
}

namespace {

// Shared normalisation backward: for each group of `count` elements with
// normalised values xhat, rstd r and upstream gradient dxhat.
void normalize_backward(std::span<const double> xhat, std::span<const double> dxhat, double rstd,
                        std::span<double> dx) {
    const double n = static_cast<double>(xhat.size());
    double mean_d = 0.0, mean_dx = 0.0;
    for (std::size_t i = 0; i < xhat.size(); ++i) {
        mean_d += dxhat[i];
        mean_dx += dxhat[i] * xhat[i];
    }
    mean_d /= n;
    mean_dx /= n;
    for (std::size_t i = 0; i < xhat.size(); ++i) dx[i] += rstd * (dxhat[i] - mean_d - xhat[i] * mean_dx);
}

}  // namespace

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
    const int cols = last_dim(x.shape());
    if (gamma.numel() != static_cast<std::size_t>(cols) || beta.numel() != static_cast<std::size_t>(cols)) {
        throw InvalidArgument("layer_norm: affine parameter size mismatch");
    }
    const std::size_t rows = leading_rows(x.shape());
    std::vector<double> xhat(x.numel());
    std::vector<double> rstd(rows);
    std::vector<double> out(x.numel());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* row = x.value().data() + r * cols;
        double mu = 0.0;
        for (int c = 0; c < cols; ++c) mu += row[c];
        mu /= cols;
        double var = 0.0;
        for (int c = 0; c < cols; ++c) var += (row[c] - mu) * (row[c] - mu);
        var /= cols;
        rstd[r] = 1.0 / std::sqrt(var + eps);
        for (int c = 0; c < cols; ++c) {
            xhat[r * cols + c] = (row[c] - mu) * rstd[r];
            out[r * cols + c] = xhat[r * cols + c] * gamma.value()[c] + beta.value()[c];
        }
    }
    return make_result(x.shape(), std::move(out), {x, gamma, beta},
                       [rows, cols, xhat = std::move(xhat), rstd = std::move(rstd)](Node& self) {
                           Node& px = parent(self, 0);
                           Node& pg = parent(self, 1);
                           Node& pb = parent(self, 2);
                           std::vector<double> dxhat(cols);
                           for (std::size_t r = 0; r < rows; ++r) {
                               const std::size_t off = r * cols;
                               for (int c = 0; c < cols; ++c) dxhat[c] = self.grad[off + c] * pg.value[c];
                               if (px.requires_grad) {
                                   normalize_backward({xhat.data() + off, static_cast<std::size_t>(cols)}, dxhat,
                                                      rstd[r], px.grad_buffer().subspan(off, cols));
                               }
                               if (pg.requires_grad) {
                                   auto g = pg.grad_buffer();
                                   for (int c = 0; c < cols; ++c) g[c] += self.grad[off + c] * xhat[off + c];
                               }
                               if (pb.requires_grad) {
                                   auto g = pb.grad_buffer();
                                   for (int c = 0; c < cols; ++c) g[c] += self.grad[off + c];
                               }
                           }
                       });
}

Var group_norm(const Var& x, int groups, const Var& gamma, const Var& beta, double eps) {
    if (x.rank() != 4) throw InvalidArgument("group_norm expects (N, C, H, W)");
    const int n = x.dim(0), c = x.dim(1);
    const std::size_t hw = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
    if (groups <= 0 || c % groups != 0) throw InvalidArgument("group_norm: channels not divisible by groups");
    if (gamma.numel() != static_cast<std::size_t>(c) || beta.numel() != static_cast<std::size_t>(c)) {
        throw InvalidArgument("group_norm: affine parameter size mismatch");
    }
    const int cpg = c / groups;
    const std::size_t group_size = static_cast<std::size_t>(cpg) * hw;
    std::vector<double> xhat(x.numel());
    std::vector<double> rstd(static_cast<std::size_t>(n) * groups);
    std::vector<double> out(x.numel());
    for (int s = 0; s < n; ++s) {
        for (int g = 0; g < groups; ++g) {
            const std::size_t off = (static_cast<std::size_t>(s) * c + static_cast<std::size_t>(g) * cpg) * hw;
            const double* src = x.value().data() + off;
            double mu = 0.0;
            for (std::size_t i = 0; i < group_size; ++i) mu += src[i];
            mu /= static_cast<double>(group_size);
            double var = 0.0;
            for (std::size_t i = 0; i < group_size; ++i) var += (src[i] - mu) * (src[i] - mu);
            var /= static_cast<double>(group_size);
            const double r = 1.0 / std::sqrt(var + eps);
            rstd[static_cast<std::size_t>(s) * groups + g] = r;
            for (std::size_t i = 0; i < group_size; ++i) {
                const int ch = g * cpg + static_cast<int>(i / hw);
                xhat[off + i] = (src[i] - mu) * r;
                out[off + i] = xhat[off + i] * gamma.value()[ch] + beta.value()[ch];
            }
        }
    }
    return make_result(
        x.shape(), std::move(out), {x, gamma, beta},
        [n, c, groups, cpg, hw, group_size, xhat = std::move(xhat), rstd = std::move(rstd)](Node& self) {
            Node& px = parent(self, 0);
            Node& pg = parent(self, 1);
            Node& pb = parent(self, 2);
            std::vector<double> dxhat(group_size);
            for (int s = 0; s < n; ++s) {
                for (int g = 0; g < groups; ++g) {
                    const std::size_t off =
                        (static_cast<std::size_t>(s) * c + static_cast<std::size_t>(g) * cpg) * hw;
                    for (std::size_t i = 0; i < group_size; ++i) {
                        const int ch = g * cpg + static_cast<int>(i / hw);
                        dxhat[i] = self.grad[off + i] * pg.value[ch];
                        if (pg.requires_grad) pg.grad_buffer()[ch] += self.grad[off + i] * xhat[off + i];
                        if (pb.requires_grad) pb.grad_buffer()[ch] += self.grad[off + i];
                    }
                    if (px.requires_grad) {
                        normalize_backward({xhat.data() + off, group_size}, dxhat,
                                           rstd[static_cast<std::size_t>(s) * groups + g],
                                           px.grad_buffer().subspan(off, group_size));
                    }
                }
            }
        });
}

Var attention(const Var& q, const Var& k, const Var& v, int heads, std::span<const bool> key_mask) {
    require_same_shape(q, k, "attention");
    require_same_shape(q, v, "attention");
    if (q.rank() != 3) throw InvalidArgument("attention expects (B, T, D) inputs");
    const int b_count = q.dim(0), t_count = q.dim(1), d = q.dim(2);
    if (heads <= 0 || d % heads != 0) throw InvalidArgument("attention: width not divisible by head count");
    if (!key_mask.empty() && key_mask.size() != static_cast<std::size_t>(b_count) * t_count) {
        throw InvalidArgument("attention: mask size mismatch");
    }
    const int dh = d / heads;
    const double inv_scale = 1.0 / std::sqrt(static_cast<double>(dh));
    std::vector<bool> mask(key_mask.begin(), key_mask.end());
    std::vector<double> probs(static_cast<std::size_t>(b_count) * heads * t_count * t_count, 0.0);
    std::vector<double> out(q.numel(), 0.0);
    const double* qv = q.value().data();
    const double* kv = k.value().data();
    const double* vv = v.value().data();
    auto at = [d, t_count](int b, int t, int h, int dhh, int j) {
        return (static_cast<std::size_t>(b) * t_count + t) * d + static_cast<std::size_t>(h) * dhh + j;
    };
    for (int b = 0; b < b_count; ++b) {
        for (int h = 0; h < heads; ++h) {
            double* p = probs.data() + (static_cast<std::size_t>(b) * heads + h) * t_count * t_count;
            for (int i = 0; i < t_count; ++i) {
                double mx = -std::numeric_limits<double>::infinity();
                for (int j = 0; j < t_count; ++j) {
                    if (!mask.empty() && !mask[static_cast<std::size_t>(b) * t_count + j]) continue;
                    double s = 0.0;
                    for (int e = 0; e < dh; ++e) s += qv[at(b, i, h, dh, e)] * kv[at(b, j, h, dh, e)];
                    s *= inv_scale;
                    p[i * t_count + j] = s;
                    mx = std::max(mx, s);
                }
                double z = 0.0;
                for (int j = 0; j < t_count; ++j) {
                    if (!mask.empty() && !mask[static_cast<std::size_t>(b) * t_count + j]) continue;
                    p[i * t_count + j] = std::exp(p[i * t_count + j] - mx);
                    z += p[i * t_count + j];
                }
                for (int j = 0; j < t_count; ++j) {
                    if (!mask.empty() && !mask[static_cast<std::size_t>(b) * t_count + j]) continue;
                    p[i * t_count + j] /= z;
                    const double w = p[i * t_count + j];
                    for (int e = 0; e < dh; ++e) out[at(b, i, h, dh, e)] += w * vv[at(b, j, h, dh, e)];
                }
            }
        }
    }
    return make_result(q.shape(), std::move(out), {q, k, v},
                       [b_count, t_count, d, heads, dh, inv_scale, probs = std::move(probs), at](Node& self) {
                           Node& pq = parent(self, 0);
                           Node& pk = parent(self, 1);
                           Node& pv = parent(self, 2);
                           auto dq = pq.requires_grad ? pq.grad_buffer() : std::span<double>{};
                           auto dk = pk.requires_grad ? pk.grad_buffer() : std::span<double>{};
                           auto dv = pv.requires_grad ? pv.grad_buffer() : std::span<double>{};
                           std::vector<double> dp(static_cast<std::size_t>(t_count) * t_count);
                           for (int b = 0; b < b_count; ++b) {
                               for (int h = 0; h < heads; ++h) {
                                   const double* p =
                                       probs.data() + (static_cast<std::size_t>(b) * heads + h) * t_count * t_count;
                                   for (int i = 0; i < t_count; ++i) {
                                       for (int j = 0; j < t_count; ++j) {
                                           double s = 0.0;
                                           for (int e = 0; e < dh; ++e)
                                               s += self.grad[at(b, i, h, dh, e)] * pv.value[at(b, j, h, dh, e)];
                                           dp[i * t_count + j] = s;
                                           if (!dv.empty()) {
                                               const double w = p[i * t_count + j];
                                               for (int e = 0; e < dh; ++e)
                                                   dv[at(b, j, h, dh, e)] += w * self.grad[at(b, i, h, dh, e)];
                                           }
                                       }
                                       double row = 0.0;
                                       for (int j = 0; j < t_count; ++j) row += dp[i * t_count + j] * p[i * t_count + j];
                                       for (int j = 0; j < t_count; ++j) {
                                           const double ds = p[i * t_count + j] * (dp[i * t_count + j] - row) * inv_scale;
                                           if (ds == 0.0) continue;
                                           for (int e = 0; e < dh; ++e) {
                                               if (!dq.empty()) dq[at(b, i, h, dh, e)] += ds * pk.value[at(b, j, h, dh, e)];
                                               if (!dk.empty()) dk[at(b, j, h, dh, e)] += ds * pq.value[at(b, i, h, dh, e)];
                                           }
                                       }
                                   }
                               }
                           }
                           (void)d;
                       });
}

Var concat(const std::vector<Var>& parts, int axis) {
    if (parts.empty()) throw InvalidArgument("concat: no inputs");
    const int rank = parts.front().rank();
    axis = normalize_axis(axis, rank);
    Shape out_shape = parts.front().shape();
    out_shape[axis] = 0;
    std::vector<std::size_t> chunk(parts.size());
    for (std::size_t p = 0; p < parts.size(); ++p) {
        const Shape& s = parts[p].shape();
        if (static_cast<int>(s.size()) != rank) throw InvalidArgument("concat: rank mismatch");
        for (int i = 0; i < rank; ++i) {
            if (i != axis && s[i] != parts.front().shape()[i]) {
                throw InvalidArgument("concat: shape mismatch " + shape_string(s) + " vs " +
                                      shape_string(parts.front().shape()));
            }
        }
        out_shape[axis] += s[axis];
        chunk[p] = prod(s, axis, s.size());
    }
    const std::size_t outer = prod(out_shape, 0, axis);
    const std::size_t out_chunk = prod(out_shape, axis, out_shape.size());
    std::vector<double> out(outer * out_chunk);
    std::size_t offset = 0;
    for (std::size_t p = 0; p < parts.size(); ++p) {
        for (std::size_t o = 0; o < outer; ++o) {
            std::copy_n(parts[p].value().data() + o * chunk[p], chunk[p], out.data() + o * out_chunk + offset);
        }
        offset += chunk[p];
    }
    return make_result(std::move(out_shape), std::move(out), parts, [chunk, outer, out_chunk](Node& self) {
        std::size_t off = 0;
        for (std::size_t p = 0; p < chunk.size(); ++p) {
            Node& pp = parent(self, p);
            if (pp.requires_grad) {
                auto g = pp.grad_buffer();
                for (std::size_t o = 0; o < outer; ++o)
                    for (std::size_t i = 0; i < chunk[p]; ++i) g[o * chunk[p] + i] += self.grad[o * out_chunk + off + i];
            }
            off += chunk[p];
        }
    });
}

Var slice(const Var& x, int axis, int start, int length) {
    axis = normalize_axis(axis, x.rank());
    const Shape& s = x.shape();
    if (start < 0 || length < 0 || start + length > s[axis]) throw InvalidArgument("slice: range out of bounds");
    Shape out_shape = s;
    out_shape[axis] = length;
    const std::size_t outer = prod(s, 0, axis);
    const std::size_t inner = prod(s, axis + 1, s.size());
    const std::size_t in_chunk = static_cast<std::size_t>(s[axis]) * inner;
    const std::size_t out_chunk = static_cast<std::size_t>(length) * inner;
    const std::size_t begin = static_cast<std::size_t>(start) * inner;
    std::vector<double> out(outer * out_chunk);
    for (std::size_t o = 0; o < outer; ++o)
        std::copy_n(x.value().data() + o * in_chunk + begin, out_chunk, out.data() + o * out_chunk);
    return make_result(std::move(out_shape), std::move(out), {x}, [outer, in_chunk, out_chunk, begin](Node& self) {
        auto g = parent(self, 0).grad_buffer();
        for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t i = 0; i < out_chunk; ++i) g[o * in_chunk + begin + i] += self.grad[o * out_chunk + i];
    });
}

Var reshape(const Var& x, Shape shape) {
    if (numel(shape) != x.numel()) {
        throw InvalidArgument("reshape: " + shape_string(x.shape()) + " -> " + shape_string(shape));
    }
    std::vector<double> out(x.value().begin(), x.value().end());
    return make_result(std::move(shape), std::move(out), {x},
                       [](Node& self) { accumulate(parent(self, 0), self.grad); });
}

namespace {

void im2col(const double* img, int channels, int h, int w, int k, int pad, double* col) {
    const std::size_t hw = static_cast<std::size_t>(h) * w;
    for (int c = 0; c < channels; ++c)
        for (int ky = 0; ky < k; ++ky)
            for (int kx = 0; kx < k; ++kx) {
                double* dst = col + ((static_cast<std::size_t>(c) * k + ky) * k + kx) * hw;
                for (int y = 0; y < h; ++y) {
                    const int sy = y + ky - pad;
                    for (int x = 0; x < w; ++x) {
                        const int sx = x + kx - pad;
                        dst[static_cast<std::size_t>(y) * w + x] =
                            (sy >= 0 && sy < h && sx >= 0 && sx < w) ? img[(static_cast<std::size_t>(c) * h + sy) * w + sx]
                                                                     : 0.0;
                    }
                }
            }
}

void col2im(const double* col, int channels, int h, int w, int k, int pad, double* img) {
    const std::size_t hw = static_cast<std::size_t>(h) * w;
    for (int c = 0; c < channels; ++c)
        for (int ky = 0; ky < k; ++ky)
            for (int kx = 0; kx < k; ++kx) {
                const double* src = col + ((static_cast<std::size_t>(c) * k + ky) * k + kx) * hw;
                for (int y = 0; y < h; ++y) {
                    const int sy = y + ky - pad;
                    if (sy < 0 || sy >= h) continue;
                    for (int x = 0; x < w; ++x) {
                        const int sx = x + kx - pad;
                        if (sx < 0 || sx >= w) continue;
                        img[(static_cast<std::size_t>(c) * h + sy) * w + sx] += src[static_cast<std::size_t>(y) * w + x];
                    }
                }
            }
}

}  // namespace

Var conv2d(const Var& x, const Var& weight, const Var& bias, int pad) {
    if (x.rank() != 4 || weight.rank() != 4) throw InvalidArgument("conv2d expects 4-D input and weight");
    const int n = x.dim(0), cin = x.dim(1), h = x.dim(2), w = x.dim(3);
    const int cout = weight.dim(0), k = weight.dim(2);
    if (weight.dim(1) != cin || weight.dim(3) != k) {
        throw InvalidArgument("conv2d: weight " + shape_string(weight.shape()) + " incompatible with input " +
                              shape_string(x.shape()));
    }
    if (2 * pad != k - 1) throw InvalidArgument("conv2d: only 'same' padding is supported");
    if (bias.defined() && bias.numel() != static_cast<std::size_t>(cout)) throw InvalidArgument("conv2d: bias size");
    const Eigen::Index hw = static_cast<Eigen::Index>(h) * w;
    const Eigen::Index ckk = static_cast<Eigen::Index>(cin) * k * k;
    std::vector<double> col(static_cast<std::size_t>(ckk * hw));
    std::vector<double> out(static_cast<std::size_t>(n) * cout * hw);
    ConstMatMap wmat(weight.value().data(), cout, ckk);
    for (int s = 0; s < n; ++s) {
        im2col(x.value().data() + static_cast<std::size_t>(s) * cin * hw, cin, h, w, k, pad, col.data());
        MatMap o(out.data() + static_cast<std::size_t>(s) * cout * hw, cout, hw);
        o.noalias() = wmat * ConstMatMap(col.data(), ckk, hw);
        if (bias.defined())
            for (int c = 0; c < cout; ++c) o.row(c).array() += bias.value()[c];
    }
    std::vector<Var> parents{x, weight};
    if (bias.defined()) parents.push_back(bias);
    return make_result({n, cout, h, w}, std::move(out), parents,
                       [n, cin, h, w, k, pad, cout, hw, ckk](Node& self) {
                           Node& px = parent(self, 0);
                           Node& pw = parent(self, 1);
                           Node* pb = self.parents.size() > 2 ? self.parents[2].get() : nullptr;
                           std::vector<double> col(static_cast<std::size_t>(ckk * hw));
                           std::vector<double> dcol(static_cast<std::size_t>(ckk * hw));
                           ConstMatMap wmat(pw.value.data(), cout, ckk);
                           for (int s = 0; s < n; ++s) {
                               ConstMatMap dy(self.grad.data() + static_cast<std::size_t>(s) * cout * hw, cout, hw);
                               if (pw.requires_grad) {
                                   im2col(px.value.data() + static_cast<std::size_t>(s) * cin * hw, cin, h, w, k, pad,
                                          col.data());
                                   MatMap(pw.grad_buffer().data(), cout, ckk).noalias() +=
                                       dy * ConstMatMap(col.data(), ckk, hw).transpose();
                               }
                               if (pb && pb->requires_grad) {
                                   auto g = pb->grad_buffer();
                                   for (int c = 0; c < cout; ++c) g[c] += dy.row(c).sum();
                               }
                               if (px.requires_grad) {
                                   MatMap(dcol.data(), ckk, hw).noalias() = wmat.transpose() * dy;
                                   col2im(dcol.data(), cin, h, w, k, pad,
                                          px.grad_buffer().data() + static_cast<std::size_t>(s) * cin * hw);
                               }
                           }
                       });
}

Var avg_pool2(const Var& x) {
    if (x.rank() != 4 || x.dim(2) % 2 != 0 || x.dim(3) % 2 != 0) {
        throw InvalidArgument("avg_pool2 expects (N, C, H, W) with even H and W");
    }
    const int planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
    const int oh = h / 2, ow = w / 2;
    std::vector<double> out(static_cast<std::size_t>(planes) * oh * ow);
    for (int p = 0; p < planes; ++p) {
        const double* src = x.value().data() + static_cast<std::size_t>(p) * h * w;
        double* dst = out.data() + static_cast<std::size_t>(p) * oh * ow;
        for (int y = 0; y < oh; ++y)
            for (int xx = 0; xx < ow; ++xx)
                dst[y * ow + xx] = 0.25 * (src[(2 * y) * w + 2 * xx] + src[(2 * y) * w + 2 * xx + 1] +
                                           src[(2 * y + 1) * w + 2 * xx] + src[(2 * y + 1) * w + 2 * xx + 1]);
    }
    return make_result({x.dim(0), x.dim(1), oh, ow}, std::move(out), {x}, [planes, h, w, oh, ow](Node& self) {
        auto g = parent(self, 0).grad_buffer();
        for (int p = 0; p < planes; ++p) {
            double* dst = g.data() + static_cast<std::size_t>(p) * h * w;
            const double* src = self.grad.data() + static_cast<std::size_t>(p) * oh * ow;
            for (int y = 0; y < oh; ++y)
                for (int xx = 0; xx < ow; ++xx) {
                    const double v = 0.25 * src[y * ow + xx];
                    dst[(2 * y) * w + 2 * xx] += v;
                    dst[(2 * y) * w + 2 * xx + 1] += v;
                    dst[(2 * y + 1) * w + 2 * xx] += v;
                    dst[(2 * y + 1) * w + 2 * xx + 1] += v;
                }
        }
    });
}

Var upsample2(const Var& x) {
    if (x.rank() != 4) throw InvalidArgument("upsample2 expects (N, C, H, W)");
    const int planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
    const int oh = h * 2, ow = w * 2;
    std::vector<double> out(static_cast<std::size_t>(planes) * oh * ow);
    for (int p = 0; p < planes; ++p) {
        const double* src = x.value().data() + static_cast<std::size_t>(p) * h * w;
        double* dst = out.data() + static_cast<std::size_t>(p) * oh * ow;
        for (int y = 0; y < oh; ++y)
            for (int xx = 0; xx < ow; ++xx) dst[y * ow + xx] = src[(y / 2) * w + xx / 2];
    }
    return make_result({x.dim(0), x.dim(1), oh, ow}, std::move(out), {x}, [planes, h, w, oh, ow](Node& self) {
        auto g = parent(self, 0).grad_buffer();
        for (int p = 0; p < planes; ++p) {
            double* dst = g.data() + static_cast<std::size_t>(p) * h * w;
            const double* src = self.grad.data() + static_cast<std::size_t>(p) * oh * ow;
            for (int y = 0; y < oh; ++y)
                for (int xx = 0; xx < ow; ++xx) dst[(y / 2) * w + xx / 2] += src[y * ow + xx];
        }
    });
}

Var to_tokens(const Var& x) {
    if (x.rank() != 4) throw InvalidArgument("to_tokens expects (N, C, H, W)");
    const int n = x.dim(0), c = x.dim(1);
    const int hw = x.dim(2) * x.dim(3);
    std::vector<double> out(x.numel());
    for (int s = 0; s < n; ++s)
        for (int ch = 0; ch < c; ++ch)
            for (int p = 0; p < hw; ++p)
                out[(static_cast<std::size_t>(s) * hw + p) * c + ch] = x.value()[(static_cast<std::size_t>(s) * c + ch) * hw + p];
    return make_result({n, hw, c}, std::move(out), {x}, [n, c, hw](Node& self) {
        auto g = parent(self, 0).grad_buffer();
        for (int s = 0; s < n; ++s)
            for (int ch = 0; ch < c; ++ch)
                for (int p = 0; p < hw; ++p)
                    g[(static_cast<std::size_t>(s) * c + ch) * hw + p] += self.grad[(static_cast<std::size_t>(s) * hw + p) * c + ch];
    });
}

Var from_tokens(const Var& x, int height, int width) {
    if (x.rank() != 3 || x.dim(1) != height * width) throw InvalidArgument("from_tokens: shape mismatch");
    const int n = x.dim(0), c = x.dim(2);
    const int hw = height * width;
    std::vector<double> out(x.numel());
    for (int s = 0; s < n; ++s)
        for (int ch = 0; ch < c; ++ch)
            for (int p = 0; p < hw; ++p)
                out[(static_cast<std::size_t>(s) * c + ch) * hw + p] = x.value()[(static_cast<std::size_t>(s) * hw + p) * c + ch];
    return make_result({n, c, height, width}, std::move(out), {x}, [n, c, hw](Node& self) {
        auto g = parent(self, 0).grad_buffer();
        for (int s = 0; s < n; ++s)
            for (int ch = 0; ch < c; ++ch)
                for (int p = 0; p < hw; ++p)
                    g[(static_cast<std::size_t>(s) * hw + p) * c + ch] += self.grad[(static_cast<std::size_t>(s) * c + ch) * hw + p];
    });
}

Var gather_rows(const Var& table, std::span<const int> ids) {
    if (table.rank() != 2) throw InvalidArgument("gather_rows expects a 2-D table");
    const int rows = table.dim(0), d = table.dim(1);
    std::vector<int> idx(ids.begin(), ids.end());
    std::vector<double> out(idx.size() * static_cast<std::size_t>(d));
    for (std::size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] < 0 || idx[i] >= rows) {
            throw InvalidArgument("gather_rows: index " + std::to_string(idx[i]) + " out of range [0, " +
                                  std::to_string(rows) + ")");
        }
        std::copy_n(table.value().data() + static_cast<std::size_t>(idx[i]) * d, d, out.data() + i * d);
    }
    const int count = static_cast<int>(idx.size());
    return make_result({count, d}, std::move(out), {table}, [idx = std::move(idx), d](Node& self) {
        auto g = parent(self, 0).grad_buffer();
        for (std::size_t i = 0; i < idx.size(); ++i)
            for (int j = 0; j < d; ++j) g[static_cast<std::size_t>(idx[i]) * d + j] += self.grad[i * d + j];
    });
}

Var sum(const Var& x) {
    double s = 0.0;
    for (double v : x.value()) s += v;
    return make_result({}, {s}, {x}, [](Node& self) {
        auto g = parent(self, 0).grad_buffer();
        for (double& v : g) v += self.grad[0];
    });
}

Var mean(const Var& x) {
    const double n = static_cast<double>(x.numel());
    return scale(sum(x), 1.0 / n);
}

Var weighted_sum_sq(const Var& x, std::span<const double> weights) {
    if (weights.empty() || x.numel() % weights.size() != 0) throw InvalidArgument("weighted_sum_sq: size mismatch");
    const std::size_t inner = x.numel() / weights.size();
    std::vector<double> w(weights.begin(), weights.end());
    double s = 0.0;
    for (std::size_t r = 0; r < w.size(); ++r) {
        double row = 0.0;
        for (std::size_t j = 0; j < inner; ++j) row += x.value()[r * inner + j] * x.value()[r * inner + j];
        s += w[r] * row;
    }
    return make_result({}, {s}, {x}, [w = std::move(w), inner](Node& self) {
        Node& px = parent(self, 0);
        auto g = px.grad_buffer();
        for (std::size_t r = 0; r < w.size(); ++r)
            for (std::size_t j = 0; j < inner; ++j) g[r * inner + j] += self.grad[0] * 2.0 * w[r] * px.value[r * inner + j];
    });
}

}  // namespace vcdm::nn
