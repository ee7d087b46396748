#include "samseg/autograd.hpp"

#include "samseg/grid.hpp"

#include <cmath>
#include <numbers>
#include <unordered_set>

namespace samseg::ag {

namespace {

thread_local bool g_grad_enabled = true;

void require_rank(const Var& x, std::size_t rank, const char* op) {
    if (x.rank() != rank)
        throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                             shape_string(x.shape()));
}

void require_same(const Var& a, const Var& b, const char* op) {
    if (a.shape() != b.shape())
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                             shape_string(b.shape()));
}

MatMap as_matrix(Vector& v, Index rows, Index cols) { return MatMap(v.data(), rows, cols); }
ConstMatMap as_matrix(const Vector& v, Index rows, Index cols) { return ConstMatMap(v.data(), rows, cols); }

// Unfolds [C, H, W] into [C*k*k, Ho*Wo].
RowMatrix im2col(const Vector& x, Index channels, Index height, Index width, Index k, Index stride, Index pad,
                 Index out_h, Index out_w) {
    RowMatrix cols = RowMatrix::Zero(channels * k * k, out_h * out_w);
    for (Index c = 0; c < channels; ++c) {
        for (Index ky = 0; ky < k; ++ky) {
            for (Index kx = 0; kx < k; ++kx) {
                const Index row = (c * k + ky) * k + kx;
                double* dst = cols.row(row).data();
                for (Index oy = 0; oy < out_h; ++oy) {
                    const Index iy = oy * stride - pad + ky;
                    if (iy < 0 || iy >= height) continue;
                    const double* src = x.data() + (c * height + iy) * width;
                    for (Index ox = 0; ox < out_w; ++ox) {
                        const Index ix = ox * stride - pad + kx;
                        if (ix >= 0 && ix < width) dst[oy * out_w + ox] = src[ix];
                    }
                }
            }
        }
    }
    return cols;
}

void col2im(const RowMatrix& cols, Vector& dx, Index channels, Index height, Index width, Index k, Index stride,
            Index pad, Index out_h, Index out_w) {
    for (Index c = 0; c < channels; ++c) {
        for (Index ky = 0; ky < k; ++ky) {
            for (Index kx = 0; kx < k; ++kx) {
                const Index row = (c * k + ky) * k + kx;
                const double* src = cols.row(row).data();
                for (Index oy = 0; oy < out_h; ++oy) {
                    const Index iy = oy * stride - pad + ky;
                    if (iy < 0 || iy >= height) continue;
                    double* dst = dx.data() + (c * height + iy) * width;
                    for (Index ox = 0; ox < out_w; ++ox) {
                        const Index ix = ox * stride - pad + kx;
                        if (ix >= 0 && ix < width) dst[ix] += src[oy * out_w + ox];
                    }
                }
            }
        }
    }
}

}  // namespace

Index numel(const Shape& shape) {
    Index n = 1;
    for (auto d : shape) n *= d;
    return n;
}

std::string shape_string(const Shape& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ", ";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

void Node::accumulate(const Vector& g) {
    if (!requires_grad) return;
    if (grad.size() == 0)
        grad = g;
    else
        grad += g;
}

Var Var::constant(Shape shape, Vector value) {
    if (ag::numel(shape) != value.size())
        throw DimensionError("tensor: value count does not match shape " + shape_string(shape));
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->value = std::move(value);
    return Var(std::move(n));
}

Var Var::parameter(Shape shape, Vector value) {
    Var v = constant(std::move(shape), std::move(value));
    v.set_requires_grad(true);
    return v;
}

Var Var::zeros(Shape shape) {
    const Index n = ag::numel(shape);
    return constant(std::move(shape), Vector::Zero(n));
}

ConstMatMap Var::matrix() const {
    const auto& s = shape();
    if (s.size() == 2) return ConstMatMap(value().data(), s[0], s[1]);
    if (s.size() == 3) return ConstMatMap(value().data(), s[0], s[1] * s[2]);
    if (s.size() == 1) return ConstMatMap(value().data(), 1, s[0]);
    throw DimensionError("matrix view: unsupported rank " + shape_string(s));
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

Var make_result(Shape shape, Vector value, std::vector<Var> parents, std::function<void(Node&)> backward) {
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->value = std::move(value);
    if (g_grad_enabled) {
        bool any = false;
        for (const auto& p : parents) any = any || p.requires_grad();
        if (any) {
            n->requires_grad = true;
            n->parents.reserve(parents.size());
            for (const auto& p : parents) n->parents.push_back(p.node());
            n->backward_fn = std::move(backward);
        }
    }
    return Var(std::move(n));
}

void backward(const Var& loss) {
    if (loss.numel() != 1) throw DimensionError("backward: loss must be a scalar");
    if (!loss.requires_grad()) return;
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, std::size_t>> stack{{loss.node().get(), 0}};
    seen.insert(loss.node().get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node* p = node->parents[next++].get();
            if (p->requires_grad && !seen.count(p)) {
                seen.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    loss.node()->accumulate(Vector::Ones(1));
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward_fn && n->grad.size() != 0) n->backward_fn(*n);
    }
}

Var add(const Var& a, const Var& b) {
    require_same(a, b, "add");
    return make_result(a.shape(), a.value() + b.value(), {a, b}, [](Node& self) {
        self.parents[0]->accumulate(self.grad);
        self.parents[1]->accumulate(self.grad);
    });
}

Var sub(const Var& a, const Var& b) {
    require_same(a, b, "sub");
    return make_result(a.shape(), a.value() - b.value(), {a, b}, [](Node& self) {
        self.parents[0]->accumulate(self.grad);
        self.parents[1]->accumulate_expr(-self.grad);
    });
}

Var mul(const Var& a, const Var& b) {
    require_same(a, b, "mul");
    return make_result(a.shape(), a.value().cwiseProduct(b.value()), {a, b}, [](Node& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        pa.accumulate_expr(self.grad.cwiseProduct(pb.value));
        pb.accumulate_expr(self.grad.cwiseProduct(pa.value));
    });
}

Var scale(const Var& a, double s) {
    return make_result(a.shape(), a.value() * s, {a}, [s](Node& self) { self.parents[0]->accumulate_expr(self.grad * s); });
}

Var gelu(const Var& x) {
    const Vector& v = x.value();
    Vector out(v.size());
    for (Index i = 0; i < v.size(); ++i) out(i) = 0.5 * v(i) * (1.0 + std::erf(v(i) * std::numbers::sqrt2 / 2.0));
    return make_result(x.shape(), std::move(out), {x}, [](Node& self) {
        auto& p = *self.parents[0];
        Vector g(p.value.size());
        const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
        for (Index i = 0; i < g.size(); ++i) {
            const double z = p.value(i);
            const double cdf = 0.5 * (1.0 + std::erf(z * std::numbers::sqrt2 / 2.0));
            g(i) = self.grad(i) * (cdf + z * inv_sqrt_2pi * std::exp(-0.5 * z * z));
        }
        p.accumulate(g);
    });
}

Var relu(const Var& x) {
    return make_result(x.shape(), x.value().cwiseMax(0.0), {x}, [](Node& self) {
        auto& p = *self.parents[0];
        p.accumulate_expr((p.value.array() > 0.0).select(self.grad.array(), 0.0).matrix());
    });
}

Var reshape(const Var& x, Shape shape) {
    if (numel(shape) != x.numel())
        throw DimensionError("reshape: " + shape_string(x.shape()) + " -> " + shape_string(shape));
    return make_result(std::move(shape), x.value(), {x}, [](Node& self) { self.parents[0]->accumulate(self.grad); });
}

Var transpose(const Var& x) {
    require_rank(x, 2, "transpose");
    const Index n = x.dim(0);
    const Index m = x.dim(1);
    Vector out(x.numel());
    as_matrix(out, m, n) = as_matrix(x.value(), n, m).transpose();
    return make_result({m, n}, std::move(out), {x}, [n, m](Node& self) {
        Vector g(n * m);
        as_matrix(g, n, m) = as_matrix(self.grad, m, n).transpose();
        self.parents[0]->accumulate(g);
    });
}

Var sum(const Var& x) {
    Vector out(1);
    out(0) = x.value().sum();
    return make_result({1}, std::move(out), {x}, [](Node& self) {
        auto& p = *self.parents[0];
        p.accumulate_expr(Vector::Constant(p.value.size(), self.grad(0)));
    });
}

Var weighted_sum(const Var& x, const Vector& weights) {
    if (weights.size() != x.numel()) throw DimensionError("weighted_sum: weight count mismatch");
    Vector out(1);
    out(0) = x.value().dot(weights);
    return make_result({1}, std::move(out), {x},
                       [weights](Node& self) { self.parents[0]->accumulate_expr(weights * self.grad(0)); });
}

Var matmul(const Var& a, const Var& b) {
    require_rank(a, 2, "matmul");
    require_rank(b, 2, "matmul");
    const Index n = a.dim(0), k = a.dim(1), m = b.dim(1);
    if (b.dim(0) != k) throw DimensionError("matmul: " + shape_string(a.shape()) + " x " + shape_string(b.shape()));
    Vector out(n * m);
    as_matrix(out, n, m).noalias() = as_matrix(a.value(), n, k) * as_matrix(b.value(), k, m);
    return make_result({n, m}, std::move(out), {a, b}, [n, k, m](Node& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        const auto g = as_matrix(self.grad, n, m);
        if (pa.requires_grad) {
            Vector ga(n * k);
            as_matrix(ga, n, k).noalias() = g * as_matrix(pb.value, k, m).transpose();
            pa.accumulate(ga);
        }
        if (pb.requires_grad) {
            Vector gb(k * m);
            as_matrix(gb, k, m).noalias() = as_matrix(pa.value, n, k).transpose() * g;
            pb.accumulate(gb);
        }
    });
}

Var linear(const Var& x, const Var& weight, const Var& bias) {
    require_rank(x, 2, "linear");
    require_rank(weight, 2, "linear");
    const Index n = x.dim(0), in = x.dim(1), out_dim = weight.dim(0);
    if (weight.dim(1) != in) throw DimensionError("linear: input width " + std::to_string(in) + " vs weight " +
                                                  shape_string(weight.shape()));
    if (bias.numel() != out_dim) throw DimensionError("linear: bias size mismatch");
    Vector out(n * out_dim);
    auto y = as_matrix(out, n, out_dim);
    y.noalias() = as_matrix(x.value(), n, in) * as_matrix(weight.value(), out_dim, in).transpose();
    y.rowwise() += bias.value().transpose();
    return make_result({n, out_dim}, std::move(out), {x, weight, bias}, [n, in, out_dim](Node& self) {
        auto& px = *self.parents[0];
        auto& pw = *self.parents[1];
        auto& pb = *self.parents[2];
        const auto g = as_matrix(self.grad, n, out_dim);
        if (px.requires_grad) {
            Vector gx(n * in);
            as_matrix(gx, n, in).noalias() = g * as_matrix(pw.value, out_dim, in);
            px.accumulate(gx);
        }
        if (pw.requires_grad) {
            Vector gw(out_dim * in);
            as_matrix(gw, out_dim, in).noalias() = g.transpose() * as_matrix(px.value, n, in);
            pw.accumulate(gw);
        }
        if (pb.requires_grad) pb.accumulate_expr(g.colwise().sum().transpose());
    });
}

Var add_row_vector(const Var& x, const Var& row) {
    require_rank(x, 2, "add_row_vector");
    const Index n = x.dim(0), m = x.dim(1);
    if (row.numel() != m) throw DimensionError("add_row_vector: width mismatch");
    Vector out = x.value();
    as_matrix(out, n, m).rowwise() += row.value().transpose();
    return make_result(x.shape(), std::move(out), {x, row}, [n, m](Node& self) {
        self.parents[0]->accumulate(self.grad);
        self.parents[1]->accumulate_expr(as_matrix(self.grad, n, m).colwise().sum().transpose());
    });
}

Var softmax_rows(const Var& x) {
    require_rank(x, 2, "softmax_rows");
    const Index n = x.dim(0), m = x.dim(1);
    Vector out(n * m);
    auto y = as_matrix(out, n, m);
    const auto in = as_matrix(x.value(), n, m);
    for (Index r = 0; r < n; ++r) {
        const double mx = in.row(r).maxCoeff();
        y.row(r) = (in.row(r).array() - mx).exp().matrix();
        y.row(r) /= y.row(r).sum();
    }
    Vector saved = out;
    return make_result(x.shape(), std::move(out), {x}, [n, m, saved = std::move(saved)](Node& self) {
        const auto yv = as_matrix(saved, n, m);
        const auto g = as_matrix(self.grad, n, m);
        Vector gx(n * m);
        auto gm = as_matrix(gx, n, m);
        for (Index r = 0; r < n; ++r) {
            const double dot = g.row(r).dot(yv.row(r));
            gm.row(r) = yv.row(r).cwiseProduct((g.row(r).array() - dot).matrix());
        }
        self.parents[0]->accumulate(gx);
    });
}

Var layer_norm_rows(const Var& x, const Var& gamma, const Var& beta, double eps) {
    require_rank(x, 2, "layer_norm_rows");
    const Index n = x.dim(0), m = x.dim(1);
    if (gamma.numel() != m || beta.numel() != m) throw DimensionError("layer_norm_rows: affine size mismatch");
    const auto in = as_matrix(x.value(), n, m);
    Vector xhat(n * m);
    Vector inv_std(n);
    auto xh = as_matrix(xhat, n, m);
    for (Index r = 0; r < n; ++r) {
        const double mean = in.row(r).mean();
        const double var = (in.row(r).array() - mean).square().mean();
        inv_std(r) = 1.0 / std::sqrt(var + eps);
        xh.row(r) = ((in.row(r).array() - mean) * inv_std(r)).matrix();
    }
    Vector out(n * m);
    auto y = as_matrix(out, n, m);
    y = xh.array().rowwise() * gamma.value().transpose().array();
    y.rowwise() += beta.value().transpose();
    return make_result(x.shape(), std::move(out), {x, gamma, beta},
                       [n, m, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& self) {
                           auto& px = *self.parents[0];
                           auto& pg = *self.parents[1];
                           auto& pb = *self.parents[2];
                           const auto g = as_matrix(self.grad, n, m);
                           const auto xh = as_matrix(xhat, n, m);
                           if (pg.requires_grad) pg.accumulate_expr(g.cwiseProduct(xh).colwise().sum().transpose());
                           if (pb.requires_grad) pb.accumulate_expr(g.colwise().sum().transpose());
                           if (px.requires_grad) {
                               Vector gx(n * m);
                               auto gm = as_matrix(gx, n, m);
                               for (Index r = 0; r < n; ++r) {
                                   const Eigen::RowVectorXd dxh = g.row(r).cwiseProduct(pg.value.transpose());
                                   const double s1 = dxh.sum();
                                   const double s2 = dxh.dot(xh.row(r));
                                   gm.row(r) = (inv_std(r) / static_cast<double>(m)) *
                                               (static_cast<double>(m) * dxh.array() - s1 - xh.row(r).array() * s2)
                                                   .matrix();
                               }
                               px.accumulate(gx);
                           }
                       });
}

Var slice_rows(const Var& x, Index begin, Index count) {
    require_rank(x, 2, "slice_rows");
    const Index n = x.dim(0), m = x.dim(1);
    if (begin < 0 || count < 0 || begin + count > n) throw DimensionError("slice_rows: range out of bounds");
    Vector out = x.value().segment(begin * m, count * m);
    return make_result({count, m}, std::move(out), {x}, [n, m, begin, count](Node& self) {
        Vector g = Vector::Zero(n * m);
        g.segment(begin * m, count * m) = self.grad;
        self.parents[0]->accumulate(g);
    });
}

Var slice_cols(const Var& x, Index begin, Index count) {
    require_rank(x, 2, "slice_cols");
    const Index n = x.dim(0), m = x.dim(1);
    if (begin < 0 || count < 0 || begin + count > m) throw DimensionError("slice_cols: range out of bounds");
    Vector out(n * count);
    as_matrix(out, n, count) = as_matrix(x.value(), n, m).middleCols(begin, count);
    return make_result({n, count}, std::move(out), {x}, [n, m, begin, count](Node& self) {
        Vector g = Vector::Zero(n * m);
        as_matrix(g, n, m).middleCols(begin, count) = as_matrix(self.grad, n, count);
        self.parents[0]->accumulate(g);
    });
}

Var concat_rows(const std::vector<Var>& parts) {
    if (parts.empty()) throw DimensionError("concat_rows: no inputs");
    const Index m = parts[0].dim(1);
    Index n = 0;
    for (const auto& p : parts) {
        require_rank(p, 2, "concat_rows");
        if (p.dim(1) != m) throw DimensionError("concat_rows: width mismatch");
        n += p.dim(0);
    }
    Vector out(n * m);
    Index off = 0;
    for (const auto& p : parts) {
        out.segment(off, p.numel()) = p.value();
        off += p.numel();
    }
    return make_result({n, m}, std::move(out), parts, [](Node& self) {
        Index offset = 0;
        for (auto& p : self.parents) {
            const Index len = p->value.size();
            p->accumulate_expr(self.grad.segment(offset, len));
            offset += len;
        }
    });
}

Var concat_cols(const std::vector<Var>& parts) {
    if (parts.empty()) throw DimensionError("concat_cols: no inputs");
    const Index n = parts[0].dim(0);
    Index m = 0;
    for (const auto& p : parts) {
        require_rank(p, 2, "concat_cols");
        if (p.dim(0) != n) throw DimensionError("concat_cols: height mismatch");
        m += p.dim(1);
    }
    Vector out(n * m);
    auto y = as_matrix(out, n, m);
    Index off = 0;
    for (const auto& p : parts) {
        y.middleCols(off, p.dim(1)) = p.matrix();
        off += p.dim(1);
    }
    return make_result({n, m}, std::move(out), parts, [n, m](Node& self) {
        const auto g = as_matrix(self.grad, n, m);
        Index offset = 0;
        for (auto& p : self.parents) {
            const Index w = p->shape[1];
            if (p->requires_grad) {
                Vector gp(n * w);
                as_matrix(gp, n, w) = g.middleCols(offset, w);
                p->accumulate(gp);
            }
            offset += w;
        }
    });
}

Var conv2d(const Var& x, const Var& weight, const Var& bias, Index stride, Index padding) {
    require_rank(x, 3, "conv2d");
    require_rank(weight, 4, "conv2d");
    const Index c = x.dim(0), h = x.dim(1), w = x.dim(2);
    const Index o = weight.dim(0), k = weight.dim(2);
    if (weight.dim(1) != c || weight.dim(3) != k)
        throw DimensionError("conv2d: input " + shape_string(x.shape()) + " vs weight " + shape_string(weight.shape()));
    if (bias.numel() != o) throw DimensionError("conv2d: bias size mismatch");
    const Index oh = (h + 2 * padding - k) / stride + 1;
    const Index ow = (w + 2 * padding - k) / stride + 1;
    if (oh <= 0 || ow <= 0) throw DimensionError("conv2d: input smaller than kernel");
    RowMatrix cols = im2col(x.value(), c, h, w, k, stride, padding, oh, ow);
    Vector out(o * oh * ow);
    auto y = as_matrix(out, o, oh * ow);
    y.noalias() = as_matrix(weight.value(), o, c * k * k) * cols;
    y.colwise() += bias.value();
    return make_result(
        {o, oh, ow}, std::move(out), {x, weight, bias},
        [c, h, w, o, k, stride, padding, oh, ow, cols = std::move(cols)](Node& self) {
            auto& px = *self.parents[0];
            auto& pw = *self.parents[1];
            auto& pb = *self.parents[2];
            const auto g = as_matrix(self.grad, o, oh * ow);
            if (pw.requires_grad) {
                Vector gw(o * c * k * k);
                as_matrix(gw, o, c * k * k).noalias() = g * cols.transpose();
                pw.accumulate(gw);
            }
            if (pb.requires_grad) pb.accumulate_expr(g.rowwise().sum());
            if (px.requires_grad) {
                const RowMatrix gcols = as_matrix(pw.value, o, c * k * k).transpose() * g;
                Vector gx = Vector::Zero(c * h * w);
                col2im(gcols, gx, c, h, w, k, stride, padding, oh, ow);
                px.accumulate(gx);
            }
        });
}

Var conv_transpose2x2(const Var& x, const Var& weight, const Var& bias) {
    require_rank(x, 3, "conv_transpose2x2");
    require_rank(weight, 4, "conv_transpose2x2");
    const Index c = x.dim(0), h = x.dim(1), w = x.dim(2);
    const Index o = weight.dim(1);
    if (weight.dim(0) != c || weight.dim(2) != 2 || weight.dim(3) != 2)
        throw DimensionError("conv_transpose2x2: input " + shape_string(x.shape()) + " vs weight " +
                             shape_string(weight.shape()));
    if (bias.numel() != o) throw DimensionError("conv_transpose2x2: bias size mismatch");
    // cols[o*4 + a*2 + b, i*w + j] = sum_c W[c, o, a, b] x[c, i, j]
    const RowMatrix cols = as_matrix(weight.value(), c, o * 4).transpose() * as_matrix(x.value(), c, h * w);
    Vector out(o * 4 * h * w);
    const Index ow = 2 * w;
    for (Index oc = 0; oc < o; ++oc) {
        for (Index a = 0; a < 2; ++a) {
            for (Index b = 0; b < 2; ++b) {
                const double* src = cols.row(oc * 4 + a * 2 + b).data();
                for (Index i = 0; i < h; ++i)
                    for (Index j = 0; j < w; ++j)
                        out((oc * 2 * h + 2 * i + a) * ow + 2 * j + b) = src[i * w + j] + bias.value()(oc);
            }
        }
    }
    return make_result({o, 2 * h, 2 * w}, std::move(out), {x, weight, bias}, [c, h, w, o, ow](Node& self) {
        auto& px = *self.parents[0];
        auto& pw = *self.parents[1];
        auto& pb = *self.parents[2];
        RowMatrix gcols(o * 4, h * w);
        for (Index oc = 0; oc < o; ++oc)
            for (Index a = 0; a < 2; ++a)
                for (Index b = 0; b < 2; ++b) {
                    double* dst = gcols.row(oc * 4 + a * 2 + b).data();
                    for (Index i = 0; i < h; ++i)
                        for (Index j = 0; j < w; ++j) dst[i * w + j] = self.grad((oc * 2 * h + 2 * i + a) * ow + 2 * j + b);
                }
        if (pb.requires_grad) {
            Vector gb(o);
            for (Index oc = 0; oc < o; ++oc) gb(oc) = gcols.middleRows(oc * 4, 4).sum();
            pb.accumulate(gb);
        }
        if (pw.requires_grad) {
            Vector gw(c * o * 4);
            as_matrix(gw, c, o * 4).noalias() = as_matrix(px.value, c, h * w) * gcols.transpose();
            pw.accumulate(gw);
        }
        if (px.requires_grad) {
            Vector gx(c * h * w);
            as_matrix(gx, c, h * w).noalias() = as_matrix(pw.value, c, o * 4) * gcols;
            px.accumulate(gx);
        }
    });
}

Var instance_norm(const Var& x, double eps) {
    require_rank(x, 3, "instance_norm");
    const Index c = x.dim(0), hw = x.dim(1) * x.dim(2);
    const auto in = as_matrix(x.value(), c, hw);
    Vector out(c * hw);
    Vector inv_std(c);
    auto y = as_matrix(out, c, hw);
    for (Index ch = 0; ch < c; ++ch) {
        const double mean = in.row(ch).mean();
        const double var = (in.row(ch).array() - mean).square().mean();
        inv_std(ch) = 1.0 / std::sqrt(var + eps);
        y.row(ch) = ((in.row(ch).array() - mean) * inv_std(ch)).matrix();
    }
    Vector xhat = out;
    return make_result(x.shape(), std::move(out), {x},
                       [c, hw, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& self) {
                           const auto g = as_matrix(self.grad, c, hw);
                           const auto xh = as_matrix(xhat, c, hw);
                           Vector gx(c * hw);
                           auto gm = as_matrix(gx, c, hw);
                           const double n = static_cast<double>(hw);
                           for (Index ch = 0; ch < c; ++ch) {
                               const double s1 = g.row(ch).sum();
                               const double s2 = g.row(ch).dot(xh.row(ch));
                               gm.row(ch) = (inv_std(ch) / n) * (n * g.row(ch).array() - s1 - xh.row(ch).array() * s2).matrix();
                           }
                           self.parents[0]->accumulate(gx);
                       });
}

Var upsample_nearest2x(const Var& x) {
    require_rank(x, 3, "upsample_nearest2x");
    const Index c = x.dim(0), h = x.dim(1), w = x.dim(2);
    Vector out(c * 4 * h * w);
    for (Index ch = 0; ch < c; ++ch)
        for (Index i = 0; i < 2 * h; ++i)
            for (Index j = 0; j < 2 * w; ++j) out((ch * 2 * h + i) * 2 * w + j) = x.value()((ch * h + i / 2) * w + j / 2);
    return make_result({c, 2 * h, 2 * w}, std::move(out), {x}, [c, h, w](Node& self) {
        Vector g = Vector::Zero(c * h * w);
        for (Index ch = 0; ch < c; ++ch)
            for (Index i = 0; i < 2 * h; ++i)
                for (Index j = 0; j < 2 * w; ++j) g((ch * h + i / 2) * w + j / 2) += self.grad((ch * 2 * h + i) * 2 * w + j);
        self.parents[0]->accumulate(g);
    });
}

Var add_channel_bias(const Var& x, const Var& bias) {
    require_rank(x, 3, "add_channel_bias");
    const Index c = x.dim(0), hw = x.dim(1) * x.dim(2);
    if (bias.numel() != c) throw DimensionError("add_channel_bias: channel mismatch");
    Vector out = x.value();
    as_matrix(out, c, hw).colwise() += bias.value();
    return make_result(x.shape(), std::move(out), {x, bias}, [c, hw](Node& self) {
        self.parents[0]->accumulate(self.grad);
        self.parents[1]->accumulate_expr(as_matrix(self.grad, c, hw).rowwise().sum());
    });
}

Var broadcast_channels(const Var& v, Index height, Index width) {
    const Index c = v.numel();
    const Index hw = height * width;
    Vector out(c * hw);
    as_matrix(out, c, hw).colwise() = v.value();
    return make_result({c, height, width}, std::move(out), {v}, [c, hw](Node& self) {
        self.parents[0]->accumulate_expr(as_matrix(self.grad, c, hw).rowwise().sum());
    });
}

Var image_to_sequence(const Var& x) {
    require_rank(x, 3, "image_to_sequence");
    return transpose(reshape(x, {x.dim(0), x.dim(1) * x.dim(2)}));
}

Var sequence_to_image(const Var& x, Index height, Index width) {
    require_rank(x, 2, "sequence_to_image");
    if (x.dim(0) != height * width) throw DimensionError("sequence_to_image: length mismatch");
    return reshape(transpose(x), {x.dim(1), height, width});
}

}  // namespace samseg::ag
