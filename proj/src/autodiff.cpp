#include "l2aed/autodiff.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "l2aed/errors.hpp"

namespace l2aed {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

thread_local std::size_t g_dropout_calls = 0;

void require_rank(const Var& v, std::size_t rank, const char* op) {
    if (v.shape().size() != rank) {
        throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         shape_str(v.shape()));
    }
}

Graph& graph_of(const Var& v) {
    if (!v.graph()) throw ContractError("operation on a Var with no graph");
    return *v.graph();
}

Graph& graph_of(std::initializer_list<const Var*> vs) {
    Graph* g = nullptr;
    for (const Var* v : vs) {
        if (!v->graph()) throw ContractError("operation on a Var with no graph");
        if (g && g != v->graph()) throw ContractError("operands belong to different graphs");
        g = v->graph();
    }
    return *g;
}

}  // namespace

// ---------------------------------------------------------------------------
// Var / Graph

const Tensor& Var::value() const {
    if (!graph_) throw ContractError("Var is not attached to a graph");
    return graph_->value(id_);
}

bool Var::requires_grad() const { return graph_ && graph_->requires_grad(id_); }

void Graph::check_owned(const Var& v) const {
    if (v.graph_ != this || v.id_ >= nodes_.size()) throw ContractError("Var does not belong to this graph");
}

Var Graph::leaf(Tensor value, bool requires_grad) {
    if (!value.all_finite()) throw NumericError("leaf value contains NaN or Inf");
    nodes_.push_back(Node{"leaf", std::move(value), Tensor{}, requires_grad, {}, nullptr});
    return Var(this, nodes_.size() - 1);
}

Var Graph::record(const char* kind, Tensor value, std::span<const Var> inputs, BackwardFn backward) {
    if (!value.all_finite()) throw NumericError(std::string(kind) + " produced NaN or Inf");
    Node node{kind, std::move(value), Tensor{}, false, {}, nullptr};
    node.inputs.reserve(inputs.size());
    for (const Var& in : inputs) {
        check_owned(in);
        node.inputs.push_back(in.id_);
        node.requires_grad = node.requires_grad || nodes_[in.id_].requires_grad;
    }
    if (node.requires_grad) node.backward = std::move(backward);
    nodes_.push_back(std::move(node));
    return Var(this, nodes_.size() - 1);
}

Tensor& Graph::grad_buffer(std::size_t id) {
    Node& n = nodes_.at(id);
    if (n.grad.empty()) n.grad = Tensor::zeros(n.value.shape());
    return n.grad;
}

void Graph::backward(const Var& loss) {
    check_owned(loss);
    if (nodes_[loss.id_].value.numel() != 1) {
        throw ContractError("backward requires a scalar loss, got shape " +
                            shape_str(nodes_[loss.id_].value.shape()));
    }
    // Intermediate gradients belong to one sweep; only leaves accumulate.
    for (auto& n : nodes_) {
        if (n.backward) n.grad = Tensor{};
    }
    grad_buffer(loss.id_)[0] += 1.0;
    for (std::size_t i = loss.id_ + 1; i-- > 0;) {
        Node& n = nodes_[i];
        if (!n.backward || n.grad.empty()) continue;
        // Inputs always precede their consumer, so the callback never touches n.grad.
        n.backward(*this, n.grad);
    }
}

void Graph::zero_grad() {
    for (auto& n : nodes_) n.grad = Tensor{};
}

Tensor Graph::grad(const Var& v) const {
    check_owned(v);
    const Node& n = nodes_[v.id_];
    if (n.grad.empty()) return Tensor::zeros(n.value.shape());
    return n.grad;
}

// ---------------------------------------------------------------------------
// conv2d

namespace {

// cols[(c*9 + ky*3 + kx), n*H*W + i*W + j] = x[n,c,i+ky-1,j+kx-1] (0 outside).
void im2col3x3(const double* x, std::size_t n_img, std::size_t ch, std::size_t h, std::size_t w,
               double* cols) {
    const std::size_t hw = h * w;
    const std::size_t ncols = n_img * hw;
    for (std::size_t c = 0; c < ch; ++c) {
        for (std::size_t ky = 0; ky < 3; ++ky) {
            for (std::size_t kx = 0; kx < 3; ++kx) {
                double* row = cols + ((c * 9 + ky * 3 + kx) * ncols);
                for (std::size_t n = 0; n < n_img; ++n) {
                    const double* src = x + (n * ch + c) * hw;
                    double* dst = row + n * hw;
                    for (std::size_t i = 0; i < h; ++i) {
                        const std::ptrdiff_t si = static_cast<std::ptrdiff_t>(i + ky) - 1;
                        double* drow = dst + i * w;
                        if (si < 0 || si >= static_cast<std::ptrdiff_t>(h)) {
                            std::fill(drow, drow + w, 0.0);
                            continue;
                        }
                        const double* srow = src + static_cast<std::size_t>(si) * w;
                        for (std::size_t j = 0; j < w; ++j) {
                            const std::ptrdiff_t sj = static_cast<std::ptrdiff_t>(j + kx) - 1;
                            drow[j] = (sj < 0 || sj >= static_cast<std::ptrdiff_t>(w))
                                          ? 0.0
                                          : srow[static_cast<std::size_t>(sj)];
                        }
                    }
                }
            }
        }
    }
}

void col2im3x3(const double* cols, std::size_t n_img, std::size_t ch, std::size_t h, std::size_t w,
               double* dx) {
    const std::size_t hw = h * w;
    const std::size_t ncols = n_img * hw;
    for (std::size_t c = 0; c < ch; ++c) {
        for (std::size_t ky = 0; ky < 3; ++ky) {
            for (std::size_t kx = 0; kx < 3; ++kx) {
                const double* row = cols + ((c * 9 + ky * 3 + kx) * ncols);
                for (std::size_t n = 0; n < n_img; ++n) {
                    double* dst = dx + (n * ch + c) * hw;
                    const double* src = row + n * hw;
                    for (std::size_t i = 0; i < h; ++i) {
                        const std::ptrdiff_t si = static_cast<std::ptrdiff_t>(i + ky) - 1;
                        if (si < 0 || si >= static_cast<std::ptrdiff_t>(h)) continue;
                        double* drow = dst + static_cast<std::size_t>(si) * w;
                        const double* srow = src + i * w;
                        for (std::size_t j = 0; j < w; ++j) {
                            const std::ptrdiff_t sj = static_cast<std::ptrdiff_t>(j + kx) - 1;
                            if (sj < 0 || sj >= static_cast<std::ptrdiff_t>(w)) continue;
                            drow[static_cast<std::size_t>(sj)] += srow[j];
                        }
                    }
                }
            }
        }
    }
}

}  // namespace

Var conv2d(const Var& x, const Var& kernel, const Var& bias) {
    Graph& g = graph_of({&x, &kernel, &bias});
    require_rank(x, 4, "conv2d");
    require_rank(kernel, 4, "conv2d");
    require_rank(bias, 1, "conv2d");
    const Shape& xs = x.shape();
    const Shape& ks = kernel.shape();
    const std::size_t n = xs[0], cin = xs[1], h = xs[2], w = xs[3];
    const std::size_t cout = ks[0];
    if (ks[2] != 3 || ks[3] != 3) throw ShapeError("conv2d: kernel must be 3x3, got " + shape_str(ks));
    if (ks[1] != cin) {
        throw ShapeError("conv2d: input has " + std::to_string(cin) + " channels but kernel expects " +
                         std::to_string(ks[1]));
    }
    if (bias.shape()[0] != cout) throw ShapeError("conv2d: bias length must equal output channels");

    const std::size_t hw = h * w;
    const std::size_t ncols = n * hw;
    // Eigen storage so the (large) column buffer is not zero-filled first.
    RowMat cols(cin * 9, ncols);
    im2col3x3(x.value().ptr(), n, cin, h, w, cols.data());

    RowMat om(cout, ncols);
    om.noalias() = ConstMatMap(kernel.value().ptr(), cout, cin * 9) * cols;

    Tensor out(Shape{n, cout, h, w});
    const double* b = bias.value().ptr();
    for (std::size_t img = 0; img < n; ++img) {
        for (std::size_t o = 0; o < cout; ++o) {
            const double* src = om.data() + o * ncols + img * hw;
            double* dst = out.ptr() + (img * cout + o) * hw;
            for (std::size_t p = 0; p < hw; ++p) dst[p] = src[p] + b[o];
        }
    }

    const std::size_t xid = x.id(), kid = kernel.id(), bid = bias.id();
    const Var inputs[] = {x, kernel, bias};
    return g.record("conv2d", std::move(out), inputs,
                    [=, cols = std::move(cols)](Graph& gr, const Tensor& dy) {
                        RowMat dom(cout, ncols);
                        for (std::size_t img = 0; img < n; ++img) {
                            for (std::size_t o = 0; o < cout; ++o) {
                                const double* src = dy.ptr() + (img * cout + o) * hw;
                                std::copy(src, src + hw, dom.data() + o * ncols + img * hw);
                            }
                        }
                        if (gr.requires_grad(bid)) {
                            double* db = gr.grad_buffer(bid).ptr();
                            for (std::size_t o = 0; o < cout; ++o) db[o] += dom.row(static_cast<Eigen::Index>(o)).sum();
                        }
                        if (gr.requires_grad(kid)) {
                            MatMap dk(gr.grad_buffer(kid).ptr(), cout, cin * 9);
                            dk.noalias() += dom * cols.transpose();
                        }
                        if (gr.requires_grad(xid)) {
                            RowMat dcols(cin * 9, ncols);
                            dcols.noalias() = ConstMatMap(gr.value(kid).ptr(), cout, cin * 9).transpose() * dom;
                            col2im3x3(dcols.data(), n, cin, h, w, gr.grad_buffer(xid).ptr());
                        }
                    });
}

// ---------------------------------------------------------------------------
// batchnorm_batch

Var batchnorm_batch(const Var& x, const Var& gamma, const Var& beta, double eps) {
    Graph& g = graph_of({&x, &gamma, &beta});
    require_rank(x, 4, "batchnorm_batch");
    require_rank(gamma, 1, "batchnorm_batch");
    require_rank(beta, 1, "batchnorm_batch");
    if (eps <= 0.0) throw ParameterError("batchnorm_batch: eps must be positive");
    const Shape& xs = x.shape();
    const std::size_t n = xs[0], c = xs[1], hw = xs[2] * xs[3];
    if (gamma.shape()[0] != c || beta.shape()[0] != c) {
        throw ShapeError("batchnorm_batch: gamma/beta length must equal channel count");
    }
    const double count = static_cast<double>(n * hw);
    const double* xp = x.value().ptr();
    const double* gp = gamma.value().ptr();
    const double* bp = beta.value().ptr();

    Tensor xhat(xs);
    Tensor out(xs);
    std::vector<double> inv_std(c);
    for (std::size_t ch = 0; ch < c; ++ch) {
        double mean = 0.0;
        for (std::size_t img = 0; img < n; ++img) {
            const double* p = xp + (img * c + ch) * hw;
            for (std::size_t k = 0; k < hw; ++k) mean += p[k];
        }
        mean /= count;
        double var = 0.0;
        for (std::size_t img = 0; img < n; ++img) {
            const double* p = xp + (img * c + ch) * hw;
            for (std::size_t k = 0; k < hw; ++k) var += (p[k] - mean) * (p[k] - mean);
        }
        var /= count;
        const double is = 1.0 / std::sqrt(var + eps);
        inv_std[ch] = is;
        for (std::size_t img = 0; img < n; ++img) {
            const std::size_t off = (img * c + ch) * hw;
            for (std::size_t k = 0; k < hw; ++k) {
                const double xh = (xp[off + k] - mean) * is;
                xhat[off + k] = xh;
                out[off + k] = gp[ch] * xh + bp[ch];
            }
        }
    }

    const std::size_t xid = x.id(), gid = gamma.id(), bid = beta.id();
    const Var inputs[] = {x, gamma, beta};
    return g.record("batchnorm_batch", std::move(out), inputs,
                    [=, xhat = std::move(xhat), inv_std = std::move(inv_std)](Graph& gr, const Tensor& dy) {
                        std::vector<double> sum_dy(c, 0.0), sum_dy_xhat(c, 0.0);
                        for (std::size_t img = 0; img < n; ++img) {
                            for (std::size_t ch = 0; ch < c; ++ch) {
                                const std::size_t off = (img * c + ch) * hw;
                                for (std::size_t k = 0; k < hw; ++k) {
                                    sum_dy[ch] += dy[off + k];
                                    sum_dy_xhat[ch] += dy[off + k] * xhat[off + k];
                                }
                            }
                        }
                        if (gr.requires_grad(bid)) {
                            Tensor& db = gr.grad_buffer(bid);
                            for (std::size_t ch = 0; ch < c; ++ch) db[ch] += sum_dy[ch];
                        }
                        if (gr.requires_grad(gid)) {
                            Tensor& dg = gr.grad_buffer(gid);
                            for (std::size_t ch = 0; ch < c; ++ch) dg[ch] += sum_dy_xhat[ch];
                        }
                        if (gr.requires_grad(xid)) {
                            const double* gam = gr.value(gid).ptr();
                            Tensor& dx = gr.grad_buffer(xid);
                            for (std::size_t img = 0; img < n; ++img) {
                                for (std::size_t ch = 0; ch < c; ++ch) {
                                    const double coef = gam[ch] * inv_std[ch] / count;
                                    const std::size_t off = (img * c + ch) * hw;
                                    for (std::size_t k = 0; k < hw; ++k) {
                                        dx[off + k] += coef * (count * dy[off + k] - sum_dy[ch] -
                                                               xhat[off + k] * sum_dy_xhat[ch]);
                                    }
                                }
                            }
                        }
                    });
}

// ---------------------------------------------------------------------------
// elementwise

Var relu(const Var& x) {
    Graph& g = graph_of(x);
    Tensor out = x.value();
    for (double& v : out.data()) v = v > 0.0 ? v : 0.0;
    const std::size_t xid = x.id();
    const Var inputs[] = {x};
    return g.record("relu", std::move(out), inputs, [xid](Graph& gr, const Tensor& dy) {
        const Tensor& xv = gr.value(xid);
        Tensor& dx = gr.grad_buffer(xid);
        for (std::size_t i = 0; i < dy.numel(); ++i) {
            if (xv[i] > 0.0) dx[i] += dy[i];
        }
    });
}

Var maxpool2(const Var& x) {
    Graph& g = graph_of(x);
    require_rank(x, 4, "maxpool2");
    const Shape& xs = x.shape();
    const std::size_t n = xs[0], c = xs[1], h = xs[2], w = xs[3];
    if (h < 2 || w < 2) throw ShapeError("maxpool2: spatial extent must be at least 2x2, got " + shape_str(xs));
    const std::size_t oh = h / 2, ow = w / 2;
    Tensor out(Shape{n, c, oh, ow});
    std::vector<std::size_t> argmax(out.numel());
    const double* xp = x.value().ptr();
    for (std::size_t plane = 0; plane < n * c; ++plane) {
        const double* src = xp + plane * h * w;
        for (std::size_t i = 0; i < oh; ++i) {
            for (std::size_t j = 0; j < ow; ++j) {
                std::size_t best = (2 * i) * w + 2 * j;
                const std::size_t cand[3] = {best + 1, best + w, best + w + 1};
                for (std::size_t k : cand) {
                    if (src[k] > src[best]) best = k;
                }
                const std::size_t o = plane * oh * ow + i * ow + j;
                out[o] = src[best];
                argmax[o] = plane * h * w + best;
            }
        }
    }
    const std::size_t xid = x.id();
    const Var inputs[] = {x};
    return g.record("maxpool2", std::move(out), inputs,
                    [xid, argmax = std::move(argmax)](Graph& gr, const Tensor& dy) {
                        Tensor& dx = gr.grad_buffer(xid);
                        for (std::size_t o = 0; o < dy.numel(); ++o) dx[argmax[o]] += dy[o];
                    });
}

Var linear(const Var& x, const Var& weight, const Var& bias) {
    Graph& g = graph_of({&x, &weight, &bias});
    require_rank(x, 2, "linear");
    require_rank(weight, 2, "linear");
    require_rank(bias, 1, "linear");
    const std::size_t n = x.shape()[0], d = x.shape()[1], m = weight.shape()[0];
    if (weight.shape()[1] != d) {
        throw ShapeError("linear: input width " + std::to_string(d) + " does not match weight " +
                         shape_str(weight.shape()));
    }
    if (bias.shape()[0] != m) throw ShapeError("linear: bias length must equal output width");
    Tensor out(Shape{n, m});
    MatMap om(out.ptr(), n, m);
    om.noalias() = ConstMatMap(x.value().ptr(), n, d) * ConstMatMap(weight.value().ptr(), m, d).transpose();
    const Eigen::Map<const Eigen::RowVectorXd> bv(bias.value().ptr(), m);
    om.rowwise() += bv;

    const std::size_t xid = x.id(), wid = weight.id(), bid = bias.id();
    const Var inputs[] = {x, weight, bias};
    return g.record("linear", std::move(out), inputs, [=](Graph& gr, const Tensor& dy) {
        const ConstMatMap dym(dy.ptr(), n, m);
        if (gr.requires_grad(bid)) {
            Eigen::Map<Eigen::RowVectorXd> db(gr.grad_buffer(bid).ptr(), m);
            db += dym.colwise().sum();
        }
        if (gr.requires_grad(wid)) {
            MatMap dw(gr.grad_buffer(wid).ptr(), m, d);
            dw.noalias() += dym.transpose() * ConstMatMap(gr.value(xid).ptr(), n, d);
        }
        if (gr.requires_grad(xid)) {
            MatMap dx(gr.grad_buffer(xid).ptr(), n, d);
            dx.noalias() += dym * ConstMatMap(gr.value(wid).ptr(), m, d);
        }
    });
}

Var softmax(const Var& x) {
    Graph& g = graph_of(x);
    const std::size_t m = x.shape().back();
    const std::size_t rows = x.value().numel() / m;
    Tensor out = x.value();
    for (std::size_t r = 0; r < rows; ++r) {
        double* p = out.ptr() + r * m;
        const double mx = *std::max_element(p, p + m);
        double total = 0.0;
        for (std::size_t k = 0; k < m; ++k) {
            p[k] = std::exp(p[k] - mx);
            total += p[k];
        }
        for (std::size_t k = 0; k < m; ++k) p[k] /= total;
    }
    const std::size_t xid = x.id();
    const Tensor y = out;
    const Var inputs[] = {x};
    return g.record("softmax", std::move(out), inputs, [=](Graph& gr, const Tensor& dy) {
        Tensor& dx = gr.grad_buffer(xid);
        for (std::size_t r = 0; r < rows; ++r) {
            const std::size_t off = r * m;
            double dot = 0.0;
            for (std::size_t k = 0; k < m; ++k) dot += dy[off + k] * y[off + k];
            for (std::size_t k = 0; k < m; ++k) dx[off + k] += y[off + k] * (dy[off + k] - dot);
        }
    });
}

Var log_softmax(const Var& x) {
    Graph& g = graph_of(x);
    const std::size_t m = x.shape().back();
    const std::size_t rows = x.value().numel() / m;
    Tensor out = x.value();
    Tensor probs(out.shape());
    for (std::size_t r = 0; r < rows; ++r) {
        double* p = out.ptr() + r * m;
        const double mx = *std::max_element(p, p + m);
        double total = 0.0;
        for (std::size_t k = 0; k < m; ++k) total += std::exp(p[k] - mx);
        const double lse = mx + std::log(total);
        for (std::size_t k = 0; k < m; ++k) {
            p[k] -= lse;
            probs[r * m + k] = std::exp(p[k]);
        }
    }
    const std::size_t xid = x.id();
    const Var inputs[] = {x};
    return g.record("log_softmax", std::move(out), inputs,
                    [=, probs = std::move(probs)](Graph& gr, const Tensor& dy) {
                        Tensor& dx = gr.grad_buffer(xid);
                        for (std::size_t r = 0; r < rows; ++r) {
                            const std::size_t off = r * m;
                            double total = 0.0;
                            for (std::size_t k = 0; k < m; ++k) total += dy[off + k];
                            for (std::size_t k = 0; k < m; ++k) dx[off + k] += dy[off + k] - probs[off + k] * total;
                        }
                    });
}

Var dropout_apply(const Var& x, const Tensor& mask, double keep) {
    Graph& g = graph_of(x);
    require_rank(x, 4, "dropout_apply");
    if (!(keep > 0.0) || keep > 1.0) throw ParameterError("dropout_apply: keep must lie in (0, 1]");
    const std::size_t n = x.shape()[0], c = x.shape()[1], hw = x.shape()[2] * x.shape()[3];
    if (mask.numel() != c) throw ShapeError("dropout_apply: mask length must equal channel count");
    std::vector<double> factor(c);
    for (std::size_t ch = 0; ch < c; ++ch) {
        if (mask[ch] != 0.0 && mask[ch] != 1.0) throw ParameterError("dropout_apply: mask entries must be 0 or 1");
        factor[ch] = mask[ch] / keep;
    }
    ++g_dropout_calls;
    Tensor out = x.value();
    for (std::size_t img = 0; img < n; ++img) {
        for (std::size_t ch = 0; ch < c; ++ch) {
            double* p = out.ptr() + (img * c + ch) * hw;
            for (std::size_t k = 0; k < hw; ++k) p[k] *= factor[ch];
        }
    }
    const std::size_t xid = x.id();
    const Var inputs[] = {x};
    return g.record("dropout_apply", std::move(out), inputs,
                    [=, factor = std::move(factor)](Graph& gr, const Tensor& dy) {
                        Tensor& dx = gr.grad_buffer(xid);
                        for (std::size_t img = 0; img < n; ++img) {
                            for (std::size_t ch = 0; ch < c; ++ch) {
                                const std::size_t off = (img * c + ch) * hw;
                                for (std::size_t k = 0; k < hw; ++k) dx[off + k] += dy[off + k] * factor[ch];
                            }
                        }
                    });
}

std::size_t dropout_apply_calls() noexcept { return g_dropout_calls; }

// ---------------------------------------------------------------------------
// structural

Var reshape(const Var& x, Shape shape) {
    Graph& g = graph_of(x);
    Tensor out = x.value().reshaped(std::move(shape));
    const std::size_t xid = x.id();
    const Var inputs[] = {x};
    return g.record("reshape", std::move(out), inputs, [xid](Graph& gr, const Tensor& dy) {
        Tensor& dx = gr.grad_buffer(xid);
        for (std::size_t i = 0; i < dy.numel(); ++i) dx[i] += dy[i];
    });
}

namespace {

void require_same_shape(const Var& a, const Var& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    }
}

}  // namespace

Var add(const Var& a, const Var& b) {
    Graph& g = graph_of({&a, &b});
    require_same_shape(a, b, "add");
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] += b.value()[i];
    const std::size_t aid = a.id(), bid = b.id();
    const Var inputs[] = {a, b};
    return g.record("add", std::move(out), inputs, [=](Graph& gr, const Tensor& dy) {
        for (std::size_t id : {aid, bid}) {
            if (!gr.requires_grad(id)) continue;
            Tensor& d = gr.grad_buffer(id);
            for (std::size_t i = 0; i < dy.numel(); ++i) d[i] += dy[i];
        }
    });
}

Var sub(const Var& a, const Var& b) {
    Graph& g = graph_of({&a, &b});
    require_same_shape(a, b, "sub");
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] -= b.value()[i];
    const std::size_t aid = a.id(), bid = b.id();
    const Var inputs[] = {a, b};
    return g.record("sub", std::move(out), inputs, [=](Graph& gr, const Tensor& dy) {
        if (gr.requires_grad(aid)) {
            Tensor& d = gr.grad_buffer(aid);
            for (std::size_t i = 0; i < dy.numel(); ++i) d[i] += dy[i];
        }
        if (gr.requires_grad(bid)) {
            Tensor& d = gr.grad_buffer(bid);
            for (std::size_t i = 0; i < dy.numel(); ++i) d[i] -= dy[i];
        }
    });
}

Var mul(const Var& a, const Var& b) {
    Graph& g = graph_of({&a, &b});
    require_same_shape(a, b, "mul");
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= b.value()[i];
    const std::size_t aid = a.id(), bid = b.id();
    const Var inputs[] = {a, b};
    return g.record("mul", std::move(out), inputs, [=](Graph& gr, const Tensor& dy) {
        const Tensor& av = gr.value(aid);
        const Tensor& bv = gr.value(bid);
        if (gr.requires_grad(aid)) {
            Tensor& d = gr.grad_buffer(aid);
            for (std::size_t i = 0; i < dy.numel(); ++i) d[i] += dy[i] * bv[i];
        }
        if (gr.requires_grad(bid)) {
            Tensor& d = gr.grad_buffer(bid);
            for (std::size_t i = 0; i < dy.numel(); ++i) d[i] += dy[i] * av[i];
        }
    });
}

Var scale(const Var& x, double s) {
    Graph& g = graph_of(x);
    Tensor out = x.value();
    for (double& v : out.data()) v *= s;
    const std::size_t xid = x.id();
    const Var inputs[] = {x};
    return g.record("scale", std::move(out), inputs, [=](Graph& gr, const Tensor& dy) {
        Tensor& dx = gr.grad_buffer(xid);
        for (std::size_t i = 0; i < dy.numel(); ++i) dx[i] += s * dy[i];
    });
}

Var sum(const Var& x) {
    Graph& g = graph_of(x);
    double total = 0.0;
    for (double v : x.value().data()) total += v;
    const std::size_t xid = x.id();
    const Var inputs[] = {x};
    return g.record("sum", Tensor::scalar(total), inputs, [xid](Graph& gr, const Tensor& dy) {
        Tensor& dx = gr.grad_buffer(xid);
        for (double& v : dx.data()) v += dy[0];
    });
}

Var stack(std::span<const Var> parts) {
    if (parts.empty()) throw ShapeError("stack: no inputs");
    Graph& g = graph_of(parts[0]);
    const Shape& inner = parts[0].shape();
    const std::size_t per = parts[0].value().numel();
    Shape shape{parts.size()};
    shape.insert(shape.end(), inner.begin(), inner.end());
    Tensor out(shape);
    std::vector<std::size_t> ids;
    ids.reserve(parts.size());
    for (std::size_t i = 0; i < parts.size(); ++i) {
        if (parts[i].graph() != &g) throw ContractError("stack: operands belong to different graphs");
        if (parts[i].shape() != inner) throw ShapeError("stack: all parts must share one shape");
        std::copy_n(parts[i].value().ptr(), per, out.ptr() + i * per);
        ids.push_back(parts[i].id());
    }
    return g.record("stack", std::move(out), parts, [=, ids = std::move(ids)](Graph& gr, const Tensor& dy) {
        for (std::size_t i = 0; i < ids.size(); ++i) {
            if (!gr.requires_grad(ids[i])) continue;
            Tensor& d = gr.grad_buffer(ids[i]);
            for (std::size_t k = 0; k < per; ++k) d[k] += dy[i * per + k];
        }
    });
}

Var pad_channels(const Var& x, std::size_t width) {
    Graph& g = graph_of(x);
    require_rank(x, 4, "pad_channels");
    const std::size_t n = x.shape()[0], c = x.shape()[1], h = x.shape()[2], w = x.shape()[3];
    if (width < c) throw ShapeError("pad_channels: target width smaller than channel count");
    const std::size_t hw = h * w;
    Tensor out(Shape{n, width, h, w});
    for (std::size_t img = 0; img < n; ++img) {
        std::copy_n(x.value().ptr() + img * c * hw, c * hw, out.ptr() + img * width * hw);
    }
    const std::size_t xid = x.id();
    const Var inputs[] = {x};
    return g.record("pad_channels", std::move(out), inputs, [=](Graph& gr, const Tensor& dy) {
        Tensor& dx = gr.grad_buffer(xid);
        for (std::size_t img = 0; img < n; ++img) {
            const double* src = dy.ptr() + img * width * hw;
            double* dst = dx.ptr() + img * c * hw;
            for (std::size_t k = 0; k < c * hw; ++k) dst[k] += src[k];
        }
    });
}

Var take_cols(const Var& x, std::size_t m) {
    Graph& g = graph_of(x);
    require_rank(x, 2, "take_cols");
    const std::size_t rows = x.shape()[0], cols = x.shape()[1];
    if (m == 0 || m > cols) {
        throw CapacityError("take_cols: requested " + std::to_string(m) + " of " + std::to_string(cols) + " columns");
    }
    Tensor out(Shape{rows, m});
    for (std::size_t r = 0; r < rows; ++r) {
        std::copy_n(x.value().ptr() + r * cols, m, out.ptr() + r * m);
    }
    const std::size_t xid = x.id();
    const Var inputs[] = {x};
    return g.record("take_cols", std::move(out), inputs, [=](Graph& gr, const Tensor& dy) {
        Tensor& dx = gr.grad_buffer(xid);
        for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t k = 0; k < m; ++k) dx[r * cols + k] += dy[r * m + k];
        }
    });
}

Var gather_channel_stacks(const Var& embs, std::span<const int> index) {
    Graph& g = graph_of(embs);
    require_rank(embs, 4, "gather_channel_stacks");
    const std::size_t n = embs.shape()[0], c = embs.shape()[1];
    const std::size_t hw = embs.shape()[2] * embs.shape()[3];
    const std::size_t m = index.size();
    if (m == 0) throw ShapeError("gather_channel_stacks: empty index");
    for (int i : index) {
        if (i >= static_cast<int>(n)) throw ShapeError("gather_channel_stacks: index out of range");
    }
    Tensor out(Shape{c, m, embs.shape()[2], embs.shape()[3]});
    const double* src = embs.value().ptr();
    for (std::size_t k = 0; k < c; ++k) {
        for (std::size_t i = 0; i < m; ++i) {
            if (index[i] < 0) continue;
            std::copy_n(src + (static_cast<std::size_t>(index[i]) * c + k) * hw, hw, out.ptr() + (k * m + i) * hw);
        }
    }
    std::vector<int> idx(index.begin(), index.end());
    const std::size_t eid = embs.id();
    const Var inputs[] = {embs};
    return g.record("gather_channel_stacks", std::move(out), inputs,
                    [=, idx = std::move(idx)](Graph& gr, const Tensor& dy) {
                        Tensor& d = gr.grad_buffer(eid);
                        for (std::size_t k = 0; k < c; ++k) {
                            for (std::size_t i = 0; i < m; ++i) {
                                if (idx[i] < 0) continue;
                                double* dst = d.ptr() + (static_cast<std::size_t>(idx[i]) * c + k) * hw;
                                const double* s = dy.ptr() + (k * m + i) * hw;
                                for (std::size_t p = 0; p < hw; ++p) dst[p] += s[p];
                            }
                        }
                    });
}

Var weighted_channel_sum(const Var& stacks, const Var& weights) {
    Graph& g = graph_of({&stacks, &weights});
    require_rank(stacks, 4, "weighted_channel_sum");
    require_rank(weights, 2, "weighted_channel_sum");
    const std::size_t c = stacks.shape()[0], m = stacks.shape()[1];
    const std::size_t h = stacks.shape()[2], w = stacks.shape()[3], hw = h * w;
    if (weights.shape()[0] != c || weights.shape()[1] != m) {
        throw ShapeError("weighted_channel_sum: weights " + shape_str(weights.shape()) + " do not match stacks " +
                         shape_str(stacks.shape()));
    }
    Tensor out(Shape{c, h, w});
    const double* sp = stacks.value().ptr();
    const double* wp = weights.value().ptr();
    for (std::size_t k = 0; k < c; ++k) {
        double* dst = out.ptr() + k * hw;
        for (std::size_t i = 0; i < m; ++i) {
            const double wi = wp[k * m + i];
            const double* s = sp + (k * m + i) * hw;
            for (std::size_t p = 0; p < hw; ++p) dst[p] += wi * s[p];
        }
    }
    const std::size_t sid = stacks.id(), wid = weights.id();
    const Var inputs[] = {stacks, weights};
    return g.record("weighted_channel_sum", std::move(out), inputs, [=](Graph& gr, const Tensor& dy) {
        const double* spv = gr.value(sid).ptr();
        const double* wpv = gr.value(wid).ptr();
        if (gr.requires_grad(sid)) {
            Tensor& ds = gr.grad_buffer(sid);
            for (std::size_t k = 0; k < c; ++k) {
                for (std::size_t i = 0; i < m; ++i) {
                    const double wi = wpv[k * m + i];
                    double* d = ds.ptr() + (k * m + i) * hw;
                    for (std::size_t p = 0; p < hw; ++p) d[p] += wi * dy[k * hw + p];
                }
            }
        }
        if (gr.requires_grad(wid)) {
            Tensor& dw = gr.grad_buffer(wid);
            for (std::size_t k = 0; k < c; ++k) {
                for (std::size_t i = 0; i < m; ++i) {
                    const double* s = spv + (k * m + i) * hw;
                    double acc = 0.0;
                    for (std::size_t p = 0; p < hw; ++p) acc += s[p] * dy[k * hw + p];
                    dw[k * m + i] += acc;
                }
            }
        }
    });
}

Var pairwise_distance(const Var& a, const Var& b) {
    Graph& g = graph_of({&a, &b});
    require_rank(a, 2, "pairwise_distance");
    require_rank(b, 2, "pairwise_distance");
    const std::size_t q = a.shape()[0], p = b.shape()[0], d = a.shape()[1];
    if (b.shape()[1] != d) {
        throw ShapeError("pairwise_distance: width mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
    Tensor out(Shape{q, p});
    const double* ap = a.value().ptr();
    const double* bp = b.value().ptr();
    for (std::size_t i = 0; i < q; ++i) {
        for (std::size_t j = 0; j < p; ++j) {
            double acc = 0.0;
            for (std::size_t k = 0; k < d; ++k) {
                const double diff = ap[i * d + k] - bp[j * d + k];
                acc += diff * diff;
            }
            out[i * p + j] = std::sqrt(acc);
        }
    }
    const std::size_t aid = a.id(), bid = b.id();
    const Tensor dist = out;
    const Var inputs[] = {a, b};
    return g.record("pairwise_distance", std::move(out), inputs, [=](Graph& gr, const Tensor& dy) {
        const double* av = gr.value(aid).ptr();
        const double* bv = gr.value(bid).ptr();
        double* da = gr.requires_grad(aid) ? gr.grad_buffer(aid).ptr() : nullptr;
        double* db = gr.requires_grad(bid) ? gr.grad_buffer(bid).ptr() : nullptr;
        for (std::size_t i = 0; i < q; ++i) {
            for (std::size_t j = 0; j < p; ++j) {
                const double dd = dist[i * p + j];
                if (dd == 0.0) continue;
                const double coef = dy[i * p + j] / dd;
                for (std::size_t k = 0; k < d; ++k) {
                    const double diff = coef * (av[i * d + k] - bv[j * d + k]);
                    if (da) da[i * d + k] += diff;
                    if (db) db[j * d + k] -= diff;
                }
            }
        }
    });
}

Var nll_mean(const Var& log_probs, std::span<const int> labels) {
    Graph& g = graph_of(log_probs);
    require_rank(log_probs, 2, "nll_mean");
    const std::size_t q = log_probs.shape()[0], c = log_probs.shape()[1];
    if (labels.size() != q) throw ShapeError("nll_mean: one label per row required");
    double total = 0.0;
    for (std::size_t i = 0; i < q; ++i) {
        if (labels[i] < 0 || labels[i] >= static_cast<int>(c)) throw ShapeError("nll_mean: label out of range");
        total -= log_probs.value()[i * c + static_cast<std::size_t>(labels[i])];
    }
    std::vector<int> lab(labels.begin(), labels.end());
    const std::size_t lid = log_probs.id();
    const Var inputs[] = {log_probs};
    return g.record("nll_mean", Tensor::scalar(total / static_cast<double>(q)), inputs,
                    [=, lab = std::move(lab)](Graph& gr, const Tensor& dy) {
                        Tensor& d = gr.grad_buffer(lid);
                        for (std::size_t i = 0; i < q; ++i) {
                            d[i * c + static_cast<std::size_t>(lab[i])] -= dy[0] / static_cast<double>(q);
                        }
                    });
}

}  // namespace l2aed
