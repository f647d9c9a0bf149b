#include "distillfss/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "distillfss/flops.hpp"

namespace distillfss::ops {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

ConstMapMat cmap(const Tensor& t, int rows, int cols) { return {t.data(), rows, cols}; }
MapMat mmap(Tensor& t, int rows, int cols) { return {t.data(), rows, cols}; }

void require_rank(const Var& x, int rank, const char* op) {
    if (x.value().rank() != rank) {
        throw std::invalid_argument(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                                    shape_str(x.shape()));
    }
}

void count(std::uint64_t n) { flops::add(flops::current(), n); }

// Column matrix (C*k*k) x (rows*Wo) with replicate padding, covering output
// rows [y0, y1).
Tensor im2col_rows(const Tensor& x, int k, int stride, int y0, int y1, int wo) {
    const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
    const int pad = k / 2;
    Tensor cols({c * k * k, (y1 - y0) * wo});
    double* out = cols.data();
    for (int ch = 0; ch < c; ++ch) {
        for (int ky = 0; ky < k; ++ky) {
            for (int kx = 0; kx < k; ++kx) {
                for (int oy = y0; oy < y1; ++oy) {
                    const int sy = std::clamp(oy * stride + ky - pad, 0, h - 1);
                    const double* row = x.data() + (static_cast<std::size_t>(ch) * h + sy) * w;
                    for (int ox = 0; ox < wo; ++ox) {
                        const int sx = std::clamp(ox * stride + kx - pad, 0, w - 1);
                        *out++ = row[sx];
                    }
                }
            }
        }
    }
    return cols;
}

Tensor im2col(const Tensor& x, int k, int stride, int ho, int wo) { return im2col_rows(x, k, stride, 0, ho, wo); }

// Column workspace cap, in doubles, for convs that keep no graph.
constexpr std::size_t kColumnBudget = 32768;

void col2im_add(const Tensor& cols, Tensor& dx, int k, int stride, int ho, int wo) {
    const int c = dx.dim(0), h = dx.dim(1), w = dx.dim(2);
    const int pad = k / 2;
    const double* in = cols.data();
    for (int ch = 0; ch < c; ++ch) {
        for (int ky = 0; ky < k; ++ky) {
            for (int kx = 0; kx < k; ++kx) {
                for (int oy = 0; oy < ho; ++oy) {
                    const int sy = std::clamp(oy * stride + ky - pad, 0, h - 1);
                    double* row = dx.data() + (static_cast<std::size_t>(ch) * h + sy) * w;
                    for (int ox = 0; ox < wo; ++ox) {
                        const int sx = std::clamp(ox * stride + kx - pad, 0, w - 1);
                        row[sx] += *in++;
                    }
                }
            }
        }
    }
}

struct Interp {
    std::vector<int> lo, hi;
    std::vector<double> frac;
};

Interp interp_axis(int in, int out) {
    Interp r;
    r.lo.resize(out);
    r.hi.resize(out);
    r.frac.resize(out);
    const double ratio = static_cast<double>(in) / out;
    for (int i = 0; i < out; ++i) {
        double src = (i + 0.5) * ratio - 0.5;
        if (src < 0) src = 0;
        int i0 = static_cast<int>(src);
        if (i0 > in - 1) i0 = in - 1;
        const int i1 = std::min(i0 + 1, in - 1);
        r.lo[i] = i0;
        r.hi[i] = i1;
        r.frac[i] = src - i0;
    }
    return r;
}

}  // namespace

Var conv2d(const Var& x, const Var& weight, const Var& bias, int stride) {
    require_rank(x, 3, "conv2d");
    require_rank(weight, 4, "conv2d weight");
    const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
    const int o = weight.dim(0), k = weight.dim(2);
    if (weight.dim(1) != c) {
        throw std::invalid_argument("conv2d: input has " + std::to_string(c) + " channels, weight expects " +
                                    std::to_string(weight.dim(1)));
    }
    if (k % 2 == 0 || weight.dim(3) != k) throw std::invalid_argument("conv2d: kernel must be odd and square");
    if (bias.value().size() != static_cast<std::size_t>(o)) throw std::invalid_argument("conv2d: bias size mismatch");
    if (stride < 1) throw std::invalid_argument("conv2d: stride must be positive");

    const int ho = (h + stride - 1) / stride, wo = (w + stride - 1) / stride;
    const int ckk = c * k * k;
    const int npix = ho * wo;

    // 1x1 stride-1 convs need no column copy.
    const bool direct = (k == 1 && stride == 1);
    const bool keep = grad_enabled() && (x.requires_grad() || weight.requires_grad() || bias.requires_grad());

    Tensor y({o, ho, wo});
    auto ym = mmap(y, o, npix);
    auto wm = cmap(weight.value(), o, ckk);
    Tensor cols;
    if (direct) {
        ym.noalias() = wm * cmap(x.value(), ckk, npix);
    } else if (keep) {
        cols = im2col(x.value(), k, stride, ho, wo);
        ym.noalias() = wm * cmap(cols, ckk, npix);
    } else {
        // Nothing is saved for backward, so build the columns a band of rows at a time.
        const int band = std::max<int>(1, static_cast<int>(kColumnBudget / (static_cast<std::size_t>(ckk) * wo)));
        for (int y0 = 0; y0 < ho; y0 += band) {
            const int y1 = std::min(ho, y0 + band);
            Tensor part = im2col_rows(x.value(), k, stride, y0, y1, wo);
            ym.middleCols(y0 * wo, (y1 - y0) * wo).noalias() = wm * cmap(part, ckk, (y1 - y0) * wo);
        }
    }
    const double* b = bias.value().data();
    for (int oc = 0; oc < o; ++oc) ym.row(oc).array() += b[oc];
    count(2ULL * o * ckk * npix + static_cast<std::uint64_t>(o) * npix);

    if (!keep) return make_result(std::move(y), {}, nullptr);

    auto saved_cols = std::make_shared<Tensor>(direct ? Tensor() : std::move(cols));
    return make_result(std::move(y), {x, weight, bias},
                       [=](const Tensor& g, std::span<const NodePtr> p) {
                           const Tensor& xcols = direct ? p[0]->value : *saved_cols;
                           auto gm = cmap(g, o, npix);
                           if (p[1]->requires_grad) {
                               Tensor& gw = p[1]->grad_buffer();
                               mmap(gw, o, ckk).noalias() += gm * cmap(xcols, ckk, npix).transpose();
                           }
                           if (p[2]->requires_grad) {
                               Tensor& gb = p[2]->grad_buffer();
                               for (int oc = 0; oc < o; ++oc) gb[oc] += gm.row(oc).sum();
                           }
                           if (p[0]->requires_grad) {
                               Tensor dcols({ckk, npix});
                               mmap(dcols, ckk, npix).noalias() = cmap(p[1]->value, o, ckk).transpose() * gm;
                               Tensor& gx = p[0]->grad_buffer();
                               if (direct) {
                                   for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += dcols[i];
                               } else {
                                   col2im_add(dcols, gx, k, stride, ho, wo);
                               }
                           }
                       });
}

Var relu(const Var& x) {
    Tensor y = x.value();
    for (double& v : y.values()) v = v > 0.0 ? v : 0.0;
    return make_result(std::move(y), {x}, [](const Tensor& g, std::span<const NodePtr> p) {
        Tensor& gx = p[0]->grad_buffer();
        const Tensor& xv = p[0]->value;
        for (std::size_t i = 0; i < gx.size(); ++i)
            if (xv[i] > 0.0) gx[i] += g[i];
    });
}

Var sigmoid(const Var& x) {
    Tensor y = x.value();
    for (double& v : y.values()) v = 1.0 / (1.0 + std::exp(-v));
    auto out = make_result(std::move(y), {x}, nullptr);
    if (out.requires_grad()) {
        // Backward reads the output value through a weak handle to avoid a cycle.
        std::weak_ptr<Node> self = out.node();
        out.node()->backward = [self](const Tensor& g, std::span<const NodePtr> p) {
            auto s = self.lock();
            Tensor& gx = p[0]->grad_buffer();
            for (std::size_t i = 0; i < gx.size(); ++i) {
                const double yv = s->value[i];
                gx[i] += g[i] * yv * (1.0 - yv);
            }
        };
    }
    return out;
}

Var add(const Var& a, const Var& b) {
    if (!a.value().same_shape(b.value())) {
        throw std::invalid_argument("add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
    Tensor y = a.value();
    for (std::size_t i = 0; i < y.size(); ++i) y[i] += b.value()[i];
    return make_result(std::move(y), {a, b}, [](const Tensor& g, std::span<const NodePtr> p) {
        if (p[0]->requires_grad) p[0]->accumulate(g);
        if (p[1]->requires_grad) p[1]->accumulate(g);
    });
}

Var add_constant(const Var& x, const Tensor& c) {
    if (x.value().size() != c.size()) {
        throw std::invalid_argument("add_constant: shape mismatch " + shape_str(x.shape()) + " vs " +
                                    shape_str(c.shape()));
    }
    Tensor y = x.value();
    for (std::size_t i = 0; i < y.size(); ++i) y[i] += c[i];
    return make_result(std::move(y), {x}, [](const Tensor& g, std::span<const NodePtr> p) { p[0]->accumulate(g); });
}

Var scale(const Var& x, double s) {
    Tensor y = x.value();
    for (double& v : y.values()) v *= s;
    return make_result(std::move(y), {x},
                       [s](const Tensor& g, std::span<const NodePtr> p) { p[0]->accumulate_scaled(g, s); });
}

Var concat_channels(std::span<const Var> xs) {
    if (xs.empty()) throw std::invalid_argument("concat_channels: no inputs");
    const int h = xs[0].dim(1), w = xs[0].dim(2);
    int total = 0;
    for (const auto& x : xs) {
        require_rank(x, 3, "concat_channels");
        if (x.dim(1) != h || x.dim(2) != w) {
            throw std::invalid_argument("concat_channels: spatial mismatch " + shape_str(xs[0].shape()) + " vs " +
                                        shape_str(x.shape()));
        }
        total += x.dim(0);
    }
    Tensor y({total, h, w});
    std::vector<std::size_t> offsets;
    std::size_t off = 0;
    for (const auto& x : xs) {
        offsets.push_back(off);
        std::copy(x.value().data(), x.value().data() + x.value().size(), y.data() + off);
        off += x.value().size();
    }
    return make_result(std::move(y), std::vector<Var>(xs.begin(), xs.end()),
                       [offsets](const Tensor& g, std::span<const NodePtr> p) {
                           for (std::size_t i = 0; i < p.size(); ++i) {
                               if (!p[i]->requires_grad) continue;
                               Tensor& gx = p[i]->grad_buffer();
                               const double* src = g.data() + offsets[i];
                               for (std::size_t j = 0; j < gx.size(); ++j) gx[j] += src[j];
                           }
                       });
}

Var concat_rows(std::span<const Var> xs) {
    if (xs.empty()) throw std::invalid_argument("concat_rows: no inputs");
    const int cols = xs[0].dim(1);
    int rows = 0;
    for (const auto& x : xs) {
        require_rank(x, 2, "concat_rows");
        if (x.dim(1) != cols) {
            throw std::invalid_argument("concat_rows: column mismatch " + shape_str(xs[0].shape()) + " vs " +
                                        shape_str(x.shape()));
        }
        rows += x.dim(0);
    }
    if (xs.size() == 1) return xs[0];
    Tensor y({rows, cols});
    std::vector<std::size_t> offsets;
    std::size_t off = 0;
    for (const auto& x : xs) {
        offsets.push_back(off);
        std::copy(x.value().data(), x.value().data() + x.value().size(), y.data() + off);
        off += x.value().size();
    }
    return make_result(std::move(y), std::vector<Var>(xs.begin(), xs.end()),
                       [offsets](const Tensor& g, std::span<const NodePtr> p) {
                           for (std::size_t i = 0; i < p.size(); ++i) {
                               if (!p[i]->requires_grad) continue;
                               Tensor& gx = p[i]->grad_buffer();
                               const double* src = g.data() + offsets[i];
                               for (std::size_t j = 0; j < gx.size(); ++j) gx[j] += src[j];
                           }
                       });
}

Var mean_of(std::span<const Var> xs) {
    if (xs.empty()) throw std::invalid_argument("mean_of: no inputs");
    if (xs.size() == 1) return xs[0];
    Tensor y = xs[0].value();
    for (std::size_t i = 1; i < xs.size(); ++i) {
        if (!xs[i].value().same_shape(y)) throw std::invalid_argument("mean_of: shape mismatch");
        for (std::size_t j = 0; j < y.size(); ++j) y[j] += xs[i].value()[j];
    }
    const double inv = 1.0 / static_cast<double>(xs.size());
    for (double& v : y.values()) v *= inv;
    return make_result(std::move(y), std::vector<Var>(xs.begin(), xs.end()),
                       [inv](const Tensor& g, std::span<const NodePtr> p) {
                           for (const auto& n : p)
                               if (n->requires_grad) n->accumulate_scaled(g, inv);
                       });
}

Var upsample_bilinear(const Var& x, int out_h, int out_w) {
    require_rank(x, 3, "upsample_bilinear");
    const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
    if (h == out_h && w == out_w) return x;
    auto ry = std::make_shared<Interp>(interp_axis(h, out_h));
    auto rx = std::make_shared<Interp>(interp_axis(w, out_w));
    Tensor y({c, out_h, out_w});
    const Tensor& xv = x.value();
    for (int ch = 0; ch < c; ++ch) {
        for (int oy = 0; oy < out_h; ++oy) {
            const double fy = ry->frac[oy];
            for (int ox = 0; ox < out_w; ++ox) {
                const double fx = rx->frac[ox];
                const double v00 = xv.at(ch, ry->lo[oy], rx->lo[ox]);
                const double v01 = xv.at(ch, ry->lo[oy], rx->hi[ox]);
                const double v10 = xv.at(ch, ry->hi[oy], rx->lo[ox]);
                const double v11 = xv.at(ch, ry->hi[oy], rx->hi[ox]);
                y.at(ch, oy, ox) = (1 - fy) * ((1 - fx) * v00 + fx * v01) + fy * ((1 - fx) * v10 + fx * v11);
            }
        }
    }
    count(8ULL * c * out_h * out_w);
    return make_result(std::move(y), {x}, [=](const Tensor& g, std::span<const NodePtr> p) {
        Tensor& gx = p[0]->grad_buffer();
        for (int ch = 0; ch < c; ++ch) {
            for (int oy = 0; oy < out_h; ++oy) {
                const double fy = ry->frac[oy];
                for (int ox = 0; ox < out_w; ++ox) {
                    const double fx = rx->frac[ox];
                    const double go = g.at(ch, oy, ox);
                    gx.at(ch, ry->lo[oy], rx->lo[ox]) += go * (1 - fy) * (1 - fx);
                    gx.at(ch, ry->lo[oy], rx->hi[ox]) += go * (1 - fy) * fx;
                    gx.at(ch, ry->hi[oy], rx->lo[ox]) += go * fy * (1 - fx);
                    gx.at(ch, ry->hi[oy], rx->hi[ox]) += go * fy * fx;
                }
            }
        }
    });
}

Var reshape(const Var& x, Shape shape) {
    Tensor y = x.value().reshaped(std::move(shape));
    return make_result(std::move(y), {x}, [](const Tensor& g, std::span<const NodePtr> p) { p[0]->accumulate(g); });
}

Var map_to_tokens(const Var& x) {
    require_rank(x, 3, "map_to_tokens");
    const int c = x.dim(0), n = x.dim(1) * x.dim(2);
    Tensor y({n, c});
    mmap(y, n, c) = cmap(x.value(), c, n).transpose();
    return make_result(std::move(y), {x}, [c, n](const Tensor& g, std::span<const NodePtr> p) {
        Tensor& gx = p[0]->grad_buffer();
        mmap(gx, c, n) += cmap(g, n, c).transpose();
    });
}

Var matmul(const Var& a, const Var& b) {
    require_rank(a, 2, "matmul");
    require_rank(b, 2, "matmul");
    const int n = a.dim(0), k = a.dim(1), m = b.dim(1);
    if (b.dim(0) != k) {
        throw std::invalid_argument("matmul: inner dimension mismatch " + shape_str(a.shape()) + " x " +
                                    shape_str(b.shape()));
    }
    Tensor y({n, m});
    mmap(y, n, m).noalias() = cmap(a.value(), n, k) * cmap(b.value(), k, m);
    count(2ULL * n * k * m);
    return make_result(std::move(y), {a, b}, [n, k, m](const Tensor& g, std::span<const NodePtr> p) {
        auto gm = cmap(g, n, m);
        if (p[0]->requires_grad) mmap(p[0]->grad_buffer(), n, k).noalias() += gm * cmap(p[1]->value, k, m).transpose();
        if (p[1]->requires_grad) mmap(p[1]->grad_buffer(), k, m).noalias() += cmap(p[0]->value, n, k).transpose() * gm;
    });
}

Var matmul_nt(const Var& a, const Var& b) {
    require_rank(a, 2, "matmul_nt");
    require_rank(b, 2, "matmul_nt");
    const int n = a.dim(0), k = a.dim(1), m = b.dim(0);
    if (b.dim(1) != k) {
        throw std::invalid_argument("matmul_nt: inner dimension mismatch " + shape_str(a.shape()) + " x " +
                                    shape_str(b.shape()) + "^T");
    }
    Tensor y({n, m});
    mmap(y, n, m).noalias() = cmap(a.value(), n, k) * cmap(b.value(), m, k).transpose();
    count(2ULL * n * k * m);
    return make_result(std::move(y), {a, b}, [n, k, m](const Tensor& g, std::span<const NodePtr> p) {
        auto gm = cmap(g, n, m);
        if (p[0]->requires_grad) mmap(p[0]->grad_buffer(), n, k).noalias() += gm * cmap(p[1]->value, m, k);
        if (p[1]->requires_grad) mmap(p[1]->grad_buffer(), m, k).noalias() += gm.transpose() * cmap(p[0]->value, n, k);
    });
}

Var softmax_rows(const Var& x) {
    require_rank(x, 2, "softmax_rows");
    const int n = x.dim(0), m = x.dim(1);
    Tensor y = x.value();
    for (int r = 0; r < n; ++r) {
        double* row = y.data() + static_cast<std::size_t>(r) * m;
        const double mx = *std::max_element(row, row + m);
        double s = 0.0;
        for (int j = 0; j < m; ++j) {
            row[j] = std::exp(row[j] - mx);
            s += row[j];
        }
        const double inv = 1.0 / s;
        for (int j = 0; j < m; ++j) row[j] *= inv;
    }
    count(4ULL * n * m);
    auto out = make_result(std::move(y), {x}, nullptr);
    if (out.requires_grad()) {
        std::weak_ptr<Node> self = out.node();
        out.node()->backward = [self, n, m](const Tensor& g, std::span<const NodePtr> p) {
            auto s = self.lock();
            Tensor& gx = p[0]->grad_buffer();
            for (int r = 0; r < n; ++r) {
                const std::size_t base = static_cast<std::size_t>(r) * m;
                double dot = 0.0;
                for (int j = 0; j < m; ++j) dot += g[base + j] * s->value[base + j];
                for (int j = 0; j < m; ++j) gx[base + j] += s->value[base + j] * (g[base + j] - dot);
            }
        };
    }
    return out;
}

Var sum_scalars(std::span<const Var> xs) {
    if (xs.empty()) throw std::invalid_argument("sum_scalars: no inputs");
    double s = 0.0;
    for (const auto& x : xs) {
        if (x.value().size() != 1) throw std::invalid_argument("sum_scalars: non-scalar input " + shape_str(x.shape()));
        s += x.value()[0];
    }
    return make_result(Tensor({1}, s), std::vector<Var>(xs.begin(), xs.end()),
                       [](const Tensor& g, std::span<const NodePtr> p) {
                           for (const auto& n : p)
                               if (n->requires_grad) n->grad_buffer()[0] += g[0];
                       });
}

Var mean_all(const Var& x) {
    const double inv = 1.0 / static_cast<double>(x.value().size());
    double s = 0.0;
    for (double v : x.value().values()) s += v;
    return make_result(Tensor({1}, s * inv), {x}, [inv](const Tensor& g, std::span<const NodePtr> p) {
        Tensor& gx = p[0]->grad_buffer();
        for (double& v : gx.values()) v += g[0] * inv;
    });
}

Tensor resize_nearest(const Tensor& x, int out_h, int out_w) {
    if (x.rank() != 3) throw std::invalid_argument("resize_nearest: expected C x H x W, got " + shape_str(x.shape()));
    const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
    Tensor y({c, out_h, out_w});
    for (int ch = 0; ch < c; ++ch) {
        for (int oy = 0; oy < out_h; ++oy) {
            const int sy = std::min(static_cast<int>(static_cast<long long>(oy) * h / out_h), h - 1);
            for (int ox = 0; ox < out_w; ++ox) {
                const int sx = std::min(static_cast<int>(static_cast<long long>(ox) * w / out_w), w - 1);
                y.at(ch, oy, ox) = x.at(ch, sy, sx);
            }
        }
    }
    return y;
}

}  // namespace distillfss::ops
