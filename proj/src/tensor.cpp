#include "sblab/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

namespace sblab {

std::string fmt_g17(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) os << 'x';
        os << s[i];
    }
    os << ']';
    return os.str();
}

namespace {

int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int d : s) {
        if (d <= 0) throw DimensionError("tensor dimension must be positive, got shape " + shape_str(s));
        n *= d;
    }
    return n;
}

}  // namespace

Tensor::Tensor(Shape s) : shape(std::move(s)), data(static_cast<size_t>(shape_numel(shape)), 0.0) {}

Tensor Tensor::full(Shape s, double v) {
    Tensor t(std::move(s));
    std::fill(t.data.begin(), t.data.end(), v);
    return t;
}

Tensor Tensor::from(Shape s, std::vector<double> values) {
    if (shape_numel(s) != static_cast<int64_t>(values.size()))
        throw DimensionError("tensor data length " + std::to_string(values.size()) +
                             " does not match shape " + shape_str(s));
    Tensor t;
    t.shape = std::move(s);
    t.data = std::move(values);
    return t;
}

bool Tensor::all_finite() const {
    for (double v : data)
        if (!std::isfinite(v)) return false;
    return true;
}

int Tape::check(Val v) const {
    if (v.id < 0 || v.id >= static_cast<int>(nodes_.size()))
        throw ContractError("tape value handle is not from this tape");
    return v.id;
}

Val Tape::push(Tensor value, bool needs_grad, std::function<void(Tape&)> bw) {
    Node n;
    n.grad.assign(value.data.size(), 0.0);
    n.value = std::move(value);
    n.needs_grad = needs_grad;
    n.backward = std::move(bw);
    nodes_.push_back(std::move(n));
    return Val{static_cast<int>(nodes_.size()) - 1};
}

Val Tape::leaf(Parameter& p) {
    Val v = push(p.tensor, true, nullptr);
    nodes_.back().param = &p;
    return v;
}

Val Tape::watch(Tensor& t) {
    Val v = push(t, true, nullptr);
    nodes_.back().watched = &t;
    return v;
}

Val Tape::constant(Tensor t) { return push(std::move(t), false, nullptr); }

double Tape::scalar_value(Val v) const {
    const Tensor& t = value(v);
    if (t.numel() != 1) throw ContractError("expected scalar, got shape " + shape_str(t.shape));
    return t.data[0];
}

Val Tape::add(Val a, Val b) {
    {
        const Tensor& ta = node(a).value;
        const Tensor& tb = node(b).value;
        if (ta.shape != tb.shape)
            throw DimensionError("add: shape mismatch " + shape_str(ta.shape) + " vs " +
                                 shape_str(tb.shape));
    }
    Tensor out = node(a).value;
    {
        const Tensor& tb = node(b).value;
        for (size_t i = 0; i < out.data.size(); ++i) out.data[i] += tb.data[i];
    }
    bool ng = node(a).needs_grad || node(b).needs_grad;
    Val o = push(std::move(out), ng, nullptr);
    int ia = a.id, ib = b.id, io = o.id;
    node(o).backward = [ia, ib, io](Tape& t) {
        const auto& g = t.nodes_[io].grad;
        if (t.nodes_[ia].needs_grad) {
            auto& ga = t.nodes_[ia].grad;
            for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        }
        if (t.nodes_[ib].needs_grad) {
            auto& gb = t.nodes_[ib].grad;
            for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
        }
    };
    return o;
}

Val Tape::sub(Val a, Val b) {
    {
        const Tensor& ta = node(a).value;
        const Tensor& tb = node(b).value;
        if (ta.shape != tb.shape)
            throw DimensionError("sub: shape mismatch " + shape_str(ta.shape) + " vs " +
                                 shape_str(tb.shape));
    }
    Tensor out = node(a).value;
    {
        const Tensor& tb = node(b).value;
        for (size_t i = 0; i < out.data.size(); ++i) out.data[i] -= tb.data[i];
    }
    bool ng = node(a).needs_grad || node(b).needs_grad;
    Val o = push(std::move(out), ng, nullptr);
    int ia = a.id, ib = b.id, io = o.id;
    node(o).backward = [ia, ib, io](Tape& t) {
        const auto& g = t.nodes_[io].grad;
        if (t.nodes_[ia].needs_grad) {
            auto& ga = t.nodes_[ia].grad;
            for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        }
        if (t.nodes_[ib].needs_grad) {
            auto& gb = t.nodes_[ib].grad;
            for (size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
        }
    };
    return o;
}

Val Tape::mul(Val a, Val b) {
    {
        const Tensor& ta = node(a).value;
        const Tensor& tb = node(b).value;
        if (ta.shape != tb.shape)
            throw DimensionError("mul: shape mismatch " + shape_str(ta.shape) + " vs " +
                                 shape_str(tb.shape));
    }
    Tensor out = node(a).value;
    {
        const Tensor& tb = node(b).value;
        for (size_t i = 0; i < out.data.size(); ++i) out.data[i] *= tb.data[i];
    }
    bool ng = node(a).needs_grad || node(b).needs_grad;
    Val o = push(std::move(out), ng, nullptr);
    int ia = a.id, ib = b.id, io = o.id;
    node(o).backward = [ia, ib, io](Tape& t) {
        const auto& g = t.nodes_[io].grad;
        if (t.nodes_[ia].needs_grad) {
            auto& ga = t.nodes_[ia].grad;
            const auto& vb = t.nodes_[ib].value.data;
            for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * vb[i];
        }
        if (t.nodes_[ib].needs_grad) {
            auto& gb = t.nodes_[ib].grad;
            const auto& va = t.nodes_[ia].value.data;
            for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * va[i];
        }
    };
    return o;
}

Val Tape::scale(Val a, double c) {
    Tensor out = node(a).value;
    for (double& v : out.data) v *= c;
    Val o = push(std::move(out), node(a).needs_grad, nullptr);
    int ia = a.id, io = o.id;
    node(o).backward = [ia, io, c](Tape& t) {
        if (!t.nodes_[ia].needs_grad) return;
        const auto& g = t.nodes_[io].grad;
        auto& ga = t.nodes_[ia].grad;
        for (size_t i = 0; i < g.size(); ++i) ga[i] += c * g[i];
    };
    return o;
}

Val Tape::relu(Val x) {
    Tensor out = node(x).value;
    for (double v : out.data) {
        double m = std::fabs(v);
        if (m < min_relu_margin_) min_relu_margin_ = m;
    }
    for (double& v : out.data) v = v > 0.0 ? v : 0.0;
    Val o = push(std::move(out), node(x).needs_grad, nullptr);
    int ix = x.id, io = o.id;
    node(o).backward = [ix, io](Tape& t) {
        if (!t.nodes_[ix].needs_grad) return;
        const auto& g = t.nodes_[io].grad;
        const auto& vx = t.nodes_[ix].value.data;
        auto& gx = t.nodes_[ix].grad;
        // Subgradient 0 at exactly 0.
        for (size_t i = 0; i < g.size(); ++i)
            if (vx[i] > 0.0) gx[i] += g[i];
    };
    return o;
}

Val Tape::sum(Val x) {
    double s = 0.0;
    for (double v : node(x).value.data) s += v;
    Val o = push(Tensor::scalar(s), node(x).needs_grad, nullptr);
    int ix = x.id, io = o.id;
    node(o).backward = [ix, io](Tape& t) {
        if (!t.nodes_[ix].needs_grad) return;
        double g = t.nodes_[io].grad[0];
        for (double& gi : t.nodes_[ix].grad) gi += g;
    };
    return o;
}

Val Tape::mean(Val x) {
    const auto& d = node(x).value.data;
    double s = 0.0;
    for (double v : d) s += v;
    double inv = 1.0 / static_cast<double>(d.size());
    Val o = push(Tensor::scalar(s * inv), node(x).needs_grad, nullptr);
    int ix = x.id, io = o.id;
    node(o).backward = [ix, io, inv](Tape& t) {
        if (!t.nodes_[ix].needs_grad) return;
        double g = t.nodes_[io].grad[0] * inv;
        for (double& gi : t.nodes_[ix].grad) gi += g;
    };
    return o;
}

Val Tape::mean_hw(Val x) {
    const Tensor& tx = node(x).value;
    if (tx.rank() != 3)
        throw DimensionError("mean_hw: expected rank-3 tensor, got " + shape_str(tx.shape));
    int c = tx.shape[0], h = tx.shape[1], w = tx.shape[2];
    Tensor out({c});
    double inv = 1.0 / (static_cast<double>(h) * w);
    for (int ci = 0; ci < c; ++ci) {
        double s = 0.0;
        const double* p = tx.data.data() + static_cast<size_t>(ci) * h * w;
        for (int i = 0; i < h * w; ++i) s += p[i];
        out.at(ci) = s * inv;
    }
    Val o = push(std::move(out), node(x).needs_grad, nullptr);
    int ix = x.id, io = o.id;
    node(o).backward = [ix, io, c, h, w, inv](Tape& t) {
        if (!t.nodes_[ix].needs_grad) return;
        const auto& g = t.nodes_[io].grad;
        auto& gx = t.nodes_[ix].grad;
        for (int ci = 0; ci < c; ++ci) {
            double gc = g[static_cast<size_t>(ci)] * inv;
            double* p = gx.data() + static_cast<size_t>(ci) * h * w;
            for (int i = 0; i < h * w; ++i) p[i] += gc;
        }
    };
    return o;
}

Val Tape::concat1d(std::span<const Val> parts) {
    if (parts.empty()) throw DimensionError("concat1d: no inputs");
    int total = 0;
    bool ng = false;
    for (Val p : parts) {
        const Tensor& tp = node(p).value;
        if (tp.rank() != 1)
            throw DimensionError("concat1d: expected rank-1 parts, got " + shape_str(tp.shape));
        total += tp.shape[0];
        ng = ng || node(p).needs_grad;
    }
    Tensor out({total});
    int off = 0;
    std::vector<int> ids;
    std::vector<int> offsets;
    for (Val p : parts) {
        const Tensor& tp = node(p).value;
        std::copy(tp.data.begin(), tp.data.end(), out.data.begin() + off);
        ids.push_back(p.id);
        offsets.push_back(off);
        off += tp.shape[0];
    }
    Val o = push(std::move(out), ng, nullptr);
    int io = o.id;
    node(o).backward = [ids, offsets, io](Tape& t) {
        const auto& g = t.nodes_[io].grad;
        for (size_t k = 0; k < ids.size(); ++k) {
            auto& n = t.nodes_[ids[k]];
            if (!n.needs_grad) continue;
            for (size_t i = 0; i < n.grad.size(); ++i) n.grad[i] += g[offsets[k] + i];
        }
    };
    return o;
}

Val Tape::stack_rows(std::span<const Val> rows) {
    if (rows.empty()) throw DimensionError("stack_rows: no inputs");
    int k = node(rows[0]).value.shape[0];
    bool ng = false;
    for (Val r : rows) {
        const Tensor& tr = node(r).value;
        if (tr.rank() != 1 || tr.shape[0] != k)
            throw DimensionError("stack_rows: rows must share rank-1 shape");
        ng = ng || node(r).needs_grad;
    }
    int b = static_cast<int>(rows.size());
    Tensor out({b, k});
    std::vector<int> ids;
    for (int i = 0; i < b; ++i) {
        const Tensor& tr = node(rows[i]).value;
        std::copy(tr.data.begin(), tr.data.end(), out.data.begin() + static_cast<size_t>(i) * k);
        ids.push_back(rows[i].id);
    }
    Val o = push(std::move(out), ng, nullptr);
    int io = o.id;
    node(o).backward = [ids, k, io](Tape& t) {
        const auto& g = t.nodes_[io].grad;
        for (size_t i = 0; i < ids.size(); ++i) {
            auto& n = t.nodes_[ids[i]];
            if (!n.needs_grad) continue;
            for (int j = 0; j < k; ++j) n.grad[j] += g[i * k + j];
        }
    };
    return o;
}

Val Tape::add_rowvec(Val m, Val v) {
    const Tensor& tm = node(m).value;
    const Tensor& tv = node(v).value;
    if (tm.rank() != 2 || tv.rank() != 1 || tm.shape[1] != tv.shape[0])
        throw DimensionError("add_rowvec: shape mismatch " + shape_str(tm.shape) + " vs " +
                             shape_str(tv.shape));
    int r = tm.shape[0], c = tm.shape[1];
    Tensor out = tm;
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) out.at(i, j) += tv.at(j);
    bool ng = node(m).needs_grad || node(v).needs_grad;
    Val o = push(std::move(out), ng, nullptr);
    int im = m.id, iv = v.id, io = o.id;
    node(o).backward = [im, iv, io, r, c](Tape& t) {
        const auto& g = t.nodes_[io].grad;
        if (t.nodes_[im].needs_grad) {
            auto& gm = t.nodes_[im].grad;
            for (size_t i = 0; i < g.size(); ++i) gm[i] += g[i];
        }
        if (t.nodes_[iv].needs_grad) {
            auto& gv = t.nodes_[iv].grad;
            for (int i = 0; i < r; ++i)
                for (int j = 0; j < c; ++j) gv[j] += g[static_cast<size_t>(i) * c + j];
        }
    };
    return o;
}

Val Tape::reshape(Val x, Shape new_shape) {
    const Tensor& tx = node(x).value;
    Tensor out = Tensor::from(std::move(new_shape), tx.data);  // throws on numel mismatch
    Val o = push(std::move(out), node(x).needs_grad, nullptr);
    int ix = x.id, io = o.id;
    node(o).backward = [ix, io](Tape& t) {
        if (!t.nodes_[ix].needs_grad) return;
        const auto& g = t.nodes_[io].grad;
        auto& gx = t.nodes_[ix].grad;
        for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    };
    return o;
}

Val Tape::matmul(Val a, Val b) {
    const Tensor& ta = node(a).value;
    const Tensor& tb = node(b).value;
    if (ta.rank() != 2 || tb.rank() != 2 || ta.shape[1] != tb.shape[0])
        throw DimensionError("matmul: shape mismatch " + shape_str(ta.shape) + " vs " +
                             shape_str(tb.shape));
    int m = ta.shape[0], k = ta.shape[1], n = tb.shape[1];
    Tensor out({m, n});
    for (int i = 0; i < m; ++i) {
        const double* arow = ta.data.data() + static_cast<size_t>(i) * k;
        double* orow = out.data.data() + static_cast<size_t>(i) * n;
        for (int p = 0; p < k; ++p) {
            double av = arow[p];
            if (av == 0.0) continue;
            const double* brow = tb.data.data() + static_cast<size_t>(p) * n;
            for (int j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
    }
    bool ng = node(a).needs_grad || node(b).needs_grad;
    Val o = push(std::move(out), ng, nullptr);
    int ia = a.id, ib = b.id, io = o.id;
    node(o).backward = [ia, ib, io, m, k, n](Tape& t) {
        const auto& g = t.nodes_[io].grad;
        if (t.nodes_[ia].needs_grad) {
            // dA = g . B^T
            auto& ga = t.nodes_[ia].grad;
            const auto& vb = t.nodes_[ib].value.data;
            for (int i = 0; i < m; ++i)
                for (int p = 0; p < k; ++p) {
                    double s = 0.0;
                    const double* grow = g.data() + static_cast<size_t>(i) * n;
                    const double* brow = vb.data() + static_cast<size_t>(p) * n;
                    for (int j = 0; j < n; ++j) s += grow[j] * brow[j];
                    ga[static_cast<size_t>(i) * k + p] += s;
                }
        }
        if (t.nodes_[ib].needs_grad) {
            // dB = A^T . g
            auto& gb = t.nodes_[ib].grad;
            const auto& va = t.nodes_[ia].value.data;
            for (int p = 0; p < k; ++p)
                for (int i = 0; i < m; ++i) {
                    double av = va[static_cast<size_t>(i) * k + p];
                    if (av == 0.0) continue;
                    const double* grow = g.data() + static_cast<size_t>(i) * n;
                    double* brow = gb.data() + static_cast<size_t>(p) * n;
                    for (int j = 0; j < n; ++j) brow[j] += av * grow[j];
                }
        }
    };
    return o;
}

Val Tape::conv2d(Val input, Val kernels, Val bias) {
    const Tensor& ti = node(input).value;
    const Tensor& tk = node(kernels).value;
    const Tensor& tb = node(bias).value;
    if (ti.rank() != 3 || tk.rank() != 4 || tb.rank() != 1)
        throw DimensionError("conv2d: expected input [C,H,W], kernels [O,C,kh,kw], bias [O]; got " +
                             shape_str(ti.shape) + ", " + shape_str(tk.shape) + ", " +
                             shape_str(tb.shape));
    int cin = ti.shape[0], h = ti.shape[1], w = ti.shape[2];
    int cout = tk.shape[0], kh = tk.shape[2], kw = tk.shape[3];
    if (tk.shape[1] != cin)
        throw DimensionError("conv2d: kernel channels " + shape_str(tk.shape) +
                             " do not match input " + shape_str(ti.shape));
    if (tb.shape[0] != cout)
        throw DimensionError("conv2d: bias " + shape_str(tb.shape) + " does not match kernels " +
                             shape_str(tk.shape));
    if (kh > h || kw > w)
        throw DimensionError("conv2d: kernel " + shape_str(tk.shape) + " larger than input " +
                             shape_str(ti.shape));
    int oh = h - kh + 1, ow = w - kw + 1;
    Tensor out({cout, oh, ow});
    for (int oc = 0; oc < cout; ++oc) {
        double b = tb.at(oc);
        for (int oy = 0; oy < oh; ++oy)
            for (int ox = 0; ox < ow; ++ox) {
                double s = b;
                for (int ic = 0; ic < cin; ++ic) {
                    const double* in = ti.data.data() + (static_cast<size_t>(ic) * h + oy) * w + ox;
                    const double* kr =
                        tk.data.data() + ((static_cast<size_t>(oc) * cin + ic) * kh) * kw;
                    for (int ky = 0; ky < kh; ++ky) {
                        const double* irow = in + static_cast<size_t>(ky) * w;
                        const double* krow = kr + static_cast<size_t>(ky) * kw;
                        for (int kx = 0; kx < kw; ++kx) s += irow[kx] * krow[kx];
                    }
                }
                out.at(oc, oy, ox) = s;
            }
    }
    bool ng = node(input).needs_grad || node(kernels).needs_grad || node(bias).needs_grad;
    Val o = push(std::move(out), ng, nullptr);
    int ii = input.id, ik = kernels.id, ib2 = bias.id, io = o.id;
    node(o).backward = [ii, ik, ib2, io, cin, h, w, cout, kh, kw, oh, ow](Tape& t) {
        const auto& g = t.nodes_[io].grad;
        bool need_in = t.nodes_[ii].needs_grad;
        bool need_k = t.nodes_[ik].needs_grad;
        bool need_b = t.nodes_[ib2].needs_grad;
        const auto& vi = t.nodes_[ii].value.data;
        const auto& vk = t.nodes_[ik].value.data;
        auto& gi = t.nodes_[ii].grad;
        auto& gk = t.nodes_[ik].grad;
        auto& gb = t.nodes_[ib2].grad;
        for (int oc = 0; oc < cout; ++oc) {
            for (int oy = 0; oy < oh; ++oy)
                for (int ox = 0; ox < ow; ++ox) {
                    double go = g[(static_cast<size_t>(oc) * oh + oy) * ow + ox];
                    if (need_b) gb[oc] += go;
                    if (go == 0.0) continue;
                    for (int ic = 0; ic < cin; ++ic) {
                        size_t ibase = (static_cast<size_t>(ic) * h + oy) * w + ox;
                        size_t kbase = (static_cast<size_t>(oc) * cin + ic) * kh * kw;
                        for (int ky = 0; ky < kh; ++ky)
                            for (int kx = 0; kx < kw; ++kx) {
                                size_t ipos = ibase + static_cast<size_t>(ky) * w + kx;
                                size_t kpos = kbase + static_cast<size_t>(ky) * kw + kx;
                                if (need_k) gk[kpos] += go * vi[ipos];
                                if (need_in) gi[ipos] += go * vk[kpos];
                            }
                    }
                }
        }
    };
    return o;
}

void log_softmax_inplace(std::span<double> row) {
    double m = -std::numeric_limits<double>::infinity();
    for (double v : row) m = std::max(m, v);
    double s = 0.0;
    for (double v : row) s += std::exp(v - m);
    double lse = m + std::log(s);
    for (double& v : row) v -= lse;
}

double entropy(std::span<const double> dist) {
    double h = 0.0;
    for (double q : dist) h -= q * std::log(std::max(q, 1e-12));
    return h;
}

namespace {

// d logsoftmax: g_in = g - exp(out) * sum(g), applied per row.
void log_softmax_backward_row(const double* out, const double* g, double* gin, int k) {
    double gs = 0.0;
    for (int i = 0; i < k; ++i) gs += g[i];
    for (int i = 0; i < k; ++i) gin[i] += g[i] - std::exp(out[i]) * gs;
}

}  // namespace

Val Tape::log_softmax(Val logits) {
    const Tensor& tl = node(logits).value;
    if (tl.rank() != 1 || tl.shape[0] < 1)
        throw DimensionError("log_softmax: expected non-empty rank-1 tensor, got " +
                             shape_str(tl.shape));
    Tensor out = tl;
    log_softmax_inplace(out.data);
    Val o = push(std::move(out), node(logits).needs_grad, nullptr);
    int il = logits.id, io = o.id;
    int k = node(o).value.shape[0];
    node(o).backward = [il, io, k](Tape& t) {
        if (!t.nodes_[il].needs_grad) return;
        log_softmax_backward_row(t.nodes_[io].value.data.data(), t.nodes_[io].grad.data(),
                                 t.nodes_[il].grad.data(), k);
    };
    return o;
}

Val Tape::log_softmax_rows(Val logits) {
    const Tensor& tl = node(logits).value;
    if (tl.rank() != 2 || tl.shape[1] < 1)
        throw DimensionError("log_softmax_rows: expected rank-2 tensor, got " + shape_str(tl.shape));
    int b = tl.shape[0], k = tl.shape[1];
    Tensor out = tl;
    for (int i = 0; i < b; ++i)
        log_softmax_inplace(std::span<double>(out.data.data() + static_cast<size_t>(i) * k, k));
    Val o = push(std::move(out), node(logits).needs_grad, nullptr);
    int il = logits.id, io = o.id;
    node(o).backward = [il, io, b, k](Tape& t) {
        if (!t.nodes_[il].needs_grad) return;
        for (int i = 0; i < b; ++i) {
            size_t off = static_cast<size_t>(i) * k;
            log_softmax_backward_row(t.nodes_[io].value.data.data() + off,
                                     t.nodes_[io].grad.data() + off,
                                     t.nodes_[il].grad.data() + off, k);
        }
    };
    return o;
}

Val Tape::nll_rows(Val logprobs, std::vector<int> labels) {
    const Tensor& tl = node(logprobs).value;
    if (tl.rank() != 2) throw DimensionError("nll_rows: expected rank-2 log-probs");
    int b = tl.shape[0], k = tl.shape[1];
    if (static_cast<int>(labels.size()) != b)
        throw DimensionError("nll_rows: batch " + std::to_string(b) + " vs labels " +
                             std::to_string(labels.size()));
    double s = 0.0;
    for (int i = 0; i < b; ++i) {
        int y = labels[i];
        if (y < 0 || y >= k) throw ContractError("nll_rows: label out of range");
        s -= tl.at(i, y);
    }
    double inv = 1.0 / b;
    Val o = push(Tensor::scalar(s * inv), node(logprobs).needs_grad, nullptr);
    int il = logprobs.id, io = o.id;
    node(o).backward = [il, io, labels = std::move(labels), k, inv](Tape& t) {
        if (!t.nodes_[il].needs_grad) return;
        double g = t.nodes_[io].grad[0] * inv;
        auto& gl = t.nodes_[il].grad;
        for (size_t i = 0; i < labels.size(); ++i) gl[i * k + labels[i]] -= g;
    };
    return o;
}

Val Tape::soft_ce_rows(Val logprobs, Tensor weights) {
    const Tensor& tl = node(logprobs).value;
    if (tl.rank() != 2 || weights.shape != tl.shape)
        throw DimensionError("soft_ce_rows: weights " + shape_str(weights.shape) +
                             " do not match log-probs " + shape_str(tl.shape));
    int b = tl.shape[0];
    double s = 0.0;
    for (size_t i = 0; i < tl.data.size(); ++i) s -= weights.data[i] * tl.data[i];
    double inv = 1.0 / b;
    Val o = push(Tensor::scalar(s * inv), node(logprobs).needs_grad, nullptr);
    int il = logprobs.id, io = o.id;
    node(o).backward = [il, io, w = std::move(weights.data), inv](Tape& t) {
        if (!t.nodes_[il].needs_grad) return;
        double g = t.nodes_[io].grad[0] * inv;
        auto& gl = t.nodes_[il].grad;
        for (size_t i = 0; i < w.size(); ++i) gl[i] -= g * w[i];
    };
    return o;
}

Val Tape::entropy_rows(Val logprobs) {
    const Tensor& tl = node(logprobs).value;
    if (tl.rank() != 2) throw DimensionError("entropy_rows: expected rank-2 log-probs");
    int b = tl.shape[0];
    double s = 0.0;
    for (double lp : tl.data) s -= std::exp(lp) * lp;
    double inv = 1.0 / b;
    Val o = push(Tensor::scalar(s * inv), node(logprobs).needs_grad, nullptr);
    int il = logprobs.id, io = o.id;
    node(o).backward = [il, io, inv](Tape& t) {
        if (!t.nodes_[il].needs_grad) return;
        double g = t.nodes_[io].grad[0] * inv;
        auto& gl = t.nodes_[il].grad;
        const auto& lp = t.nodes_[il].value.data;
        // d/dlp [-exp(lp) lp] = -exp(lp) (lp + 1)
        for (size_t i = 0; i < lp.size(); ++i) gl[i] -= g * std::exp(lp[i]) * (lp[i] + 1.0);
    };
    return o;
}

Val Tape::grad_reverse(Val x, double lambda) {
    if (lambda < 0.0)
        throw ConfigError("grad_reverse: lambda must be non-negative, got " + fmt_g17(lambda));
    Tensor out = node(x).value;  // bit-exact copy
    Val o = push(std::move(out), node(x).needs_grad, nullptr);
    int ix = x.id, io = o.id;
    node(o).backward = [ix, io, lambda](Tape& t) {
        if (!t.nodes_[ix].needs_grad) return;
        const auto& g = t.nodes_[io].grad;
        auto& gx = t.nodes_[ix].grad;
        for (size_t i = 0; i < g.size(); ++i) gx[i] += -lambda * g[i];
    };
    return o;
}

void Tape::backward(Val scalar_loss) {
    const Tensor& loss = value(scalar_loss);
    if (loss.numel() != 1)
        throw ContractError("backward: loss must be scalar, got shape " + shape_str(loss.shape));
    if (backward_ran_) {
        for (Node& n : nodes_) std::fill(n.grad.begin(), n.grad.end(), 0.0);
    }
    backward_ran_ = true;
    nodes_[check(scalar_loss)].grad[0] = 1.0;
    for (int i = static_cast<int>(nodes_.size()) - 1; i >= 0; --i) {
        Node& n = nodes_[i];
        if (n.backward && n.needs_grad) n.backward(*this);
    }
    // Flush leaf gradients into their owners; accumulation across repeated
    // backward calls is additive by contract.
    for (Node& n : nodes_) {
        std::vector<double>* dst = nullptr;
        if (n.param) {
            if (!n.param->tensor.grad) n.param->tensor.grad.emplace(n.grad.size(), 0.0);
            dst = &*n.param->tensor.grad;
        } else if (n.watched) {
            if (!n.watched->grad) n.watched->grad.emplace(n.grad.size(), 0.0);
            dst = &*n.watched->grad;
        }
        if (dst) {
            for (size_t i = 0; i < n.grad.size(); ++i) (*dst)[i] += n.grad[i];
        }
    }
}

void sgd_step(std::span<Parameter* const> params, double lr, double momentum,
              double weight_decay) {
    for (Parameter* p : params) {
        if (!p->tensor.grad)
            throw ContractError("sgd_step: parameter '" + p->name + "' has no gradient");
        if (p->tensor.grad->size() != p->tensor.data.size())
            throw ContractError("sgd_step: gradient size mismatch for '" + p->name + "'");
    }
    for (Parameter* p : params) {
        auto& data = p->tensor.data;
        const auto& g = *p->tensor.grad;
        auto& buf = p->momentum;
        for (size_t i = 0; i < data.size(); ++i) {
            buf[i] = momentum * buf[i] + g[i] + weight_decay * data[i];
            data[i] -= lr * buf[i];
        }
        p->tensor.grad.reset();
    }
}

void glorot_init(Parameter& p, int fan_in, int fan_out, uint64_t seed) {
    double a = std::sqrt(6.0 / (static_cast<double>(fan_in) + fan_out));
    Rng rng(seed);
    for (double& v : p.tensor.data) v = rng.uniform(-a, a);
}

Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& x,
                        double eps) {
    Tensor g(x.shape);
    Tensor probe = x;
    for (size_t i = 0; i < x.data.size(); ++i) {
        double orig = probe.data[i];
        probe.data[i] = orig + eps;
        double fp = f(probe);
        probe.data[i] = orig - eps;
        double fm = f(probe);
        probe.data[i] = orig;
        g.data[i] = (fp - fm) / (2.0 * eps);
    }
    return g;
}

}  // namespace sblab
