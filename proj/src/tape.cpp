#include "camspoof/tape.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

#include "camspoof/parallel.hpp"

namespace camspoof {

namespace {

constexpr double kLogFloor = 1e-12;  // keeps -ln(p) and the generic CE vjp finite

struct ConvDims {
    int n, c, h, w;
    int f, kh, kw;
    int pad_h, pad_w;
    int oh, ow;
};

ConvDims conv_dims(const Tensor& x, const Tensor& k, const Tensor& b, Padding padding) {
    if (x.rank() != 4 || k.rank() != 4) {
        throw std::invalid_argument("conv2d expects input [N,C,H,W] and kernel [F,C,kh,kw], got " +
                                    shape_to_string(x.shape()) + " and " +
                                    shape_to_string(k.shape()));
    }
    ConvDims d{};
    d.n = x.extent(0);
    d.c = x.extent(1);
    d.h = x.extent(2);
    d.w = x.extent(3);
    d.f = k.extent(0);
    d.kh = k.extent(2);
    d.kw = k.extent(3);
    if (k.extent(1) != d.c) {
        throw std::invalid_argument("conv2d channel mismatch between input " +
                                    shape_to_string(x.shape()) + " and kernel " +
                                    shape_to_string(k.shape()));
    }
    if (b.rank() != 1 || b.extent(0) != d.f) {
        throw std::invalid_argument("conv2d bias " + shape_to_string(b.shape()) +
                                    " does not match kernel " + shape_to_string(k.shape()));
    }
    if (padding == Padding::Same) {
        if (d.kh % 2 == 0 || d.kw % 2 == 0) {
            throw std::invalid_argument("conv2d same-padding requires odd kernel extents, got " +
                                        shape_to_string(k.shape()));
        }
        d.pad_h = (d.kh - 1) / 2;
        d.pad_w = (d.kw - 1) / 2;
        d.oh = d.h;
        d.ow = d.w;
    } else {
        d.pad_h = 0;
        d.pad_w = 0;
        d.oh = d.h - d.kh + 1;
        d.ow = d.w - d.kw + 1;
        if (d.oh <= 0 || d.ow <= 0) {
            throw std::invalid_argument("conv2d valid-padding kernel " +
                                        shape_to_string(k.shape()) + " exceeds input " +
                                        shape_to_string(x.shape()));
        }
    }
    return d;
}

// Unrolls one batch item into cols[c*kh*kw + ki*kw + kj][oh*ow], zero
// outside the padded border.
void im2col(const float* x, const ConvDims& d, float* cols) {
    const int spatial = d.oh * d.ow;
    for (int c = 0; c < d.c; ++c) {
        const float* plane = x + static_cast<std::int64_t>(c) * d.h * d.w;
        for (int ki = 0; ki < d.kh; ++ki) {
            for (int kj = 0; kj < d.kw; ++kj) {
                float* row = cols + (static_cast<std::int64_t>(c) * d.kh * d.kw +
                                     static_cast<std::int64_t>(ki) * d.kw + kj) *
                                        spatial;
                for (int oh = 0; oh < d.oh; ++oh) {
                    const int ih = oh - d.pad_h + ki;
                    float* out = row + static_cast<std::int64_t>(oh) * d.ow;
                    if (ih < 0 || ih >= d.h) {
                        std::fill(out, out + d.ow, 0.0f);
                        continue;
                    }
                    const float* in = plane + static_cast<std::int64_t>(ih) * d.w;
                    for (int ow = 0; ow < d.ow; ++ow) {
                        const int iw = ow - d.pad_w + kj;
                        out[ow] = (iw >= 0 && iw < d.w) ? in[iw] : 0.0f;
                    }
                }
            }
        }
    }
}

// Scatter-add of dcols back into one batch item.
void col2im_add(const float* dcols, const ConvDims& d, float* dx) {
    const int spatial = d.oh * d.ow;
    for (int c = 0; c < d.c; ++c) {
        float* plane = dx + static_cast<std::int64_t>(c) * d.h * d.w;
        for (int ki = 0; ki < d.kh; ++ki) {
            for (int kj = 0; kj < d.kw; ++kj) {
                const float* row = dcols + (static_cast<std::int64_t>(c) * d.kh * d.kw +
                                            static_cast<std::int64_t>(ki) * d.kw + kj) *
                                               spatial;
                for (int oh = 0; oh < d.oh; ++oh) {
                    const int ih = oh - d.pad_h + ki;
                    if (ih < 0 || ih >= d.h) continue;
                    float* out = plane + static_cast<std::int64_t>(ih) * d.w;
                    const float* in = row + static_cast<std::int64_t>(oh) * d.ow;
                    for (int ow = 0; ow < d.ow; ++ow) {
                        const int iw = ow - d.pad_w + kj;
                        if (iw >= 0 && iw < d.w) out[iw] += in[ow];
                    }
                }
            }
        }
    }
}

thread_local std::vector<float> tl_cols;

}  // namespace

NodeId Tape::append(Node node) {
    node.value.validate_finite("tape op output");
    for (NodeId in : node.inputs) nodes_[static_cast<std::size_t>(in)].consumers++;
    nodes_.push_back(std::move(node));
    return static_cast<NodeId>(nodes_.size()) - 1;
}

void Tape::check_id(NodeId id, const char* context) const {
    if (id < 0 || id >= node_count()) {
        throw std::invalid_argument(std::string(context) + ": node id " + std::to_string(id) +
                                    " out of range");
    }
}

const Tape::Node& Tape::node(NodeId id) const {
    check_id(id, "tape");
    return nodes_[static_cast<std::size_t>(id)];
}

const Tensor& Tape::value(NodeId id) const { return node(id).value; }

OpKind Tape::kind(NodeId id) const { return node(id).kind; }

NodeId Tape::input(Tensor value) {
    return append(Node{OpKind::Input, {}, std::move(value), Padding::Valid, {}, 0});
}

NodeId Tape::conv2d(NodeId input, NodeId kernel, NodeId bias, Padding padding) {
    check_id(input, "conv2d");
    check_id(kernel, "conv2d");
    check_id(bias, "conv2d");
    const Tensor& x = value(input);
    const Tensor& k = value(kernel);
    const Tensor& b = value(bias);
    const ConvDims d = conv_dims(x, k, b, padding);
    const int spatial = d.oh * d.ow;
    const int ksize = d.c * d.kh * d.kw;

    Tensor out(Shape{d.n, d.f, d.oh, d.ow});
    parallel_for(d.n, [&](std::int64_t n) {
        std::vector<float>& cols = tl_cols;
        cols.resize(static_cast<std::size_t>(ksize) * spatial);
        im2col(x.data() + n * d.c * d.h * d.w, d, cols.data());
        float* dst = out.data() + n * d.f * spatial;
        for (int f = 0; f < d.f; ++f) {
            float* row = dst + static_cast<std::int64_t>(f) * spatial;
            std::fill(row, row + spatial, b[f]);
            const float* w = k.data() + static_cast<std::int64_t>(f) * ksize;
            for (int kk = 0; kk < ksize; ++kk) {
                const float a = w[kk];
                const float* col = cols.data() + static_cast<std::int64_t>(kk) * spatial;
                for (int s = 0; s < spatial; ++s) row[s] += a * col[s];
            }
        }
    });
    Node nd{OpKind::Conv2d, {input, kernel, bias}, std::move(out), padding, {}, 0};
    return append(std::move(nd));
}

NodeId Tape::relu(NodeId x) {
    check_id(x, "relu");
    const Tensor& in = value(x);
    Tensor out(in.shape());
    for (std::int64_t i = 0; i < in.size(); ++i) out[i] = in[i] > 0.0f ? in[i] : 0.0f;
    return append(Node{OpKind::Relu, {x}, std::move(out), Padding::Valid, {}, 0});
}

NodeId Tape::avg_pool2d(NodeId x) {
    check_id(x, "avg_pool2d");
    const Tensor& in = value(x);
    if (in.rank() != 4) {
        throw std::invalid_argument("avg_pool2d expects [N,C,H,W], got " +
                                    shape_to_string(in.shape()));
    }
    const int n = in.extent(0), c = in.extent(1), h = in.extent(2), w = in.extent(3);
    if (h % 2 != 0 || w % 2 != 0) {
        throw std::invalid_argument("avg_pool2d requires even spatial extents, got " +
                                    shape_to_string(in.shape()));
    }
    const int oh = h / 2, ow = w / 2;
    Tensor out(Shape{n, c, oh, ow});
    for (int i = 0; i < n * c; ++i) {
        const float* plane = in.data() + static_cast<std::int64_t>(i) * h * w;
        float* dst = out.data() + static_cast<std::int64_t>(i) * oh * ow;
        for (int r = 0; r < oh; ++r) {
            for (int s = 0; s < ow; ++s) {
                const float* p = plane + (2 * r) * w + 2 * s;
                dst[r * ow + s] = 0.25f * (p[0] + p[1] + p[w] + p[w + 1]);
            }
        }
    }
    return append(Node{OpKind::AvgPool2d, {x}, std::move(out), Padding::Valid, {}, 0});
}

NodeId Tape::concat_channels(NodeId a, NodeId b) {
    check_id(a, "concat_channels");
    check_id(b, "concat_channels");
    const Tensor& ta = value(a);
    const Tensor& tb = value(b);
    if (ta.rank() != 4 || tb.rank() != 4 || ta.extent(0) != tb.extent(0) ||
        ta.extent(2) != tb.extent(2) || ta.extent(3) != tb.extent(3)) {
        throw std::invalid_argument("concat_channels spatial mismatch between " +
                                    shape_to_string(ta.shape()) + " and " +
                                    shape_to_string(tb.shape()));
    }
    const int n = ta.extent(0), ca = ta.extent(1), cb = tb.extent(1);
    const int plane = ta.extent(2) * ta.extent(3);
    Tensor out(Shape{n, ca + cb, ta.extent(2), ta.extent(3)});
    for (int i = 0; i < n; ++i) {
        float* dst = out.data() + static_cast<std::int64_t>(i) * (ca + cb) * plane;
        std::copy_n(ta.data() + static_cast<std::int64_t>(i) * ca * plane, ca * plane, dst);
        std::copy_n(tb.data() + static_cast<std::int64_t>(i) * cb * plane, cb * plane,
                    dst + static_cast<std::int64_t>(ca) * plane);
    }
    return append(Node{OpKind::ConcatChannels, {a, b}, std::move(out), Padding::Valid, {}, 0});
}

NodeId Tape::dense(NodeId x, NodeId w, NodeId b) {
    check_id(x, "dense");
    check_id(w, "dense");
    check_id(b, "dense");
    const Tensor& tx = value(x);
    const Tensor& tw = value(w);
    const Tensor& tb = value(b);
    if (tx.rank() != 2 || tw.rank() != 2 || tx.extent(1) != tw.extent(0)) {
        throw std::invalid_argument("dense inner extents disagree between " +
                                    shape_to_string(tx.shape()) + " and " +
                                    shape_to_string(tw.shape()));
    }
    const int n = tx.extent(0), d = tx.extent(1), m = tw.extent(1);
    if (tb.rank() != 1 || tb.extent(0) != m) {
        throw std::invalid_argument("dense bias " + shape_to_string(tb.shape()) +
                                    " does not match weight " + shape_to_string(tw.shape()));
    }
    Tensor out(Shape{n, m});
    for (int i = 0; i < n; ++i) {
        float* row = out.data() + static_cast<std::int64_t>(i) * m;
        std::copy_n(tb.data(), m, row);
        const float* xin = tx.data() + static_cast<std::int64_t>(i) * d;
        for (int k = 0; k < d; ++k) {
            const float a = xin[k];
            const float* wrow = tw.data() + static_cast<std::int64_t>(k) * m;
            for (int j = 0; j < m; ++j) row[j] += a * wrow[j];
        }
    }
    return append(Node{OpKind::Dense, {x, w, b}, std::move(out), Padding::Valid, {}, 0});
}

NodeId Tape::softmax(NodeId logits) {
    check_id(logits, "softmax");
    const Tensor& z = value(logits);
    if (z.rank() != 2 || z.extent(1) < 2) {
        throw std::invalid_argument("softmax expects [N,K] with K >= 2, got " +
                                    shape_to_string(z.shape()));
    }
    const int n = z.extent(0), k = z.extent(1);
    Tensor out(z.shape());
    for (int i = 0; i < n; ++i) {
        const float* row = z.data() + static_cast<std::int64_t>(i) * k;
        float* dst = out.data() + static_cast<std::int64_t>(i) * k;
        float mx = row[0];
        for (int j = 1; j < k; ++j) mx = std::max(mx, row[j]);
        float sum = 0.0f;
        for (int j = 0; j < k; ++j) {
            dst[j] = std::exp(row[j] - mx);
            sum += dst[j];
        }
        for (int j = 0; j < k; ++j) dst[j] /= sum;
    }
    return append(Node{OpKind::Softmax, {logits}, std::move(out), Padding::Valid, {}, 0});
}

NodeId Tape::cross_entropy(NodeId probs, std::vector<int> labels) {
    check_id(probs, "cross_entropy");
    const Tensor& p = value(probs);
    if (p.rank() != 2) {
        throw std::invalid_argument("cross_entropy expects probs [N,K], got " +
                                    shape_to_string(p.shape()));
    }
    const int n = p.extent(0), k = p.extent(1);
    if (static_cast<int>(labels.size()) != n) {
        throw std::invalid_argument("cross_entropy got " + std::to_string(labels.size()) +
                                    " labels for batch of " + std::to_string(n));
    }
    double loss = 0.0;
    for (int i = 0; i < n; ++i) {
        const int y = labels[static_cast<std::size_t>(i)];
        if (y < 0 || y >= k) {
            throw std::invalid_argument("cross_entropy label " + std::to_string(y) +
                                        " outside [0," + std::to_string(k) + ")");
        }
        const double py = p[static_cast<std::int64_t>(i) * k + y];
        loss -= std::log(std::max(py, kLogFloor));
    }
    Tensor out = Tensor::scalar(static_cast<float>(loss / n));
    return append(Node{OpKind::CrossEntropy, {probs}, std::move(out), Padding::Valid,
                       std::move(labels), 0});
}

NodeId Tape::mean_spatial(NodeId x) {
    check_id(x, "mean_spatial");
    const Tensor& in = value(x);
    if (in.rank() != 4) {
        throw std::invalid_argument("mean_spatial expects [N,C,H,W], got " +
                                    shape_to_string(in.shape()));
    }
    const int n = in.extent(0), c = in.extent(1);
    const int plane = in.extent(2) * in.extent(3);
    Tensor out(Shape{n, c});
    for (int i = 0; i < n * c; ++i) {
        const float* src = in.data() + static_cast<std::int64_t>(i) * plane;
        float sum = 0.0f;
        for (int s = 0; s < plane; ++s) sum += src[s];
        out[i] = sum / static_cast<float>(plane);
    }
    return append(Node{OpKind::MeanSpatial, {x}, std::move(out), Padding::Valid, {}, 0});
}

NodeId Tape::add(NodeId a, NodeId b) {
    check_id(a, "add");
    check_id(b, "add");
    const Tensor& ta = value(a);
    const Tensor& tb = value(b);
    if (!ta.same_shape(tb)) {
        throw std::invalid_argument("add shape mismatch between " + shape_to_string(ta.shape()) +
                                    " and " + shape_to_string(tb.shape()));
    }
    Tensor out(ta.shape());
    for (std::int64_t i = 0; i < ta.size(); ++i) out[i] = ta[i] + tb[i];
    return append(Node{OpKind::Add, {a, b}, std::move(out), Padding::Valid, {}, 0});
}

NodeId Tape::mul(NodeId a, NodeId b) {
    check_id(a, "mul");
    check_id(b, "mul");
    const Tensor& ta = value(a);
    const Tensor& tb = value(b);
    if (!ta.same_shape(tb)) {
        throw std::invalid_argument("mul shape mismatch between " + shape_to_string(ta.shape()) +
                                    " and " + shape_to_string(tb.shape()));
    }
    Tensor out(ta.shape());
    for (std::int64_t i = 0; i < ta.size(); ++i) out[i] = ta[i] * tb[i];
    return append(Node{OpKind::Mul, {a, b}, std::move(out), Padding::Valid, {}, 0});
}

NodeId Tape::sum_all(NodeId x) {
    check_id(x, "sum_all");
    const Tensor& in = value(x);
    float sum = 0.0f;
    for (std::int64_t i = 0; i < in.size(); ++i) sum += in[i];
    return append(Node{OpKind::SumAll, {x}, Tensor::scalar(sum), Padding::Valid, {}, 0});
}

std::unordered_map<NodeId, Tensor> Tape::backward(NodeId terminal,
                                                  const std::vector<NodeId>& requested) const {
    check_id(terminal, "backward");
    for (NodeId r : requested) check_id(r, "backward");
    if (!value(terminal).is_scalar()) {
        throw std::invalid_argument("backward terminal must be scalar, got " +
                                    shape_to_string(value(terminal).shape()));
    }

    std::vector<char> is_requested(nodes_.size(), 0);
    for (NodeId r : requested) is_requested[static_cast<std::size_t>(r)] = 1;

    // want[u]: u's adjoint feeds some requested node (or is one itself).
    std::vector<char> want(nodes_.size(), 0);
    for (std::size_t u = 0; u < nodes_.size(); ++u) {
        if (is_requested[u]) {
            want[u] = 1;
            continue;
        }
        for (NodeId in : nodes_[u].inputs) {
            if (want[static_cast<std::size_t>(in)]) {
                want[u] = 1;
                break;
            }
        }
    }

    std::vector<Tensor> adj(nodes_.size());
    std::vector<char> has_adj(nodes_.size(), 0);
    auto accumulate = [&](NodeId u, Tensor&& g) {
        const auto ui = static_cast<std::size_t>(u);
        if (!want[ui]) return;
        if (!has_adj[ui]) {
            adj[ui] = std::move(g);
            has_adj[ui] = 1;
        } else {
            Tensor& dst = adj[ui];
            for (std::int64_t i = 0; i < dst.size(); ++i) dst[i] += g[i];
        }
    };

    adj[static_cast<std::size_t>(terminal)] = Tensor::scalar(1.0f);
    has_adj[static_cast<std::size_t>(terminal)] = 1;

    for (NodeId v = terminal; v >= 0; --v) {
        const auto vi = static_cast<std::size_t>(v);
        if (!has_adj[vi]) continue;
        const Node& nd = nodes_[vi];
        const Tensor& g = adj[vi];
        switch (nd.kind) {
            case OpKind::Input:
                break;
            case OpKind::Conv2d: {
                const NodeId xid = nd.inputs[0], kid = nd.inputs[1], bid = nd.inputs[2];
                const Tensor& x = value(xid);
                const Tensor& k = value(kid);
                const Tensor& b = value(bid);
                const ConvDims d = conv_dims(x, k, b, nd.padding);
                const int spatial = d.oh * d.ow;
                const int ksize = d.c * d.kh * d.kw;
                const bool want_params = want[static_cast<std::size_t>(kid)] ||
                                         want[static_cast<std::size_t>(bid)];
                if (want_params) {
                    Tensor dk(k.shape());
                    Tensor db(b.shape());
                    std::vector<float> cols(static_cast<std::size_t>(ksize) * spatial);
                    for (int n = 0; n < d.n; ++n) {
                        im2col(x.data() + static_cast<std::int64_t>(n) * d.c * d.h * d.w, d,
                               cols.data());
                        const float* grow = g.data() + static_cast<std::int64_t>(n) * d.f * spatial;
                        for (int f = 0; f < d.f; ++f) {
                            const float* gr = grow + static_cast<std::int64_t>(f) * spatial;
                            float bsum = 0.0f;
                            for (int s = 0; s < spatial; ++s) bsum += gr[s];
                            db[f] += bsum;
                            float* dkr = dk.data() + static_cast<std::int64_t>(f) * ksize;
                            for (int kk = 0; kk < ksize; ++kk) {
                                const float* col =
                                    cols.data() + static_cast<std::int64_t>(kk) * spatial;
                                float acc = 0.0f;
                                for (int s = 0; s < spatial; ++s) acc += gr[s] * col[s];
                                dkr[kk] += acc;
                            }
                        }
                    }
                    accumulate(kid, std::move(dk));
                    accumulate(bid, std::move(db));
                }
                if (want[static_cast<std::size_t>(xid)]) {
                    Tensor dx(x.shape());
                    parallel_for(d.n, [&](std::int64_t n) {
                        std::vector<float>& dcols = tl_cols;
                        dcols.assign(static_cast<std::size_t>(ksize) * spatial, 0.0f);
                        const float* grow = g.data() + n * d.f * spatial;
                        for (int f = 0; f < d.f; ++f) {
                            const float* gr = grow + static_cast<std::int64_t>(f) * spatial;
                            const float* w = k.data() + static_cast<std::int64_t>(f) * ksize;
                            for (int kk = 0; kk < ksize; ++kk) {
                                const float a = w[kk];
                                float* dcol = dcols.data() + static_cast<std::int64_t>(kk) * spatial;
                                for (int s = 0; s < spatial; ++s) dcol[s] += a * gr[s];
                            }
                        }
                        col2im_add(dcols.data(), d, dx.data() + n * d.c * d.h * d.w);
                    });
                    accumulate(xid, std::move(dx));
                }
                break;
            }
            case OpKind::Relu: {
                const Tensor& x = value(nd.inputs[0]);
                Tensor dx(x.shape());
                for (std::int64_t i = 0; i < x.size(); ++i) dx[i] = x[i] > 0.0f ? g[i] : 0.0f;
                accumulate(nd.inputs[0], std::move(dx));
                break;
            }
            case OpKind::AvgPool2d: {
                const Tensor& x = value(nd.inputs[0]);
                const int h = x.extent(2), w = x.extent(3);
                const int oh = h / 2, ow = w / 2;
                Tensor dx(x.shape());
                const int planes = x.extent(0) * x.extent(1);
                for (int i = 0; i < planes; ++i) {
                    const float* gsrc = g.data() + static_cast<std::int64_t>(i) * oh * ow;
                    float* dst = dx.data() + static_cast<std::int64_t>(i) * h * w;
                    for (int r = 0; r < oh; ++r) {
                        for (int s = 0; s < ow; ++s) {
                            const float q = 0.25f * gsrc[r * ow + s];
                            float* p = dst + (2 * r) * w + 2 * s;
                            p[0] += q;
                            p[1] += q;
                            p[w] += q;
                            p[w + 1] += q;
                        }
                    }
                }
                accumulate(nd.inputs[0], std::move(dx));
                break;
            }
            case OpKind::ConcatChannels: {
                const Tensor& ta = value(nd.inputs[0]);
                const Tensor& tb = value(nd.inputs[1]);
                const int n = ta.extent(0), ca = ta.extent(1), cb = tb.extent(1);
                const int plane = ta.extent(2) * ta.extent(3);
                Tensor da(ta.shape());
                Tensor db(tb.shape());
                for (int i = 0; i < n; ++i) {
                    const float* src = g.data() + static_cast<std::int64_t>(i) * (ca + cb) * plane;
                    std::copy_n(src, ca * plane, da.data() + static_cast<std::int64_t>(i) * ca * plane);
                    std::copy_n(src + static_cast<std::int64_t>(ca) * plane, cb * plane,
                                db.data() + static_cast<std::int64_t>(i) * cb * plane);
                }
                accumulate(nd.inputs[0], std::move(da));
                accumulate(nd.inputs[1], std::move(db));
                break;
            }
            case OpKind::Dense: {
                const Tensor& x = value(nd.inputs[0]);
                const Tensor& w = value(nd.inputs[1]);
                const int n = x.extent(0), dd = x.extent(1), m = w.extent(1);
                if (want[static_cast<std::size_t>(nd.inputs[0])]) {
                    Tensor dx(x.shape());
                    for (int i = 0; i < n; ++i) {
                        const float* gr = g.data() + static_cast<std::int64_t>(i) * m;
                        float* dr = dx.data() + static_cast<std::int64_t>(i) * dd;
                        for (int k = 0; k < dd; ++k) {
                            const float* wr = w.data() + static_cast<std::int64_t>(k) * m;
                            float acc = 0.0f;
                            for (int j = 0; j < m; ++j) acc += gr[j] * wr[j];
                            dr[k] = acc;
                        }
                    }
                    accumulate(nd.inputs[0], std::move(dx));
                }
                if (want[static_cast<std::size_t>(nd.inputs[1])]) {
                    Tensor dw(w.shape());
                    for (int i = 0; i < n; ++i) {
                        const float* gr = g.data() + static_cast<std::int64_t>(i) * m;
                        const float* xr = x.data() + static_cast<std::int64_t>(i) * dd;
                        for (int k = 0; k < dd; ++k) {
                            const float a = xr[k];
                            float* dwr = dw.data() + static_cast<std::int64_t>(k) * m;
                            for (int j = 0; j < m; ++j) dwr[j] += a * gr[j];
                        }
                    }
                    accumulate(nd.inputs[1], std::move(dw));
                }
                if (want[static_cast<std::size_t>(nd.inputs[2])]) {
                    Tensor dbias(value(nd.inputs[2]).shape());
                    for (int i = 0; i < n; ++i) {
                        const float* gr = g.data() + static_cast<std::int64_t>(i) * m;
                        for (int j = 0; j < m; ++j) dbias[j] += gr[j];
                    }
                    accumulate(nd.inputs[2], std::move(dbias));
                }
                break;
            }
            case OpKind::Softmax: {
                const Tensor& p = nd.value;
                const int n = p.extent(0), k = p.extent(1);
                Tensor dz(p.shape());
                for (int i = 0; i < n; ++i) {
                    const float* pr = p.data() + static_cast<std::int64_t>(i) * k;
                    const float* gr = g.data() + static_cast<std::int64_t>(i) * k;
                    float dot = 0.0f;
                    for (int j = 0; j < k; ++j) dot += gr[j] * pr[j];
                    float* dr = dz.data() + static_cast<std::int64_t>(i) * k;
                    for (int j = 0; j < k; ++j) dr[j] = pr[j] * (gr[j] - dot);
                }
                accumulate(nd.inputs[0], std::move(dz));
                break;
            }
            case OpKind::CrossEntropy: {
                const NodeId pid = nd.inputs[0];
                const Node& pnode = nodes_[static_cast<std::size_t>(pid)];
                const Tensor& p = pnode.value;
                const int n = p.extent(0), k = p.extent(1);
                const float gs = g[0];
                const bool fuse = pnode.kind == OpKind::Softmax && pnode.consumers == 1 &&
                                  !is_requested[static_cast<std::size_t>(pid)];
                if (fuse) {
                    // (p - onehot(y)) / N straight into the logits.
                    const NodeId zid = pnode.inputs[0];
                    if (want[static_cast<std::size_t>(zid)]) {
                        Tensor dz(p.shape());
                        const float scale = gs / static_cast<float>(n);
                        for (int i = 0; i < n; ++i) {
                            const float* pr = p.data() + static_cast<std::int64_t>(i) * k;
                            float* dr = dz.data() + static_cast<std::int64_t>(i) * k;
                            for (int j = 0; j < k; ++j) dr[j] = scale * pr[j];
                            dr[nd.labels[static_cast<std::size_t>(i)]] -= scale;
                        }
                        accumulate(zid, std::move(dz));
                    }
                } else if (want[static_cast<std::size_t>(pid)]) {
                    Tensor dp(p.shape());
                    for (int i = 0; i < n; ++i) {
                        const int y = nd.labels[static_cast<std::size_t>(i)];
                        const double py = std::max(
                            static_cast<double>(p[static_cast<std::int64_t>(i) * k + y]),
                            kLogFloor);
                        dp[static_cast<std::int64_t>(i) * k + y] =
                            static_cast<float>(-gs / (n * py));
                    }
                    accumulate(pid, std::move(dp));
                }
                break;
            }
            case OpKind::MeanSpatial: {
                const Tensor& x = value(nd.inputs[0]);
                const int plane = x.extent(2) * x.extent(3);
                Tensor dx(x.shape());
                const float inv = 1.0f / static_cast<float>(plane);
                const int planes = x.extent(0) * x.extent(1);
                for (int i = 0; i < planes; ++i) {
                    const float q = g[i] * inv;
                    float* dst = dx.data() + static_cast<std::int64_t>(i) * plane;
                    for (int s = 0; s < plane; ++s) dst[s] = q;
                }
                accumulate(nd.inputs[0], std::move(dx));
                break;
            }
            case OpKind::Add: {
                Tensor da = g;
                Tensor db = g;
                accumulate(nd.inputs[0], std::move(da));
                accumulate(nd.inputs[1], std::move(db));
                break;
            }
            case OpKind::Mul: {
                const Tensor& ta = value(nd.inputs[0]);
                const Tensor& tb = value(nd.inputs[1]);
                Tensor da(ta.shape());
                Tensor db(tb.shape());
                for (std::int64_t i = 0; i < ta.size(); ++i) {
                    da[i] = g[i] * tb[i];
                    db[i] = g[i] * ta[i];
                }
                accumulate(nd.inputs[0], std::move(da));
                accumulate(nd.inputs[1], std::move(db));
                break;
            }
            case OpKind::SumAll: {
                const Tensor& x = value(nd.inputs[0]);
                accumulate(nd.inputs[0], Tensor::full(x.shape(), g[0]));
                break;
            }
        }
    }

    std::unordered_map<NodeId, Tensor> result;
    result.reserve(requested.size());
    for (NodeId r : requested) {
        const auto ri = static_cast<std::size_t>(r);
        if (result.count(r)) continue;
        Tensor grad = has_adj[ri] ? std::move(adj[ri]) : Tensor(value(r).shape());
        grad.validate_finite("backward gradient");
        result.emplace(r, std::move(grad));
    }
    return result;
}

Tensor finite_diff_gradient(const std::function<double(const Tensor&)>& f, const Tensor& x,
                            double h) {
    if (!(h > 0.0)) {
        throw std::invalid_argument("finite_diff_gradient requires h > 0");
    }
    Tensor grad(x.shape());
    Tensor probe = x;
    for (std::int64_t i = 0; i < x.size(); ++i) {
        const float orig = x[i];
        probe[i] = static_cast<float>(orig + h);
        const double fp = f(probe);
        probe[i] = static_cast<float>(orig - h);
        const double fm = f(probe);
        probe[i] = orig;
        const double step = static_cast<double>(static_cast<float>(orig + h)) -
                            static_cast<double>(static_cast<float>(orig - h));
        grad[i] = static_cast<float>((fp - fm) / step);
    }
    return grad;
}

}  // namespace camspoof
