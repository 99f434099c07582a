#include "cda/graph.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace cda {

const char* op_name(OpKind kind) {
    switch (kind) {
        case OpKind::leaf: return "leaf";
        case OpKind::add: return "add";
        case OpKind::sub: return "sub";
        case OpKind::mul: return "mul";
        case OpKind::scalar_mul: return "scalar_mul";
        case OpKind::scalar_div: return "scalar_div";
        case OpKind::exp: return "exp";
        case OpKind::log: return "log";
        case OpKind::relu: return "relu";
        case OpKind::sum: return "sum";
        case OpKind::mean: return "mean";
        case OpKind::matmul: return "matmul";
        case OpKind::transpose: return "transpose";
        case OpKind::reshape: return "reshape";
        case OpKind::slice_rows: return "slice_rows";
        case OpKind::affine: return "affine";
        case OpKind::conv2d: return "conv2d";
        case OpKind::max_pool: return "max_pool";
        case OpKind::batch_norm: return "batch_norm";
        case OpKind::batch_norm_eval: return "batch_norm_eval";
        case OpKind::l2_normalize_rows: return "l2_normalize_rows";
        case OpKind::sq_euclidean_cdist: return "sq_euclidean_cdist";
    }
    return "?";
}

const Tensor& Value::val() const { return graph->value(id); }
const Shape& Value::shape() const { return graph->value(id).shape(); }

namespace {

[[noreturn]] void shape_error(OpKind kind, const Shape& a, const Shape& b) {
    throw std::invalid_argument(std::string(op_name(kind)) + ": shape mismatch " + shape_str(a) +
                                " vs " + shape_str(b));
}

void require_2d(OpKind kind, const Tensor& t) {
    if (t.rank() != 2) {
        throw std::invalid_argument(std::string(op_name(kind)) + ": expected rank-2 tensor, got " +
                                    shape_str(t.shape()));
    }
}

// Dense (N,K)x(K,M) product into a zeroed output.
void matmul_into(const double* a, const double* b, double* out, size_t n, size_t k, size_t m) {
    for (size_t i = 0; i < n; ++i) {
        const double* arow = a + i * k;
        double* orow = out + i * m;
        for (size_t kk = 0; kk < k; ++kk) {
            const double av = arow[kk];
            if (av == 0.0) continue;
            const double* brow = b + kk * m;
            for (size_t j = 0; j < m; ++j) orow[j] += av * brow[j];
        }
    }
}

// Accumulating (N,K)^T x (N,M) -> (K,M).
void matmul_at_b_into(const double* a, const double* b, double* out, size_t n, size_t k, size_t m) {
    for (size_t i = 0; i < n; ++i) {
        const double* arow = a + i * k;
        const double* brow = b + i * m;
        for (size_t kk = 0; kk < k; ++kk) {
            const double av = arow[kk];
            if (av == 0.0) continue;
            double* orow = out + kk * m;
            for (size_t j = 0; j < m; ++j) orow[j] += av * brow[j];
        }
    }
}

// Accumulating (N,K) x (M,K)^T -> (N,M).
void matmul_a_bt_into(const double* a, const double* b, double* out, size_t n, size_t k, size_t m) {
    for (size_t i = 0; i < n; ++i) {
        const double* arow = a + i * k;
        double* orow = out + i * m;
        for (size_t j = 0; j < m; ++j) {
            const double* brow = b + j * k;
            double acc = 0.0;
            for (size_t kk = 0; kk < k; ++kk) acc += arow[kk] * brow[kk];
            orow[j] += acc;
        }
    }
}

struct ConvDims {
    size_t n, h, w, ci, kh, kw, co, oh, ow;
    int stride, pad;
};

ConvDims conv_dims(const Tensor& x, const Tensor& w, int stride, int pad) {
    if (x.rank() != 4 || w.rank() != 4) {
        throw std::invalid_argument("conv2d: expected NHWC input and KKIO weights, got " +
                                    shape_str(x.shape()) + " and " + shape_str(w.shape()));
    }
    ConvDims d;
    d.n = x.dim(0);
    d.h = x.dim(1);
    d.w = x.dim(2);
    d.ci = x.dim(3);
    d.kh = w.dim(0);
    d.kw = w.dim(1);
    d.co = w.dim(3);
    d.stride = stride;
    d.pad = pad;
    if (w.dim(2) != d.ci) shape_error(OpKind::conv2d, x.shape(), w.shape());
    if (stride < 1) throw std::invalid_argument("conv2d: stride must be >= 1");
    if (pad < 0) throw std::invalid_argument("conv2d: pad must be >= 0");
    const long ih = static_cast<long>(d.h) + 2 * pad - static_cast<long>(d.kh);
    const long iw = static_cast<long>(d.w) + 2 * pad - static_cast<long>(d.kw);
    if (ih < 0 || iw < 0) {
        throw std::invalid_argument("conv2d: kernel " + shape_str(w.shape()) +
                                    " larger than padded input " + shape_str(x.shape()));
    }
    d.oh = static_cast<size_t>(ih) / stride + 1;
    d.ow = static_cast<size_t>(iw) / stride + 1;
    return d;
}

// Unpack NHWC patches into rows of (N*OH*OW, KH*KW*Ci).
Tensor im2col(const Tensor& x, const ConvDims& d) {
    Tensor col({d.n * d.oh * d.ow, d.kh * d.kw * d.ci});
    double* out = col.data();
    const double* in = x.data();
    size_t row = 0;
    for (size_t n = 0; n < d.n; ++n) {
        const double* img = in + n * d.h * d.w * d.ci;
        for (size_t oy = 0; oy < d.oh; ++oy) {
            for (size_t ox = 0; ox < d.ow; ++ox, ++row) {
                double* dst = out + row * d.kh * d.kw * d.ci;
                const long y0 = static_cast<long>(oy) * d.stride - d.pad;
                const long x0 = static_cast<long>(ox) * d.stride - d.pad;
                for (size_t ky = 0; ky < d.kh; ++ky) {
                    const long y = y0 + static_cast<long>(ky);
                    for (size_t kx = 0; kx < d.kw; ++kx) {
                        const long xx = x0 + static_cast<long>(kx);
                        double* cell = dst + (ky * d.kw + kx) * d.ci;
                        if (y < 0 || y >= static_cast<long>(d.h) || xx < 0 ||
                            xx >= static_cast<long>(d.w)) {
                            continue; // stays zero
                        }
                        const double* src = img + (static_cast<size_t>(y) * d.w + static_cast<size_t>(xx)) * d.ci;
                        for (size_t c = 0; c < d.ci; ++c) cell[c] = src[c];
                    }
                }
            }
        }
    }
    return col;
}

void col2im_accumulate(const Tensor& gcol, const ConvDims& d, Tensor& gx) {
    const double* in = gcol.data();
    double* out = gx.data();
    size_t row = 0;
    for (size_t n = 0; n < d.n; ++n) {
        double* img = out + n * d.h * d.w * d.ci;
        for (size_t oy = 0; oy < d.oh; ++oy) {
            for (size_t ox = 0; ox < d.ow; ++ox, ++row) {
                const double* src = in + row * d.kh * d.kw * d.ci;
                const long y0 = static_cast<long>(oy) * d.stride - d.pad;
                const long x0 = static_cast<long>(ox) * d.stride - d.pad;
                for (size_t ky = 0; ky < d.kh; ++ky) {
                    const long y = y0 + static_cast<long>(ky);
                    if (y < 0 || y >= static_cast<long>(d.h)) continue;
                    for (size_t kx = 0; kx < d.kw; ++kx) {
                        const long xx = x0 + static_cast<long>(kx);
                        if (xx < 0 || xx >= static_cast<long>(d.w)) continue;
                        const double* cell = src + (ky * d.kw + kx) * d.ci;
                        double* dst = img + (static_cast<size_t>(y) * d.w + static_cast<size_t>(xx)) * d.ci;
                        for (size_t c = 0; c < d.ci; ++c) dst[c] += cell[c];
                    }
                }
            }
        }
    }
}

} // namespace

Value Graph::add_leaf(Tensor t, bool requires_grad) {
    Node node;
    node.kind = OpKind::leaf;
    node.value = std::move(t);
    node.requires_grad = requires_grad;
    return push(std::move(node));
}

Value Graph::push(Node node) {
    for (int in : node.inputs) {
        if (in < 0 || in >= static_cast<int>(nodes_.size())) {
            throw std::logic_error("graph: input node id out of range");
        }
        node.requires_grad = node.requires_grad || nodes_[in].requires_grad;
    }
    nodes_.push_back(std::move(node));
    return Value{this, static_cast<int>(nodes_.size()) - 1};
}

Value Graph::add(Value a, Value b) {
    const Tensor& ta = value(a.id);
    const Tensor& tb = value(b.id);
    if (!ta.same_shape(tb)) shape_error(OpKind::add, ta.shape(), tb.shape());
    Node n;
    n.kind = OpKind::add;
    n.inputs = {a.id, b.id};
    n.value = Tensor(ta.shape());
    for (size_t i = 0; i < ta.size(); ++i) n.value[i] = ta[i] + tb[i];
    return push(std::move(n));
}

Value Graph::sub(Value a, Value b) {
    const Tensor& ta = value(a.id);
    const Tensor& tb = value(b.id);
    if (!ta.same_shape(tb)) shape_error(OpKind::sub, ta.shape(), tb.shape());
    Node n;
    n.kind = OpKind::sub;
    n.inputs = {a.id, b.id};
    n.value = Tensor(ta.shape());
    for (size_t i = 0; i < ta.size(); ++i) n.value[i] = ta[i] - tb[i];
    return push(std::move(n));
}

Value Graph::mul(Value a, Value b) {
    const Tensor& ta = value(a.id);
    const Tensor& tb = value(b.id);
    if (!ta.same_shape(tb)) shape_error(OpKind::mul, ta.shape(), tb.shape());
    Node n;
    n.kind = OpKind::mul;
    n.inputs = {a.id, b.id};
    n.value = Tensor(ta.shape());
    for (size_t i = 0; i < ta.size(); ++i) n.value[i] = ta[i] * tb[i];
    return push(std::move(n));
}

Value Graph::scalar_mul(Value x, double c) {
    const Tensor& t = value(x.id);
    Node n;
    n.kind = OpKind::scalar_mul;
    n.inputs = {x.id};
    n.attrs.scalar = c;
    n.value = Tensor(t.shape());
    for (size_t i = 0; i < t.size(); ++i) n.value[i] = t[i] * c;
    return push(std::move(n));
}

Value Graph::scalar_div(Value x, double c) {
    if (c == 0.0) throw std::invalid_argument("scalar_div: divisor must be nonzero");
    const Tensor& t = value(x.id);
    Node n;
    n.kind = OpKind::scalar_div;
    n.inputs = {x.id};
    n.attrs.scalar = c;
    n.value = Tensor(t.shape());
    for (size_t i = 0; i < t.size(); ++i) n.value[i] = t[i] / c;
    return push(std::move(n));
}

Value Graph::exp(Value x) {
    const Tensor& t = value(x.id);
    Node n;
    n.kind = OpKind::exp;
    n.inputs = {x.id};
    n.value = Tensor(t.shape());
    for (size_t i = 0; i < t.size(); ++i) n.value[i] = std::exp(t[i]);
    return push(std::move(n));
}

Value Graph::log(Value x) {
    const Tensor& t = value(x.id);
    Node n;
    n.kind = OpKind::log;
    n.inputs = {x.id};
    n.value = Tensor(t.shape());
    for (size_t i = 0; i < t.size(); ++i) n.value[i] = std::log(t[i]);
    return push(std::move(n));
}

Value Graph::relu(Value x) {
    const Tensor& t = value(x.id);
    Node n;
    n.kind = OpKind::relu;
    n.inputs = {x.id};
    n.value = Tensor(t.shape());
    for (size_t i = 0; i < t.size(); ++i) n.value[i] = t[i] > 0.0 ? t[i] : 0.0;
    return push(std::move(n));
}

Value Graph::sum(Value x, int axis) {
    const Tensor& t = value(x.id);
    Node n;
    n.kind = OpKind::sum;
    n.inputs = {x.id};
    n.attrs.axis = axis;
    if (axis == -1) {
        double acc = 0.0;
        for (size_t i = 0; i < t.size(); ++i) acc += t[i];
        n.value = Tensor::scalar(acc);
    } else {
        require_2d(OpKind::sum, t);
        if (axis != 0 && axis != 1) throw std::invalid_argument("sum: axis must be -1, 0 or 1");
        const size_t r = t.rows(), c = t.cols();
        if (axis == 0) {
            n.value = Tensor({c});
            for (size_t i = 0; i < r; ++i)
                for (size_t j = 0; j < c; ++j) n.value[j] += t.at(i, j);
        } else {
            n.value = Tensor({r});
            for (size_t i = 0; i < r; ++i) {
                double acc = 0.0;
                for (size_t j = 0; j < c; ++j) acc += t.at(i, j);
                n.value[i] = acc;
            }
        }
    }
    return push(std::move(n));
}

Value Graph::mean(Value x) {
    const Tensor& t = value(x.id);
    Node n;
    n.kind = OpKind::mean;
    n.inputs = {x.id};
    double acc = 0.0;
    for (size_t i = 0; i < t.size(); ++i) acc += t[i];
    n.value = Tensor::scalar(acc / static_cast<double>(t.size()));
    return push(std::move(n));
}

Value Graph::matmul(Value a, Value b) {
    const Tensor& ta = value(a.id);
    const Tensor& tb = value(b.id);
    require_2d(OpKind::matmul, ta);
    require_2d(OpKind::matmul, tb);
    if (ta.cols() != tb.rows()) shape_error(OpKind::matmul, ta.shape(), tb.shape());
    Node n;
    n.kind = OpKind::matmul;
    n.inputs = {a.id, b.id};
    n.value = Tensor({ta.rows(), tb.cols()});
    matmul_into(ta.data(), tb.data(), n.value.data(), ta.rows(), ta.cols(), tb.cols());
    return push(std::move(n));
}

Value Graph::transpose(Value x) {
    const Tensor& t = value(x.id);
    require_2d(OpKind::transpose, t);
    Node n;
    n.kind = OpKind::transpose;
    n.inputs = {x.id};
    n.value = Tensor({t.cols(), t.rows()});
    for (size_t i = 0; i < t.rows(); ++i)
        for (size_t j = 0; j < t.cols(); ++j) n.value.at(j, i) = t.at(i, j);
    return push(std::move(n));
}

Value Graph::reshape(Value x, Shape shape) {
    const Tensor& t = value(x.id);
    Node n;
    n.kind = OpKind::reshape;
    n.inputs = {x.id};
    n.value = t.reshaped(std::move(shape));
    return push(std::move(n));
}

Value Graph::slice_rows(Value x, size_t begin, size_t end) {
    const Tensor& t = value(x.id);
    require_2d(OpKind::slice_rows, t);
    if (begin >= end || end > t.rows()) {
        throw std::invalid_argument("slice_rows: range [" + std::to_string(begin) + ", " +
                                    std::to_string(end) + ") invalid for " + shape_str(t.shape()));
    }
    Node n;
    n.kind = OpKind::slice_rows;
    n.inputs = {x.id};
    n.attrs.kh = static_cast<int>(begin); // row range rides in kh/kw
    n.attrs.kw = static_cast<int>(end);
    n.value = Tensor({end - begin, t.cols()});
    std::copy(t.data() + begin * t.cols(), t.data() + end * t.cols(), n.value.data());
    return push(std::move(n));
}

Value Graph::affine(Value x, Value w, Value b) {
    const Tensor& tx = value(x.id);
    const Tensor& tw = value(w.id);
    const Tensor& tb = value(b.id);
    require_2d(OpKind::affine, tx);
    require_2d(OpKind::affine, tw);
    if (tx.cols() != tw.rows()) shape_error(OpKind::affine, tx.shape(), tw.shape());
    if (tb.rank() != 1 || tb.dim(0) != tw.cols()) shape_error(OpKind::affine, tw.shape(), tb.shape());
    Node n;
    n.kind = OpKind::affine;
    n.inputs = {x.id, w.id, b.id};
    n.value = Tensor({tx.rows(), tw.cols()});
    matmul_into(tx.data(), tw.data(), n.value.data(), tx.rows(), tx.cols(), tw.cols());
    for (size_t i = 0; i < tx.rows(); ++i)
        for (size_t j = 0; j < tw.cols(); ++j) n.value.at(i, j) += tb[j];
    return push(std::move(n));
}

Value Graph::conv2d(Value x, Value w, Value b, int stride, int pad) {
    const Tensor& tx = value(x.id);
    const Tensor& tw = value(w.id);
    const Tensor& tb = value(b.id);
    ConvDims d = conv_dims(tx, tw, stride, pad);
    if (tb.rank() != 1 || tb.dim(0) != d.co) shape_error(OpKind::conv2d, tw.shape(), tb.shape());
    Node n;
    n.kind = OpKind::conv2d;
    n.inputs = {x.id, w.id, b.id};
    n.attrs.stride = stride;
    n.attrs.pad = pad;
    n.aux0 = im2col(tx, d); // reused by backward
    const size_t rows = d.n * d.oh * d.ow;
    const size_t k = d.kh * d.kw * d.ci;
    Tensor out({rows, d.co});
    matmul_into(n.aux0.data(), tw.data(), out.data(), rows, k, d.co);
    for (size_t r = 0; r < rows; ++r)
        for (size_t c = 0; c < d.co; ++c) out.at(r, c) += tb[c];
    n.value = out.reshaped({d.n, d.oh, d.ow, d.co});
    return push(std::move(n));
}

Value Graph::max_pool(Value x, int kh, int kw, int stride) {
    const Tensor& t = value(x.id);
    if (t.rank() != 4) {
        throw std::invalid_argument("max_pool: expected NHWC input, got " + shape_str(t.shape()));
    }
    if (kh < 1 || kw < 1 || stride < 1) throw std::invalid_argument("max_pool: window and stride must be >= 1");
    const size_t N = t.dim(0), H = t.dim(1), W = t.dim(2), C = t.dim(3);
    if (H < static_cast<size_t>(kh) || W < static_cast<size_t>(kw)) {
        throw std::invalid_argument("max_pool: window larger than input " + shape_str(t.shape()));
    }
    const size_t OH = (H - kh) / stride + 1;
    const size_t OW = (W - kw) / stride + 1;
    Node n;
    n.kind = OpKind::max_pool;
    n.inputs = {x.id};
    n.attrs.kh = kh;
    n.attrs.kw = kw;
    n.attrs.stride = stride;
    n.value = Tensor({N, OH, OW, C});
    n.iaux.assign(N * OH * OW * C, 0);
    size_t o = 0;
    for (size_t b = 0; b < N; ++b) {
        for (size_t oy = 0; oy < OH; ++oy) {
            for (size_t ox = 0; ox < OW; ++ox) {
                for (size_t c = 0; c < C; ++c, ++o) {
                    double best = -1e300;
                    size_t besti = 0;
                    for (size_t ky = 0; ky < static_cast<size_t>(kh); ++ky) {
                        for (size_t kx = 0; kx < static_cast<size_t>(kw); ++kx) {
                            const size_t y = oy * stride + ky;
                            const size_t xx = ox * stride + kx;
                            const size_t idx = ((b * H + y) * W + xx) * C + c;
                            if (t[idx] > best) { // first max wins ties
                                best = t[idx];
                                besti = idx;
                            }
                        }
                    }
                    n.value[o] = best;
                    n.iaux[o] = static_cast<int>(besti);
                }
            }
        }
    }
    return push(std::move(n));
}

Value Graph::batch_norm(Value x, Value gamma, Value beta, double eps) {
    const Tensor& t = value(x.id);
    const Tensor& tg = value(gamma.id);
    const Tensor& tb = value(beta.id);
    if (t.rank() < 2) {
        throw std::invalid_argument("batch_norm: expected rank >= 2, got " + shape_str(t.shape()));
    }
    const size_t C = t.dim(t.rank() - 1);
    const size_t R = t.size() / C;
    if (R < 2) throw std::invalid_argument("batch_norm: needs >= 2 entries per channel in training mode");
    if (tg.rank() != 1 || tg.dim(0) != C) shape_error(OpKind::batch_norm, t.shape(), tg.shape());
    if (tb.rank() != 1 || tb.dim(0) != C) shape_error(OpKind::batch_norm, t.shape(), tb.shape());
    Node n;
    n.kind = OpKind::batch_norm;
    n.inputs = {x.id, gamma.id, beta.id};
    n.attrs.eps = eps;
    Tensor mean({C}), var({C});
    for (size_t i = 0; i < t.size(); ++i) mean[i % C] += t[i];
    for (size_t c = 0; c < C; ++c) mean[c] /= static_cast<double>(R);
    for (size_t i = 0; i < t.size(); ++i) {
        const double d = t[i] - mean[i % C];
        var[i % C] += d * d;
    }
    for (size_t c = 0; c < C; ++c) var[c] /= static_cast<double>(R);
    n.value = Tensor(t.shape());
    for (size_t i = 0; i < t.size(); ++i) {
        const size_t c = i % C;
        n.value[i] = tg[c] * (t[i] - mean[c]) / std::sqrt(var[c] + eps) + tb[c];
    }
    n.aux0 = std::move(mean);
    n.aux1 = std::move(var);
    return push(std::move(n));
}

Value Graph::batch_norm_eval(Value x, Value gamma, Value beta, const Tensor& mean, const Tensor& var,
                             double eps) {
    const Tensor& t = value(x.id);
    const Tensor& tg = value(gamma.id);
    const Tensor& tb = value(beta.id);
    const size_t C = t.dim(t.rank() - 1);
    if (tg.rank() != 1 || tg.dim(0) != C) shape_error(OpKind::batch_norm_eval, t.shape(), tg.shape());
    if (tb.rank() != 1 || tb.dim(0) != C) shape_error(OpKind::batch_norm_eval, t.shape(), tb.shape());
    if (mean.size() != C || var.size() != C) shape_error(OpKind::batch_norm_eval, mean.shape(), t.shape());
    Node n;
    n.kind = OpKind::batch_norm_eval;
    n.inputs = {x.id, gamma.id, beta.id};
    n.attrs.eps = eps;
    n.aux0 = mean;
    n.aux1 = var;
    n.value = Tensor(t.shape());
    for (size_t i = 0; i < t.size(); ++i) {
        const size_t c = i % C;
        n.value[i] = tg[c] * (t[i] - mean[c]) / std::sqrt(var[c] + eps) + tb[c];
    }
    return push(std::move(n));
}

Value Graph::l2_normalize_rows(Value x, double eps) {
    const Tensor& t = value(x.id);
    require_2d(OpKind::l2_normalize_rows, t);
    Node n;
    n.kind = OpKind::l2_normalize_rows;
    n.inputs = {x.id};
    n.attrs.eps = eps;
    const size_t r = t.rows(), c = t.cols();
    n.value = Tensor(t.shape());
    n.aux0 = Tensor({r}); // row norms
    for (size_t i = 0; i < r; ++i) {
        double sq = 0.0;
        for (size_t j = 0; j < c; ++j) sq += t.at(i, j) * t.at(i, j);
        const double norm = std::sqrt(sq);
        n.aux0[i] = norm;
        const double m = norm > eps ? norm : eps;
        for (size_t j = 0; j < c; ++j) n.value.at(i, j) = t.at(i, j) / m;
    }
    return push(std::move(n));
}

Value Graph::sq_euclidean_cdist(Value a, Value b) {
    const Tensor& ta = value(a.id);
    const Tensor& tb = value(b.id);
    require_2d(OpKind::sq_euclidean_cdist, ta);
    require_2d(OpKind::sq_euclidean_cdist, tb);
    if (ta.cols() != tb.cols()) shape_error(OpKind::sq_euclidean_cdist, ta.shape(), tb.shape());
    Node n;
    n.kind = OpKind::sq_euclidean_cdist;
    n.inputs = {a.id, b.id};
    const size_t N = ta.rows(), M = tb.rows(), d = ta.cols();
    n.value = Tensor({N, M});
    for (size_t i = 0; i < N; ++i) {
        for (size_t j = 0; j < M; ++j) {
            double acc = 0.0;
            for (size_t k = 0; k < d; ++k) {
                const double diff = ta.at(i, k) - tb.at(j, k);
                acc += diff * diff;
            }
            n.value.at(i, j) = acc;
        }
    }
    return push(std::move(n));
}

Value Graph::apply_op(OpKind kind, const std::vector<Value>& in, const OpAttrs& attrs) {
    switch (kind) {
        case OpKind::add: return add(in.at(0), in.at(1));
        case OpKind::sub: return sub(in.at(0), in.at(1));
        case OpKind::mul: return mul(in.at(0), in.at(1));
        case OpKind::scalar_mul: return scalar_mul(in.at(0), attrs.scalar);
        case OpKind::scalar_div: return scalar_div(in.at(0), attrs.scalar);
        case OpKind::exp: return exp(in.at(0));
        case OpKind::log: return log(in.at(0));
        case OpKind::relu: return relu(in.at(0));
        case OpKind::sum: return sum(in.at(0), attrs.axis);
        case OpKind::mean: return mean(in.at(0));
        case OpKind::matmul: return matmul(in.at(0), in.at(1));
        case OpKind::transpose: return transpose(in.at(0));
        case OpKind::affine: return affine(in.at(0), in.at(1), in.at(2));
        case OpKind::conv2d: return conv2d(in.at(0), in.at(1), in.at(2), attrs.stride, attrs.pad);
        case OpKind::max_pool: return max_pool(in.at(0), attrs.kh, attrs.kw, attrs.stride);
        case OpKind::batch_norm: return batch_norm(in.at(0), in.at(1), in.at(2), attrs.eps);
        case OpKind::l2_normalize_rows: return l2_normalize_rows(in.at(0), attrs.eps);
        case OpKind::sq_euclidean_cdist: return sq_euclidean_cdist(in.at(0), in.at(1));
        default:
            throw std::invalid_argument(std::string("apply_op: unsupported kind ") + op_name(kind));
    }
}

void Graph::accumulate(Tensor& into, bool& present, const Tensor& g) {
    if (!present) {
        into = g;
        present = true;
        return;
    }
    for (size_t i = 0; i < into.size(); ++i) into[i] += g[i];
}

GradMap Graph::backward(Value loss) const {
    if (loss.graph != this) throw std::logic_error("backward: loss belongs to a different graph");
    const Tensor& lv = value(loss.id);
    if (lv.size() != 1) {
        throw std::invalid_argument("backward: loss must be scalar, got shape " + shape_str(lv.shape()));
    }
    std::vector<Tensor> grads(nodes_.size());
    std::vector<char> has_grad(nodes_.size(), 0);
    grads[loss.id] = Tensor::full(lv.shape(), 1.0);
    has_grad[loss.id] = 1;

    GradMap out;
    for (int id = loss.id; id >= 0; --id) {
        if (!has_grad[id] || !nodes_[id].requires_grad) continue;
        const Node& node = nodes_[id];
        if (node.kind == OpKind::leaf) {
            out.emplace(id, std::move(grads[id]));
            continue;
        }
        backward_node(id, grads[id], grads, has_grad);
        grads[id] = Tensor(); // release as we go
    }
    return out;
}

void Graph::backward_node(int id, const Tensor& g, std::vector<Tensor>& grads,
                          std::vector<char>& has_grad) const {
    const Node& node = nodes_[id];
    auto out_to = [&](int slot, const Tensor& grad) {
        const int in = node.inputs[slot];
        if (!nodes_[in].requires_grad) return;
        bool present = has_grad[in] != 0;
        accumulate(grads[in], present, grad);
        has_grad[in] = 1;
    };
    auto wants = [&](int slot) { return nodes_[node.inputs[slot]].requires_grad; };

    switch (node.kind) {
        case OpKind::add: {
            out_to(0, g);
            out_to(1, g);
            break;
        }
        case OpKind::sub: {
            out_to(0, g);
            if (wants(1)) {
                Tensor gb(g.shape());
                for (size_t i = 0; i < g.size(); ++i) gb[i] = -g[i];
                out_to(1, gb);
            }
            break;
        }
        case OpKind::mul: {
            const Tensor& a = value(node.inputs[0]);
            const Tensor& b = value(node.inputs[1]);
            if (wants(0)) {
                Tensor ga(g.shape());
                for (size_t i = 0; i < g.size(); ++i) ga[i] = g[i] * b[i];
                out_to(0, ga);
            }
            if (wants(1)) {
                Tensor gb(g.shape());
                for (size_t i = 0; i < g.size(); ++i) gb[i] = g[i] * a[i];
                out_to(1, gb);
            }
            break;
        }
        case OpKind::scalar_mul: {
            Tensor gx(g.shape());
            for (size_t i = 0; i < g.size(); ++i) gx[i] = g[i] * node.attrs.scalar;
            out_to(0, gx);
            break;
        }
        case OpKind::scalar_div: {
            Tensor gx(g.shape());
            for (size_t i = 0; i < g.size(); ++i) gx[i] = g[i] / node.attrs.scalar;
            out_to(0, gx);
            break;
        }
        case OpKind::exp: {
            Tensor gx(g.shape());
            for (size_t i = 0; i < g.size(); ++i) gx[i] = g[i] * node.value[i];
            out_to(0, gx);
            break;
        }
        case OpKind::log: {
            const Tensor& x = value(node.inputs[0]);
            Tensor gx(g.shape());
            for (size_t i = 0; i < g.size(); ++i) gx[i] = g[i] / x[i];
            out_to(0, gx);
            break;
        }
        case OpKind::relu: {
            const Tensor& x = value(node.inputs[0]);
            Tensor gx(g.shape());
            for (size_t i = 0; i < g.size(); ++i) gx[i] = x[i] > 0.0 ? g[i] : 0.0;
            out_to(0, gx);
            break;
        }
        case OpKind::sum: {
            const Tensor& x = value(node.inputs[0]);
            Tensor gx(x.shape());
            if (node.attrs.axis == -1) {
                for (size_t i = 0; i < gx.size(); ++i) gx[i] = g[0];
            } else if (node.attrs.axis == 0) {
                for (size_t i = 0; i < x.rows(); ++i)
                    for (size_t j = 0; j < x.cols(); ++j) gx.at(i, j) = g[j];
            } else {
                for (size_t i = 0; i < x.rows(); ++i)
                    for (size_t j = 0; j < x.cols(); ++j) gx.at(i, j) = g[i];
            }
            out_to(0, gx);
            break;
        }
        case OpKind::mean: {
            const Tensor& x = value(node.inputs[0]);
            const double s = g[0] / static_cast<double>(x.size());
            Tensor gx = Tensor::full(x.shape(), s);
            out_to(0, gx);
            break;
        }
        case OpKind::matmul: {
            const Tensor& a = value(node.inputs[0]);
            const Tensor& b = value(node.inputs[1]);
            if (wants(0)) {
                Tensor ga(a.shape());
                matmul_a_bt_into(g.data(), b.data(), ga.data(), a.rows(), b.cols(), a.cols());
                out_to(0, ga);
            }
            if (wants(1)) {
                Tensor gb(b.shape());
                matmul_at_b_into(a.data(), g.data(), gb.data(), a.rows(), a.cols(), b.cols());
                out_to(1, gb);
            }
            break;
        }
        case OpKind::transpose: {
            const Tensor& x = value(node.inputs[0]);
            Tensor gx(x.shape());
            for (size_t i = 0; i < x.rows(); ++i)
                for (size_t j = 0; j < x.cols(); ++j) gx.at(i, j) = g.at(j, i);
            out_to(0, gx);
            break;
        }
        case OpKind::reshape: {
            out_to(0, g.reshaped(value(node.inputs[0]).shape()));
            break;
        }
        case OpKind::slice_rows: {
            const Tensor& x = value(node.inputs[0]);
            Tensor gx(x.shape());
            const size_t begin = static_cast<size_t>(node.attrs.kh);
            std::copy(g.data(), g.data() + g.size(), gx.data() + begin * x.cols());
            out_to(0, gx);
            break;
        }
        case OpKind::affine: {
            const Tensor& x = value(node.inputs[0]);
            const Tensor& w = value(node.inputs[1]);
            if (wants(0)) {
                Tensor gx(x.shape());
                matmul_a_bt_into(g.data(), w.data(), gx.data(), x.rows(), w.cols(), x.cols());
                out_to(0, gx);
            }
            if (wants(1)) {
                Tensor gw(w.shape());
                matmul_at_b_into(x.data(), g.data(), gw.data(), x.rows(), x.cols(), w.cols());
                out_to(1, gw);
            }
            if (wants(2)) {
                Tensor gb({w.cols()});
                for (size_t i = 0; i < x.rows(); ++i)
                    for (size_t j = 0; j < w.cols(); ++j) gb[j] += g.at(i, j);
                out_to(2, gb);
            }
            break;
        }
        case OpKind::conv2d: {
            const Tensor& x = value(node.inputs[0]);
            const Tensor& w = value(node.inputs[1]);
            ConvDims d = conv_dims(x, w, node.attrs.stride, node.attrs.pad);
            const size_t rows = d.n * d.oh * d.ow;
            const size_t k = d.kh * d.kw * d.ci;
            const Tensor g2 = g.reshaped({rows, d.co});
            if (wants(1)) {
                Tensor gw({k, d.co});
                matmul_at_b_into(node.aux0.data(), g2.data(), gw.data(), rows, k, d.co);
                out_to(1, gw.reshaped(w.shape()));
            }
            if (wants(2)) {
                Tensor gb({d.co});
                for (size_t r = 0; r < rows; ++r)
                    for (size_t c = 0; c < d.co; ++c) gb[c] += g2.at(r, c);
                out_to(2, gb);
            }
            if (wants(0)) {
                Tensor gcol({rows, k});
                const Tensor w2 = w.reshaped({k, d.co});
                matmul_a_bt_into(g2.data(), w2.data(), gcol.data(), rows, d.co, k);
                Tensor gx(x.shape());
                col2im_accumulate(gcol, d, gx);
                out_to(0, gx);
            }
            break;
        }
        case OpKind::max_pool: {
            const Tensor& x = value(node.inputs[0]);
            Tensor gx(x.shape());
            for (size_t o = 0; o < node.value.size(); ++o) gx[node.iaux[o]] += g[o];
            out_to(0, gx);
            break;
        }
        case OpKind::batch_norm: {
            const Tensor& x = value(node.inputs[0]);
            const Tensor& gamma = value(node.inputs[1]);
            const Tensor& mean = node.aux0;
            const Tensor& var = node.aux1;
            const size_t C = x.dim(x.rank() - 1);
            const size_t R = x.size() / C;
            std::vector<double> invstd(C);
            for (size_t c = 0; c < C; ++c) invstd[c] = 1.0 / std::sqrt(var[c] + node.attrs.eps);
            // Sums over the reduce axes of dxhat and dxhat*xhat.
            std::vector<double> s1(C, 0.0), s2(C, 0.0);
            for (size_t i = 0; i < x.size(); ++i) {
                const size_t c = i % C;
                const double xhat = (x[i] - mean[c]) * invstd[c];
                const double dxhat = g[i] * gamma[c];
                s1[c] += dxhat;
                s2[c] += dxhat * xhat;
            }
            if (wants(0)) {
                Tensor gx(x.shape());
                const double rn = static_cast<double>(R);
                for (size_t i = 0; i < x.size(); ++i) {
                    const size_t c = i % C;
                    const double xhat = (x[i] - mean[c]) * invstd[c];
                    const double dxhat = g[i] * gamma[c];
                    gx[i] = invstd[c] / rn * (rn * dxhat - s1[c] - xhat * s2[c]);
                }
                out_to(0, gx);
            }
            if (wants(1)) {
                Tensor gg({C});
                for (size_t i = 0; i < x.size(); ++i) {
                    const size_t c = i % C;
                    gg[c] += g[i] * (x[i] - mean[c]) * invstd[c];
                }
                out_to(1, gg);
            }
            if (wants(2)) {
                Tensor gb({C});
                for (size_t i = 0; i < x.size(); ++i) gb[i % C] += g[i];
                out_to(2, gb);
            }
            break;
        }
        case OpKind::batch_norm_eval: {
            const Tensor& x = value(node.inputs[0]);
            const Tensor& gamma = value(node.inputs[1]);
            const size_t C = x.dim(x.rank() - 1);
            std::vector<double> invstd(C);
            for (size_t c = 0; c < C; ++c) invstd[c] = 1.0 / std::sqrt(node.aux1[c] + node.attrs.eps);
            if (wants(0)) {
                Tensor gx(x.shape());
                for (size_t i = 0; i < x.size(); ++i) {
                    const size_t c = i % C;
                    gx[i] = g[i] * gamma[c] * invstd[c];
                }
                out_to(0, gx);
            }
            if (wants(1)) {
                Tensor gg({C});
                for (size_t i = 0; i < x.size(); ++i) {
                    const size_t c = i % C;
                    gg[c] += g[i] * (x[i] - node.aux0[c]) * invstd[c];
                }
                out_to(1, gg);
            }
            if (wants(2)) {
                Tensor gb({C});
                for (size_t i = 0; i < x.size(); ++i) gb[i % C] += g[i];
                out_to(2, gb);
            }
            break;
        }
        case OpKind::l2_normalize_rows: {
            const Tensor& x = value(node.inputs[0]);
            const double eps = node.attrs.eps;
            Tensor gx(x.shape());
            for (size_t i = 0; i < x.rows(); ++i) {
                const double norm = node.aux0[i];
                if (norm > eps) {
                    double dot = 0.0;
                    for (size_t j = 0; j < x.cols(); ++j) dot += node.value.at(i, j) * g.at(i, j);
                    for (size_t j = 0; j < x.cols(); ++j)
                        gx.at(i, j) = (g.at(i, j) - node.value.at(i, j) * dot) / norm;
                } else {
                    for (size_t j = 0; j < x.cols(); ++j) gx.at(i, j) = g.at(i, j) / eps;
                }
            }
            out_to(0, gx);
            break;
        }
        case OpKind::sq_euclidean_cdist: {
            const Tensor& a = value(node.inputs[0]);
            const Tensor& b = value(node.inputs[1]);
            const size_t N = a.rows(), M = b.rows(), d = a.cols();
            Tensor ga(a.shape()), gb(b.shape());
            for (size_t i = 0; i < N; ++i) {
                for (size_t j = 0; j < M; ++j) {
                    const double gij2 = 2.0 * g.at(i, j);
                    if (gij2 == 0.0) continue;
                    for (size_t k = 0; k < d; ++k) {
                        const double diff = a.at(i, k) - b.at(j, k);
                        ga.at(i, k) += gij2 * diff;
                        gb.at(j, k) -= gij2 * diff;
                    }
                }
            }
            if (wants(0)) out_to(0, ga);
            if (wants(1)) out_to(1, gb);
            break;
        }
        case OpKind::leaf:
            break;
    }
}

} // namespace cda
