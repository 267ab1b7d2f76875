#include "lst/tensor.hpp"

#include <cmath>
#include <sstream>

#include "lst/kernels.hpp"

namespace lst::ad {

namespace {

std::int64_t shape_numel(const std::vector<std::int64_t>& shape) {
    std::int64_t n = 1;
    for (auto d : shape) {
        if (d <= 0) throw DimensionError("tensor dimensions must be positive");
        n *= d;
    }
    return n;
}

}  // namespace

Tensor::Tensor(std::vector<std::int64_t> shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_numel(shape_) != static_cast<std::int64_t>(data_.size()))
        throw DimensionError("tensor data length does not match shape " + shape_str());
}

Tensor Tensor::zeros(std::vector<std::int64_t> shape) {
    auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, 0.0));
}

Tensor Tensor::full(std::vector<std::int64_t> shape, double v) {
    auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, v));
}

Tensor Tensor::row(std::vector<double> data) {
    auto n = static_cast<std::int64_t>(data.size());
    return Tensor({1, n}, std::move(data));
}

std::int64_t Tensor::rows() const {
    if (shape_.empty()) return 0;
    return shape_.size() == 1 ? 1 : shape_[0];
}

std::int64_t Tensor::cols() const {
    if (shape_.empty()) return 0;
    return shape_.back();
}

std::string Tensor::shape_str() const {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape_.size(); ++i) os << (i ? "x" : "") << shape_[i];
    os << "]";
    return os.str();
}

bool Tensor::all_finite() const {
    for (double v : data_)
        if (!std::isfinite(v)) return false;
    return true;
}

MaskMatrix MaskMatrix::all(std::int64_t r, std::int64_t c, bool allowed) {
    MaskMatrix m;
    m.rows = r;
    m.cols = c;
    m.allow.assign(static_cast<std::size_t>(r * c), allowed ? 1 : 0);
    return m;
}

const Tensor& Var::value() const { return tape_->nodes_[id_].value; }
const Tensor& Var::grad() const {
    if (!tape_->grads_live_) throw ContractError("grad read before backward()");
    return tape_->nodes_[id_].grad;
}
bool Var::requires_grad() const { return tape_->nodes_[id_].requires_grad; }
double Var::scalar() const {
    if (value().numel() != 1) throw ContractError("scalar() on tensor " + value().shape_str());
    return value()[0];
}

Var Tape::leaf(Tensor value, bool requires_grad) {
    nodes_.push_back(Node{std::move(value), Tensor{}, requires_grad});
    return Var(this, static_cast<std::int32_t>(nodes_.size() - 1));
}

Var Tape::push(Tensor value, std::function<void()> backward) {
    nodes_.push_back(Node{std::move(value), Tensor{}, false});
    ops_.push_back(OpRecord{std::move(backward)});
    return Var(this, static_cast<std::int32_t>(nodes_.size() - 1));
}

void Tape::check_same_tape(const Var& v, const char* op) const {
    if (v.tape_ != this)
        throw ContractError(std::string(op) + ": input var belongs to a different tape");
}

Var Tape::matmul(Var a, Var b) {
    check_same_tape(a, "matmul");
    check_same_tape(b, "matmul");
    const Tensor& av = val(a.id_);
    const Tensor& bv = val(b.id_);
    const auto m = av.rows(), k = av.cols(), k2 = bv.rows(), n = bv.cols();
    if (k != k2)
        throw DimensionError("matmul: inner dimensions disagree, " + av.shape_str() + " x " +
                             bv.shape_str());
    Tensor out = Tensor::zeros({m, n});
    kernels::gemm(av.data(), bv.data(), out.data(), m, k, n, false, false, false);
    Var o = push(std::move(out), nullptr);
    auto ai = a.id_, bi = b.id_, oi = o.id_;
    ops_.back().backward = [this, ai, bi, oi, m, k, n]() {
        const Tensor& g = grd(oi);
        // dA += G.B^T, dB += A^T.G
        kernels::gemm(g.data(), val(bi).data(), grd(ai).data(), m, n, k, false, true, true);
        kernels::gemm(val(ai).data(), g.data(), grd(bi).data(), k, m, n, true, false, true);
    };
    return o;
}

Var Tape::add(Var a, Var b) {
    check_same_tape(a, "add");
    check_same_tape(b, "add");
    const Tensor& av = val(a.id_);
    const Tensor& bv = val(b.id_);
    if (!av.same_shape(bv))
        throw DimensionError("add: shape mismatch " + av.shape_str() + " vs " + bv.shape_str());
    Tensor out = Tensor::zeros(av.shape());
    kernels::elementwise_binary(kernels::Binary::add, av.data(), bv.data(), out.data(),
                                av.numel());
    Var o = push(std::move(out), nullptr);
    auto ai = a.id_, bi = b.id_, oi = o.id_;
    ops_.back().backward = [this, ai, bi, oi]() {
        const Tensor& g = grd(oi);
        for (std::int64_t i = 0; i < g.numel(); ++i) {
            grd(ai)[i] += g[i];
            grd(bi)[i] += g[i];
        }
    };
    return o;
}

Var Tape::mul(Var a, Var b) {
    check_same_tape(a, "mul");
    check_same_tape(b, "mul");
    const Tensor& av = val(a.id_);
    const Tensor& bv = val(b.id_);
    if (!av.same_shape(bv))
        throw DimensionError("mul: shape mismatch " + av.shape_str() + " vs " + bv.shape_str());
    Tensor out = Tensor::zeros(av.shape());
    kernels::elementwise_binary(kernels::Binary::mul, av.data(), bv.data(), out.data(),
                                av.numel());
    Var o = push(std::move(out), nullptr);
    auto ai = a.id_, bi = b.id_, oi = o.id_;
    ops_.back().backward = [this, ai, bi, oi]() {
        const Tensor& g = grd(oi);
        const Tensor& avv = val(ai);
        const Tensor& bvv = val(bi);
        for (std::int64_t i = 0; i < g.numel(); ++i) {
            grd(ai)[i] += g[i] * bvv[i];
            grd(bi)[i] += g[i] * avv[i];
        }
    };
    return o;
}

Var Tape::scale(Var a, double c) {
    check_same_tape(a, "scale");
    const Tensor& av = val(a.id_);
    Tensor out = Tensor::zeros(av.shape());
    kernels::scale(av.data(), c, out.data(), av.numel());
    Var o = push(std::move(out), nullptr);
    auto ai = a.id_, oi = o.id_;
    ops_.back().backward = [this, ai, oi, c]() {
        const Tensor& g = grd(oi);
        for (std::int64_t i = 0; i < g.numel(); ++i) grd(ai)[i] += c * g[i];
    };
    return o;
}

Var Tape::silu(Var a) {
    check_same_tape(a, "silu");
    const Tensor& av = val(a.id_);
    Tensor out = Tensor::zeros(av.shape());
    kernels::silu(av.data(), out.data(), av.numel());
    Var o = push(std::move(out), nullptr);
    auto ai = a.id_, oi = o.id_;
    ops_.back().backward = [this, ai, oi]() {
        const Tensor& g = grd(oi);
        const Tensor& x = val(ai);
        Tensor gx = Tensor::zeros(x.shape());
        kernels::silu_backward(x.data(), g.data(), gx.data(), x.numel());
        for (std::int64_t i = 0; i < x.numel(); ++i) grd(ai)[i] += gx[i];
    };
    return o;
}

Var Tape::rms_norm(Var x, Var gain, double eps) {
    check_same_tape(x, "rms_norm");
    check_same_tape(gain, "rms_norm");
    const Tensor& xv = val(x.id_);
    const Tensor& gv = val(gain.id_);
    const auto r = xv.rows(), c = xv.cols();
    if (gv.numel() != c)
        throw DimensionError("rms_norm: gain length " + gv.shape_str() + " vs cols " +
                             std::to_string(c));
    Tensor out = Tensor::zeros(xv.shape());
    auto inv_rms = std::make_shared<std::vector<double>>(r, 0.0);
    kernels::rmsnorm_rows(xv.data(), gv.data(), out.data(), inv_rms->data(), r, c, eps);
    Var o = push(std::move(out), nullptr);
    auto xi = x.id_, gi = gain.id_, oi = o.id_;
    ops_.back().backward = [this, xi, gi, oi, inv_rms, r, c]() {
        const Tensor& g = grd(oi);
        const Tensor& xv2 = val(xi);
        const Tensor& gv2 = val(gi);
        for (std::int64_t i = 0; i < r; ++i) {
            const double rr = (*inv_rms)[i];
            double s = 0.0;
            for (std::int64_t j = 0; j < c; ++j)
                s += xv2.at(i, j) * gv2[j] * g.at(i, j);
            const double coef = rr * rr * rr * s / static_cast<double>(c);
            for (std::int64_t j = 0; j < c; ++j) {
                grd(xi).at(i, j) += rr * gv2[j] * g.at(i, j) - coef * xv2.at(i, j);
                grd(gi)[j] += xv2.at(i, j) * rr * g.at(i, j);
            }
        }
    };
    return o;
}

Var Tape::embedding_lookup(Var table, const std::vector<std::int64_t>& ids) {
    check_same_tape(table, "embedding_lookup");
    const Tensor& tv = val(table.id_);
    const auto v = tv.rows(), d = tv.cols();
    for (auto id : ids)
        if (id < 0 || id >= v)
            throw IndexError("embedding_lookup: id " + std::to_string(id) +
                             " outside vocabulary of size " + std::to_string(v));
    const auto n = static_cast<std::int64_t>(ids.size());
    Tensor out = Tensor::zeros({n, d});
    for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t j = 0; j < d; ++j) out.at(i, j) = tv.at(ids[i], j);
    Var o = push(std::move(out), nullptr);
    auto ti = table.id_, oi = o.id_;
    auto ids_copy = std::make_shared<std::vector<std::int64_t>>(ids);
    ops_.back().backward = [this, ti, oi, ids_copy, d]() {
        const Tensor& g = grd(oi);
        // scatter-add stays serial: several ids may hit the same row
        for (std::size_t i = 0; i < ids_copy->size(); ++i)
            for (std::int64_t j = 0; j < d; ++j)
                grd(ti).at((*ids_copy)[i], j) += g.at(static_cast<std::int64_t>(i), j);
    };
    return o;
}

Var Tape::transpose(Var a) {
    check_same_tape(a, "transpose");
    const Tensor& av = val(a.id_);
    const auto r = av.rows(), c = av.cols();
    Tensor out = Tensor::zeros({c, r});
    for (std::int64_t i = 0; i < r; ++i)
        for (std::int64_t j = 0; j < c; ++j) out.at(j, i) = av.at(i, j);
    Var o = push(std::move(out), nullptr);
    auto ai = a.id_, oi = o.id_;
    ops_.back().backward = [this, ai, oi, r, c]() {
        const Tensor& g = grd(oi);
        for (std::int64_t i = 0; i < r; ++i)
            for (std::int64_t j = 0; j < c; ++j) grd(ai).at(i, j) += g.at(j, i);
    };
    return o;
}

Var Tape::concat_rows(const std::vector<Var>& parts) {
    if (parts.empty()) throw ContractError("concat_rows: no inputs");
    std::int64_t total = 0;
    const std::int64_t c = val(parts[0].id_).cols();
    for (const Var& p : parts) {
        check_same_tape(p, "concat_rows");
        if (val(p.id_).cols() != c)
            throw DimensionError("concat_rows: column mismatch");
        total += val(p.id_).rows();
    }
    Tensor out = Tensor::zeros({total, c});
    std::int64_t off = 0;
    std::vector<std::int32_t> ids;
    std::vector<std::int64_t> offs;
    for (const Var& p : parts) {
        const Tensor& pv = val(p.id_);
        for (std::int64_t i = 0; i < pv.rows(); ++i)
            for (std::int64_t j = 0; j < c; ++j) out.at(off + i, j) = pv.at(i, j);
        ids.push_back(p.id_);
        offs.push_back(off);
        off += pv.rows();
    }
    Var o = push(std::move(out), nullptr);
    auto oi = o.id_;
    ops_.back().backward = [this, oi, ids, offs, c]() {
        const Tensor& g = grd(oi);
        for (std::size_t p = 0; p < ids.size(); ++p) {
            Tensor& gp = grd(ids[p]);
            for (std::int64_t i = 0; i < gp.rows(); ++i)
                for (std::int64_t j = 0; j < c; ++j) gp.at(i, j) += g.at(offs[p] + i, j);
        }
    };
    return o;
}

Var Tape::slice_rows(Var a, std::int64_t begin, std::int64_t end) {
    check_same_tape(a, "slice_rows");
    const Tensor& av = val(a.id_);
    if (begin < 0 || end > av.rows() || begin >= end)
        throw DimensionError("slice_rows: range [" + std::to_string(begin) + "," +
                             std::to_string(end) + ") on " + av.shape_str());
    const auto c = av.cols();
    Tensor out = Tensor::zeros({end - begin, c});
    for (std::int64_t i = begin; i < end; ++i)
        for (std::int64_t j = 0; j < c; ++j) out.at(i - begin, j) = av.at(i, j);
    Var o = push(std::move(out), nullptr);
    auto ai = a.id_, oi = o.id_;
    ops_.back().backward = [this, ai, oi, begin, end, c]() {
        const Tensor& g = grd(oi);
        for (std::int64_t i = begin; i < end; ++i)
            for (std::int64_t j = 0; j < c; ++j) grd(ai).at(i, j) += g.at(i - begin, j);
    };
    return o;
}

Var Tape::concat_cols(const std::vector<Var>& parts) {
    if (parts.empty()) throw ContractError("concat_cols: no inputs");
    const std::int64_t r = val(parts[0].id_).rows();
    std::int64_t total = 0;
    for (const Var& p : parts) {
        check_same_tape(p, "concat_cols");
        if (val(p.id_).rows() != r) throw DimensionError("concat_cols: row mismatch");
        total += val(p.id_).cols();
    }
    Tensor out = Tensor::zeros({r, total});
    std::int64_t off = 0;
    std::vector<std::int32_t> ids;
    std::vector<std::int64_t> offs;
    for (const Var& p : parts) {
        const Tensor& pv = val(p.id_);
        for (std::int64_t i = 0; i < r; ++i)
            for (std::int64_t j = 0; j < pv.cols(); ++j) out.at(i, off + j) = pv.at(i, j);
        ids.push_back(p.id_);
        offs.push_back(off);
        off += pv.cols();
    }
    Var o = push(std::move(out), nullptr);
    auto oi = o.id_;
    ops_.back().backward = [this, oi, ids, offs, r]() {
        const Tensor& g = grd(oi);
        for (std::size_t p = 0; p < ids.size(); ++p) {
            Tensor& gp = grd(ids[p]);
            for (std::int64_t i = 0; i < r; ++i)
                for (std::int64_t j = 0; j < gp.cols(); ++j) gp.at(i, j) += g.at(i, offs[p] + j);
        }
    };
    return o;
}

Var Tape::slice_cols(Var a, std::int64_t begin, std::int64_t end) {
    check_same_tape(a, "slice_cols");
    const Tensor& av = val(a.id_);
    if (begin < 0 || end > av.cols() || begin >= end)
        throw DimensionError("slice_cols: bad range on " + av.shape_str());
    const auto r = av.rows();
    Tensor out = Tensor::zeros({r, end - begin});
    for (std::int64_t i = 0; i < r; ++i)
        for (std::int64_t j = begin; j < end; ++j) out.at(i, j - begin) = av.at(i, j);
    Var o = push(std::move(out), nullptr);
    auto ai = a.id_, oi = o.id_;
    ops_.back().backward = [this, ai, oi, begin, end, r]() {
        const Tensor& g = grd(oi);
        for (std::int64_t i = 0; i < r; ++i)
            for (std::int64_t j = begin; j < end; ++j) grd(ai).at(i, j) += g.at(i, j - begin);
    };
    return o;
}

Var Tape::masked_softmax(Var logits, std::shared_ptr<const MaskMatrix> mask) {
    check_same_tape(logits, "masked_softmax");
    const Tensor& lv = val(logits.id_);
    const auto r = lv.rows(), c = lv.cols();
    if (mask && (mask->rows != r || mask->cols != c))
        throw DimensionError("masked_softmax: mask shape mismatch");
    Tensor out = Tensor::zeros(lv.shape());
    kernels::softmax_rows_masked(lv.data(), mask ? mask->allow.data() : nullptr, out.data(), r,
                                 c);
    Var o = push(std::move(out), nullptr);
    auto li = logits.id_, oi = o.id_;
    ops_.back().backward = [this, li, oi, mask, r, c]() {
        const Tensor& g = grd(oi);
        const Tensor& p = val(oi);
        for (std::int64_t i = 0; i < r; ++i) {
            double dot = 0.0;
            for (std::int64_t j = 0; j < c; ++j) dot += p.at(i, j) * g.at(i, j);
            for (std::int64_t j = 0; j < c; ++j) {
                if (mask && !mask->at(i, j)) continue;  // masked logits get exactly zero grad
                grd(li).at(i, j) += p.at(i, j) * (g.at(i, j) - dot);
            }
        }
    };
    return o;
}

Var Tape::rotary_position_embed(Var x, std::vector<std::int64_t> positions, double theta) {
    check_same_tape(x, "rotary_position_embed");
    const Tensor& xv = val(x.id_);
    const auto r = xv.rows(), d = xv.cols();
    if (d % 2 != 0)
        throw ConfigError("rotary_position_embed: head dimension must be even, got " +
                          std::to_string(d));
    if (static_cast<std::int64_t>(positions.size()) != r)
        throw DimensionError("rotary_position_embed: positions length vs rows");
    // cos/sin per (row, pair), shared with the backward closure
    auto cs = std::make_shared<std::vector<double>>(static_cast<std::size_t>(r * d));
    const std::int64_t half = d / 2;
    Tensor out = Tensor::zeros(xv.shape());
    for (std::int64_t i = 0; i < r; ++i) {
        for (std::int64_t p = 0; p < half; ++p) {
            const double freq =
                std::pow(theta, -2.0 * static_cast<double>(p) / static_cast<double>(d));
            const double ang = static_cast<double>(positions[i]) * freq;
            const double cv = std::cos(ang), sv = std::sin(ang);
            (*cs)[static_cast<std::size_t>(i * d + 2 * p)] = cv;
            (*cs)[static_cast<std::size_t>(i * d + 2 * p + 1)] = sv;
            const double x0 = xv.at(i, 2 * p), x1 = xv.at(i, 2 * p + 1);
            out.at(i, 2 * p) = x0 * cv - x1 * sv;
            out.at(i, 2 * p + 1) = x0 * sv + x1 * cv;
        }
    }
    Var o = push(std::move(out), nullptr);
    auto xi = x.id_, oi = o.id_;
    ops_.back().backward = [this, xi, oi, cs, r, d, half]() {
        const Tensor& g = grd(oi);
        for (std::int64_t i = 0; i < r; ++i) {
            for (std::int64_t p = 0; p < half; ++p) {
                const double cv = (*cs)[static_cast<std::size_t>(i * d + 2 * p)];
                const double sv = (*cs)[static_cast<std::size_t>(i * d + 2 * p + 1)];
                const double g0 = g.at(i, 2 * p), g1 = g.at(i, 2 * p + 1);
                grd(xi).at(i, 2 * p) += g0 * cv + g1 * sv;
                grd(xi).at(i, 2 * p + 1) += -g0 * sv + g1 * cv;
            }
        }
    };
    return o;
}

Var Tape::sum(Var a) {
    check_same_tape(a, "sum");
    const Tensor& av = val(a.id_);
    double s = 0.0;
    for (std::int64_t i = 0; i < av.numel(); ++i) s += av[i];
    Var o = push(Tensor({1}, {s}), nullptr);
    auto ai = a.id_, oi = o.id_;
    ops_.back().backward = [this, ai, oi]() {
        const double g = grd(oi)[0];
        for (std::int64_t i = 0; i < grd(ai).numel(); ++i) grd(ai)[i] += g;
    };
    return o;
}

Var Tape::softmax_cross_entropy_sum(Var logits, const std::vector<std::int64_t>& targets,
                                    std::int64_t ignore_index, std::int64_t* count) {
    check_same_tape(logits, "softmax_cross_entropy");
    const Tensor& lv = val(logits.id_);
    const auto n = lv.rows(), v = lv.cols();
    if (static_cast<std::int64_t>(targets.size()) != n)
        throw DimensionError("softmax_cross_entropy: targets length " +
                             std::to_string(targets.size()) + " vs logits rows " +
                             std::to_string(n));
    for (auto t : targets)
        if (t != ignore_index && (t < 0 || t >= v))
            throw IndexError("softmax_cross_entropy: target " + std::to_string(t) +
                             " outside [0," + std::to_string(v) + ")");
    auto probs = std::make_shared<Tensor>(Tensor::zeros(lv.shape()));
    kernels::softmax_rows_masked(lv.data(), nullptr, probs->data(), n, v);
    double total = 0.0;
    std::int64_t scored = 0;
    for (std::int64_t i = 0; i < n; ++i) {
        if (targets[i] == ignore_index) continue;
        ++scored;
        // log prob via shifted logits for stability
        double maxv = lv.at(i, 0);
        for (std::int64_t j = 1; j < v; ++j) maxv = std::max(maxv, lv.at(i, j));
        double denom = 0.0;
        for (std::int64_t j = 0; j < v; ++j) denom += std::exp(lv.at(i, j) - maxv);
        total += -(lv.at(i, targets[i]) - maxv - std::log(denom));
    }
    if (count) *count = scored;
    Var o = push(Tensor({1}, {total}), nullptr);
    auto li = logits.id_, oi = o.id_;
    auto tgt = std::make_shared<std::vector<std::int64_t>>(targets);
    ops_.back().backward = [this, li, oi, probs, tgt, ignore_index, n, v]() {
        const double g = grd(oi)[0];
        for (std::int64_t i = 0; i < n; ++i) {
            if ((*tgt)[i] == ignore_index) continue;
            for (std::int64_t j = 0; j < v; ++j) {
                const double onehot = (j == (*tgt)[i]) ? 1.0 : 0.0;
                grd(li).at(i, j) += g * (probs->at(i, j) - onehot);
            }
        }
    };
    return o;
}

Var Tape::softmax_cross_entropy(Var logits, const std::vector<std::int64_t>& targets,
                                std::int64_t ignore_index) {
    std::int64_t count = 0;
    Var s = softmax_cross_entropy_sum(logits, targets, ignore_index, &count);
    if (count == 0)
        throw EmptyLossError("softmax_cross_entropy: every position carries ignore_index");
    return scale(s, 1.0 / static_cast<double>(count));
}

void Tape::backward(Var loss) {
    check_same_tape(loss, "backward");
    if (val(loss.id_).numel() != 1)
        throw ContractError("backward: loss must be scalar, got " +
                            val(loss.id_).shape_str());
    for (Node& nd : nodes_) nd.grad = Tensor::zeros(nd.value.shape());
    grads_live_ = true;
    grd(loss.id_)[0] = 1.0;
    for (auto it = ops_.rbegin(); it != ops_.rend(); ++it)
        if (it->backward) it->backward();
}

}  // namespace lst::ad
