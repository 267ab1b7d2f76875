#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "lst/error.hpp"

namespace lst::ad {

// Dense row-major tensor of doubles. Rank 1 or 2 is all the model needs;
// rank-1 tensors behave as a single row where a matrix is expected.
class Tensor {
public:
    Tensor() = default;
    Tensor(std::vector<std::int64_t> shape, std::vector<double> data);

    static Tensor zeros(std::vector<std::int64_t> shape);
    static Tensor full(std::vector<std::int64_t> shape, double v);
    static Tensor row(std::vector<double> data);  // [1 x n]

    const std::vector<std::int64_t>& shape() const { return shape_; }
    std::int64_t numel() const { return static_cast<std::int64_t>(data_.size()); }
    std::int64_t rows() const;
    std::int64_t cols() const;

    double& at(std::int64_t i, std::int64_t j) { return data_[i * cols() + j]; }
    double at(std::int64_t i, std::int64_t j) const { return data_[i * cols() + j]; }
    double& operator[](std::int64_t i) { return data_[i]; }
    double operator[](std::int64_t i) const { return data_[i]; }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    std::vector<double>& vec() { return data_; }
    const std::vector<double>& vec() const { return data_; }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }
    std::string shape_str() const;
    bool all_finite() const;

private:
    std::vector<std::int64_t> shape_;
    std::vector<double> data_;
};

// Attention mask: allow[q * cols + k] != 0 lets query row q attend to key k.
struct MaskMatrix {
    std::int64_t rows = 0;
    std::int64_t cols = 0;
    std::vector<std::uint8_t> allow;

    static MaskMatrix all(std::int64_t r, std::int64_t c, bool allowed);
    std::uint8_t& at(std::int64_t q, std::int64_t k) { return allow[q * cols + k]; }
    std::uint8_t at(std::int64_t q, std::int64_t k) const { return allow[q * cols + k]; }
};

class Tape;

// Handle to a node on a tape. Cheap to copy; valid while the tape lives.
class Var {
public:
    Var() = default;

    const Tensor& value() const;
    const Tensor& grad() const;  // valid after Tape::backward
    bool requires_grad() const;
    const std::vector<std::int64_t>& shape() const { return value().shape(); }
    double scalar() const;  // value of a 1-element tensor

private:
    friend class Tape;
    Var(Tape* tape, std::int32_t id) : tape_(tape), id_(id) {}
    Tape* tape_ = nullptr;
    std::int32_t id_ = -1;
};

// Reverse-mode tape. Ops append records in execution order, which is a
// topological order by construction; backward() replays them exactly once
// in reverse. One tape per forward/backward pass, single-threaded.
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var leaf(Tensor value, bool requires_grad);
    Var constant(Tensor value) { return leaf(std::move(value), false); }

    Var matmul(Var a, Var b);
    Var add(Var a, Var b);
    Var mul(Var a, Var b);
    Var scale(Var a, double c);
    Var silu(Var a);
    Var rms_norm(Var x, Var gain, double eps = 1e-6);
    Var embedding_lookup(Var table, const std::vector<std::int64_t>& ids);
    Var transpose(Var a);
    Var concat_rows(const std::vector<Var>& parts);
    Var slice_rows(Var a, std::int64_t begin, std::int64_t end);
    Var concat_cols(const std::vector<Var>& parts);
    Var slice_cols(Var a, std::int64_t begin, std::int64_t end);
    Var masked_softmax(Var logits, std::shared_ptr<const MaskMatrix> mask);
    Var softmax(Var logits) { return masked_softmax(std::move(logits), nullptr); }
    Var rotary_position_embed(Var x, std::vector<std::int64_t> positions, double theta);
    Var sum(Var a);

    // Mean negative log likelihood over rows whose target != ignore_index.
    Var softmax_cross_entropy(Var logits, const std::vector<std::int64_t>& targets,
                              std::int64_t ignore_index);
    // Sum variant for combining partial losses; *count receives the number of
    // scored rows (0 is allowed here, the mean variant throws).
    Var softmax_cross_entropy_sum(Var logits, const std::vector<std::int64_t>& targets,
                                  std::int64_t ignore_index, std::int64_t* count);

    void backward(Var loss);

    std::size_t num_ops() const { return ops_.size(); }
    std::size_t num_nodes() const { return nodes_.size(); }

private:
    friend class Var;

    struct Node {
        Tensor value;
        Tensor grad;
        bool requires_grad = false;
    };
    struct OpRecord {
        std::function<void()> backward;
    };

    Tensor& val(std::int32_t id) { return nodes_[id].value; }
    Tensor& grd(std::int32_t id) { return nodes_[id].grad; }
    Var push(Tensor value, std::function<void()> backward);
    void check_same_tape(const Var& v, const char* op) const;

    std::vector<Node> nodes_;
    std::vector<OpRecord> ops_;
    bool grads_live_ = false;
};

}  // namespace lst::ad
