#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace p2cad {

// Dense row-major f64 tensor. Handles share storage; copying a Tensor is
// cheap and refers to the same buffer.
class Tensor {
public:
    struct Data {
        std::vector<std::int64_t> shape;
        std::vector<double> values;
        std::vector<double> grad; // empty until backward touches it
        bool needs_grad = false;
    };

    Tensor() = default;
    explicit Tensor(std::vector<std::int64_t> shape, bool needs_grad = false);
    Tensor(std::vector<std::int64_t> shape, std::vector<double> values, bool needs_grad = false);

    // Tensor is a shared handle: a const Tensor still refers to mutable
    // storage, so the accessors below are const but hand out mutable refs.
    bool defined() const { return d_ != nullptr; }
    const std::vector<std::int64_t>& shape() const { return d_->shape; }
    std::int64_t rank() const { return static_cast<std::int64_t>(d_->shape.size()); }
    std::int64_t dim(int i) const { return d_->shape[static_cast<std::size_t>(i)]; }
    std::int64_t rows() const { return d_->shape[0]; }
    std::int64_t cols() const { return d_->shape[d_->shape.size() - 1]; }
    std::int64_t numel() const { return static_cast<std::int64_t>(d_->values.size()); }

    double* data() const { return d_->values.data(); }
    std::vector<double>& values() const { return d_->values; }

    double& at(std::int64_t i) const { return d_->values[static_cast<std::size_t>(i)]; }
    double& at(std::int64_t i, std::int64_t j) const {
        return d_->values[static_cast<std::size_t>(i * cols() + j)];
    }
    double scalar() const;

    bool needs_grad() const { return d_->needs_grad; }
    void set_needs_grad(bool b) const { d_->needs_grad = b; }
    std::vector<double>& grad() const; // allocates zero-filled on first use
    bool has_grad() const { return !d_->grad.empty(); }
    void zero_grad() const;

    std::shared_ptr<Data> impl() const { return d_; }

private:
    std::shared_ptr<Data> d_;
};

std::int64_t shape_numel(const std::vector<std::int64_t>& shape);

// Records primitive applications and replays them in reverse for
// reverse-mode differentiation. One Graph per forward pass; a Graph and its
// tensors belong to a single thread.
class Graph {
public:
    explicit Graph(bool recording = true) : recording_(recording) {}

    bool recording() const { return recording_; }

    // ---- primitives ----
    Tensor matmul(const Tensor& a, const Tensor& b);    // a(m,k) * b(k,n)
    Tensor matmul_nt(const Tensor& a, const Tensor& b); // a(m,k) * b(n,k)^T
    Tensor add(const Tensor& a, const Tensor& b);       // same shape, or b broadcast over rows
    Tensor scale(const Tensor& a, double c);
    Tensor relu(const Tensor& a);
    Tensor layer_norm(const Tensor& a, const Tensor& gain, const Tensor& bias); // feature axis, eps 1e-5
    Tensor softmax_rows(const Tensor& a);
    Tensor softmax_blocks(const Tensor& a, std::int64_t block); // per row, per contiguous column block
    Tensor mask_fill(const Tensor& a, const std::vector<std::uint8_t>& mask, double value);
    Tensor embedding_rows(const Tensor& table, const std::vector<int>& indices);
    Tensor concat_cols(const std::vector<Tensor>& parts);
    Tensor slice_cols(const Tensor& a, std::int64_t c0, std::int64_t c1);
    Tensor reshape(const Tensor& a, std::vector<std::int64_t> shape);
    Tensor transpose(const Tensor& a);
    Tensor colmax(const Tensor& a); // (m,n) -> (1,n), max over rows
    Tensor sum_all(const Tensor& a); // -> scalar (1,)

    // sum over rows of -log softmax(logits)[target]
    Tensor cross_entropy(const Tensor& logits, const std::vector<int>& targets);
    // same reduction but the input is already a distribution per row
    Tensor nll_probs(const Tensor& probs, const std::vector<int>& targets);

    void backward(const Tensor& loss);

private:
    Tensor make(std::vector<std::int64_t> shape, bool needs_grad);
    void record(std::function<void()> fn);

    std::vector<std::function<void()>> tape_;
    bool recording_ = true;
};

// ---- optimizer ----
struct AdamState {
    std::vector<std::vector<double>> m, v;
    long step = 0;
};

void adam_step(std::vector<Tensor>& params, AdamState& state, double lr,
               double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

// ---- checkpoints ----
// "P2CK": magic, u32 header length, UTF-8 JSON header (name -> shape, byte
// offset into payload), then raw little-endian f64 payload.
struct NamedTensor {
    std::string name;
    Tensor tensor;
};

void save_checkpoint(const std::string& path, const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> load_checkpoint(const std::string& path);

} // namespace p2cad
