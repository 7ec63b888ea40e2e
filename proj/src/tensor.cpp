#include "p2cad/tensor.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <sstream>

#include <nlohmann/json.hpp>

#include "p2cad/error.hpp"

static_assert(std::endian::native == std::endian::little,
              "file formats are little-endian and this code memcpy's raw doubles");

namespace p2cad {

namespace {

using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<EMat>;
using MapC = Eigen::Map<const EMat>;

MapC emap(const Tensor& t, std::int64_t r, std::int64_t c) {
    return MapC(t.data(), r, c);
}

std::string shape_str(const std::vector<std::int64_t>& s) {
    std::ostringstream os;
    os << "(";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ")";
    return os.str();
}

void require_rank2(const Tensor& t, const char* op) {
    if (t.rank() != 2) fail("ShapeError", std::string(op) + " needs rank-2 input, got " + shape_str(t.shape()));
}

void check_finite(const Tensor& t, const char* op) {
    for (double v : t.values()) {
        if (!std::isfinite(v)) fail("NumericError", std::string(op) + " produced a non-finite value");
    }
}

} // namespace

std::int64_t shape_numel(const std::vector<std::int64_t>& shape) {
    std::int64_t n = 1;
    for (std::int64_t d : shape) {
        if (d <= 0) fail("ShapeError", "non-positive dimension in " + shape_str(shape));
        n *= d;
    }
    return n;
}

Tensor::Tensor(std::vector<std::int64_t> shape, bool needs_grad) {
    d_ = std::make_shared<Data>();
    d_->values.assign(static_cast<std::size_t>(shape_numel(shape)), 0.0);
    d_->shape = std::move(shape);
    d_->needs_grad = needs_grad;
}

Tensor::Tensor(std::vector<std::int64_t> shape, std::vector<double> values, bool needs_grad) {
    if (shape_numel(shape) != static_cast<std::int64_t>(values.size()))
        fail("ShapeError", "value count does not match shape " + shape_str(shape));
    d_ = std::make_shared<Data>();
    d_->shape = std::move(shape);
    d_->values = std::move(values);
    d_->needs_grad = needs_grad;
}

double Tensor::scalar() const {
    if (numel() != 1) fail("ShapeError", "scalar() on tensor of shape " + shape_str(shape()));
    return d_->values[0];
}

std::vector<double>& Tensor::grad() const {
    if (d_->grad.empty()) d_->grad.assign(d_->values.size(), 0.0);
    return d_->grad;
}

void Tensor::zero_grad() const {
    std::fill(d_->grad.begin(), d_->grad.end(), 0.0);
}

Tensor Graph::make(std::vector<std::int64_t> shape, bool needs_grad) {
    return Tensor(std::move(shape), recording_ && needs_grad);
}

void Graph::record(std::function<void()> fn) {
    tape_.push_back(std::move(fn));
}

// ---------------------------------------------------------------- matmul

Tensor Graph::matmul(const Tensor& a, const Tensor& b) {
    require_rank2(a, "matmul");
    require_rank2(b, "matmul");
    const std::int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    if (b.dim(0) != k)
        fail("ShapeError", "matmul " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    Tensor out = make({m, n}, a.needs_grad() || b.needs_grad());
    MapM(out.data(), m, n).noalias() = emap(a, m, k) * emap(b, k, n);
    check_finite(out, "matmul");
    if (out.needs_grad()) {
        record([a, b, out, m, k, n]() mutable {
            if (!out.has_grad()) return;
            MapC g(out.grad().data(), m, n);
            if (a.needs_grad())
                MapM(a.grad().data(), m, k).noalias() += g * emap(b, k, n).transpose();
            if (b.needs_grad())
                MapM(b.grad().data(), k, n).noalias() += emap(a, m, k).transpose() * g;
        });
    }
    return out;
}

Tensor Graph::matmul_nt(const Tensor& a, const Tensor& b) {
    require_rank2(a, "matmul_nt");
    require_rank2(b, "matmul_nt");
    const std::int64_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
    if (b.dim(1) != k)
        fail("ShapeError", "matmul_nt " + shape_str(a.shape()) + " x " + shape_str(b.shape()) + "^T");
    Tensor out = make({m, n}, a.needs_grad() || b.needs_grad());
    MapM(out.data(), m, n).noalias() = emap(a, m, k) * emap(b, n, k).transpose();
    check_finite(out, "matmul_nt");
    if (out.needs_grad()) {
        record([a, b, out, m, k, n]() mutable {
            if (!out.has_grad()) return;
            MapC g(out.grad().data(), m, n);
            if (a.needs_grad())
                MapM(a.grad().data(), m, k).noalias() += g * emap(b, n, k);
            if (b.needs_grad())
                MapM(b.grad().data(), n, k).noalias() += g.transpose() * emap(a, m, k);
        });
    }
    return out;
}

// ------------------------------------------------------------------- add

Tensor Graph::add(const Tensor& a, const Tensor& b) {
    const bool same = a.shape() == b.shape();
    const bool rowcast = !same && a.rank() == 2 &&
                         b.numel() == a.dim(1) &&
                         (b.rank() == 1 || (b.rank() == 2 && b.dim(0) == 1));
    if (!same && !rowcast)
        fail("ShapeError", "add " + shape_str(a.shape()) + " + " + shape_str(b.shape()));
    Tensor out = make(a.shape(), a.needs_grad() || b.needs_grad());
    const std::int64_t n = a.numel();
    if (same) {
        for (std::int64_t i = 0; i < n; ++i) out.at(i) = a.at(i) + b.at(i);
    } else {
        const std::int64_t c = a.dim(1);
        for (std::int64_t i = 0; i < n; ++i) out.at(i) = a.at(i) + b.at(i % c);
    }
    check_finite(out, "add");
    if (out.needs_grad()) {
        record([a, b, out, same, n]() mutable {
            if (!out.has_grad()) return;
            const auto& g = out.grad();
            if (a.needs_grad()) {
                auto& ga = a.grad();
                for (std::int64_t i = 0; i < n; ++i) ga[static_cast<std::size_t>(i)] += g[static_cast<std::size_t>(i)];
            }
            if (b.needs_grad()) {
                auto& gb = b.grad();
                if (same) {
                    for (std::int64_t i = 0; i < n; ++i) gb[static_cast<std::size_t>(i)] += g[static_cast<std::size_t>(i)];
                } else {
                    const std::int64_t c = b.numel();
                    for (std::int64_t i = 0; i < n; ++i) gb[static_cast<std::size_t>(i % c)] += g[static_cast<std::size_t>(i)];
                }
            }
        });
    }
    return out;
}

Tensor Graph::scale(const Tensor& a, double c) {
    Tensor out = make(a.shape(), a.needs_grad());
    const std::int64_t n = a.numel();
    for (std::int64_t i = 0; i < n; ++i) out.at(i) = c * a.at(i);
    check_finite(out, "scale");
    if (out.needs_grad()) {
        record([a, out, c, n]() mutable {
            if (!out.has_grad()) return;
            auto& ga = a.grad();
            const auto& g = out.grad();
            for (std::int64_t i = 0; i < n; ++i) ga[static_cast<std::size_t>(i)] += c * g[static_cast<std::size_t>(i)];
        });
    }
    return out;
}

Tensor Graph::relu(const Tensor& a) {
    Tensor out = make(a.shape(), a.needs_grad());
    const std::int64_t n = a.numel();
    for (std::int64_t i = 0; i < n; ++i) out.at(i) = a.at(i) > 0.0 ? a.at(i) : 0.0;
    if (out.needs_grad()) {
        record([a, out, n]() mutable {
            if (!out.has_grad()) return;
            auto& ga = a.grad();
            const auto& g = out.grad();
            for (std::int64_t i = 0; i < n; ++i)
                if (a.at(i) > 0.0) ga[static_cast<std::size_t>(i)] += g[static_cast<std::size_t>(i)];
        });
    }
    return out;
}

// ------------------------------------------------------------ layer_norm

Tensor Graph::layer_norm(const Tensor& a, const Tensor& gain, const Tensor& bias) {
    require_rank2(a, "layer_norm");
    const std::int64_t m = a.dim(0), c = a.dim(1);
    if (gain.numel() != c || bias.numel() != c)
        fail("ShapeError", "layer_norm gain/bias must have " + std::to_string(c) + " entries");
    constexpr double eps = 1e-5;
    Tensor out = make({m, c}, a.needs_grad() || gain.needs_grad() || bias.needs_grad());
    // keep inv stddev and normalized values for the backward pass
    auto inv = std::make_shared<std::vector<double>>(static_cast<std::size_t>(m));
    auto xhat = std::make_shared<std::vector<double>>(static_cast<std::size_t>(m * c));
    for (std::int64_t i = 0; i < m; ++i) {
        double mu = 0.0;
        for (std::int64_t j = 0; j < c; ++j) mu += a.at(i, j);
        mu /= static_cast<double>(c);
        double var = 0.0;
        for (std::int64_t j = 0; j < c; ++j) {
            const double d = a.at(i, j) - mu;
            var += d * d;
        }
        var /= static_cast<double>(c);
        const double iv = 1.0 / std::sqrt(var + eps);
        (*inv)[static_cast<std::size_t>(i)] = iv;
        for (std::int64_t j = 0; j < c; ++j) {
            const double xh = (a.at(i, j) - mu) * iv;
            (*xhat)[static_cast<std::size_t>(i * c + j)] = xh;
            out.at(i, j) = xh * gain.at(j) + bias.at(j);
        }
    }
    check_finite(out, "layer_norm");
    if (out.needs_grad()) {
        record([a, gain, bias, out, inv, xhat, m, c]() mutable {
            if (!out.has_grad()) return;
            const auto& g = out.grad();
            for (std::int64_t i = 0; i < m; ++i) {
                const double iv = (*inv)[static_cast<std::size_t>(i)];
                double sum_dyg = 0.0, sum_dyg_xh = 0.0;
                for (std::int64_t j = 0; j < c; ++j) {
                    const std::size_t idx = static_cast<std::size_t>(i * c + j);
                    const double dy = g[idx];
                    const double xh = (*xhat)[idx];
                    if (gain.needs_grad()) gain.grad()[static_cast<std::size_t>(j)] += dy * xh;
                    if (bias.needs_grad()) bias.grad()[static_cast<std::size_t>(j)] += dy;
                    const double dyg = dy * gain.at(j);
                    sum_dyg += dyg;
                    sum_dyg_xh += dyg * xh;
                }
                if (a.needs_grad()) {
                    auto& ga = a.grad();
                    const double inv_c = 1.0 / static_cast<double>(c);
                    for (std::int64_t j = 0; j < c; ++j) {
                        const std::size_t idx = static_cast<std::size_t>(i * c + j);
                        const double dyg = g[idx] * gain.at(j);
                        const double xh = (*xhat)[idx];
                        ga[idx] += iv * (dyg - inv_c * sum_dyg - xh * inv_c * sum_dyg_xh);
                    }
                }
            }
        });
    }
    return out;
}

// --------------------------------------------------------------- softmax

namespace {

// softmax over [begin, begin+len) of a row buffer
void softmax_span(const double* in, double* out, std::int64_t len) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::int64_t j = 0; j < len; ++j) mx = std::max(mx, in[j]);
    double z = 0.0;
    for (std::int64_t j = 0; j < len; ++j) {
        out[j] = std::exp(in[j] - mx);
        z += out[j];
    }
    for (std::int64_t j = 0; j < len; ++j) out[j] /= z;
}

void softmax_span_backward(const double* y, const double* gy, double* gx, std::int64_t len) {
    double dot = 0.0;
    for (std::int64_t j = 0; j < len; ++j) dot += gy[j] * y[j];
    for (std::int64_t j = 0; j < len; ++j) gx[j] += y[j] * (gy[j] - dot);
}

} // namespace

Tensor Graph::softmax_blocks(const Tensor& a, std::int64_t block) {
    require_rank2(a, "softmax");
    const std::int64_t m = a.dim(0), c = a.dim(1);
    if (block <= 0 || c % block != 0)
        fail("ShapeError", "softmax block " + std::to_string(block) + " does not divide " + std::to_string(c));
    Tensor out = make({m, c}, a.needs_grad());
    for (std::int64_t i = 0; i < m; ++i)
        for (std::int64_t b0 = 0; b0 < c; b0 += block)
            softmax_span(a.data() + i * c + b0, out.data() + i * c + b0, block);
    check_finite(out, "softmax");
    if (out.needs_grad()) {
        record([a, out, m, c, block]() mutable {
            if (!out.has_grad()) return;
            for (std::int64_t i = 0; i < m; ++i)
                for (std::int64_t b0 = 0; b0 < c; b0 += block)
                    softmax_span_backward(out.data() + i * c + b0,
                                          out.grad().data() + i * c + b0,
                                          a.grad().data() + i * c + b0, block);
        });
    }
    return out;
}

Tensor Graph::softmax_rows(const Tensor& a) {
    return softmax_blocks(a, a.dim(1));
}

Tensor Graph::mask_fill(const Tensor& a, const std::vector<std::uint8_t>& mask, double value) {
    if (static_cast<std::int64_t>(mask.size()) != a.numel())
        fail("ShapeError", "mask size does not match tensor");
    Tensor out = make(a.shape(), a.needs_grad());
    const std::int64_t n = a.numel();
    for (std::int64_t i = 0; i < n; ++i)
        out.at(i) = mask[static_cast<std::size_t>(i)] ? value : a.at(i);
    if (out.needs_grad()) {
        auto m = std::make_shared<std::vector<std::uint8_t>>(mask);
        record([a, out, m, n]() mutable {
            if (!out.has_grad()) return;
            auto& ga = a.grad();
            const auto& g = out.grad();
            for (std::int64_t i = 0; i < n; ++i)
                if (!(*m)[static_cast<std::size_t>(i)]) ga[static_cast<std::size_t>(i)] += g[static_cast<std::size_t>(i)];
        });
    }
    return out;
}

Tensor Graph::embedding_rows(const Tensor& table, const std::vector<int>& indices) {
    require_rank2(table, "embedding_rows");
    const std::int64_t v = table.dim(0), d = table.dim(1);
    const std::int64_t n = static_cast<std::int64_t>(indices.size());
    for (int idx : indices)
        if (idx < 0 || idx >= v) fail("ShapeError", "embedding index " + std::to_string(idx) + " out of range");
    Tensor out = make({n, d}, table.needs_grad());
    for (std::int64_t i = 0; i < n; ++i)
        std::memcpy(out.data() + i * d, table.data() + indices[static_cast<std::size_t>(i)] * d,
                    static_cast<std::size_t>(d) * sizeof(double));
    if (out.needs_grad()) {
        auto idx = std::make_shared<std::vector<int>>(indices);
        record([table, out, idx, n, d]() mutable {
            if (!out.has_grad()) return;
            auto& gt = table.grad();
            const auto& g = out.grad();
            for (std::int64_t i = 0; i < n; ++i)
                for (std::int64_t j = 0; j < d; ++j)
                    gt[static_cast<std::size_t>((*idx)[static_cast<std::size_t>(i)] * d + j)] +=
                        g[static_cast<std::size_t>(i * d + j)];
        });
    }
    return out;
}

Tensor Graph::concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) fail("ShapeError", "concat of zero tensors");
    const std::int64_t m = parts[0].dim(0);
    std::int64_t total = 0;
    bool ng = false;
    for (const Tensor& p : parts) {
        require_rank2(p, "concat_cols");
        if (p.dim(0) != m) fail("ShapeError", "concat_cols row mismatch");
        total += p.dim(1);
        ng = ng || p.needs_grad();
    }
    Tensor out = make({m, total}, ng);
    std::int64_t off = 0;
    for (const Tensor& p : parts) {
        const std::int64_t c = p.dim(1);
        for (std::int64_t i = 0; i < m; ++i)
            std::memcpy(out.data() + i * total + off, p.data() + i * c,
                        static_cast<std::size_t>(c) * sizeof(double));
        off += c;
    }
    if (out.needs_grad()) {
        auto ps = std::make_shared<std::vector<Tensor>>(parts);
        record([ps, out, m, total]() mutable {
            if (!out.has_grad()) return;
            const auto& g = out.grad();
            std::int64_t off = 0;
            for (Tensor& p : *ps) {
                const std::int64_t c = p.dim(1);
                if (p.needs_grad()) {
                    auto& gp = p.grad();
                    for (std::int64_t i = 0; i < m; ++i)
                        for (std::int64_t j = 0; j < c; ++j)
                            gp[static_cast<std::size_t>(i * c + j)] += g[static_cast<std::size_t>(i * total + off + j)];
                }
                off += c;
            }
        });
    }
    return out;
}

Tensor Graph::slice_cols(const Tensor& a, std::int64_t c0, std::int64_t c1) {
    require_rank2(a, "slice_cols");
    const std::int64_t m = a.dim(0), c = a.dim(1);
    if (c0 < 0 || c1 > c || c0 >= c1) fail("ShapeError", "bad column slice");
    const std::int64_t w = c1 - c0;
    Tensor out = make({m, w}, a.needs_grad());
    for (std::int64_t i = 0; i < m; ++i)
        std::memcpy(out.data() + i * w, a.data() + i * c + c0, static_cast<std::size_t>(w) * sizeof(double));
    if (out.needs_grad()) {
        record([a, out, m, c, c0, w]() mutable {
            if (!out.has_grad()) return;
            auto& ga = a.grad();
            const auto& g = out.grad();
            for (std::int64_t i = 0; i < m; ++i)
                for (std::int64_t j = 0; j < w; ++j)
                    ga[static_cast<std::size_t>(i * c + c0 + j)] += g[static_cast<std::size_t>(i * w + j)];
        });
    }
    return out;
}

Tensor Graph::reshape(const Tensor& a, std::vector<std::int64_t> shape) {
    if (shape_numel(shape) != a.numel())
        fail("ShapeError", "reshape to " + shape_str(shape) + " changes element count");
    Tensor out = make(shape, a.needs_grad());
    out.values() = a.values();
    if (out.needs_grad()) {
        const std::int64_t n = a.numel();
        record([a, out, n]() mutable {
            if (!out.has_grad()) return;
            auto& ga = a.grad();
            const auto& g = out.grad();
            for (std::int64_t i = 0; i < n; ++i) ga[static_cast<std::size_t>(i)] += g[static_cast<std::size_t>(i)];
        });
    }
    return out;
}

Tensor Graph::transpose(const Tensor& a) {
    require_rank2(a, "transpose");
    const std::int64_t m = a.dim(0), c = a.dim(1);
    Tensor out = make({c, m}, a.needs_grad());
    for (std::int64_t i = 0; i < m; ++i)
        for (std::int64_t j = 0; j < c; ++j) out.at(j, i) = a.at(i, j);
    if (out.needs_grad()) {
        record([a, out, m, c]() mutable {
            if (!out.has_grad()) return;
            auto& ga = a.grad();
            const auto& g = out.grad();
            for (std::int64_t i = 0; i < m; ++i)
                for (std::int64_t j = 0; j < c; ++j)
                    ga[static_cast<std::size_t>(i * c + j)] += g[static_cast<std::size_t>(j * m + i)];
        });
    }
    return out;
}

Tensor Graph::colmax(const Tensor& a) {
    require_rank2(a, "colmax");
    const std::int64_t m = a.dim(0), c = a.dim(1);
    Tensor out = make({1, c}, a.needs_grad());
    auto arg = std::make_shared<std::vector<std::int64_t>>(static_cast<std::size_t>(c), 0);
    for (std::int64_t j = 0; j < c; ++j) {
        double best = a.at(0, j);
        std::int64_t bi = 0;
        for (std::int64_t i = 1; i < m; ++i) {
            if (a.at(i, j) > best) {
                best = a.at(i, j);
                bi = i;
            }
        }
        out.at(0, j) = best;
        (*arg)[static_cast<std::size_t>(j)] = bi;
    }
    if (out.needs_grad()) {
        record([a, out, arg, c]() mutable {
            if (!out.has_grad()) return;
            auto& ga = a.grad();
            const auto& g = out.grad();
            for (std::int64_t j = 0; j < c; ++j)
                ga[static_cast<std::size_t>((*arg)[static_cast<std::size_t>(j)] * a.dim(1) + j)] += g[static_cast<std::size_t>(j)];
        });
    }
    return out;
}

Tensor Graph::sum_all(const Tensor& a) {
    Tensor out = make({1}, a.needs_grad());
    double s = 0.0;
    const std::int64_t n = a.numel();
    for (std::int64_t i = 0; i < n; ++i) s += a.at(i);
    out.at(0) = s;
    check_finite(out, "sum");
    if (out.needs_grad()) {
        record([a, out, n]() mutable {
            if (!out.has_grad()) return;
            auto& ga = a.grad();
            const double g = out.grad()[0];
            for (std::int64_t i = 0; i < n; ++i) ga[static_cast<std::size_t>(i)] += g;
        });
    }
    return out;
}

// ---------------------------------------------------------- cross entropy

Tensor Graph::cross_entropy(const Tensor& logits, const std::vector<int>& targets) {
    require_rank2(logits, "cross_entropy");
    const std::int64_t m = logits.dim(0), k = logits.dim(1);
    if (static_cast<std::int64_t>(targets.size()) != m)
        fail("ShapeError", "cross_entropy needs one target per row");
    for (int t : targets)
        if (t < 0 || t >= k) fail("BadTarget", "target class " + std::to_string(t) + " not in 0.." + std::to_string(k - 1));
    Tensor out = make({1}, logits.needs_grad());
    auto lse = std::make_shared<std::vector<double>>(static_cast<std::size_t>(m));
    double total = 0.0;
    for (std::int64_t i = 0; i < m; ++i) {
        double mx = logits.at(i, 0);
        for (std::int64_t j = 1; j < k; ++j) mx = std::max(mx, logits.at(i, j));
        double z = 0.0;
        for (std::int64_t j = 0; j < k; ++j) z += std::exp(logits.at(i, j) - mx);
        const double l = mx + std::log(z);
        (*lse)[static_cast<std::size_t>(i)] = l;
        total += l - logits.at(i, targets[static_cast<std::size_t>(i)]);
    }
    out.at(0) = total;
    check_finite(out, "cross_entropy");
    if (out.needs_grad()) {
        auto tg = std::make_shared<std::vector<int>>(targets);
        record([logits, out, tg, lse, m, k]() mutable {
            if (!out.has_grad()) return;
            auto& gl = logits.grad();
            const double g = out.grad()[0];
            for (std::int64_t i = 0; i < m; ++i) {
                for (std::int64_t j = 0; j < k; ++j) {
                    double p = std::exp(logits.at(i, j) - (*lse)[static_cast<std::size_t>(i)]);
                    if (j == (*tg)[static_cast<std::size_t>(i)]) p -= 1.0;
                    gl[static_cast<std::size_t>(i * k + j)] += g * p;
                }
            }
        });
    }
    return out;
}

Tensor Graph::nll_probs(const Tensor& probs, const std::vector<int>& targets) {
    require_rank2(probs, "nll_probs");
    const std::int64_t m = probs.dim(0), k = probs.dim(1);
    if (static_cast<std::int64_t>(targets.size()) != m)
        fail("ShapeError", "nll_probs needs one target per row");
    for (int t : targets)
        if (t < 0 || t >= k) fail("BadTarget", "target class " + std::to_string(t) + " not in 0.." + std::to_string(k - 1));
    static constexpr double tiny = 1e-300;
    Tensor out = make({1}, probs.needs_grad());
    double total = 0.0;
    for (std::int64_t i = 0; i < m; ++i)
        total -= std::log(std::max(probs.at(i, targets[static_cast<std::size_t>(i)]), tiny));
    out.at(0) = total;
    check_finite(out, "nll_probs");
    if (out.needs_grad()) {
        auto tg = std::make_shared<std::vector<int>>(targets);
        record([probs, out, tg, m, k]() mutable {
            if (!out.has_grad()) return;
            auto& gp = probs.grad();
            const double g = out.grad()[0];
            for (std::int64_t i = 0; i < m; ++i) {
                const int t = (*tg)[static_cast<std::size_t>(i)];
                gp[static_cast<std::size_t>(i * k + t)] -= g / std::max(probs.at(i, t), tiny);
            }
        });
    }
    return out;
}

void Graph::backward(const Tensor& loss) {
    if (loss.numel() != 1) fail("NonScalarLoss", "backward needs a scalar loss");
    if (!loss.needs_grad()) fail("NonScalarLoss", "loss is not connected to a recorded graph");
    loss.impl()->grad.assign(1, 1.0);
    for (auto it = tape_.rbegin(); it != tape_.rend(); ++it) (*it)();
}

// ------------------------------------------------------------------ adam

void adam_step(std::vector<Tensor>& params, AdamState& state, double lr,
               double beta1, double beta2, double eps) {
    if (state.m.empty()) {
        for (const Tensor& p : params) {
            state.m.emplace_back(p.values().size(), 0.0);
            state.v.emplace_back(p.values().size(), 0.0);
        }
    }
    if (state.m.size() != params.size())
        fail("ShapeError", "adam state does not match parameter list");
    state.step += 1;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(state.step));
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        Tensor& p = params[pi];
        if (state.m[pi].size() != p.values().size())
            fail("ShapeError", "adam moment shape mismatch at parameter " + std::to_string(pi));
        const bool has_g = p.has_grad();
        auto& m = state.m[pi];
        auto& v = state.v[pi];
        for (std::size_t i = 0; i < m.size(); ++i) {
            const double g = has_g ? p.grad()[i] : 0.0;
            m[i] = beta1 * m[i] + (1.0 - beta1) * g;
            v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            p.values()[i] -= lr * mhat / (std::sqrt(vhat) + eps);
        }
    }
}

// ----------------------------------------------------------- checkpoints

namespace {

void write_u32(std::ostream& os, std::uint32_t v) {
    os.write(reinterpret_cast<const char*>(&v), 4);
}

std::uint32_t read_u32(std::istream& is) {
    std::uint32_t v = 0;
    is.read(reinterpret_cast<char*>(&v), 4);
    return v;
}

} // namespace

void save_checkpoint(const std::string& path, const std::vector<NamedTensor>& tensors) {
    nlohmann::ordered_json header;
    header["tensors"] = nlohmann::ordered_json::array();
    std::uint64_t offset = 0;
    for (const NamedTensor& nt : tensors) {
        nlohmann::ordered_json e;
        e["name"] = nt.name;
        e["shape"] = nt.tensor.shape();
        e["offset"] = offset;
        header["tensors"].push_back(e);
        offset += nt.tensor.values().size() * sizeof(double);
    }
    const std::string hs = header.dump();
    std::ofstream os(path, std::ios::binary);
    if (!os) fail("IoError", "cannot open " + path + " for writing");
    os.write("P2CK", 4);
    write_u32(os, static_cast<std::uint32_t>(hs.size()));
    os.write(hs.data(), static_cast<std::streamsize>(hs.size()));
    for (const NamedTensor& nt : tensors)
        os.write(reinterpret_cast<const char*>(nt.tensor.data()),
                 static_cast<std::streamsize>(nt.tensor.values().size() * sizeof(double)));
    if (!os) fail("IoError", "write failed for " + path);
}

std::vector<NamedTensor> load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) fail("IoError", "cannot open " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "P2CK", 4) != 0) fail("IoError", path + " is not a P2CK checkpoint");
    const std::uint32_t hlen = read_u32(is);
    std::string hs(hlen, '\0');
    is.read(hs.data(), hlen);
    if (!is) fail("IoError", "truncated checkpoint header in " + path);
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(hs);
    } catch (const nlohmann::json::exception& e) {
        fail("IoError", std::string("bad checkpoint header: ") + e.what());
    }
    std::vector<NamedTensor> out;
    const std::streampos payload = is.tellg();
    for (const auto& e : header.at("tensors")) {
        const std::string name = e.at("name").get<std::string>();
        const std::vector<std::int64_t> shape = e.at("shape").get<std::vector<std::int64_t>>();
        const std::uint64_t off = e.at("offset").get<std::uint64_t>();
        Tensor t(shape);
        is.seekg(payload + static_cast<std::streamoff>(off));
        is.read(reinterpret_cast<char*>(t.data()),
                static_cast<std::streamsize>(t.values().size() * sizeof(double)));
        if (!is) fail("IoError", "truncated payload for tensor " + name);
        out.push_back({name, t});
    }
    return out;
}

} // namespace p2cad
