#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "p2cad/cad_lang.hpp"
#include "p2cad/geometry.hpp"
#include "p2cad/tensor.hpp"

namespace p2cad {

class Rng;

struct NetworkConfig {
    int d_model = 256;               // feature width C = D
    int seq_len = kSeqLen;           // N
    int d_ff = 1024;
    int n_layers = 4;                // per decoder stack
    int heads = 8;
    int n_cmd = kNumCommands;        // command classes K
    int n_param_slots = kNumParams;  // N_p
    int param_classes = kParamClasses;
    int d_attn = 64;                 // cross-attention projection width
    int n_points = 2048;
    double beta = 2.0;               // parameter-loss weight
    int eta = 3;                     // parameter accuracy tolerance, class units
    // ablation switches for the optimizer blocks: the default applies the
    // softmax after the (QK^T)V product; the standard form softmaxes the
    // scores first and renormalizes the result
    bool standard_attention = false;
    bool hard_command_embedding = false;

    int n_param_out() const { return n_param_slots * param_classes; }
    void validate() const; // throws ConfigError

    static NetworkConfig defaults();
    static NetworkConfig desk(); // small config used by the bundled runs
    static NetworkConfig tiny(); // gradient-check scale

    std::string to_json() const;
    static NetworkConfig from_json(const std::string& text);
};

struct DecoderLayerParams {
    Tensor wq, bq, wk, bk, wv, bv, wo, bo;
    Tensor ln1_g, ln1_b, ln2_g, ln2_b;
    Tensor ff_w1, ff_b1, ff_w2, ff_b2;
};

// All learnable state. Tensors are shared handles; named() exposes them in
// a fixed order used for checkpoints, Adam state and gradient checks.
class NetworkParams {
public:
    NetworkParams(const NetworkConfig& cfg, std::uint64_t seed);

    NetworkConfig config;

    // point feature extractor: shared MLP 3 -> C/4 -> C/2 -> C, max-pooled
    Tensor ext_w1, ext_b1, ext_ln1_g, ext_ln1_b;
    Tensor ext_w2, ext_b2, ext_ln2_g, ext_ln2_b;
    Tensor ext_w3, ext_b3;

    Tensor pos_embed; // learnable constant positional embedding, N x C

    std::vector<DecoderLayerParams> prelim_layers; // unmasked stack
    std::vector<DecoderLayerParams> masked_layers; // causal stack

    // command head: linear init + cross-attention refinement
    Tensor cmd_lin_w, cmd_lin_b;
    Tensor cmd_wq, cmd_wk, cmd_wv;

    // parameter head: linear init + command-conditioned cross-attention
    Tensor par_lin_w, par_lin_b;
    Tensor par_wq, par_wk, par_wv;
    Tensor cmd_embed; // K x C command embedding table

    const std::vector<NamedTensor>& named() const { return named_; }
    std::vector<Tensor> tensors() const;
    void zero_grads();
    std::vector<std::vector<double>> snapshot_values() const;
    void restore_values(const std::vector<std::vector<double>>& snap);

    void save(const std::string& ckpt_path) const;
    static NetworkParams load(const std::string& ckpt_path, const NetworkConfig& cfg);

private:
    enum class Init { Normal, FanIn, Zero, One };
    Tensor reg(const std::string& name, std::vector<std::int64_t> shape, Init init);
    DecoderLayerParams make_layer(const std::string& prefix);

    std::vector<NamedTensor> named_;
    Rng* init_rng_ = nullptr;
};

struct Prediction {
    Tensor cmd;   // N x K, rows are distributions
    Tensor param; // N x N_p x Q, (i,j) slices are distributions
};

Tensor extract_point_feature(Graph& g, const NetworkParams& p, const PointCloud& pc); // 1 x C

// the two halves of the reconstructor; reconstruct_sequence composes them
// over F_input = broadcast(F) + P_E
Tensor preliminary_stack(Graph& g, const NetworkParams& p, const Tensor& x); // unmasked
Tensor masked_stack(Graph& g, const NetworkParams& p, const Tensor& x);      // strict causal

Tensor reconstruct_sequence(Graph& g, const NetworkParams& p, const Tensor& feature); // N x C
Tensor command_head(Graph& g, const NetworkParams& p, const Tensor& seq_features);    // N x K
Tensor parameter_head(Graph& g, const NetworkParams& p, const Tensor& seq_features,
                      const Tensor& cmd); // N x N_p x Q

Prediction forward(Graph& g, const NetworkParams& p, const PointCloud& pc);

// argmax decode; ties break toward the lowest class; everything at and
// after the first predicted EOS becomes EOS padding
TokenMatrix decode_prediction(const Prediction& pred);

Tensor cloud_tensor(const PointCloud& pc); // M x 3 leaf

} // namespace p2cad
