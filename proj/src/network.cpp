#include "p2cad/network.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <map>

#include <nlohmann/json.hpp>

#include "p2cad/error.hpp"
#include "p2cad/rng.hpp"

namespace p2cad {

// ------------------------------------------------------------------ config

void NetworkConfig::validate() const {
    auto positive = [](int v, const char* name) {
        if (v <= 0) fail("ConfigError", std::string(name) + " must be positive");
    };
    positive(d_model, "d_model");
    positive(seq_len, "seq_len");
    positive(d_ff, "d_ff");
    positive(n_layers, "n_layers");
    positive(heads, "heads");
    positive(n_cmd, "n_cmd");
    positive(n_param_slots, "n_param_slots");
    positive(param_classes, "param_classes");
    positive(d_attn, "d_attn");
    positive(n_points, "n_points");
    if (d_model % heads != 0) fail("ConfigError", "d_model must be divisible by heads");
    if (beta < 0.0) fail("ConfigError", "beta must be non-negative");
    if (eta < 0) fail("ConfigError", "eta must be non-negative");
}

NetworkConfig NetworkConfig::defaults() { return NetworkConfig{}; }

NetworkConfig NetworkConfig::desk() {
    NetworkConfig c;
    c.d_model = 128;
    c.d_ff = 512;
    c.n_layers = 2;
    c.heads = 8;
    c.n_points = 512;
    return c;
}

NetworkConfig NetworkConfig::tiny() {
    NetworkConfig c;
    c.d_model = 32;
    c.seq_len = 8;
    c.d_ff = 64;
    c.n_layers = 1;
    c.heads = 2;
    c.d_attn = 16;
    c.n_points = 16;
    return c;
}

std::string NetworkConfig::to_json() const {
    nlohmann::ordered_json j;
    j["d_model"] = d_model;
    j["seq_len"] = seq_len;
    j["d_ff"] = d_ff;
    j["n_layers"] = n_layers;
    j["heads"] = heads;
    j["n_cmd"] = n_cmd;
    j["n_param_slots"] = n_param_slots;
    j["param_classes"] = param_classes;
    j["d_attn"] = d_attn;
    j["n_points"] = n_points;
    j["beta"] = beta;
    j["eta"] = eta;
    j["standard_attention"] = standard_attention;
    j["hard_command_embedding"] = hard_command_embedding;
    return j.dump(2) + "\n";
}

NetworkConfig NetworkConfig::from_json(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        fail("ConfigError", e.what());
    }
    NetworkConfig c;
    try {
        for (const auto& [key, val] : j.items()) {
            if (key == "d_model") c.d_model = val.get<int>();
            else if (key == "seq_len") c.seq_len = val.get<int>();
            else if (key == "d_ff") c.d_ff = val.get<int>();
            else if (key == "n_layers") c.n_layers = val.get<int>();
            else if (key == "heads") c.heads = val.get<int>();
            else if (key == "n_cmd") c.n_cmd = val.get<int>();
            else if (key == "n_param_slots") c.n_param_slots = val.get<int>();
            else if (key == "param_classes") c.param_classes = val.get<int>();
            else if (key == "d_attn") c.d_attn = val.get<int>();
            else if (key == "n_points") c.n_points = val.get<int>();
            else if (key == "beta") c.beta = val.get<double>();
            else if (key == "eta") c.eta = val.get<int>();
            else if (key == "standard_attention") c.standard_attention = val.get<bool>();
            else if (key == "hard_command_embedding") c.hard_command_embedding = val.get<bool>();
            else fail("ConfigError", "unknown config field \"" + key + "\"");
        }
    } catch (const nlohmann::json::exception& e) {
        fail("ConfigError", e.what());
    }
    c.validate();
    return c;
}

// ------------------------------------------------------------------ params

Tensor NetworkParams::reg(const std::string& name, std::vector<std::int64_t> shape, Init init) {
    Tensor t(std::move(shape), true);
    switch (init) {
        case Init::Normal:
            for (double& v : t.values()) v = init_rng_->normal(0.0, 0.02);
            break;
        case Init::FanIn: {
            // He scaling; keeps the extractor's pre-norm activations at
            // unit scale instead of collapsing them to ~0.02
            const double std = std::sqrt(2.0 / static_cast<double>(t.dim(0)));
            for (double& v : t.values()) v = init_rng_->normal(0.0, std);
            break;
        }
        case Init::Zero:
            break;
        case Init::One:
            std::fill(t.values().begin(), t.values().end(), 1.0);
            break;
    }
    named_.push_back({name, t});
    return t;
}

DecoderLayerParams NetworkParams::make_layer(const std::string& prefix) {
    const std::int64_t c = config.d_model, ff = config.d_ff;
    DecoderLayerParams L;
    L.wq = reg(prefix + ".wq", {c, c}, Init::Normal);
    L.bq = reg(prefix + ".bq", {c}, Init::Zero);
    L.wk = reg(prefix + ".wk", {c, c}, Init::Normal);
    L.bk = reg(prefix + ".bk", {c}, Init::Zero);
    L.wv = reg(prefix + ".wv", {c, c}, Init::Normal);
    L.bv = reg(prefix + ".bv", {c}, Init::Zero);
    L.wo = reg(prefix + ".wo", {c, c}, Init::Normal);
    L.bo = reg(prefix + ".bo", {c}, Init::Zero);
    L.ln1_g = reg(prefix + ".ln1_g", {c}, Init::One);
    L.ln1_b = reg(prefix + ".ln1_b", {c}, Init::Zero);
    L.ln2_g = reg(prefix + ".ln2_g", {c}, Init::One);
    L.ln2_b = reg(prefix + ".ln2_b", {c}, Init::Zero);
    L.ff_w1 = reg(prefix + ".ff_w1", {c, ff}, Init::Normal);
    L.ff_b1 = reg(prefix + ".ff_b1", {ff}, Init::Zero);
    L.ff_w2 = reg(prefix + ".ff_w2", {ff, c}, Init::Normal);
    L.ff_b2 = reg(prefix + ".ff_b2", {c}, Init::Zero);
    return L;
}

NetworkParams::NetworkParams(const NetworkConfig& cfg, std::uint64_t seed) : config(cfg) {
    config.validate();
    Rng rng(seed);
    init_rng_ = &rng;
    const std::int64_t c = cfg.d_model;
    const std::int64_t c1 = std::max<std::int64_t>(1, c / 4);
    const std::int64_t c2 = std::max<std::int64_t>(1, c / 2);
    const std::int64_t k = cfg.n_cmd, d = cfg.d_attn, np = cfg.n_param_out();

    ext_w1 = reg("ext.w1", {3, c1}, Init::FanIn);
    ext_b1 = reg("ext.b1", {c1}, Init::Zero);
    ext_ln1_g = reg("ext.ln1_g", {c1}, Init::One);
    ext_ln1_b = reg("ext.ln1_b", {c1}, Init::Zero);
    ext_w2 = reg("ext.w2", {c1, c2}, Init::FanIn);
    ext_b2 = reg("ext.b2", {c2}, Init::Zero);
    ext_ln2_g = reg("ext.ln2_g", {c2}, Init::One);
    ext_ln2_b = reg("ext.ln2_b", {c2}, Init::Zero);
    ext_w3 = reg("ext.w3", {c2, c}, Init::FanIn);
    ext_b3 = reg("ext.b3", {c}, Init::Zero);

    pos_embed = reg("pos_embed", {cfg.seq_len, c}, Init::Normal);

    for (int l = 0; l < cfg.n_layers; ++l)
        prelim_layers.push_back(make_layer("prelim." + std::to_string(l)));
    for (int l = 0; l < cfg.n_layers; ++l)
        masked_layers.push_back(make_layer("masked." + std::to_string(l)));

    cmd_lin_w = reg("cmd.lin_w", {c, k}, Init::Normal);
    cmd_lin_b = reg("cmd.lin_b", {k}, Init::Zero);
    cmd_wq = reg("cmd.wq", {k, d}, Init::Normal);
    cmd_wk = reg("cmd.wk", {c, d}, Init::Normal);
    cmd_wv = reg("cmd.wv", {c, k}, Init::Normal);

    par_lin_w = reg("par.lin_w", {c, np}, Init::Normal);
    par_lin_b = reg("par.lin_b", {np}, Init::Zero);
    par_wq = reg("par.wq", {np, d}, Init::Normal);
    par_wk = reg("par.wk", {c, d}, Init::Normal);
    par_wv = reg("par.wv", {c, np}, Init::Normal);
    cmd_embed = reg("cmd.embed", {k, c}, Init::Normal);

    init_rng_ = nullptr;
}

std::vector<Tensor> NetworkParams::tensors() const {
    std::vector<Tensor> out;
    out.reserve(named_.size());
    for (const NamedTensor& nt : named_) out.push_back(nt.tensor);
    return out;
}

void NetworkParams::zero_grads() {
    for (const NamedTensor& nt : named_) {
        Tensor t = nt.tensor;
        t.zero_grad();
    }
}

std::vector<std::vector<double>> NetworkParams::snapshot_values() const {
    std::vector<std::vector<double>> snap;
    snap.reserve(named_.size());
    for (const NamedTensor& nt : named_) snap.push_back(nt.tensor.values());
    return snap;
}

void NetworkParams::restore_values(const std::vector<std::vector<double>>& snap) {
    if (snap.size() != named_.size()) fail("ShapeError", "snapshot does not match parameter list");
    for (std::size_t i = 0; i < snap.size(); ++i) {
        Tensor t = named_[i].tensor;
        if (snap[i].size() != t.values().size()) fail("ShapeError", "snapshot tensor size mismatch");
        t.values() = snap[i];
    }
}

void NetworkParams::save(const std::string& ckpt_path) const {
    save_checkpoint(ckpt_path, named_);
}

NetworkParams NetworkParams::load(const std::string& ckpt_path, const NetworkConfig& cfg) {
    NetworkParams params(cfg, 0);
    std::map<std::string, Tensor> by_name;
    for (const NamedTensor& nt : load_checkpoint(ckpt_path)) by_name.emplace(nt.name, nt.tensor);
    for (NamedTensor& nt : params.named_) {
        auto it = by_name.find(nt.name);
        if (it == by_name.end()) fail("IoError", "checkpoint is missing tensor " + nt.name);
        if (it->second.shape() != nt.tensor.shape())
            fail("IoError", "checkpoint shape mismatch for " + nt.name + " (wrong config?)");
        nt.tensor.values() = it->second.values();
    }
    return params;
}

// ----------------------------------------------------------------- forward

Tensor cloud_tensor(const PointCloud& pc) {
    Tensor t({static_cast<std::int64_t>(pc.points.size()), 3});
    for (std::size_t i = 0; i < pc.points.size(); ++i) {
        t.at(static_cast<std::int64_t>(i), 0) = pc.points[i].x;
        t.at(static_cast<std::int64_t>(i), 1) = pc.points[i].y;
        t.at(static_cast<std::int64_t>(i), 2) = pc.points[i].z;
    }
    return t;
}

Tensor extract_point_feature(Graph& g, const NetworkParams& p, const PointCloud& pc) {
    if (pc.points.empty()) fail("ShapeError", "empty point cloud");
    const Tensor x = cloud_tensor(pc);
    Tensor h = g.relu(g.layer_norm(g.add(g.matmul(x, p.ext_w1), p.ext_b1), p.ext_ln1_g, p.ext_ln1_b));
    h = g.relu(g.layer_norm(g.add(g.matmul(h, p.ext_w2), p.ext_b2), p.ext_ln2_g, p.ext_ln2_b));
    h = g.add(g.matmul(h, p.ext_w3), p.ext_b3);
    return g.colmax(h);
}

namespace {

std::vector<std::uint8_t> causal_mask(std::int64_t n) {
    std::vector<std::uint8_t> mask(static_cast<std::size_t>(n * n), 0);
    for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t j = i + 1; j < n; ++j) mask[static_cast<std::size_t>(i * n + j)] = 1;
    return mask;
}

Tensor decoder_layer(Graph& g, const DecoderLayerParams& L, const Tensor& x, int heads, bool causal) {
    const std::int64_t n = x.dim(0), c = x.dim(1);
    const std::int64_t dk = c / heads;
    const Tensor q = g.add(g.matmul(x, L.wq), L.bq);
    const Tensor k = g.add(g.matmul(x, L.wk), L.bk);
    const Tensor v = g.add(g.matmul(x, L.wv), L.bv);
    std::vector<Tensor> ctx;
    ctx.reserve(static_cast<std::size_t>(heads));
    const std::vector<std::uint8_t> mask = causal ? causal_mask(n) : std::vector<std::uint8_t>{};
    for (int h = 0; h < heads; ++h) {
        const Tensor qh = g.slice_cols(q, h * dk, (h + 1) * dk);
        const Tensor kh = g.slice_cols(k, h * dk, (h + 1) * dk);
        const Tensor vh = g.slice_cols(v, h * dk, (h + 1) * dk);
        Tensor scores = g.scale(g.matmul_nt(qh, kh), 1.0 / std::sqrt(static_cast<double>(dk)));
        if (causal) scores = g.mask_fill(scores, mask, -1e9);
        ctx.push_back(g.matmul(g.softmax_rows(scores), vh));
    }
    const Tensor attn_out = g.add(g.matmul(g.concat_cols(ctx), L.wo), L.bo);
    const Tensor x1 = g.layer_norm(g.add(x, attn_out), L.ln1_g, L.ln1_b);
    const Tensor ff = g.add(
        g.matmul(g.relu(g.add(g.matmul(x1, L.ff_w1), L.ff_b1)), L.ff_w2), L.ff_b2);
    return g.layer_norm(g.add(x1, ff), L.ln2_g, L.ln2_b);
}

} // namespace

Tensor preliminary_stack(Graph& g, const NetworkParams& p, const Tensor& x) {
    Tensor s = x;
    for (const DecoderLayerParams& L : p.prelim_layers)
        s = decoder_layer(g, L, s, p.config.heads, false);
    return s;
}

Tensor masked_stack(Graph& g, const NetworkParams& p, const Tensor& x) {
    Tensor s = x;
    for (const DecoderLayerParams& L : p.masked_layers)
        s = decoder_layer(g, L, s, p.config.heads, true);
    return s;
}

Tensor reconstruct_sequence(Graph& g, const NetworkParams& p, const Tensor& feature) {
    // F broadcast over all N positions plus the positional embedding
    const Tensor f_input = g.add(p.pos_embed, feature);
    return masked_stack(g, p, preliminary_stack(g, p, f_input));
}

Tensor command_head(Graph& g, const NetworkParams& p, const Tensor& seq_features) {
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(p.config.d_attn));
    const Tensor cmd0 = g.add(g.matmul(seq_features, p.cmd_lin_w), p.cmd_lin_b);
    const Tensor q = g.matmul(cmd0, p.cmd_wq);
    const Tensor k = g.matmul(seq_features, p.cmd_wk);
    const Tensor v = g.matmul(seq_features, p.cmd_wv);
    if (p.config.standard_attention) {
        const Tensor attn = g.softmax_rows(g.scale(g.matmul_nt(q, k), inv_sqrt_d));
        return g.softmax_rows(g.matmul(attn, v));
    }
    return g.softmax_rows(g.scale(g.matmul(g.matmul_nt(q, k), v), inv_sqrt_d));
}

Tensor parameter_head(Graph& g, const NetworkParams& p, const Tensor& seq_features,
                      const Tensor& cmd) {
    const NetworkConfig& cfg = p.config;
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(cfg.d_attn));
    const Tensor param0 = g.add(g.matmul(seq_features, p.par_lin_w), p.par_lin_b);
    Tensor embedded;
    if (cfg.hard_command_embedding) {
        std::vector<int> idx(static_cast<std::size_t>(cmd.dim(0)));
        for (std::int64_t i = 0; i < cmd.dim(0); ++i) {
            int best = 0;
            for (std::int64_t j = 1; j < cmd.dim(1); ++j)
                if (cmd.at(i, j) > cmd.at(i, best)) best = static_cast<int>(j);
            idx[static_cast<std::size_t>(i)] = best;
        }
        embedded = g.embedding_rows(p.cmd_embed, idx);
    } else {
        embedded = g.matmul(cmd, p.cmd_embed); // distribution-weighted rows
    }
    const Tensor memory = g.add(seq_features, embedded);
    const Tensor q = g.matmul(param0, p.par_wq);
    const Tensor k = g.matmul(memory, p.par_wk);
    const Tensor v = g.matmul(memory, p.par_wv);
    Tensor mixed;
    if (cfg.standard_attention) {
        const Tensor attn = g.softmax_rows(g.scale(g.matmul_nt(q, k), inv_sqrt_d));
        mixed = g.matmul(attn, v);
    } else {
        mixed = g.scale(g.matmul(g.matmul_nt(q, k), v), inv_sqrt_d);
    }
    const Tensor dist = g.softmax_blocks(mixed, cfg.param_classes);
    return g.reshape(dist, {cfg.seq_len, cfg.n_param_slots, cfg.param_classes});
}

Prediction forward(Graph& g, const NetworkParams& p, const PointCloud& pc) {
    const Tensor f = extract_point_feature(g, p, pc);
    const Tensor s = reconstruct_sequence(g, p, f);
    Prediction pred;
    pred.cmd = command_head(g, p, s);
    pred.param = parameter_head(g, p, s, pred.cmd);
    return pred;
}

TokenMatrix decode_prediction(const Prediction& pred) {
    const std::int64_t n = pred.cmd.dim(0);
    const std::int64_t k = pred.cmd.dim(1);
    const std::int64_t np = pred.param.dim(1);
    const std::int64_t q = pred.param.dim(2);
    if (n > kSeqLen) fail("ShapeError", "prediction longer than the token matrix");
    TokenMatrix m;
    for (std::int64_t i = 0; i < n; ++i) {
        int code = 0;
        for (std::int64_t j = 1; j < k; ++j)
            if (pred.cmd.at(i, j) > pred.cmd.at(i, code)) code = static_cast<int>(j);
        if (code == static_cast<int>(CommandType::Eos)) break;
        TokenRow& row = m.rows[static_cast<std::size_t>(i)];
        row.cmd = static_cast<std::uint16_t>(code);
        const double* slice = pred.param.data() + i * np * q;
        for (std::int64_t j = 0; j < np; ++j) {
            int best = 0;
            for (std::int64_t c = 1; c < q; ++c)
                if (slice[j * q + c] > slice[j * q + best]) best = static_cast<int>(c);
            row.params[static_cast<std::size_t>(j)] = static_cast<std::uint16_t>(best);
        }
    }
    return m;
}

} // namespace p2cad
