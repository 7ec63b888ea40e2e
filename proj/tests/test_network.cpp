#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <vector>

#include "p2cad/cad_lang.hpp"
#include "p2cad/network.hpp"
#include "p2cad/rng.hpp"
#include "p2cad/trainer.hpp"

using namespace p2cad;

namespace {

PointCloud random_cloud(Rng& rng, int n) {
    PointCloud pc;
    for (int i = 0; i < n; ++i)
        pc.points.push_back({rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)});
    return pc;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    double worst = 0.0;
    for (std::int64_t i = 0; i < a.numel(); ++i) worst = std::max(worst, std::abs(a.at(i) - b.at(i)));
    return worst;
}

// one-hot Prediction whose argmax decode must reproduce the matrix
Prediction one_hot_prediction(const TokenMatrix& m, const NetworkConfig& cfg) {
    Prediction pred;
    pred.cmd = Tensor({cfg.seq_len, cfg.n_cmd});
    pred.param = Tensor({cfg.seq_len, cfg.n_param_slots, cfg.param_classes});
    for (int i = 0; i < cfg.seq_len; ++i) {
        pred.cmd.at(i, m.rows[static_cast<std::size_t>(i)].cmd) = 1.0;
        for (int j = 0; j < cfg.n_param_slots; ++j) {
            const std::int64_t base =
                (static_cast<std::int64_t>(i) * cfg.n_param_slots + j) * cfg.param_classes;
            pred.param.at(base + m.rows[static_cast<std::size_t>(i)].params[static_cast<std::size_t>(j)]) = 1.0;
        }
    }
    return pred;
}

} // namespace

TEST_CASE("extractor is permutation and duplication invariant") {
    const NetworkConfig cfg = NetworkConfig::tiny();
    NetworkParams params(cfg, 101);
    Rng rng(5);
    const PointCloud pc = random_cloud(rng, cfg.n_points);

    Graph g(false);
    const Tensor f = extract_point_feature(g, params, pc);
    CHECK(f.dim(0) == 1);
    CHECK(f.dim(1) == cfg.d_model);

    SUBCASE("permutation") {
        PointCloud shuffled = pc;
        std::reverse(shuffled.points.begin(), shuffled.points.end());
        std::swap(shuffled.points[0], shuffled.points[7]);
        const Tensor f2 = extract_point_feature(g, params, shuffled);
        CHECK(max_abs_diff(f, f2) < 1e-12);
    }
    SUBCASE("duplication") {
        PointCloud doubled = pc;
        doubled.points.insert(doubled.points.end(), pc.points.begin(), pc.points.end());
        const Tensor f2 = extract_point_feature(g, params, doubled);
        CHECK(max_abs_diff(f, f2) < 1e-12);
    }
    SUBCASE("single point equals its own MLP output") {
        PointCloud one;
        one.points.push_back(pc.points[3]);
        const Tensor f1 = extract_point_feature(g, params, one);
        PointCloud twice;
        twice.points = {pc.points[3], pc.points[3]};
        const Tensor f2 = extract_point_feature(g, params, twice);
        CHECK(max_abs_diff(f1, f2) == 0.0);
    }
}

TEST_CASE("masked stack is causal") {
    const NetworkConfig cfg = NetworkConfig::tiny();
    NetworkParams params(cfg, 102);
    Rng rng(6);
    const std::int64_t n = cfg.seq_len, c = cfg.d_model;
    Tensor x({n, c});
    for (double& v : x.values()) v = rng.uniform(-1, 1);
    Graph g(false);
    const Tensor base = masked_stack(g, params, x);

    for (const std::int64_t i : {std::int64_t{0}, n / 2, n - 1}) {
        for (int rep = 0; rep < 10; ++rep) {
            Tensor perturbed({n, c});
            perturbed.values() = x.values();
            for (std::int64_t j = i + 1; j < n; ++j)
                for (std::int64_t k = 0; k < c; ++k)
                    perturbed.at(j, k) += rng.uniform(-0.5, 0.5);
            const Tensor out = masked_stack(g, params, perturbed);
            double drift = 0.0;
            for (std::int64_t k = 0; k < c; ++k)
                drift = std::max(drift, std::abs(out.at(i, k) - base.at(i, k)));
            CHECK(drift < 1e-9);
        }
    }
}

TEST_CASE("row 0 of the masked stack depends only on row 0 of its input") {
    const NetworkConfig cfg = NetworkConfig::tiny();
    NetworkParams params(cfg, 103);
    Rng rng(7);
    Tensor s0({cfg.seq_len, cfg.d_model});
    for (double& v : s0.values()) v = rng.uniform(-1, 1);
    Graph g(false);
    const Tensor a = masked_stack(g, params, s0);
    Tensor s1({cfg.seq_len, cfg.d_model});
    s1.values() = s0.values();
    for (std::int64_t j = 1; j < cfg.seq_len; ++j)
        for (std::int64_t k = 0; k < cfg.d_model; ++k) s1.at(j, k) = rng.uniform(-2, 2);
    const Tensor b = masked_stack(g, params, s1);
    for (std::int64_t k = 0; k < cfg.d_model; ++k) CHECK(a.at(0, k) == b.at(0, k));
}

TEST_CASE("zeroed attention and FFN weights reduce both stacks to layer-normed input") {
    NetworkConfig cfg = NetworkConfig::tiny();
    cfg.seq_len = 2;
    NetworkParams params(cfg, 104);
    for (auto stack : {&params.prelim_layers, &params.masked_layers}) {
        for (DecoderLayerParams& L : *stack) {
            for (Tensor* t : {&L.wq, &L.bq, &L.wk, &L.bk, &L.wv, &L.bv, &L.wo, &L.bo,
                              &L.ff_w1, &L.ff_b1, &L.ff_w2, &L.ff_b2})
                std::fill(t->values().begin(), t->values().end(), 0.0);
        }
    }
    Rng rng(8);
    Tensor x({cfg.seq_len, cfg.d_model});
    for (double& v : x.values()) v = rng.uniform(-1, 1);

    // expected fixed point: row-wise layer norm of the input
    Tensor expect({cfg.seq_len, cfg.d_model});
    for (std::int64_t i = 0; i < cfg.seq_len; ++i) {
        double mu = 0.0, var = 0.0;
        for (std::int64_t k = 0; k < cfg.d_model; ++k) mu += x.at(i, k);
        mu /= static_cast<double>(cfg.d_model);
        for (std::int64_t k = 0; k < cfg.d_model; ++k) {
            const double d = x.at(i, k) - mu;
            var += d * d;
        }
        var /= static_cast<double>(cfg.d_model);
        for (std::int64_t k = 0; k < cfg.d_model; ++k)
            expect.at(i, k) = (x.at(i, k) - mu) / std::sqrt(var + 1e-5);
    }

    Graph g(false);
    const Tensor prelim = preliminary_stack(g, params, x);
    const Tensor final_s = masked_stack(g, params, prelim);
    CHECK(max_abs_diff(prelim, expect) < 1e-4);  // repeated LN drifts by ~eps
    CHECK(max_abs_diff(final_s, expect) < 1e-4);
}

TEST_CASE("zeroed positional embedding makes all unmasked rows identical") {
    const NetworkConfig cfg = NetworkConfig::tiny();
    NetworkParams params(cfg, 105);
    std::fill(params.pos_embed.values().begin(), params.pos_embed.values().end(), 0.0);
    Rng rng(9);
    const PointCloud pc = random_cloud(rng, cfg.n_points);
    Graph g(false);
    const Tensor f = extract_point_feature(g, params, pc);
    const Tensor f_input = g.add(params.pos_embed, f);
    const Tensor s = preliminary_stack(g, params, f_input);
    for (std::int64_t i = 1; i < cfg.seq_len; ++i)
        for (std::int64_t k = 0; k < cfg.d_model; ++k)
            CHECK(std::abs(s.at(i, k) - s.at(0, k)) < 1e-9);
}

TEST_CASE("heads emit distributions") {
    const NetworkConfig cfg = NetworkConfig::tiny();
    NetworkParams params(cfg, 106);
    Rng rng(10);
    const PointCloud pc = random_cloud(rng, cfg.n_points);
    Graph g(false);
    const Prediction pred = forward(g, params, pc);

    for (std::int64_t i = 0; i < cfg.seq_len; ++i) {
        double s = 0.0;
        for (std::int64_t k = 0; k < cfg.n_cmd; ++k) {
            s += pred.cmd.at(i, k);
            CHECK(pred.cmd.at(i, k) >= 0.0);
        }
        CHECK(std::abs(s - 1.0) < 1e-9);
    }
    for (std::int64_t i = 0; i < cfg.seq_len; ++i) {
        for (std::int64_t j = 0; j < cfg.n_param_slots; ++j) {
            double s = 0.0;
            const std::int64_t base = (i * cfg.n_param_slots + j) * cfg.param_classes;
            for (std::int64_t q = 0; q < cfg.param_classes; ++q) s += pred.param.at(base + q);
            CHECK(std::abs(s - 1.0) < 1e-9);
        }
    }
}

TEST_CASE("parameter head output shape at the default config") {
    const NetworkConfig cfg = NetworkConfig::defaults();
    NetworkParams params(cfg, 107);
    Rng rng(11);
    const PointCloud pc = random_cloud(rng, 64); // forward works for any cloud size
    Graph g(false);
    const Prediction pred = forward(g, params, pc);
    CHECK(pred.param.shape() == std::vector<std::int64_t>{60, 16, 257});
    CHECK(pred.cmd.shape() == std::vector<std::int64_t>{60, 6});
}

TEST_CASE("forward is deterministic and permutation invariant") {
    const NetworkConfig cfg = NetworkConfig::tiny();
    NetworkParams params(cfg, 108);
    Rng rng(12);
    const PointCloud pc = random_cloud(rng, cfg.n_points);
    Graph g(false);
    const Prediction a = forward(g, params, pc);
    const Prediction b = forward(g, params, pc);
    CHECK(max_abs_diff(a.cmd, b.cmd) == 0.0);
    CHECK(max_abs_diff(a.param, b.param) == 0.0);

    PointCloud shuffled = pc;
    std::rotate(shuffled.points.begin(), shuffled.points.begin() + 5, shuffled.points.end());
    const Prediction c = forward(g, params, shuffled);
    CHECK(max_abs_diff(a.cmd, c.cmd) < 1e-9);
    CHECK(max_abs_diff(a.param, c.param) < 1e-9);
}

TEST_CASE("gradient reaches the command embedding table") {
    const NetworkConfig cfg = NetworkConfig::tiny();
    NetworkParams params(cfg, 109);
    Rng rng(13);
    const PointCloud pc = random_cloud(rng, cfg.n_points);
    std::vector<int> cmd_t(static_cast<std::size_t>(cfg.seq_len), 1);
    std::vector<int> par_t(static_cast<std::size_t>(cfg.seq_len * cfg.n_param_slots), 3);

    params.zero_grads();
    Graph g;
    const Prediction pred = forward(g, params, pc);
    const LossReport rep = compute_loss_targets(g, pred, cmd_t, par_t, 1.0);
    g.backward(rep.total);

    double norm = 0.0;
    for (double v : params.cmd_embed.grad()) norm += v * v;
    CHECK(norm > 0.0);

    // finite-difference check on the largest-gradient entry
    std::size_t best = 0;
    for (std::size_t i = 0; i < params.cmd_embed.grad().size(); ++i)
        if (std::abs(params.cmd_embed.grad()[i]) > std::abs(params.cmd_embed.grad()[best])) best = i;
    const double an = params.cmd_embed.grad()[best];
    const double h = 1e-5;
    auto loss_at = [&](double delta) {
        params.cmd_embed.values()[best] += delta;
        Graph gg(false);
        const Prediction p2 = forward(gg, params, pc);
        const double v = compute_loss_targets(gg, p2, cmd_t, par_t, 1.0).loss;
        params.cmd_embed.values()[best] -= delta;
        return v;
    };
    const double fd = (loss_at(h) - loss_at(-h)) / (2 * h);
    CHECK(std::abs(fd - an) / std::max({1e-8, std::abs(fd), std::abs(an)}) < 1e-4);
}

TEST_CASE("hard command embedding option stays a valid forward path") {
    NetworkConfig cfg = NetworkConfig::tiny();
    cfg.hard_command_embedding = true;
    NetworkParams params(cfg, 110);
    Rng rng(14);
    Graph g(false);
    const Prediction pred = forward(g, params, random_cloud(rng, cfg.n_points));
    for (std::int64_t i = 0; i < cfg.seq_len; ++i) {
        double s = 0.0;
        for (std::int64_t k = 0; k < cfg.n_cmd; ++k) s += pred.cmd.at(i, k);
        CHECK(std::abs(s - 1.0) < 1e-9);
    }
}

TEST_CASE("standard attention ablation stays a valid forward path") {
    NetworkConfig cfg = NetworkConfig::tiny();
    cfg.standard_attention = true;
    NetworkParams params(cfg, 111);
    Rng rng(15);
    Graph g(false);
    const Prediction pred = forward(g, params, random_cloud(rng, cfg.n_points));
    for (std::int64_t i = 0; i < cfg.seq_len; ++i) {
        for (std::int64_t j = 0; j < cfg.n_param_slots; ++j) {
            double s = 0.0;
            const std::int64_t base = (i * cfg.n_param_slots + j) * cfg.param_classes;
            for (std::int64_t q = 0; q < cfg.param_classes; ++q) s += pred.param.at(base + q);
            CHECK(std::abs(s - 1.0) < 1e-9);
        }
    }
}

TEST_CASE("decode_prediction") {
    const NetworkConfig cfg = NetworkConfig::defaults();
    SUBCASE("one-hot encodings decode back to their matrix") {
        Rng rng(16);
        for (int rep = 0; rep < 50; ++rep) {
            CadSequence seq;
            seq.commands.push_back(CadCommand::of(CommandType::Sol));
            const int curves = rng.range(1, 4);
            for (int i = 0; i < curves; ++i) {
                CadCommand c = CadCommand::of(CommandType::Line);
                c.params[kParamX] = static_cast<std::uint16_t>(rng.range(1, 256));
                c.params[kParamY] = static_cast<std::uint16_t>(rng.range(1, 256));
                seq.commands.push_back(c);
            }
            CadCommand ext = CadCommand::of(CommandType::Ext);
            for (int s : used_slots(CommandType::Ext))
                ext.params[static_cast<std::size_t>(s)] = static_cast<std::uint16_t>(rng.range(1, 256));
            seq.commands.push_back(ext);
            seq.commands.push_back(CadCommand::of(CommandType::Eos));
            const TokenMatrix m = to_token_matrix(seq);
            CHECK(decode_prediction(one_hot_prediction(m, cfg)) == m);
        }
    }
    SUBCASE("uniform prediction ties break to SOL with unused params") {
        Prediction pred;
        pred.cmd = Tensor({cfg.seq_len, cfg.n_cmd});
        pred.param = Tensor({cfg.seq_len, cfg.n_param_slots, cfg.param_classes});
        std::fill(pred.cmd.values().begin(), pred.cmd.values().end(), 1.0 / cfg.n_cmd);
        std::fill(pred.param.values().begin(), pred.param.values().end(), 1.0 / cfg.param_classes);
        const TokenMatrix m = decode_prediction(pred);
        for (const TokenRow& r : m.rows) {
            CHECK(r.cmd == 0); // SOL
            for (std::uint16_t p : r.params) CHECK(p == 0);
        }
        CHECK_FALSE(validate_syntax(m).ok);
    }
    SUBCASE("rows at and after the first EOS become padding") {
        TokenMatrix m;
        m.rows[0].cmd = 0;
        m.rows[1].cmd = 1;
        m.rows[1].params[kParamX] = 10;
        m.rows[1].params[kParamY] = 20;
        m.rows[2].cmd = 4;
        for (int s : used_slots(CommandType::Ext))
            m.rows[2].params[static_cast<std::size_t>(s)] = 5;
        Prediction pred = one_hot_prediction(m, cfg);
        // junk argmaxes after the EOS position; decode must ignore them
        for (std::int64_t i = 4; i < cfg.seq_len; ++i) pred.cmd.at(i, 2) = 5.0;
        const TokenMatrix out = decode_prediction(pred);
        for (int i = 3; i < kSeqLen; ++i) {
            CHECK(out.rows[static_cast<std::size_t>(i)].cmd == 5);
            for (std::uint16_t p : out.rows[static_cast<std::size_t>(i)].params) CHECK(p == 0);
        }
    }
}

TEST_CASE("checkpoint save/load reproduces forward outputs bit-exactly") {
    const NetworkConfig cfg = NetworkConfig::tiny();
    NetworkParams params(cfg, 112);
    Rng rng(17);
    const PointCloud pc = random_cloud(rng, cfg.n_points);
    Graph g(false);
    const Prediction before = forward(g, params, pc);

    const std::string path = "/tmp/p2cad_net_test.p2ck";
    params.save(path);
    const NetworkParams loaded = NetworkParams::load(path, cfg);
    const Prediction after = forward(g, loaded, pc);
    CHECK(max_abs_diff(before.cmd, after.cmd) == 0.0);
    CHECK(max_abs_diff(before.param, after.param) == 0.0);
    std::remove(path.c_str());
}
