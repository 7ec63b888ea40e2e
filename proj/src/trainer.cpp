#include "p2cad/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "p2cad/error.hpp"
#include "p2cad/parallel.hpp"
#include "p2cad/rng.hpp"

namespace p2cad {

namespace {

constexpr double kPi = 3.14159265358979323846;

double round_f32(double v) { return static_cast<double>(static_cast<float>(v)); }

void round_cloud_f32(PointCloud& pc) {
    for (Vec3& p : pc.points) p = {round_f32(p.x), round_f32(p.y), round_f32(p.z)};
}

} // namespace

// ------------------------------------------------------------------ losses

LossReport compute_loss_targets(Graph& g, const Prediction& pred,
                                const std::vector<int>& cmd_targets,
                                const std::vector<int>& param_targets, double beta) {
    const std::int64_t n = pred.cmd.dim(0);
    const std::int64_t np = pred.param.dim(1), q = pred.param.dim(2);
    if (static_cast<std::int64_t>(cmd_targets.size()) != n ||
        static_cast<std::int64_t>(param_targets.size()) != n * np)
        fail("ShapeError", "target lengths do not match the prediction");
    LossReport rep;
    const Tensor l_cmd = g.nll_probs(pred.cmd, cmd_targets);
    const Tensor param2d = g.reshape(pred.param, {n * np, q});
    const Tensor l_param = g.nll_probs(param2d, param_targets);
    rep.total = g.add(l_cmd, g.scale(l_param, beta));
    rep.loss_cmd = l_cmd.scalar();
    rep.loss_param = l_param.scalar();
    rep.loss = rep.total.scalar();
    return rep;
}

LossReport compute_loss(Graph& g, const Prediction& pred, const TokenMatrix& target, double beta) {
    const std::int64_t n = pred.cmd.dim(0);
    if (n != kSeqLen) fail("ShapeError", "prediction length does not match the token matrix");
    std::vector<int> cmd_targets(kSeqLen);
    std::vector<int> param_targets(static_cast<std::size_t>(kSeqLen) * kNumParams);
    for (int i = 0; i < kSeqLen; ++i) {
        cmd_targets[static_cast<std::size_t>(i)] = target.rows[static_cast<std::size_t>(i)].cmd;
        for (int j = 0; j < kNumParams; ++j)
            param_targets[static_cast<std::size_t>(i * kNumParams + j)] =
                target.rows[static_cast<std::size_t>(i)].params[static_cast<std::size_t>(j)];
    }
    return compute_loss_targets(g, pred, cmd_targets, param_targets, beta);
}

// ----------------------------------------------------------------- metrics

double acc_cmd(const TokenMatrix& pred, const TokenMatrix& gt) {
    int hits = 0;
    for (int i = 0; i < kSeqLen; ++i)
        if (pred.rows[static_cast<std::size_t>(i)].cmd == gt.rows[static_cast<std::size_t>(i)].cmd) ++hits;
    return static_cast<double>(hits) / static_cast<double>(kSeqLen);
}

ParamAccuracy acc_param(const TokenMatrix& pred, const TokenMatrix& gt, int eta) {
    long evaluated = 0, hits = 0;
    for (int i = 0; i < kSeqLen; ++i) {
        const TokenRow& pr = pred.rows[static_cast<std::size_t>(i)];
        const TokenRow& gr = gt.rows[static_cast<std::size_t>(i)];
        if (pr.cmd != gr.cmd || gr.cmd >= kNumCommands) continue;
        const auto t = static_cast<CommandType>(gr.cmd);
        for (int j = 0; j < kNumParams; ++j) {
            const int g = gr.params[static_cast<std::size_t>(j)];
            if (!slot_used(t, j) || g == 0) continue;
            ++evaluated;
            const int p = pr.params[static_cast<std::size_t>(j)];
            if (std::abs(p - g) < eta) ++hits;
        }
    }
    ParamAccuracy out;
    out.evaluated = evaluated;
    out.acc = evaluated == 0 ? 1.0 : static_cast<double>(hits) / static_cast<double>(evaluated);
    return out;
}

std::string MetricsReport::to_json() const {
    nlohmann::ordered_json j;
    j["acc_cmd"] = acc_cmd;
    j["acc_param"] = acc_param;
    j["cd_median"] = cd_median;
    j["cd_mean"] = cd_mean;
    j["invalid_ratio"] = invalid_ratio;
    j["total"] = total;
    j["valid"] = valid;
    j["param_slots_evaluated"] = param_slots_evaluated;
    return j.dump(2) + "\n";
}

ReferenceMetrics full_scale_reference() {
    return {0.806, 0.756, 1.90e-3, 0.23};
}

// ----------------------------------------------------------------- dataset

void DatasetSpec::validate() const {
    if (count < 1) fail("BadSpec", "count must be at least 1");
    if (n_points < 8) fail("BadSpec", "n_points must be at least 8");
    if (min_groups < 1 || max_groups < min_groups) fail("BadSpec", "bad group range");
    if (min_loops < 1 || max_loops < min_loops) fail("BadSpec", "bad loop range");
    if (min_curves < 3 || max_curves < min_curves)
        fail("BadSpec", "curve range must allow at least 3 curves per loop");
    const long worst = static_cast<long>(max_groups) * (max_loops * (1 + max_curves) + 1) + 1;
    if (worst > kSeqLen)
        fail("BadSpec", "spec can emit " + std::to_string(worst) + " commands, limit is 60");
}

std::uint64_t sample_cloud_seed(std::uint64_t dataset_seed, long index) {
    return derive_seed(dataset_seed, 2 * static_cast<std::uint64_t>(index) + 1);
}

namespace {

CadCommand make_cmd(CommandType t, std::initializer_list<std::pair<int, double>> vals) {
    CadCommand c = CadCommand::of(t);
    for (const auto& [slot, value] : vals)
        c.params[static_cast<std::size_t>(slot)] = static_cast<std::uint16_t>(quantize_slot(slot, value));
    return c;
}

void emit_polyline_loop(std::vector<CadCommand>& out, Rng& rng, int n_curves) {
    const double cx = rng.uniform(-0.4, 0.4), cy = rng.uniform(-0.4, 0.4);
    const double base = rng.uniform(0.15, 0.5);
    std::vector<Vec2> verts;
    for (int k = 0; k < n_curves; ++k) {
        const double a = 2.0 * kPi * (static_cast<double>(k) + 0.2 + 0.6 * rng.uniform()) /
                         static_cast<double>(n_curves);
        const double r = base * rng.uniform(0.6, 1.0);
        verts.push_back({cx + r * std::cos(a), cy + r * std::sin(a)});
    }
    for (const Vec2& v : verts) {
        if (rng.chance(0.3)) {
            out.push_back(make_cmd(CommandType::Arc, {{kParamX, v.x},
                                                      {kParamY, v.y},
                                                      {kParamAlpha, rng.uniform(1.0, 2.4)},
                                                      {kParamCcw, rng.chance(0.5) ? 1.0 : 0.0}}));
        } else {
            out.push_back(make_cmd(CommandType::Line, {{kParamX, v.x}, {kParamY, v.y}}));
        }
    }
}

CadSequence random_sequence(Rng& rng, const DatasetSpec& spec) {
    CadSequence seq;
    const int n_groups = rng.range(spec.min_groups, spec.max_groups);
    for (int gi = 0; gi < n_groups; ++gi) {
        const int n_loops = rng.range(spec.min_loops, spec.max_loops);
        for (int li = 0; li < n_loops; ++li) {
            seq.commands.push_back(CadCommand::of(CommandType::Sol));
            if (rng.chance(0.25)) {
                seq.commands.push_back(make_cmd(CommandType::Circle, {{kParamX, rng.uniform(-0.45, 0.45)},
                                                                      {kParamY, rng.uniform(-0.45, 0.45)},
                                                                      {kParamRadius, rng.uniform(0.1, 0.4)}}));
            } else {
                emit_polyline_loop(seq.commands, rng, rng.range(spec.min_curves, spec.max_curves));
            }
        }
        const bool first = gi == 0;
        // later groups stay near the first body so booleans actually interact
        const double rot_span = first ? 1.2 : 0.5;
        const double e1 = rng.uniform(first ? 0.2 : 0.15, first ? 0.7 : 0.6);
        const bool one_sided = rng.chance(0.3);
        const double e2 = one_sided ? 0.0 : -rng.uniform(0.1, first ? 0.7 : 0.6);
        double bop = 0.0;
        if (!first) bop = rng.chance(0.6) ? 1.0 : 2.0;
        seq.commands.push_back(make_cmd(
            CommandType::Ext, {{kParamTheta, rng.uniform(-rot_span, rot_span)},
                               {kParamPhi, rng.uniform(-rot_span, rot_span)},
                               {kParamGamma, rng.uniform(-rot_span, rot_span)},
                               {kParamPlaneX, rng.uniform(-0.25, 0.25)},
                               {kParamPlaneY, rng.uniform(-0.25, 0.25)},
                               {kParamPlaneZ, rng.uniform(-0.25, 0.25)},
                               {kParamScale, rng.uniform(first ? 0.7 : 0.5, first ? 1.3 : 1.0)},
                               {kParamExtent1, e1},
                               {kParamExtent2, e2},
                               {kParamBoolOp, bop},
                               {kParamExtentKind, one_sided ? 0.0 : 2.0}}));
    }
    seq.commands.push_back(CadCommand::of(CommandType::Eos));
    return seq;
}

} // namespace

Dataset generate_dataset(const DatasetSpec& spec) {
    spec.validate();
    Dataset ds;
    ds.spec = spec;
    ds.samples.resize(static_cast<std::size_t>(spec.count));
    parallel_for(spec.count, [&](long i) {
        Rng rng(derive_seed(spec.seed, 2 * static_cast<std::uint64_t>(i)));
        const std::uint64_t cloud_seed = sample_cloud_seed(spec.seed, i);
        for (int attempt = 0; attempt < 200; ++attempt) {
            const CadSequence seq = random_sequence(rng, spec);
            try {
                const Solid solid = execute(seq);
                PointCloud cloud = normalize(sample_surface(solid, spec.n_points, cloud_seed));
                round_cloud_f32(cloud);
                ds.samples[static_cast<std::size_t>(i)] = {to_token_matrix(seq), std::move(cloud)};
                return;
            } catch (const Error&) {
                // semantically invalid draw; try again
            }
        }
        fail("BadSpec", "could not draw a valid sample for index " + std::to_string(i));
    });
    return ds;
}

void save_dataset(const std::string& dir, const Dataset& ds) {
    std::filesystem::create_directories(dir);
    nlohmann::ordered_json j;
    j["version"] = 1;
    j["count"] = ds.spec.count;
    j["seed"] = ds.spec.seed;
    j["n_points"] = ds.spec.n_points;
    j["min_groups"] = ds.spec.min_groups;
    j["max_groups"] = ds.spec.max_groups;
    j["min_loops"] = ds.spec.min_loops;
    j["max_loops"] = ds.spec.max_loops;
    j["min_curves"] = ds.spec.min_curves;
    j["max_curves"] = ds.spec.max_curves;
    std::ofstream mf(dir + "/manifest.json");
    if (!mf) fail("IoError", "cannot write manifest in " + dir);
    mf << j.dump(2) << "\n";

    std::vector<TokenMatrix> tokens;
    tokens.reserve(ds.samples.size());
    PointCloud all;
    for (const DatasetSample& s : ds.samples) {
        tokens.push_back(s.tokens);
        all.points.insert(all.points.end(), s.cloud.points.begin(), s.cloud.points.end());
    }
    save_tokens(dir + "/tokens.p2cd", tokens);
    save_cloud_binary(dir + "/clouds.p2pc", all);
}

Dataset load_dataset(const std::string& dir) {
    std::ifstream mf(dir + "/manifest.json");
    if (!mf) fail("IoError", "missing manifest.json in " + dir);
    nlohmann::json j;
    try {
        mf >> j;
    } catch (const nlohmann::json::exception& e) {
        fail("IoError", std::string("bad manifest: ") + e.what());
    }
    Dataset ds;
    ds.spec.count = j.at("count").get<long>();
    ds.spec.seed = j.at("seed").get<std::uint64_t>();
    ds.spec.n_points = j.at("n_points").get<int>();
    ds.spec.min_groups = j.value("min_groups", 1);
    ds.spec.max_groups = j.value("max_groups", 2);
    ds.spec.min_loops = j.value("min_loops", 1);
    ds.spec.max_loops = j.value("max_loops", 2);
    ds.spec.min_curves = j.value("min_curves", 3);
    ds.spec.max_curves = j.value("max_curves", 6);

    const std::vector<TokenMatrix> tokens = load_tokens(dir + "/tokens.p2cd");
    const PointCloud all = load_cloud(dir + "/clouds.p2pc");
    const std::size_t n = static_cast<std::size_t>(ds.spec.count);
    const std::size_t pts = static_cast<std::size_t>(ds.spec.n_points);
    if (tokens.size() != n || all.points.size() != n * pts)
        fail("IoError", "dataset files do not match the manifest in " + dir);
    for (std::size_t i = 0; i < n; ++i) {
        DatasetSample s;
        s.tokens = tokens[i];
        s.cloud.points.assign(all.points.begin() + static_cast<std::ptrdiff_t>(i * pts),
                              all.points.begin() + static_cast<std::ptrdiff_t>((i + 1) * pts));
        ds.samples.push_back(std::move(s));
    }
    return ds;
}

// -------------------------------------------------------------- evaluation

MetricsReport evaluate_predictions(const std::vector<TokenMatrix>& preds, const Dataset& ds, int eta) {
    if (preds.size() != ds.samples.size())
        fail("ShapeError", "prediction count does not match the dataset");
    if (ds.samples.empty()) fail("BadSpec", "empty dataset");

    struct Row {
        double acc_c = 0.0, acc_p = 0.0, cd = 0.0;
        long evaluated = 0;
        bool valid = false;
    };
    std::vector<Row> rows(ds.samples.size());
    parallel_for(static_cast<long>(ds.samples.size()), [&](long li) {
        const std::size_t i = static_cast<std::size_t>(li);
        const TokenMatrix& pred = preds[i];
        const TokenMatrix& gt = ds.samples[i].tokens;
        Row& row = rows[i];
        row.acc_c = acc_cmd(pred, gt);
        const ParamAccuracy pa = acc_param(pred, gt, eta);
        row.acc_p = pa.acc;
        row.evaluated = pa.evaluated;
        if (!validate_syntax(pred).ok) return;
        try {
            const Solid solid = execute(from_token_matrix(pred));
            PointCloud cloud = normalize(
                sample_surface(solid, ds.spec.n_points, sample_cloud_seed(ds.spec.seed, li)));
            round_cloud_f32(cloud);
            row.cd = chamfer_distance(cloud, ds.samples[i].cloud);
            row.valid = true;
        } catch (const Error&) {
            // counted as invalid below
        }
    });

    MetricsReport rep;
    rep.total = static_cast<long>(ds.samples.size());
    double acc_c = 0.0, acc_p = 0.0;
    std::vector<double> cds;
    for (const Row& row : rows) {
        acc_c += row.acc_c;
        acc_p += row.acc_p;
        rep.param_slots_evaluated += row.evaluated;
        if (row.valid) {
            cds.push_back(row.cd);
            ++rep.valid;
        }
    }
    rep.acc_cmd = acc_c / static_cast<double>(rep.total);
    rep.acc_param = acc_p / static_cast<double>(rep.total);
    rep.invalid_ratio = static_cast<double>(rep.total - rep.valid) / static_cast<double>(rep.total);
    if (!cds.empty()) {
        std::sort(cds.begin(), cds.end());
        const std::size_t mid = cds.size() / 2;
        rep.cd_median = cds.size() % 2 == 1 ? cds[mid] : 0.5 * (cds[mid - 1] + cds[mid]);
        double sum = 0.0;
        for (double c : cds) sum += c;
        rep.cd_mean = sum / static_cast<double>(cds.size());
    }
    return rep;
}

MetricsReport evaluate(const NetworkParams& params, const Dataset& ds, int eta) {
    std::vector<TokenMatrix> preds(ds.samples.size());
    parallel_for(static_cast<long>(ds.samples.size()), [&](long i) {
        Graph g(false);
        preds[static_cast<std::size_t>(i)] =
            decode_prediction(forward(g, params, ds.samples[static_cast<std::size_t>(i)].cloud));
    });
    return evaluate_predictions(preds, ds, eta);
}

// ---------------------------------------------------------------- training

void write_loss_csv(const std::string& path, const std::vector<LossRow>& curve) {
    std::ofstream os(path);
    if (!os) fail("IoError", "cannot open " + path + " for writing");
    os << "step,loss,loss_cmd,loss_param\n";
    char line[160];
    for (const LossRow& r : curve) {
        std::snprintf(line, sizeof(line), "%ld,%.17g,%.17g,%.17g\n", r.step, r.loss, r.loss_cmd,
                      r.loss_param);
        os << line;
    }
    if (!os) fail("IoError", "write failed for " + path);
}

namespace {

// One forward+backward per sample; gradients land in whichever parameter
// clone the worker owns. Per-sample losses go to their own slots so the
// reported curve never depends on the worker count.
void batch_worker(const NetworkParams& params, const Dataset& ds,
                  const std::vector<std::size_t>& order, std::size_t begin, std::size_t end,
                  double inv_n, double beta, std::vector<LossRow>& sample_rows) {
    for (std::size_t bi = begin; bi < end; ++bi) {
        const DatasetSample& s = ds.samples[order[bi]];
        Graph g;
        const Prediction pred = forward(g, params, s.cloud);
        const LossReport rep = compute_loss(g, pred, s.tokens, beta);
        g.backward(g.scale(rep.total, inv_n));
        sample_rows[bi] = {0, rep.loss, rep.loss_cmd, rep.loss_param};
    }
}

} // namespace

TrainResult train(NetworkParams& params, const Dataset& ds, const TrainOptions& opt) {
    if (ds.samples.empty()) fail("BadSpec", "cannot train on an empty dataset");
    if (opt.epochs < 0 || opt.batch < 1) fail("ConfigError", "bad training options");
    if (params.config.seq_len != kSeqLen)
        fail("ConfigError", "training targets are 60-row token matrices; config has seq_len " +
                                std::to_string(params.config.seq_len));
    const std::string out = opt.out_dir;
    if (!out.empty()) std::filesystem::create_directories(out);

    std::vector<Tensor> tensors = params.tensors();
    AdamState adam;
    TrainResult result;
    std::vector<std::vector<double>> last_good = params.snapshot_values();
    long step = 0;

    // Samples of a batch split across workers holding deep parameter
    // clones; gradients merge in fixed worker order afterwards, so a run is
    // bit-reproducible for a fixed P2CAD_THREADS setting.
    const int workers = std::max(1, std::min<int>(worker_count(), opt.batch));
    std::vector<NetworkParams> clones;
    for (int w = 1; w < workers; ++w) {
        clones.emplace_back(params.config, 0);
        clones.back().restore_values(last_good);
    }

    std::vector<std::size_t> order(ds.samples.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    auto save_all = [&](const std::string& name) {
        if (out.empty()) return;
        params.save(out + "/" + name);
        std::ofstream cf(out + "/config.json");
        cf << params.config.to_json();
        write_loss_csv(out + "/loss.csv", result.curve);
    };
    auto diverged = [&]() {
        params.restore_values(last_good);
        save_all("model.p2ck");
        fail("Diverged", "training loss became non-finite at step " + std::to_string(step));
    };

    std::vector<LossRow> sample_rows(ds.samples.size());
    for (int epoch = 0; epoch < opt.epochs; ++epoch) {
        Rng shuffle_rng(derive_seed(opt.seed, static_cast<std::uint64_t>(epoch)));
        for (std::size_t i = order.size(); i > 1; --i) {
            const std::size_t j = static_cast<std::size_t>(shuffle_rng.below(i));
            std::swap(order[i - 1], order[j]);
        }
        for (std::size_t begin = 0; begin < order.size(); begin += static_cast<std::size_t>(opt.batch)) {
            const std::size_t end = std::min(order.size(), begin + static_cast<std::size_t>(opt.batch));
            const std::size_t bn = end - begin;
            const double inv_n = 1.0 / static_cast<double>(bn);
            params.zero_grads();
            for (NetworkParams& c : clones) c.zero_grads();

            const std::size_t chunk = (bn + static_cast<std::size_t>(workers) - 1) / static_cast<std::size_t>(workers);
            std::vector<std::thread> pool;
            std::vector<std::exception_ptr> errors(static_cast<std::size_t>(workers));
            for (int w = 0; w < workers; ++w) {
                const std::size_t wb = begin + static_cast<std::size_t>(w) * chunk;
                const std::size_t we = std::min(end, wb + chunk);
                if (wb >= we) break;
                // NetworkParams copies are shallow handle copies; each
                // worker shares values and owns nothing extra
                const NetworkParams owned = w == 0 ? params : clones[static_cast<std::size_t>(w - 1)];
                pool.emplace_back([&, w, wb, we, owned]() {
                    try {
                        batch_worker(owned, ds, order, wb, we, inv_n, opt.beta, sample_rows);
                    } catch (...) {
                        errors[static_cast<std::size_t>(w)] = std::current_exception();
                    }
                });
            }
            for (std::thread& t : pool) t.join();
            for (const std::exception_ptr& ep : errors) {
                if (!ep) continue;
                try {
                    std::rethrow_exception(ep);
                } catch (const Error& e) {
                    if (std::string(e.code()) == "NumericError") diverged();
                    throw;
                }
            }

            // merge clone gradients into the master in fixed order
            for (std::size_t ci = 0; ci < clones.size(); ++ci) {
                const auto& cn = clones[ci].named();
                for (std::size_t ti = 0; ti < cn.size(); ++ti) {
                    if (!cn[ti].tensor.has_grad()) continue;
                    auto& dst = tensors[ti].grad();
                    const auto& src = cn[ti].tensor.grad();
                    for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += src[k];
                }
            }

            double loss = 0.0, loss_cmd = 0.0, loss_param = 0.0;
            for (std::size_t bi = begin; bi < end; ++bi) {
                loss += sample_rows[bi].loss * inv_n;
                loss_cmd += sample_rows[bi].loss_cmd * inv_n;
                loss_param += sample_rows[bi].loss_param * inv_n;
            }
            if (!std::isfinite(loss)) diverged();

            adam_step(tensors, adam, opt.lr);
            for (NetworkParams& c : clones) {
                const auto& cn = c.named();
                for (std::size_t ti = 0; ti < cn.size(); ++ti)
                    cn[ti].tensor.values() = tensors[ti].values();
            }
            ++step;
            result.curve.push_back({step, loss, loss_cmd, loss_param});
        }
        last_good = params.snapshot_values();
        if (opt.ckpt_every > 0 && (epoch + 1) % opt.ckpt_every == 0 && !out.empty()) {
            char name[64];
            std::snprintf(name, sizeof(name), "model_epoch_%05d.p2ck", epoch + 1);
            params.save(out + "/" + name);
        }
    }
    save_all("model.p2ck");
    return result;
}

// ---------------------------------------------------------- gradient check

GradCheckReport gradient_check(const NetworkConfig& cfg, std::uint64_t seed, double h, double tol) {
    NetworkParams params(cfg, derive_seed(seed, 1));

    Rng data_rng(derive_seed(seed, 2));
    PointCloud cloud;
    for (int i = 0; i < cfg.n_points; ++i)
        cloud.points.push_back({data_rng.uniform(-1.0, 1.0), data_rng.uniform(-1.0, 1.0),
                                data_rng.uniform(-1.0, 1.0)});
    cloud = normalize(cloud);

    Rng target_rng(derive_seed(seed, 3));
    std::vector<int> cmd_targets, param_targets;
    for (int i = 0; i < cfg.seq_len; ++i) {
        cmd_targets.push_back(static_cast<int>(target_rng.below(static_cast<std::uint64_t>(cfg.n_cmd))));
        for (int j = 0; j < cfg.n_param_slots; ++j)
            param_targets.push_back(
                static_cast<int>(target_rng.below(static_cast<std::uint64_t>(cfg.param_classes))));
    }

    auto loss_value = [&]() {
        Graph g(false);
        const Prediction pred = forward(g, params, cloud);
        return compute_loss_targets(g, pred, cmd_targets, param_targets, cfg.beta).loss;
    };

    // analytic gradients in one reverse pass
    params.zero_grads();
    {
        Graph g;
        const Prediction pred = forward(g, params, cloud);
        const LossReport rep = compute_loss_targets(g, pred, cmd_targets, param_targets, cfg.beta);
        g.backward(rep.total);
    }

    GradCheckReport report;
    report.pass = true;
    const double base = loss_value();
    Rng probe_rng(derive_seed(seed, 4));
    for (const NamedTensor& nt : params.named()) {
        Tensor t = nt.tensor;
        const std::vector<double>& grad = t.grad();
        const std::size_t n = t.values().size();

        // Candidates ordered by gradient magnitude plus a few random picks.
        // Central differences are only trustworthy where the loss is smooth
        // in the probed entry; a relu flip or max-pool argmax change inside
        // [-h, +h] shows up as asymmetry between the one-sided slopes, and
        // such probes are skipped in favor of clean ones.
        std::vector<std::size_t> candidates(n);
        for (std::size_t i = 0; i < n; ++i) candidates[i] = i;
        const std::size_t top = std::min<std::size_t>(8, n);
        std::partial_sort(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(top),
                          candidates.end(), [&](std::size_t a, std::size_t b) {
                              return std::abs(grad[a]) > std::abs(grad[b]);
                          });
        candidates.resize(top);
        for (int extra = 0; extra < 8 && n > top; ++extra) {
            const std::size_t i = static_cast<std::size_t>(probe_rng.below(n));
            if (std::find(candidates.begin(), candidates.end(), i) == candidates.end())
                candidates.push_back(i);
        }

        GradCheckEntry entry;
        entry.tensor = nt.name;
        double fallback_rel = 0.0, fallback_quality = 1e300;
        bool fallback_set = false;
        for (const std::size_t i : candidates) {
            if (entry.probes >= 4) break;
            const double saved = t.values()[i];
            t.values()[i] = saved + h;
            const double up = loss_value();
            t.values()[i] = saved - h;
            const double down = loss_value();
            t.values()[i] = saved;
            const double fd = (up - down) / (2.0 * h);
            const double an = grad[i];
            const double denom = std::max({1e-8, std::abs(fd), std::abs(an)});
            const double rel = std::abs(fd - an) >= 1e-7 ? std::abs(fd - an) / denom : 0.0;
            // |fd - f'| <= asym/2 for a kink inside the stencil
            const double asym = std::abs((up + down - 2.0 * base) / h);
            const double quality = 0.5 * asym / denom;
            if (quality < 0.3 * tol) {
                ++entry.probes;
                entry.max_rel_err = std::max(entry.max_rel_err, rel);
            } else if (quality < fallback_quality) {
                fallback_quality = quality;
                fallback_rel = rel;
                fallback_set = true;
            }
        }
        if (entry.probes == 0 && fallback_set) {
            entry.probes = 1;
            entry.max_rel_err = fallback_rel;
        }
        report.worst = std::max(report.worst, entry.max_rel_err);
        if (entry.max_rel_err >= tol) report.pass = false;
        report.entries.push_back(std::move(entry));
    }
    return report;
}

} // namespace p2cad
