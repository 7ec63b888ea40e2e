// p2cad: dataset generation, sequence execution, training, reconstruction
// and evaluation for the featured-CAD pipeline, one subcommand per task.
// Structured output is JSON so runs are scriptable.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "p2cad/cad_lang.hpp"
#include "p2cad/error.hpp"
#include "p2cad/geometry.hpp"
#include "p2cad/network.hpp"
#include "p2cad/rng.hpp"
#include "p2cad/trainer.hpp"

namespace {

std::string read_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) p2cad::fail("IoError", "cannot open " + path);
    std::ostringstream os;
    os << is.rdbuf();
    return os.str();
}

void write_file(const std::string& path, const std::string& text) {
    std::ofstream os(path, std::ios::binary);
    if (!os) p2cad::fail("IoError", "cannot open " + path + " for writing");
    os << text;
    if (!os) p2cad::fail("IoError", "write failed for " + path);
}

p2cad::NetworkConfig config_for(const std::string& preset, const std::string& config_path) {
    if (!config_path.empty()) return p2cad::NetworkConfig::from_json(read_file(config_path));
    if (preset == "default") return p2cad::NetworkConfig::defaults();
    if (preset == "desk") return p2cad::NetworkConfig::desk();
    if (preset == "tiny") return p2cad::NetworkConfig::tiny();
    p2cad::fail("ConfigError", "unknown preset \"" + preset + "\"");
}

// config.json written by `train` lives next to the checkpoint
p2cad::NetworkConfig config_next_to(const std::string& ckpt_path, const std::string& config_path) {
    if (!config_path.empty()) return p2cad::NetworkConfig::from_json(read_file(config_path));
    const std::filesystem::path sidecar = std::filesystem::path(ckpt_path).parent_path() / "config.json";
    if (!std::filesystem::exists(sidecar))
        p2cad::fail("ConfigError", "no config.json next to " + ckpt_path + "; pass --config");
    return p2cad::NetworkConfig::from_json(read_file(sidecar.string()));
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"point-cloud to featured-CAD reconstruction pipeline"};
    app.require_subcommand(1);

    // gen-dataset
    auto* gen = app.add_subcommand("gen-dataset", "generate a synthetic dataset directory");
    long gen_count = 0;
    std::uint64_t gen_seed = 0;
    std::string gen_out;
    int gen_points = 512;
    gen->add_option("--count", gen_count, "number of models")->required();
    gen->add_option("--seed", gen_seed, "dataset seed");
    gen->add_option("--out", gen_out, "output directory")->required();
    gen->add_option("--points", gen_points, "points per cloud");

    // exec
    auto* ex = app.add_subcommand("exec", "execute a sequence JSON file and sample its surface");
    std::string ex_seq, ex_out, ex_format = "auto";
    int ex_points = 2048;
    std::uint64_t ex_seed = 0;
    ex->add_option("--seq", ex_seq, "sequence JSON file")->required();
    ex->add_option("--points", ex_points, "sample count");
    ex->add_option("--seed", ex_seed, "sampling seed");
    ex->add_option("--out", ex_out, "output cloud file")->required();
    ex->add_option("--format", ex_format, "text | bin | auto (by extension)");

    // train
    auto* tr = app.add_subcommand("train", "train a model on a dataset directory");
    std::string tr_data, tr_out, tr_config, tr_preset = "default";
    int tr_epochs = 300, tr_batch = 32, tr_ckpt_every = 0;
    double tr_lr = 1e-4, tr_beta = -1.0;
    std::uint64_t tr_seed = 0;
    tr->add_option("--data", tr_data, "dataset directory")->required();
    tr->add_option("--epochs", tr_epochs, "training epochs");
    tr->add_option("--lr", tr_lr, "learning rate");
    tr->add_option("--batch", tr_batch, "batch size");
    tr->add_option("--beta", tr_beta, "parameter loss weight (default from config)");
    tr->add_option("--seed", tr_seed, "training seed");
    tr->add_option("--out", tr_out, "output directory")->required();
    tr->add_option("--config", tr_config, "network config JSON file");
    tr->add_option("--preset", tr_preset, "default | desk | tiny (when no --config)");
    tr->add_option("--ckpt-every", tr_ckpt_every, "checkpoint every K epochs");

    // reconstruct
    auto* rc = app.add_subcommand("reconstruct", "decode a point cloud into a sequence JSON file");
    std::string rc_ckpt, rc_cloud, rc_out, rc_config;
    rc->add_option("--ckpt", rc_ckpt, "checkpoint file")->required();
    rc->add_option("--cloud", rc_cloud, "input cloud file")->required();
    rc->add_option("--out", rc_out, "output JSON file")->required();
    rc->add_option("--config", rc_config, "network config JSON file");

    // eval
    auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on a dataset directory");
    std::string ev_ckpt, ev_data, ev_out, ev_config;
    int ev_eta = -1;
    ev->add_option("--ckpt", ev_ckpt, "checkpoint file")->required();
    ev->add_option("--data", ev_data, "dataset directory")->required();
    ev->add_option("--eta", ev_eta, "parameter tolerance in classes (default from config)");
    ev->add_option("--out", ev_out, "metrics JSON file (also printed)");
    ev->add_option("--config", ev_config, "network config JSON file");

    // metrics
    auto* mt = app.add_subcommand("metrics", "chamfer distance between two cloud files");
    std::string mt_pred, mt_gt;
    bool mt_normalize = false;
    mt->add_option("--pred", mt_pred, "first cloud")->required();
    mt->add_option("--gt", mt_gt, "second cloud")->required();
    mt->add_flag("--normalize", mt_normalize, "normalize both clouds first");

    // gradcheck
    auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient suite on the tiny config");
    std::uint64_t gc_seed = 7;
    gc->add_option("--seed", gc_seed, "probe seed");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e); // --help
        app.exit(e);
        return 2;
    }

    try {
        if (*gen) {
            p2cad::DatasetSpec spec;
            spec.count = gen_count;
            spec.seed = gen_seed;
            spec.n_points = gen_points;
            const p2cad::Dataset ds = p2cad::generate_dataset(spec);
            p2cad::save_dataset(gen_out, ds);
            nlohmann::ordered_json j;
            j["dataset"] = gen_out;
            j["count"] = ds.spec.count;
            j["n_points"] = ds.spec.n_points;
            std::cout << j.dump() << "\n";
        } else if (*ex) {
            const p2cad::CadSequence seq = p2cad::parse_sequence(read_file(ex_seq));
            const p2cad::Solid solid = p2cad::execute(seq);
            const p2cad::PointCloud cloud = p2cad::sample_surface(solid, ex_points, ex_seed);
            bool binary = ex_format == "bin";
            if (ex_format == "auto") binary = ex_out.ends_with(".p2pc");
            else if (ex_format != "text" && ex_format != "bin")
                p2cad::fail("ConfigError", "--format must be text, bin or auto");
            if (binary) p2cad::save_cloud_binary(ex_out, cloud);
            else p2cad::save_cloud_text(ex_out, cloud);
            nlohmann::ordered_json j;
            j["cloud"] = ex_out;
            j["points"] = cloud.points.size();
            std::cout << j.dump() << "\n";
        } else if (*tr) {
            const p2cad::NetworkConfig cfg = config_for(tr_preset, tr_config);
            const p2cad::Dataset ds = p2cad::load_dataset(tr_data);
            p2cad::NetworkParams params(cfg, p2cad::derive_seed(tr_seed, 0xf17));
            p2cad::TrainOptions opt;
            opt.epochs = tr_epochs;
            opt.lr = tr_lr;
            opt.batch = tr_batch;
            opt.beta = tr_beta >= 0.0 ? tr_beta : cfg.beta;
            opt.seed = tr_seed;
            opt.ckpt_every = tr_ckpt_every;
            opt.out_dir = tr_out;
            const p2cad::TrainResult result = p2cad::train(params, ds, opt);
            nlohmann::ordered_json j;
            j["checkpoint"] = tr_out + "/model.p2ck";
            j["steps"] = result.curve.size();
            j["final_loss"] = result.curve.empty() ? 0.0 : result.curve.back().loss;
            std::cout << j.dump() << "\n";
        } else if (*rc) {
            const p2cad::NetworkConfig cfg = config_next_to(rc_ckpt, rc_config);
            const p2cad::NetworkParams params = p2cad::NetworkParams::load(rc_ckpt, cfg);
            p2cad::PointCloud cloud = p2cad::load_cloud(rc_cloud);
            cloud = p2cad::normalize(cloud);
            p2cad::Graph g(false);
            const p2cad::TokenMatrix tokens =
                p2cad::decode_prediction(p2cad::forward(g, params, cloud));
            const p2cad::ValidityReport report = p2cad::validate_syntax(tokens);
            nlohmann::ordered_json j;
            if (report.ok) {
                try {
                    write_file(rc_out, p2cad::serialize_sequence(p2cad::from_token_matrix(tokens)));
                    j["sequence"] = rc_out;
                    j["valid"] = true;
                    std::cout << j.dump() << "\n";
                    return 0;
                } catch (const p2cad::Error& e) {
                    j["violations"] = nlohmann::json::array({e.code()});
                }
            } else {
                j["violations"] = nlohmann::json::array();
                for (const p2cad::Violation v : report.violations)
                    j["violations"].push_back(p2cad::violation_name(v));
            }
            j["valid"] = false;
            write_file(rc_out, j.dump(2) + "\n");
            std::cout << j.dump() << "\n";
        } else if (*ev) {
            const p2cad::NetworkConfig cfg = config_next_to(ev_ckpt, ev_config);
            const p2cad::NetworkParams params = p2cad::NetworkParams::load(ev_ckpt, cfg);
            const p2cad::Dataset ds = p2cad::load_dataset(ev_data);
            const int eta = ev_eta >= 0 ? ev_eta : cfg.eta;
            const p2cad::MetricsReport rep = p2cad::evaluate(params, ds, eta);
            const std::string text = rep.to_json();
            if (!ev_out.empty()) write_file(ev_out, text);
            std::cout << text;
        } else if (*mt) {
            p2cad::PointCloud a = p2cad::load_cloud(mt_pred);
            p2cad::PointCloud b = p2cad::load_cloud(mt_gt);
            if (mt_normalize) {
                a = p2cad::normalize(a);
                b = p2cad::normalize(b);
            }
            nlohmann::ordered_json j;
            j["chamfer_distance"] = p2cad::chamfer_distance(a, b);
            j["pred_points"] = a.points.size();
            j["gt_points"] = b.points.size();
            std::cout << j.dump() << "\n";
        } else if (*gc) {
            const p2cad::GradCheckReport rep =
                p2cad::gradient_check(p2cad::NetworkConfig::tiny(), gc_seed);
            for (const p2cad::GradCheckEntry& e : rep.entries)
                std::printf("%-20s probes=%d max_rel_err=%.3e\n", e.tensor.c_str(), e.probes,
                            e.max_rel_err);
            std::printf("gradcheck %s (worst %.3e over %zu tensors)\n",
                        rep.pass ? "PASS" : "FAIL", rep.worst, rep.entries.size());
            return rep.pass ? 0 : 1;
        }
    } catch (const p2cad::Error& e) {
        nlohmann::ordered_json j;
        j["error"] = e.code();
        j["message"] = e.what();
        std::cerr << j.dump() << "\n";
        return e.code() == "ConfigError" || e.code() == "BadSpec" ? 2 : 1;
    } catch (const std::exception& e) {
        nlohmann::ordered_json j;
        j["error"] = "Internal";
        j["message"] = e.what();
        std::cerr << j.dump() << "\n";
        return 1;
    }
    return 0;
}
