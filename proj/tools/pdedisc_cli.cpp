// Command-line front end: stage subcommands, full pipeline runs, and
// checkpoint interpretation. Configuration comes from an optional JSON file
// plus `--section.key value` overrides; each run directory receives a
// manifest sufficient to reproduce it.
#include <cstdint>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "pdedisc/pipeline.hpp"

using namespace pdedisc;

namespace {

struct CommonArgs {
    std::string config_path;
    std::string output;
    std::vector<std::pair<std::string, std::string>> presets; // applied before extras
    bool has_seed = false;
    std::uint64_t seed = 0;
    CLI::App* cmd = nullptr;
};

void add_common(CLI::App* cmd, CommonArgs& a) {
    a.cmd = cmd;
    cmd->add_option("--config", a.config_path,
                    "pipeline config json (a manifest also works)");
    cmd->add_option("--output", a.output, "output directory");
    cmd->add_option_function<std::uint64_t>(
        "--seed",
        [&a](std::uint64_t v) {
            a.seed = v;
            a.has_seed = true;
        },
        "global seed; per-stage seeds derive from it");
    cmd->allow_extras();
}

std::vector<std::pair<std::string, std::string>> override_pairs(
    const std::vector<std::string>& extras) {
    std::vector<std::pair<std::string, std::string>> out;
    for (std::size_t i = 0; i < extras.size(); ++i) {
        const std::string& tok = extras[i];
        if (tok.rfind("--", 0) != 0) {
            throw CLI::ParseError("unexpected argument: " + tok, 1);
        }
        const std::size_t eq = tok.find('=');
        if (eq != std::string::npos) {
            out.push_back({tok.substr(2, eq - 2), tok.substr(eq + 1)});
        } else {
            if (i + 1 >= extras.size()) {
                throw CLI::ParseError("missing value for " + tok, 1);
            }
            out.push_back({tok.substr(2), extras[++i]});
        }
    }
    return out;
}

PipelineConfig build_config(const CommonArgs& a) {
    nlohmann::json j = nlohmann::json::object();
    if (!a.config_path.empty()) {
        std::ifstream is(a.config_path);
        if (!is) throw std::runtime_error("cannot open config " + a.config_path);
        j = nlohmann::json::parse(is);
        if (j.contains("config") && j.contains("config_hash")) j = j.at("config");
    }
    if (a.has_seed) j["seed"] = a.seed;
    for (const auto& [k, v] : a.presets) apply_override(j, k, v);
    for (const auto& [k, v] : override_pairs(a.cmd->remaining())) {
        apply_override(j, k, v);
    }
    PipelineConfig cfg = parse_pipeline_config(j);
    if (!a.output.empty()) cfg.output = a.output;
    return cfg;
}

std::vector<std::string> split_csv(const std::string& s) {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (start <= s.size()) {
        const std::size_t comma = s.find(',', start);
        const std::string part = s.substr(
            start, comma == std::string::npos ? std::string::npos : comma - start);
        if (!part.empty()) out.push_back(part);
        if (comma == std::string::npos) break;
        start = comma + 1;
    }
    return out;
}

int run_interpret(const std::string& checkpoint, double threshold,
                  const std::string& json_out) {
    const Checkpoint ck = load_checkpoint(checkpoint);
    const auto rep = interpret(ck.model, threshold);
    nlohmann::json j = nlohmann::json::array();
    for (int c = 0; c < 2; ++c) {
        std::cout << (c == 0 ? "u_t = " : "v_t = ");
        if (rep[c].empty()) std::cout << "0";
        bool first = true;
        for (const Monomial& m : rep[c]) {
            std::ostringstream os;
            os.precision(5);
            if (first) {
                os << m.coeff;
                first = false;
            } else {
                os << (m.coeff < 0.0 ? " - " : " + ") << std::fabs(m.coeff);
            }
            os << "*" << monomial_name(m.syms);
            std::cout << os.str();
            j.push_back({{"component", c},
                         {"term", monomial_name(m.syms)},
                         {"coefficient", m.coeff}});
        }
        std::cout << '\n';
    }
    if (!json_out.empty()) {
        std::ofstream os(json_out);
        if (!os) throw std::runtime_error("cannot write " + json_out);
        os << j.dump(2) << '\n';
    }
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"physics-constrained discovery of PDEs from coarse measurements"};
    app.require_subcommand(1);

    CommonArgs sim_args, rec_args, dis_args, fin_args, eva_args, pipe_args;
    std::string stages_csv, preset, ckpt_path, interp_json;
    double noise = -1.0, threshold = 1e-3;

    CLI::App* c_sim = app.add_subcommand("simulate", "generate truth and measurements");
    add_common(c_sim, sim_args);
    c_sim->add_option("--preset", preset, "burgers | lambda_omega | gray_scott");
    c_sim->add_option("--noise", noise, "measurement noise level");

    CLI::App* c_rec =
        app.add_subcommand("reconstruct", "train the reconstruction network");
    add_common(c_rec, rec_args);
    CLI::App* c_dis =
        app.add_subcommand("discover", "sparse-regress the candidate library");
    add_common(c_dis, dis_args);
    CLI::App* c_fin = app.add_subcommand("finetune", "refine the coefficients");
    add_common(c_fin, fin_args);
    CLI::App* c_eva = app.add_subcommand("evaluate", "score against the true system");
    add_common(c_eva, eva_args);

    CLI::App* c_pipe = app.add_subcommand("pipeline", "run all stages");
    add_common(c_pipe, pipe_args);
    c_pipe->add_option("--stages", stages_csv,
                       "comma-separated subset of: simulate,reconstruct,discover,"
                       "finetune,evaluate");

    CLI::App* c_int =
        app.add_subcommand("interpret", "expand a trained model symbolically");
    c_int->add_option("--checkpoint", ckpt_path, "model checkpoint")->required();
    c_int->add_option("--threshold", threshold, "relative magnitude cutoff");
    c_int->add_option("--json", interp_json, "also write the expansion as json");

    CLI11_PARSE(app, argc, argv);

    try {
        if (app.got_subcommand(c_int)) {
            return run_interpret(ckpt_path, threshold, interp_json);
        }

        CommonArgs* args = nullptr;
        void (*stage)(const PipelineConfig&, const std::string&) = nullptr;
        if (app.got_subcommand(c_sim)) {
            if (!preset.empty()) sim_args.presets.push_back({"sim.preset", preset});
            if (noise >= 0.0) {
                sim_args.presets.push_back(
                    {"measure.noise_level", std::to_string(noise)});
            }
            args = &sim_args;
            stage = &stage_simulate;
        } else if (app.got_subcommand(c_rec)) {
            args = &rec_args;
            stage = &stage_reconstruct;
        } else if (app.got_subcommand(c_dis)) {
            args = &dis_args;
            stage = [](const PipelineConfig& c, const std::string& d) {
                stage_discover(c, d);
            };
        } else if (app.got_subcommand(c_fin)) {
            args = &fin_args;
            stage = &stage_finetune;
        } else if (app.got_subcommand(c_eva)) {
            args = &eva_args;
            stage = &stage_evaluate;
        }

        if (stage != nullptr) {
            const PipelineConfig cfg = build_config(*args);
            const std::string dir = default_output_dir(cfg);
            stage(cfg, dir);
            std::cout << "artifacts in " << dir << '\n';
            return 0;
        }

        // full pipeline
        const PipelineConfig cfg = build_config(pipe_args);
        const std::string dir = default_output_dir(cfg);
        run_pipeline(cfg, dir, split_csv(stages_csv));
        const std::string fine = (std::filesystem::path(dir) / "finetuned.json").string();
        const std::string disc =
            (std::filesystem::path(dir) / "discovered.json").string();
        for (const std::string& p : {fine, disc}) {
            std::ifstream is(p);
            if (is) {
                const nlohmann::json j = nlohmann::json::parse(is);
                std::cout << j.at("text").get<std::string>();
                break;
            }
        }
        std::cout << "artifacts in " << dir << '\n';
        return 0;
    } catch (const StageError& e) {
        std::cerr << "error in stage " << e.stage << ": " << e.what() << '\n';
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
}
