#pragma once

#include <array>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

#include "pdedisc/errors.hpp"
#include "pdedisc/field.hpp"
#include "pdedisc/finetune.hpp"
#include "pdedisc/library.hpp"
#include "pdedisc/metrics.hpp"
#include "pdedisc/recon.hpp"
#include "pdedisc/sim.hpp"
#include "pdedisc/stridge.hpp"

namespace pdedisc {

/// A stage failure wraps the underlying error with the stage name; artifacts
/// written before the failure stay on disk.
struct StageError : std::runtime_error {
    std::string stage;
    StageError(std::string st, const std::string& msg)
        : std::runtime_error(st + ": " + msg), stage(std::move(st)) {}
};

struct DiscoverConfig {
    SparseConfig sparse;
    std::string dictionary = "full"; // "full" (70 terms) or "polynomial" (12)
    double subsample = 1.0; // fraction of library rows entering the regression
    std::uint64_t seed = 0; // row-subsampling seed
    bool dump_library = false;
    bool pareto = true;
};

inline void to_json(nlohmann::json& j, const DiscoverConfig& c) {
    to_json(j, c.sparse);
    j["dictionary"] = c.dictionary;
    j["subsample"] = c.subsample;
    j["seed"] = c.seed;
    j["dump_library"] = c.dump_library;
    j["pareto"] = c.pareto;
}
inline void from_json(const nlohmann::json& j, DiscoverConfig& c) {
    from_json(j, c.sparse);
    c.dictionary = j.value("dictionary", c.dictionary);
    if (j.contains("protected_names")) {
        const std::vector<TermDescriptor> dict = dictionary_by_name(c.dictionary);
        for (const auto& n : j.at("protected_names")) {
            const std::string name = n.get<std::string>();
            int found = -1;
            for (std::size_t i = 0; i < dict.size(); ++i) {
                if (dict[i].name() == name) {
                    found = static_cast<int>(i);
                    break;
                }
            }
            if (found < 0) {
                throw std::invalid_argument("discover: unknown protected term " + name);
            }
            c.sparse.protected_terms.push_back(static_cast<std::size_t>(found));
        }
    }
    c.subsample = j.value("subsample", c.subsample);
    c.seed = j.value("seed", c.seed);
    c.dump_library = j.value("dump_library", c.dump_library);
    c.pareto = j.value("pareto", c.pareto);
}

struct EvaluateConfig {
    std::string truth; // path to a true-system json; empty = the simulated system
    std::string label; // case name in metrics.csv; empty = the sim preset
};

inline void to_json(nlohmann::json& j, const EvaluateConfig& c) {
    j = {{"truth", c.truth}, {"label", c.label}};
}
inline void from_json(const nlohmann::json& j, EvaluateConfig& c) {
    c.truth = j.value("truth", c.truth);
    c.label = j.value("label", c.label);
}

/// Fully resolved run description. Parsing fills preset defaults, derives
/// per-stage seeds from the global one, and copies the simulation geometry
/// into the model wherever the config did not pin it explicitly; the resolved
/// form serializes with every field concrete, so a rerun from a manifest
/// resolves to itself.
struct PipelineConfig {
    SimConfig sim;
    MeasurementConfig measure;
    BlockConfig block;
    GeneratorConfig generator;
    TrainConfig train;
    DiscoverConfig discover;
    TrainConfig finetune = finetune_defaults();
    EvaluateConfig evaluate;
    std::uint64_t seed = 0;
    long cycles = 1; // discover+finetune repetitions
    bool stop_when_stable = false;
    std::string output;
    nlohmann::json notes; // free-form, carried into the manifest
};

namespace detail {

/// Deterministic per-stage seed: fnv1a of the stage name mixed into the
/// global seed with a splitmix finalizer.
inline std::uint64_t mix_seed(std::uint64_t global, std::string_view stage) {
    std::uint64_t h = 1469598103934665603ull;
    for (char c : stage) {
        h ^= static_cast<unsigned char>(c);
        h *= 1099511628211ull;
    }
    std::uint64_t z = global + 0x9e3779b97f4a7c15ull + h;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

} // namespace detail

inline void to_json(nlohmann::json& j, const PipelineConfig& c) {
    j = nlohmann::json::object();
    j["sim"] = c.sim;
    j["measure"] = c.measure;
    j["reconstruct"] = {{"block", c.block}, {"generator", c.generator}, {"train", c.train}};
    j["discover"] = c.discover;
    j["finetune"] = c.finetune;
    j["evaluate"] = c.evaluate;
    j["seed"] = c.seed;
    j["cycles"] = c.cycles;
    j["stop_when_stable"] = c.stop_when_stable;
    j["output"] = c.output;
    if (!c.notes.is_null()) j["notes"] = c.notes;
}

inline PipelineConfig parse_pipeline_config(const nlohmann::json& j) {
    PipelineConfig c;
    c.seed = j.value("seed", c.seed);

    const nlohmann::json sj = j.value("sim", nlohmann::json::object());
    c.sim.preset = sj.value("preset", c.sim.preset);
    apply_preset_defaults(c.sim, c.measure);
    from_json(sj, c.sim);
    const nlohmann::json mj = j.value("measure", nlohmann::json::object());
    from_json(mj, c.measure);

    const nlohmann::json rj = j.value("reconstruct", nlohmann::json::object());
    const nlohmann::json bj = rj.value("block", nlohmann::json::object());
    from_json(bj, c.block);
    if (!bj.contains("grid")) {
        c.block.h = c.sim.ny;
        c.block.w = c.sim.nx;
    }
    if (!bj.contains("dx")) c.block.dx = c.sim.dx();
    if (!bj.contains("dt")) c.block.dt = c.sim.dt;
    if (!bj.contains("n_steps")) c.block.n_steps = c.sim.n_steps;
    if (rj.contains("generator")) from_json(rj.at("generator"), c.generator);
    const nlohmann::json tj = rj.value("train", nlohmann::json::object());
    from_json(tj, c.train);

    const nlohmann::json dj = j.value("discover", nlohmann::json::object());
    from_json(dj, c.discover);
    const nlohmann::json fj = j.value("finetune", nlohmann::json::object());
    from_json(fj, c.finetune);
    if (j.contains("evaluate")) from_json(j.at("evaluate"), c.evaluate);

    if (!sj.contains("seed")) c.sim.seed = detail::mix_seed(c.seed, "sim");
    if (!mj.contains("seed")) c.measure.seed = detail::mix_seed(c.seed, "measure");
    if (!tj.contains("seed")) c.train.seed = detail::mix_seed(c.seed, "reconstruct");
    if (!dj.contains("seed")) c.discover.seed = detail::mix_seed(c.seed, "discover");
    if (!fj.contains("seed")) c.finetune.seed = detail::mix_seed(c.seed, "finetune");

    c.cycles = j.value("cycles", c.cycles);
    c.stop_when_stable = j.value("stop_when_stable", c.stop_when_stable);
    c.output = j.value("output", c.output);
    if (j.contains("notes")) c.notes = j.at("notes");
    if (c.cycles < 1) throw std::invalid_argument("pipeline: cycles must be >= 1");
    return c;
}

/// Accepts either a bare pipeline config or a manifest wrapping one.
inline PipelineConfig load_pipeline_config(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open config " + path);
    nlohmann::json j = nlohmann::json::parse(is);
    if (j.contains("config") && j.contains("config_hash")) j = j.at("config");
    return parse_pipeline_config(j);
}

/// Applies one `--section.key value` style override; the key path nests on
/// dots, the value is parsed as JSON when possible and kept as a string
/// otherwise.
inline void apply_override(nlohmann::json& j, const std::string& key,
                           const std::string& value) {
    nlohmann::json* cur = &j;
    std::string rest = key;
    std::size_t pos;
    while ((pos = rest.find('.')) != std::string::npos) {
        cur = &((*cur)[rest.substr(0, pos)]);
        rest = rest.substr(pos + 1);
    }
    nlohmann::json parsed = nlohmann::json::parse(value, nullptr, false);
    (*cur)[rest] = parsed.is_discarded() ? nlohmann::json(value) : parsed;
}

inline std::string config_hash(const nlohmann::json& j) {
    const std::string s = j.dump();
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

inline std::string default_output_dir(const PipelineConfig& cfg) {
    if (!cfg.output.empty()) return cfg.output;
    const char* root = std::getenv("PDEDISC_OUTPUT_ROOT");
    return std::string(root ? root : "runs") + "/" + cfg.sim.preset;
}

namespace detail {

inline std::string join_path(const std::string& dir, const std::string& file) {
    return (std::filesystem::path(dir) / file).string();
}

inline void update_manifest(const std::string& dir, const PipelineConfig& cfg,
                            const std::string& stage,
                            const std::vector<std::string>& files) {
    const std::string path = join_path(dir, "manifest.json");
    nlohmann::json m;
    {
        std::ifstream is(path);
        if (is) {
            m = nlohmann::json::parse(is, nullptr, false);
            if (m.is_discarded()) m = nlohmann::json::object();
        }
    }
    nlohmann::json cj;
    to_json(cj, cfg);
    m["config"] = cj;
    m["config_hash"] = config_hash(cj);
    m["stages"][stage] = files;
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot write " + path);
    os << m.dump(2) << '\n';
}

inline nlohmann::json read_json_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open " + path);
    return nlohmann::json::parse(is);
}

inline void write_json_file(const std::string& path, const nlohmann::json& j) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot write " + path);
    os << j.dump(2) << '\n';
}

template <typename Fn>
void run_stage(const std::string& name, Fn&& fn) {
    try {
        fn();
    } catch (const StageError&) {
        throw;
    } catch (const std::exception& e) {
        throw StageError(name, e.what());
    }
}

inline std::vector<std::pair<int, std::string>> support_of(const nlohmann::json& pde) {
    std::vector<std::pair<int, std::string>> s;
    for (const auto& e : pde) {
        s.push_back({e.at("component").get<int>(), e.at("term").get<std::string>()});
    }
    std::sort(s.begin(), s.end());
    return s;
}

} // namespace detail

inline void stage_simulate(const PipelineConfig& cfg, const std::string& dir) {
    detail::run_stage("simulate", [&] {
        std::filesystem::create_directories(dir);
        const FieldTensor truth = generate_ground_truth(cfg.sim);
        write_pft(detail::join_path(dir, "truth.pft"), truth);
        const FieldTensor meas = synthesize_measurements(truth, cfg.measure);
        write_pft(detail::join_path(dir, "measurements.pft"), meas);
        detail::update_manifest(dir, cfg, "simulate", {"truth.pft", "measurements.pft"});
    });
}

inline void stage_reconstruct(const PipelineConfig& cfg, const std::string& dir) {
    detail::run_stage("reconstruct", [&] {
        const FieldTensor meas = read_pft(detail::join_path(dir, "measurements.pft"));
        ReconModel model(cfg.block, cfg.generator, cfg.train.seed);
        const TrainResult r = train(model, cfg.train, meas);
        write_history_csv(detail::join_path(dir, "reconstruction_history.csv"),
                          r.history);
        const FieldTensor recon = reconstruct(model, meas);
        write_pft(detail::join_path(dir, "reconstruction.pft"), recon);
        save_checkpoint(detail::join_path(dir, "reconstruction_model.ckpt"), model,
                        cfg.train.iterations);
        detail::update_manifest(dir, cfg, "reconstruct",
                                {"reconstruction.pft", "reconstruction_history.csv",
                                 "reconstruction_model.ckpt"});
    });
}

inline void stage_discover(const PipelineConfig& cfg, const std::string& dir,
                           const std::string& source = "reconstruction.pft") {
    detail::run_stage("discover", [&] {
        const FieldTensor hr = read_pft(detail::join_path(dir, source));
        CandidateLibrary lib = build_library(hr, cfg.block.dx, cfg.block.dt,
                                             dictionary_by_name(cfg.discover.dictionary));
        if (cfg.discover.subsample < 1.0) {
            lib = subsample_rows(lib, cfg.discover.subsample, cfg.discover.seed);
        }
        std::vector<std::string> files = {"discovered.json"};
        if (cfg.discover.dump_library) {
            dump_library(lib, detail::join_path(dir, "library_theta.pft"),
                         detail::join_path(dir, "library_ut.pft"),
                         detail::join_path(dir, "library_terms.json"));
            files.insert(files.end(),
                         {"library_theta.pft", "library_ut.pft", "library_terms.json"});
        }

        SparseSolution sol[2];
        for (int comp = 0; comp < 2; ++comp) {
            // one problem at a time: each holds a copy of the data matrix
            RegressionProblem p = make_problem(lib, comp);
            sol[comp] = tolerance_search(p, cfg.discover.sparse);
            if (cfg.discover.pareto) {
                const std::string name = comp == 0 ? "pareto_u.csv" : "pareto_v.csv";
                write_pareto_csv(detail::join_path(dir, name),
                                 pareto_sweep(p, cfg.discover.sparse,
                                              default_kappa_grid()));
                files.push_back(name);
            }
        }
        const PdeSystem sys = system_from_solutions(lib, sol[0], sol[1]);
        nlohmann::json out = {
            {"pde", pde_json(sys)},
            {"text", pde_text(sys)},
            {"l0", {sol[0].l0, sol[1].l0}},
            {"error", {sol[0].error, sol[1].error}},
            {"objective", {sol[0].objective, sol[1].objective}},
            {"source", source}};
        detail::write_json_file(detail::join_path(dir, "discovered.json"), out);
        detail::update_manifest(dir, cfg, "discover", files);
    });
}

inline void stage_finetune(const PipelineConfig& cfg, const std::string& dir) {
    detail::run_stage("finetune", [&] {
        const FieldTensor meas = read_pft(detail::join_path(dir, "measurements.pft"));
        const nlohmann::json disc =
            detail::read_json_file(detail::join_path(dir, "discovered.json"));
        const PdeSystem sys = system_from_pde_json(disc.at("pde"));
        const FieldTensor recon =
            read_pft(detail::join_path(dir, "reconstruction.pft"));
        PhysicsModel pm = build_physics_model(sys, recon.frame(0), cfg.block.dx,
                                              cfg.block.dt, cfg.block.n_steps);
        const TrainResult r = finetune(pm, cfg.finetune, meas);
        write_history_csv(detail::join_path(dir, "finetune_history.csv"), r.history);
        const PdeSystem refined = pm.system();
        nlohmann::json out = {{"pde", pde_json(refined)},
                              {"text", pde_text(refined)},
                              {"final_loss", r.final_loss},
                              {"recoveries", r.recoveries}};
        detail::write_json_file(detail::join_path(dir, "finetuned.json"), out);
        detail::update_manifest(dir, cfg, "finetune",
                                {"finetuned.json", "finetune_history.csv"});
    });
}

inline void stage_evaluate(const PipelineConfig& cfg, const std::string& dir) {
    detail::run_stage("evaluate", [&] {
        const std::string fine = detail::join_path(dir, "finetuned.json");
        const std::string disc = detail::join_path(dir, "discovered.json");
        const std::string src = std::filesystem::exists(fine) ? fine : disc;
        const PdeSystem identified =
            system_from_pde_json(detail::read_json_file(src).at("pde"));

        PdeSystem truth;
        if (cfg.evaluate.truth.empty()) {
            truth = system_from_config(cfg.sim);
        } else {
            nlohmann::json tj = detail::read_json_file(cfg.evaluate.truth);
            truth = system_from_pde_json(tj.contains("pde") ? tj.at("pde") : tj);
        }
        const std::vector<double> xi_id = coefficient_vector(identified);
        const std::vector<double> xi_true = coefficient_vector(truth);
        const PrecisionRecall pr = precision_recall(xi_id, xi_true);
        MetricsRow row{cfg.evaluate.label.empty() ? cfg.sim.preset : cfg.evaluate.label,
                       cfg.measure.noise_level, relative_l2(xi_id, xi_true),
                       pr.precision, pr.recall};
        write_metrics_csv(detail::join_path(dir, "metrics.csv"), {row});
        detail::update_manifest(dir, cfg, "evaluate", {"metrics.csv"});
    });
}

inline const std::vector<std::string>& all_stages() {
    static const std::vector<std::string> s = {"simulate", "reconstruct", "discover",
                                               "finetune", "evaluate"};
    return s;
}

/// Runs the requested stages in pipeline order. With cycles > 1 the
/// discover+finetune pair repeats, rebuilding the candidate library from the
/// refined model's own rollout; with stop_when_stable the cycling ends once
/// the discovered support stops changing.
inline void run_pipeline(const PipelineConfig& cfg, const std::string& dir,
                         std::vector<std::string> stages = {}) {
    if (stages.empty()) stages = all_stages();
    for (const std::string& s : stages) {
        if (std::find(all_stages().begin(), all_stages().end(), s) ==
            all_stages().end()) {
            throw StageError("pipeline", "unknown stage " + s);
        }
    }
    const auto has = [&stages](const char* s) {
        return std::find(stages.begin(), stages.end(), s) != stages.end();
    };

    if (has("simulate")) stage_simulate(cfg, dir);
    if (has("reconstruct")) stage_reconstruct(cfg, dir);
    if (has("discover")) stage_discover(cfg, dir);
    if (has("finetune")) stage_finetune(cfg, dir);

    if (has("discover") && has("finetune")) {
        for (long k = 2; k <= cfg.cycles; ++k) {
            const nlohmann::json prev =
                detail::read_json_file(detail::join_path(dir, "discovered.json"));
            detail::run_stage("finetune", [&] {
                const nlohmann::json fine =
                    detail::read_json_file(detail::join_path(dir, "finetuned.json"));
                const FieldTensor recon =
                    read_pft(detail::join_path(dir, "reconstruction.pft"));
                PhysicsModel pm = build_physics_model(
                    system_from_pde_json(fine.at("pde")), recon.frame(0),
                    cfg.block.dx, cfg.block.dt, cfg.block.n_steps);
                write_pft(detail::join_path(dir, "refined_trajectory.pft"),
                          physics_rollout(pm));
            });
            stage_discover(cfg, dir, "refined_trajectory.pft");
            const nlohmann::json cur =
                detail::read_json_file(detail::join_path(dir, "discovered.json"));
            const bool stable = detail::support_of(prev.at("pde")) ==
                                detail::support_of(cur.at("pde"));
            if (cfg.stop_when_stable && stable) break;
            stage_finetune(cfg, dir);
        }
    }

    if (has("evaluate")) stage_evaluate(cfg, dir);
}

} // namespace pdedisc
