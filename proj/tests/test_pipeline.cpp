#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "pdedisc/pipeline.hpp"

using namespace pdedisc;
namespace fs = std::filesystem;

namespace {

std::string file_bytes(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    REQUIRE(is);
    std::ostringstream os;
    os << is.rdbuf();
    return os.str();
}

fs::path fresh_dir(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / name;
    fs::remove_all(p);
    return p;
}

nlohmann::json tiny_config() {
    nlohmann::json j;
    j["seed"] = 3;
    j["sim"] = {{"preset", "burgers"},
                {"grid", {17, 17}},
                {"dt", 1e-3},
                {"n_steps", 20},
                {"ic", {{"kind", "smooth_random"}, {"amplitude", 0.5}}}};
    j["measure"] = {{"spatial_stride", 2},
                    {"temporal_stride", 2},
                    {"max_frames", 10},
                    {"noise_level", 0.0}};
    j["reconstruct"] = {{"block", {{"n_channels", 4}}},
                        {"generator", {{"pretrain_iters", 20}}},
                        {"train", {{"iterations", 25}}}};
    j["discover"] = {{"protected_names", {"lap(u)", "lap(v)"}}};
    j["finetune"] = {{"iterations", 10}};
    j["evaluate"] = {{"label", "tiny"}};
    return j;
}

} // namespace

TEST_CASE("simulation artifacts have the advertised shapes and rerun identically") {
    nlohmann::json j;
    j["seed"] = 7;
    j["sim"] = {{"preset", "burgers"}};
    j["measure"] = {{"noise_level", 0.05}};
    const PipelineConfig cfg = parse_pipeline_config(j);

    const fs::path a = fresh_dir("pdedisc_sim_a");
    stage_simulate(cfg, a.string());
    const FieldTensor truth = read_pft((a / "truth.pft").string());
    const FieldTensor meas = read_pft((a / "measurements.pft").string());
    REQUIRE(truth.nt() == 201);
    REQUIRE(truth.nc() == 2);
    REQUIRE(truth.h() == 101);
    REQUIRE(truth.w() == 101);
    REQUIRE(meas.nt() == 40);
    REQUIRE(meas.h() == 51);
    REQUIRE(meas.w() == 51);

    const nlohmann::json man =
        nlohmann::json::parse(std::ifstream(a / "manifest.json"));
    CHECK(man.at("config_hash").get<std::string>().size() == 16);
    CHECK(man.at("stages").at("simulate").size() == 2);
    CHECK(man.at("config").at("sim").at("seed").get<std::uint64_t>() == cfg.sim.seed);

    const fs::path b = fresh_dir("pdedisc_sim_b");
    stage_simulate(cfg, b.string());
    CHECK(file_bytes(a / "truth.pft") == file_bytes(b / "truth.pft"));
    CHECK(file_bytes(a / "measurements.pft") == file_bytes(b / "measurements.pft"));

    // without noise the measurements are exactly the strided truth
    j["measure"]["noise_level"] = 0.0;
    const PipelineConfig quiet = parse_pipeline_config(j);
    const fs::path c = fresh_dir("pdedisc_sim_c");
    stage_simulate(quiet, c.string());
    const FieldTensor t2 = read_pft((c / "truth.pft").string());
    const FieldTensor m2 = read_pft((c / "measurements.pft").string());
    bool exact = true;
    for (std::size_t f = 0; f < m2.nt() && exact; ++f) {
        for (std::size_t y = 0; y < m2.h() && exact; ++y) {
            for (std::size_t x = 0; x < m2.w(); ++x) {
                if (m2(f, 0, y, x) != t2(5 * f, 0, 2 * y, 2 * x)) {
                    exact = false;
                    break;
                }
            }
        }
    }
    CHECK(exact);
    for (const fs::path& p : {a, b, c}) fs::remove_all(p);
}

TEST_CASE("stage seeds derive deterministically from the global seed") {
    nlohmann::json j;
    j["seed"] = 7;
    const PipelineConfig c1 = parse_pipeline_config(j);
    const PipelineConfig c2 = parse_pipeline_config(j);
    CHECK(c1.sim.seed == c2.sim.seed);
    CHECK(c1.measure.seed == c2.measure.seed);
    CHECK(c1.train.seed == c2.train.seed);
    CHECK(c1.discover.seed == c2.discover.seed);
    CHECK(c1.finetune.seed == c2.finetune.seed);
    // stages do not share a seed
    CHECK(c1.sim.seed != c1.measure.seed);
    CHECK(c1.train.seed != c1.discover.seed);

    j["seed"] = 8;
    const PipelineConfig c3 = parse_pipeline_config(j);
    CHECK(c3.sim.seed != c1.sim.seed);
    CHECK(c3.train.seed != c1.train.seed);

    // explicit stage seeds win over derivation
    j["sim"] = {{"seed", 123}};
    const PipelineConfig c4 = parse_pipeline_config(j);
    CHECK(c4.sim.seed == 123);
    CHECK(c4.measure.seed == c3.measure.seed);
}

TEST_CASE("dotted overrides rewrite nested configuration keys") {
    nlohmann::json j;
    apply_override(j, "sim.grid", "[17,17]");
    apply_override(j, "reconstruct.train.iterations", "25");
    apply_override(j, "sim.ic.kind", "smooth_random");
    apply_override(j, "discover.pareto", "false");
    apply_override(j, "evaluate.label", "tiny");

    const PipelineConfig cfg = parse_pipeline_config(j);
    CHECK(cfg.sim.nx == 17);
    CHECK(cfg.train.iterations == 25);
    CHECK(cfg.sim.ic.kind == "smooth_random");
    CHECK_FALSE(cfg.discover.pareto);
    CHECK(cfg.evaluate.label == "tiny");

    // the model grid mirrors the simulation grid unless pinned
    CHECK(cfg.block.h == 17);
    CHECK(cfg.block.w == 17);
    CHECK(cfg.block.dx == cfg.sim.dx());
    CHECK(cfg.block.n_steps == cfg.sim.n_steps);
    apply_override(j, "reconstruct.block.grid", "[9,9]");
    CHECK(parse_pipeline_config(j).block.h == 9);

    apply_override(j, "cycles", "0");
    CHECK_THROWS_AS(parse_pipeline_config(j), std::invalid_argument);
}

TEST_CASE("protected names resolve against the selected dictionary") {
    nlohmann::json j;
    j["discover"] = {{"protected_names", {"lap(u)", "lap(v)"}}};
    PipelineConfig cfg = parse_pipeline_config(j);
    CHECK(cfg.discover.dictionary == "full");
    CHECK(cfg.discover.sparse.protected_terms ==
          std::vector<std::size_t>{5, 6});

    j["discover"]["dictionary"] = "polynomial";
    cfg = parse_pipeline_config(j);
    CHECK(cfg.discover.sparse.protected_terms ==
          std::vector<std::size_t>{10, 11});

    // the resolved form carries indices, so a manifest rerun needs no names
    nlohmann::json resolved;
    to_json(resolved, cfg);
    CHECK(resolved["discover"]["dictionary"] == "polynomial");
    CHECK_FALSE(resolved["discover"].contains("protected_names"));
    CHECK(parse_pipeline_config(resolved).discover.sparse.protected_terms ==
          std::vector<std::size_t>{10, 11});

    j["discover"]["protected_names"] = {"u*u_x"};
    CHECK_THROWS_AS(parse_pipeline_config(j), std::invalid_argument);

    j["discover"]["protected_names"] = {"lap(u)"};
    j["discover"]["dictionary"] = "cubic";
    CHECK_THROWS_AS(parse_pipeline_config(j), std::invalid_argument);
}

TEST_CASE("a tiny pipeline runs end to end and reproduces itself") {
    const PipelineConfig cfg = parse_pipeline_config(tiny_config());
    const fs::path a = fresh_dir("pdedisc_pipe_a");
    run_pipeline(cfg, a.string());

    const std::vector<std::string> artifacts = {
        "truth.pft",          "measurements.pft",
        "reconstruction.pft", "reconstruction_history.csv",
        "reconstruction_model.ckpt", "discovered.json",
        "pareto_u.csv",       "pareto_v.csv",
        "finetuned.json",     "finetune_history.csv",
        "metrics.csv",        "manifest.json"};
    for (const std::string& f : artifacts) {
        INFO(f);
        CHECK(fs::exists(a / f));
    }

    const nlohmann::json disc =
        nlohmann::json::parse(std::ifstream(a / "discovered.json"));
    REQUIRE(disc.at("pde").is_array());
    REQUIRE(disc.at("l0").size() == 2);
    CHECK(disc.at("l0").at(0).get<int>() >= 1); // the protected term survives
    for (const auto& e : disc.at("pde")) {
        CHECK(e.contains("component"));
        CHECK(e.contains("term"));
        CHECK(e.contains("coefficient"));
    }

    SECTION("a second run is byte-identical") {
        const fs::path b = fresh_dir("pdedisc_pipe_b");
        run_pipeline(cfg, b.string());
        for (const std::string& f : artifacts) {
            if (f == "manifest.json") continue; // records the output dir
            INFO(f);
            CHECK(file_bytes(a / f) == file_bytes(b / f));
        }
        fs::remove_all(b);
    }

    SECTION("stages rerun from the manifest reproduce their outputs") {
        const PipelineConfig from_manifest =
            load_pipeline_config((a / "manifest.json").string());
        nlohmann::json before, after;
        to_json(before, cfg);
        to_json(after, from_manifest);
        CHECK(before == after); // resolution is a fixpoint

        const std::string disc_bytes = file_bytes(a / "discovered.json");
        fs::remove(a / "discovered.json");
        stage_discover(from_manifest, a.string());
        CHECK(file_bytes(a / "discovered.json") == disc_bytes);

        const std::string fine_bytes = file_bytes(a / "finetuned.json");
        fs::remove(a / "finetuned.json");
        stage_finetune(from_manifest, a.string());
        CHECK(file_bytes(a / "finetuned.json") == fine_bytes);
    }

    SECTION("stage filtering stops the pipeline early") {
        const fs::path c = fresh_dir("pdedisc_pipe_c");
        run_pipeline(cfg, c.string(), {"simulate"});
        CHECK(fs::exists(c / "measurements.pft"));
        CHECK_FALSE(fs::exists(c / "reconstruction.pft"));
        run_pipeline(cfg, c.string(), {"reconstruct"});
        CHECK(fs::exists(c / "reconstruction.pft"));
        CHECK_FALSE(fs::exists(c / "discovered.json"));
        fs::remove_all(c);

        CHECK_THROWS_AS(run_pipeline(cfg, c.string(), {"teleport"}), StageError);
    }

    SECTION("missing inputs surface as stage-tagged errors") {
        const fs::path d = fresh_dir("pdedisc_pipe_d");
        fs::create_directories(d);
        CHECK_THROWS_WITH(stage_discover(cfg, d.string()),
                          Catch::Matchers::StartsWith("discover:"));
        try {
            stage_reconstruct(cfg, d.string());
            FAIL("expected a stage error");
        } catch (const StageError& e) {
            CHECK(e.stage == "reconstruct");
        }
        fs::remove_all(d);
    }

    SECTION("cycling rebuilds the library from the refined rollout") {
        nlohmann::json j = tiny_config();
        j["cycles"] = 2;
        j["stop_when_stable"] = true;
        const PipelineConfig cycled = parse_pipeline_config(j);
        run_pipeline(cycled, a.string(), {"discover", "finetune"});
        CHECK(fs::exists(a / "refined_trajectory.pft"));
        const nlohmann::json d2 =
            nlohmann::json::parse(std::ifstream(a / "discovered.json"));
        CHECK(d2.at("source").get<std::string>() == "refined_trajectory.pft");
    }

    fs::remove_all(a);
}

TEST_CASE("evaluation scores identified systems against the truth") {
    const fs::path d = fresh_dir("pdedisc_eval");
    fs::create_directories(d);
    nlohmann::json j;
    j["sim"] = {{"preset", "burgers"}};
    j["evaluate"] = {{"label", "exact"}};
    PipelineConfig cfg = parse_pipeline_config(j);

    detail::write_json_file((d / "discovered.json").string(),
                            {{"pde", pde_json(burgers(0.005))}});
    stage_evaluate(cfg, d.string());
    {
        std::ifstream is(d / "metrics.csv");
        std::string line;
        REQUIRE(std::getline(is, line));
        CHECK(line == "case,noise,rel_l2,precision,recall");
        REQUIRE(std::getline(is, line));
        CHECK(line == "exact,0,0,1,1");
    }

    // an explicit truth file overrides the simulated system
    detail::write_json_file((d / "true_system.json").string(),
                            {{"pde", pde_json(burgers(0.004))}});
    cfg.evaluate.truth = (d / "true_system.json").string();
    stage_evaluate(cfg, d.string());
    {
        std::ifstream is(d / "metrics.csv");
        std::string line;
        std::getline(is, line);
        REQUIRE(std::getline(is, line));
        CHECK(line.rfind("exact,0,", 0) == 0);
        CHECK(line != "exact,0,0,1,1"); // rel_l2 now nonzero
    }

    // a refined system takes precedence over the raw discovery
    cfg.evaluate.truth.clear();
    detail::write_json_file((d / "discovered.json").string(),
                            {{"pde", pde_json(burgers(1.0))}});
    detail::write_json_file((d / "finetuned.json").string(),
                            {{"pde", pde_json(burgers(0.005))}});
    stage_evaluate(cfg, d.string());
    {
        std::ifstream is(d / "metrics.csv");
        std::string line;
        std::getline(is, line);
        REQUIRE(std::getline(is, line));
        CHECK(line == "exact,0,0,1,1");
    }
    fs::remove_all(d);
}

TEST_CASE("the output directory honors the environment root") {
    nlohmann::json j;
    j["sim"] = {{"preset", "burgers"}};
    PipelineConfig cfg = parse_pipeline_config(j);

    setenv("PDEDISC_OUTPUT_ROOT", "/tmp/pdedisc_root_test", 1);
    CHECK(default_output_dir(cfg) == "/tmp/pdedisc_root_test/burgers");
    unsetenv("PDEDISC_OUTPUT_ROOT");
    CHECK(default_output_dir(cfg) == "runs/burgers");
    cfg.output = "elsewhere";
    CHECK(default_output_dir(cfg) == "elsewhere");
}

TEST_CASE("config hashing tracks content") {
    nlohmann::json a = tiny_config(), b = tiny_config();
    CHECK(config_hash(a) == config_hash(b));
    CHECK(config_hash(a).size() == 16);
    b["seed"] = 4;
    CHECK(config_hash(a) != config_hash(b));
}
