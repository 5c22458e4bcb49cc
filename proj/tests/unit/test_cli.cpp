#include <doctest.h>

#include <fstream>
#include <iostream>
#include <sstream>

#include "stella/cli/commands.hpp"
#include "stella/data/manifest.hpp"

using namespace stella;
using namespace stella::cli;

namespace {

RunConfig parse(const std::string& text) {
    std::istringstream is(text);
    return parse_config(is);
}

fs::path scratch(const std::string& name) {
    auto p = fs::temp_directory_path() / ("stella_cli_" + name);
    fs::remove_all(p);
    return p;
}

const char* kSmall = R"(
[data]
num_tasks = 2
train_per_task = 16
eval_per_task = 12
[model]
embed_dim = 16
[train]
strategy = finetune
batch = 4
epochs = 1
)";

fs::path write_file(const fs::path& p, const std::string& text) {
    fs::create_directories(p.parent_path());
    std::ofstream(p) << text;
    return p;
}

int run_quiet(const std::function<void()>& body) {
    std::ostringstream err;
    return guarded(body, err);
}

}  // namespace

TEST_CASE("config parsing and defaults") {
    auto cfg = parse("# comment\n[train]\nstrategy = derpp\nalpha = 0.25\n; other comment\n[eval]\nworkers = 3\n");
    CHECK(cfg.train.strategy == trainer::Strategy::derpp);
    CHECK(cfg.train.alpha == 0.25);
    CHECK(cfg.eval_workers == 3);
    CHECK(cfg.train.batch == 8);
    CHECK(cfg.data.num_tasks == 4);
    CHECK(cfg.given.count("train.alpha") == 1);
    cfg.validate();

    CHECK_THROWS_AS(parse("[train]\nbogus = 1\n"), ConfigError);
    CHECK_THROWS_AS(parse("[extra]\nx = 1\n"), ConfigError);
    CHECK_THROWS_AS(parse("[train]\nbatch = 8.5\n"), ConfigError);
    CHECK_THROWS_AS(parse("[train]\nbatch = -1\n"), ConfigError);
    CHECK_THROWS_AS(parse("[train]\nlr = fast\n"), ConfigError);
    CHECK_THROWS_AS(parse("[data]\nalign_to_grid = 1\n"), ConfigError);
    CHECK_THROWS_AS(parse("[train]\nstrategy = mystery\n"), ConfigError);
}

TEST_CASE("strategy applicability") {
    CHECK_THROWS_AS(parse("[train]\nstrategy = er\nalpha = 0.5\n").validate(), ConfigError);
    CHECK_THROWS_AS(parse("[train]\nstrategy = derpp\nrho_a = 0.5\n").validate(), ConfigError);
    CHECK_THROWS_AS(parse("[train]\nstrategy = random_select\nbeta = 0.4\n").validate(), ConfigError);
    CHECK_THROWS_AS(parse("[train]\nstrategy = finetune\nmemory = 4\n").validate(), ConfigError);
    parse("[train]\nstrategy = random_select\nrho_a = 0.25\nalpha = 0\n").validate();
    parse("[train]\nstrategy = stella_plus\nbeta = 0.2\nchunk = 4\n").validate();
    CHECK_THROWS_AS(parse("[model]\nembed_dim = 30\nheads = 4\n").validate(), ConfigError);
    CHECK_THROWS_AS(parse("[data]\neval_per_task = 5\n").validate(), ConfigError);
}

TEST_CASE("resolved config round trip") {
    auto cfg = parse("[train]\nstrategy = stella_plus\nlr = 0.00012345678901234567\n");
    std::ostringstream os;
    write_config(os, cfg);
    auto back = parse(os.str());
    CHECK(back.train.optim.lr == cfg.train.optim.lr);
    CHECK(back.train.strategy == trainer::Strategy::stella_plus);
    CHECK(back.given.size() > 40);
    std::ostringstream again;
    write_config(again, back);
    CHECK(again.str() == os.str());
}

TEST_CASE("shipped default config parses") {
    auto cfg = load_config(fs::path(STELLA_SOURCE_DIR) / "configs" / "default.ini");
    cfg.validate();
    CHECK(cfg.train.strategy == trainer::Strategy::stella);
    CHECK(cfg.train.optim.lr == 1e-4);
}

TEST_CASE("data generation is deterministic and tamper-evident") {
    auto root = scratch("gen");
    auto cfg = parse(kSmall);
    CHECK(cmd_generate(cfg, root / "a").size() == 2);
    cmd_generate(cfg, root / "b");
    for (auto name : {"task_0.bin", "task_1.bin"}) {
        CHECK(data::sha256_file(root / "a" / name) == data::sha256_file(root / "b" / name));
    }
    auto tasks = load_tasks(root / "a", cfg);
    CHECK(tasks.size() == 2);

    auto other = cfg;
    other.data.num_tasks = 3;
    CHECK(run_quiet([&] { load_tasks(root / "a", other); }) == kConfigError);

    {
        std::fstream f(root / "b" / "task_1.bin", std::ios::in | std::ios::out | std::ios::binary);
        f.seekp(100);
        f.put('\x7f');
    }
    CHECK(run_quiet([&] { load_tasks(root / "b", cfg); }) == kDataError);
    CHECK(run_quiet([&] { load_tasks(root / "missing", cfg); }) == kDataError);
    fs::remove_all(root);
}

TEST_CASE("run command: exit codes, artifacts and resume") {
    auto root = scratch("run");
    auto cfg_path = write_file(root / "small.ini", kSmall);

    RunArgs bad;
    bad.config = write_file(root / "bad.ini", std::string(kSmall) + "strategy = nonsense\n");
    bad.out = root / "bad_run";
    CHECK(run_quiet([&] { cmd_run(bad, std::cout); }) == kConfigError);
    CHECK(!fs::exists(bad.out));

    RunArgs missing;
    missing.config = cfg_path;
    missing.data = root / "no_data";
    missing.out = root / "missing_run";
    CHECK(run_quiet([&] { cmd_run(missing, std::cout); }) == kDataError);
    CHECK(!fs::exists(missing.out));

    std::ostringstream log;
    RunArgs one;
    one.config = cfg_path;
    one.out = root / "one";
    one.eval_workers = 2;
    auto r = cmd_run(one, log);
    CHECK(r.complete());
    for (auto f : {"config.ini", "losses.csv", "acc_matrix.csv", "gap_matrix.csv", "checkpoint.bin", "summary.json",
                   "memory/task_1.bin"}) {
        CHECK_MESSAGE(fs::exists(one.out / f), f);
    }
    CHECK(load_config(one.out / "config.ini").eval_workers == 2);
    CHECK(run_quiet([&] { cmd_run(one, log); }) == kConfigError);  // refuses to overwrite

    RunArgs part = one;
    part.out = root / "part";
    part.stop_after_task = 1;
    cmd_run(part, log);
    CHECK(!fs::exists(part.out / "summary.json"));
    RunArgs cont;
    cont.out = part.out;
    cont.resume = true;
    auto rest = cmd_run(cont, log);
    CHECK(rest.acc == r.acc);

    auto ev = cmd_eval(one.out, std::nullopt, 1);
    CHECK(ev["tasks"].size() == 2);
    CHECK(ev["tasks"][1]["headline"].get<double>() == doctest::Approx(r.acc.at(1, 1)).epsilon(1e-12));

    cmd_export_attention(one.out, std::nullopt, 1, 3, root / "att");
    CHECK(fs::exists(root / "att" / "attention_audio.csv"));
    CHECK(eval::read_attention(root / "att" / "attention_video.csv").size() == 3 * 64);
    fs::remove_all(root);
}

TEST_CASE("report aggregates runs per strategy") {
    auto root = scratch("report");
    auto summary = [&](const std::string& name, const std::string& strategy, double a, double f) {
        nlohmann::json j{{"schema_version", 1}, {"strategy", strategy}, {"tasks", 2},      {"A", a},
                         {"F", f},              {"gap_decline", 0.1},   {"a2v", {1, 2, 3}}, {"v2a", {4, 5, 6}}};
        write_file(root / name / "summary.json", j.dump());
        return root / name;
    };
    auto one = cmd_report({summary("x1", "er", 40, 3)});
    REQUIRE(one.rows.size() == 1);
    CHECK(one.rows[0].runs == 1);
    CHECK(one.rows[0].std[0] == 0.0);

    auto t = cmd_report({summary("s1", "stella", 10, 1), summary("d1", "derpp", 30, 2), summary("s2", "stella", 20, 2),
                         summary("s3", "stella", 60, 3), summary("f1", "finetune", 30, 5)});
    REQUIRE(t.rows.size() == 3);
    CHECK(t.rows[0].strategy == "stella");
    CHECK(t.rows[0].mean[0] == 30.0);
    CHECK(t.rows[0].mean[1] == 2.0);
    CHECK(t.rows[0].std[0] == doctest::Approx(std::sqrt(700.0)));
    // tie at A = 30: first appearance wins
    CHECK(t.rows[1].strategy == "derpp");
    CHECK(t.rows[2].strategy == "finetune");
    std::ostringstream csv;
    t.write_csv(csv);
    CHECK(csv.str().rfind("strategy,runs,A_mean,A_std", 0) == 0);

    nlohmann::json old{{"schema_version", 0}, {"strategy", "er"}, {"tasks", 2}};
    write_file(root / "old" / "summary.json", old.dump());
    CHECK(run_quiet([&] { cmd_report({root / "x1", root / "old"}); }) == kConfigError);
    fs::remove_all(root);
}

TEST_CASE("exit code mapping") {
    CHECK(run_quiet([] {}) == kOk);
    CHECK(run_quiet([] { throw trainer::DivergenceError("nan"); }) == kDivergence);
    CHECK(run_quiet([] { throw nc::NumericError("inf"); }) == kDivergence);
    CHECK(run_quiet([] { throw data::DataError("x"); }) == kDataError);
    CHECK(run_quiet([] { throw ConfigError("x"); }) == kConfigError);
    CHECK(run_quiet([] { throw std::runtime_error("x"); }) == kFailure);
}
