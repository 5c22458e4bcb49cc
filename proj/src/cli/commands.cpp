#include "stella/cli/commands.hpp"

#include <cmath>
#include <fstream>
#include <iostream>
#include <sstream>

#include "stella/data/manifest.hpp"

namespace stella::cli {

namespace {

constexpr int kSummarySchema = 1;

std::string task_file(std::size_t i) { return "task_" + std::to_string(i) + ".bin"; }

bool same_geometry(const data::Geometry& a, const data::Geometry& b) {
    return a.audio.time == b.audio.time && a.audio.freq == b.audio.freq && a.audio.patch == b.audio.patch &&
           a.video.frames == b.video.frames && a.video.height == b.video.height && a.video.width == b.video.width &&
           a.video.patch == b.video.patch && a.video.channels == b.video.channels;
}

std::vector<data::TaskDataset> tasks_for(const RunConfig& cfg, const std::optional<fs::path>& dir) {
    if (dir) return load_tasks(*dir, cfg);
    return data::build_sequence(data::default_task_specs(cfg.data), cfg.data);
}

std::string config_text(const RunConfig& cfg) {
    std::ostringstream os;
    write_config(os, cfg);
    return os.str();
}

// Model state of a finished or interrupted run.
struct LoadedRun {
    RunConfig cfg;
    std::unique_ptr<trainer::RunState> state;
};

LoadedRun load_run(const fs::path& run) {
    LoadedRun r;
    r.cfg = load_config(run / "config.ini");
    r.cfg.validate();
    r.state = std::make_unique<trainer::RunState>(r.cfg.train, r.cfg.model, r.cfg.data.geometry,
                                                  r.cfg.data.num_tasks);
    auto ckpt = run / "checkpoint.bin";
    if (!fs::exists(ckpt)) throw data::DataError("no checkpoint in " + run.string());
    trainer::load_state_tensors(*r.state, r.cfg.train, nc::load_checkpoint(ckpt));
    return r;
}

nlohmann::json summary_json(const RunConfig& cfg, const trainer::RunResult& r) {
    auto s = trainer::summarize(r);
    nlohmann::json j;
    j["schema_version"] = kSummarySchema;
    j["strategy"] = trainer::strategy_name(cfg.train.strategy);
    j["seed"] = cfg.train.seed;
    j["tasks"] = r.acc.tasks();
    j["steps"] = r.steps;
    j["A"] = s.a;
    j["F"] = s.f ? nlohmann::json(*s.f) : nlohmann::json(nullptr);
    j["gap_decline"] = s.gap_decline ? nlohmann::json(*s.gap_decline) : nlohmann::json(nullptr);
    j["a2v"] = s.a2v;
    j["v2a"] = s.v2a;
    j["acc"] = r.acc.rows();
    j["gap"] = r.gap.rows();
    j["memory_entries"] = r.memory_entries;
    j["memory_capacity"] = r.memory_capacity;
    return j;
}

}  // namespace

int guarded(const std::function<void()>& body, std::ostream& err) {
    try {
        body();
        return kOk;
    } catch (const trainer::DivergenceError& e) {
        err << "error: numeric divergence: " << e.what() << '\n';
        return kDivergence;
    } catch (const nc::NumericError& e) {
        err << "error: numeric divergence: " << e.what() << '\n';
        return kDivergence;
    } catch (const ConfigError& e) {
        err << "error: config: " << e.what() << '\n';
        return kConfigError;
    } catch (const data::DataError& e) {
        err << "error: data: " << e.what() << '\n';
        return kDataError;
    } catch (const nc::FormatError& e) {
        err << "error: data: " << e.what() << '\n';
        return kDataError;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return kFailure;
    }
}

std::vector<std::string> cmd_generate(const RunConfig& cfg, const fs::path& out) {
    cfg.validate();
    auto tasks = data::build_sequence(data::default_task_specs(cfg.data), cfg.data);
    std::error_code ec;
    fs::create_directories(out, ec);
    if (ec) throw std::runtime_error("cannot create " + out.string() + ": " + ec.message());
    std::vector<std::string> names;
    for (std::size_t i = 0; i < tasks.size(); ++i) {
        names.push_back(task_file(i));
        data::save_task(out / names.back(), tasks[i], cfg.data.geometry);
    }
    nlohmann::json meta;
    meta["seed"] = cfg.data.seed;
    meta["tasks"] = tasks.size();
    data::write_manifest(out, names, meta.dump());
    save_config(out / "data_config.ini", cfg);
    return names;
}

std::vector<data::TaskDataset> load_tasks(const fs::path& dir, const RunConfig& cfg) {
    auto names = data::verify_manifest(dir);
    std::vector<data::TaskDataset> tasks;
    for (std::size_t i = 0; i < names.size(); ++i) {
        if (names[i] != task_file(i)) throw data::DataError("unexpected dataset file " + names[i]);
        data::Geometry g;
        tasks.push_back(data::load_task(dir / names[i], &g));
        if (!same_geometry(g, cfg.data.geometry)) {
            throw ConfigError("dataset geometry in " + names[i] + " differs from the config");
        }
    }
    if (tasks.size() != cfg.data.num_tasks) {
        throw ConfigError("dataset holds " + std::to_string(tasks.size()) + " tasks, config expects " +
                          std::to_string(cfg.data.num_tasks));
    }
    return tasks;
}

trainer::RunResult cmd_run(const RunArgs& args, std::ostream& log) {
    RunConfig cfg;
    if (args.resume) {
        cfg = load_config(args.out / "config.ini");
        if (args.config && config_text(load_config(*args.config)) != config_text(cfg)) {
            throw ConfigError("config differs from the one stored in " + args.out.string());
        }
    } else {
        if (!args.config) throw ConfigError("run needs --config");
        cfg = load_config(*args.config);
    }
    if (args.eval_workers) cfg.eval_workers = *args.eval_workers;
    cfg.validate();
    auto tasks = tasks_for(cfg, args.data);
    if (!args.resume && fs::exists(args.out) && !fs::is_empty(args.out)) {
        throw ConfigError("run directory " + args.out.string() + " already exists");
    }
    fs::create_directories(args.out);
    if (!args.resume) save_config(args.out / "config.ini", cfg);

    trainer::RunOptions opts;
    opts.out_dir = args.out;
    opts.resume = args.resume;
    opts.stop_after_task = args.stop_after_task;
    opts.eval_workers = cfg.eval_workers;
    const std::size_t steps_per_task = cfg.data.train_per_task / cfg.train.batch * cfg.train.epochs;
    opts.on_step = [&](const trainer::StepRecord& r) {
        if ((r.step + 1) % steps_per_task == 0) {
            log << "step " << r.step + 1 << "  l_r " << r.l_r << "  l_c " << r.l_c << "  l_p " << r.l_p
                << "  l_avm " << r.l_avm << std::endl;
        }
    };
    auto result = trainer::run_sequence(tasks, cfg.train, cfg.model, cfg.data.geometry, opts);
    if (result.complete()) {
        std::ofstream os(args.out / "summary.json");
        os << summary_json(cfg, result).dump(2) << '\n';
        if (!os) throw std::runtime_error("cannot write summary.json");
    }
    return result;
}

nlohmann::json cmd_eval(const fs::path& run, const std::optional<fs::path>& data, std::size_t workers) {
    auto loaded = load_run(run);
    auto tasks = tasks_for(loaded.cfg, data);
    nlohmann::json out;
    out["tasks_trained"] = loaded.state->tasks_done;
    out["tasks"] = nlohmann::json::array();
    for (std::size_t i = 0; i < tasks.size(); ++i) {
        auto te = eval::evaluate_bank(loaded.state->bb, tasks[i].eval, loaded.cfg.data.geometry, workers);
        out["tasks"].push_back({{"task", i},
                                {"a2v", te.retrieval.a2v},
                                {"v2a", te.retrieval.v2a},
                                {"headline", te.retrieval.headline()},
                                {"gap", te.gap}});
    }
    return out;
}

nlohmann::json ReportTable::to_json() const {
    nlohmann::json j = nlohmann::json::array();
    for (const auto& r : rows) {
        nlohmann::json row{{"strategy", r.strategy}, {"runs", r.runs}};
        for (std::size_t k = 0; k < metrics.size(); ++k) {
            row[metrics[k]] = {{"mean", r.mean[k]}, {"std", r.std[k]}};
        }
        j.push_back(row);
    }
    return j;
}

void ReportTable::write_csv(std::ostream& os) const {
    os << "strategy,runs";
    for (const auto& m : metrics) os << ',' << m << "_mean," << m << "_std";
    os << '\n';
    os.precision(10);
    for (const auto& r : rows) {
        os << r.strategy << ',' << r.runs;
        for (std::size_t k = 0; k < metrics.size(); ++k) {
            os << ',';
            if (std::isfinite(r.mean[k])) os << r.mean[k];
            os << ',';
            if (std::isfinite(r.std[k])) os << r.std[k];
        }
        os << '\n';
    }
}

ReportTable cmd_report(const std::vector<fs::path>& runs) {
    if (runs.empty()) throw ConfigError("report needs at least one run directory");
    ReportTable table;
    table.metrics = {"A", "F", "gap_decline", "a2v_R1", "a2v_R5", "a2v_R10", "v2a_R1", "v2a_R5", "v2a_R10"};
    std::vector<std::string> order;
    std::map<std::string, std::vector<std::vector<double>>> samples;
    std::optional<std::size_t> tasks;
    for (const auto& dir : runs) {
        std::ifstream is(dir / "summary.json");
        if (!is) throw data::DataError("no summary.json in " + dir.string() + " (run incomplete?)");
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(is);
        } catch (const nlohmann::json::exception& e) {
            throw data::DataError("malformed summary in " + dir.string() + ": " + e.what());
        }
        if (j.value("schema_version", 0) != kSummarySchema) {
            throw ConfigError("incompatible summary schema in " + dir.string());
        }
        const std::size_t t = j.at("tasks").get<std::size_t>();
        if (tasks && *tasks != t) throw ConfigError("runs cover different task counts");
        tasks = t;
        auto num = [](const nlohmann::json& v) { return v.is_null() ? std::nan("") : v.get<double>(); };
        std::vector<double> v{num(j.at("A")), num(j.at("F")), num(j.at("gap_decline"))};
        for (const char* dirn : {"a2v", "v2a"})
            for (std::size_t k = 0; k < 3; ++k) v.push_back(j.at(dirn).at(k).get<double>());
        const auto strategy = j.at("strategy").get<std::string>();
        if (!samples.count(strategy)) order.push_back(strategy);
        samples[strategy].push_back(v);
    }
    for (const auto& s : order) {
        const auto& xs = samples[s];
        ReportTable::Row row;
        row.strategy = s;
        row.runs = xs.size();
        for (std::size_t k = 0; k < table.metrics.size(); ++k) {
            double sum = 0.0;
            for (const auto& x : xs) sum += x[k];
            const double mean = sum / static_cast<double>(xs.size());
            double sq = 0.0;
            for (const auto& x : xs) sq += (x[k] - mean) * (x[k] - mean);
            row.mean.push_back(mean);
            row.std.push_back(xs.size() > 1 ? std::sqrt(sq / static_cast<double>(xs.size() - 1)) : 0.0);
        }
        table.rows.push_back(row);
    }
    std::stable_sort(table.rows.begin(), table.rows.end(),
                     [](const auto& a, const auto& b) { return a.mean[0] > b.mean[0]; });
    return table;
}

void cmd_export_attention(const fs::path& run, const std::optional<fs::path>& data, std::size_t task,
                          std::size_t count, const fs::path& out) {
    auto loaded = load_run(run);
    auto tasks = tasks_for(loaded.cfg, data);
    if (task >= tasks.size()) throw ConfigError("task " + std::to_string(task) + " out of range");
    const auto& bank = tasks[task].eval;
    if (count == 0 || count > bank.size()) {
        throw ConfigError("count must lie in [1, " + std::to_string(bank.size()) + "]");
    }
    std::vector<std::size_t> rows(count);
    for (std::size_t i = 0; i < count; ++i) rows[i] = i;
    auto batch = data::make_batch(bank, rows, loaded.cfg.data.geometry);
    const auto& bb = loaded.state->bb;
    nc::NoGradGuard no_grad;
    const std::size_t m = batch.audio.count(), n = batch.video.count();
    auto la = backbone::make_layout(backbone::Mask(count * m, 0), count, m);
    auto lv = backbone::make_layout(backbone::Mask(count * n, 0), count, n);
    auto [o_a, o_v] = bb.fuse_joint(bb.encode_audio(bb.embed(batch.audio), la),
                                    bb.encode_video(bb.embed(batch.video), lv), la, lv);
    auto ca = loaded.state->avm.cross_attention(o_a, o_v, loaded.cfg.train.select.beta);
    eval::export_attention(ca.maps, out);
}

}  // namespace stella::cli
