#include <CLI11.hpp>
#include <fstream>
#include <iostream>

#include "stella/cli/commands.hpp"

using namespace stella;
using namespace stella::cli;

int main(int argc, char** argv) {
    CLI::App app{"Continual audio-video pre-training with localized patch selection"};
    app.require_subcommand(1);

    std::string config, out, data_dir, run_dir;
    std::size_t workers = 1, task = 0, count = 8, stop_after = 0;
    bool resume = false;

    auto* gen = app.add_subcommand("generate-data", "Write the synthetic task sequence and its manifest");
    gen->add_option("--config", config, "Config file")->required()->check(CLI::ExistingFile);
    gen->add_option("--out", out, "Output directory")->required();

    auto* run = app.add_subcommand("run", "Train one strategy over the task sequence");
    run->add_option("--config", config, "Config file (optional when resuming)");
    run->add_option("--data", data_dir, "Dataset directory (generated in memory when omitted)");
    run->add_option("--out", out, "Run directory")->required();
    run->add_flag("--resume", resume, "Continue from the run directory's checkpoint");
    auto* stop_opt = run->add_option("--stop-after-task", stop_after, "Stop once this many tasks are done");
    auto* run_workers = run->add_option("--eval-workers", workers, "Threads for evaluation")->check(CLI::PositiveNumber);

    auto* ev = app.add_subcommand("eval", "Evaluate a run's checkpoint on every task");
    ev->add_option("--run", run_dir, "Run directory")->required();
    ev->add_option("--data", data_dir, "Dataset directory");
    ev->add_option("--eval-workers", workers, "Threads for evaluation")->check(CLI::PositiveNumber);

    std::vector<std::string> runs;
    std::string csv_out, json_out;
    auto* rep = app.add_subcommand("report", "Aggregate run directories into a comparison table");
    rep->add_option("runs", runs, "Run directories")->required();
    rep->add_option("--csv", csv_out, "Write the table as CSV");
    rep->add_option("--json", json_out, "Write the table as JSON");

    auto* att = app.add_subcommand("export-attention", "Dump head-averaged AVM maps as CSV");
    att->add_option("--run", run_dir, "Run directory")->required();
    att->add_option("--data", data_dir, "Dataset directory");
    att->add_option("--task", task, "Task index");
    att->add_option("--count", count, "Number of eval pairs");
    att->add_option("--out", out, "Output directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? kOk : kConfigError;
    }

    auto opt_path = [](const std::string& s) -> std::optional<fs::path> {
        if (s.empty()) return std::nullopt;
        return fs::path(s);
    };

    return guarded(
        [&] {
            if (*gen) {
                auto names = cmd_generate(load_config(config), out);
                std::cout << "wrote " << names.size() << " task files and manifest.json to " << out << '\n';
            } else if (*run) {
                RunArgs a;
                a.config = opt_path(config);
                a.data = opt_path(data_dir);
                a.out = out;
                a.resume = resume;
                if (*stop_opt) a.stop_after_task = stop_after;
                if (*run_workers) a.eval_workers = workers;
                auto r = cmd_run(a, std::cout);
                std::cout << "tasks done: " << r.tasks_done << "/" << r.acc.tasks() << ", steps " << r.steps << '\n';
                if (r.complete()) {
                    auto s = trainer::summarize(r);
                    std::cout << "A = " << s.a;
                    if (s.f) std::cout << "  F = " << *s.f;
                    std::cout << '\n';
                }
            } else if (*ev) {
                std::cout << cmd_eval(run_dir, opt_path(data_dir), workers).dump(2) << '\n';
            } else if (*rep) {
                std::vector<fs::path> dirs(runs.begin(), runs.end());
                auto table = cmd_report(dirs);
                table.write_csv(std::cout);
                if (!csv_out.empty()) {
                    std::ofstream os(csv_out);
                    table.write_csv(os);
                }
                if (!json_out.empty()) {
                    std::ofstream os(json_out);
                    os << table.to_json().dump(2) << '\n';
                }
            } else if (*att) {
                cmd_export_attention(run_dir, opt_path(data_dir), task, count, out);
                std::cout << "wrote attention_audio.csv and attention_video.csv to " << out << '\n';
            }
        },
        std::cerr);
}
