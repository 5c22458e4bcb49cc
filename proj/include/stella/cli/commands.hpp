#pragma once

#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "stella/cli/config.hpp"

namespace stella::cli {

namespace fs = std::filesystem;

enum ExitCode : int { kOk = 0, kFailure = 1, kConfigError = 2, kDataError = 3, kDivergence = 4 };

/// Runs `body`, reporting an escaping exception on `err` and mapping it to
/// an exit code.
int guarded(const std::function<void()>& body, std::ostream& err);

/// Writes task_<i>.bin per task and manifest.json into `out`.
std::vector<std::string> cmd_generate(const RunConfig& cfg, const fs::path& out);

/// Verifies the manifest and loads every task; the files must match the
/// config's task count and geometry.
std::vector<data::TaskDataset> load_tasks(const fs::path& dir, const RunConfig& cfg);

struct RunArgs {
    std::optional<fs::path> config;  // required unless resuming
    std::optional<fs::path> data;    // generated from [data] when absent
    fs::path out;
    bool resume = false;
    std::optional<std::size_t> stop_after_task;
    std::optional<std::size_t> eval_workers;
};

/// Validates config and data before touching `out`, so a rejected run
/// leaves no directory behind.
trainer::RunResult cmd_run(const RunArgs& args, std::ostream& log);

/// Retrieval and modality gap of a run's checkpoint on every task.
nlohmann::json cmd_eval(const fs::path& run, const std::optional<fs::path>& data, std::size_t workers);

/// Strategy rows (mean and sample std over runs), sorted by mean A
/// descending; ties keep first-appearance order.
struct ReportTable {
    std::vector<std::string> metrics;
    struct Row {
        std::string strategy;
        std::size_t runs = 0;
        std::vector<double> mean;
        std::vector<double> std;
    };
    std::vector<Row> rows;

    nlohmann::json to_json() const;
    void write_csv(std::ostream& os) const;
};
ReportTable cmd_report(const std::vector<fs::path>& runs);

/// Head-averaged AVM maps of the first `count` eval pairs of `task`.
void cmd_export_attention(const fs::path& run, const std::optional<fs::path>& data, std::size_t task,
                          std::size_t count, const fs::path& out);

}  // namespace stella::cli
