#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "stella/avm/avm.hpp"
#include "stella/eval/eval.hpp"
#include "stella/memory/memory.hpp"
#include "stella/selection/selection.hpp"

namespace stella::trainer {

using nc::Tensor;

enum class Strategy { finetune, er, derpp, random_select, stella, stella_plus };

const char* strategy_name(Strategy s);
/// Throws ConfigError on an unknown name.
Strategy parse_strategy(const std::string& name);

bool uses_memory(Strategy s);
bool uses_penalty(Strategy s);
bool uses_selection(Strategy s);
/// STELLA and STELLA+ score patches with the AVM module.
bool uses_avm(Strategy s);

class ConfigError : public std::invalid_argument {
   public:
    using std::invalid_argument::invalid_argument;
};

/// A loss or update left the finite range.
class DivergenceError : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

struct TrainConfig {
    Strategy strategy = Strategy::stella;
    double alpha = 0.5;
    selection::SelectionConfig select;
    std::size_t batch = 8;
    std::size_t epochs = 3;
    std::size_t memory = 64;  // raw-layout entries; STELLA+ converts at equal patch bytes
    nc::AdamConfig optim;
    double avm_lr = 1e-3;
    std::uint64_t seed = 1;

    void validate() const;
};

/// Loss components of one step; components that do not apply are 0.
struct StepRecord {
    std::uint64_t step = 0;
    double l_r = 0.0;
    double l_c = 0.0;
    double l_p = 0.0;
    double l_avm = 0.0;
    double total = 0.0;
};

/// Independent random streams, one per consumer, so strategies that skip a
/// consumer leave the others untouched.
struct Streams {
    Rng shuffle, mask, select, replay, reservoir, avm;

    explicit Streams(std::uint64_t seed);
    std::vector<std::pair<std::string, Rng*>> named();
};

struct RunState {
    RunState(const TrainConfig& cfg, const backbone::BackboneConfig& model, const data::Geometry& geometry,
             std::size_t tasks);

    backbone::Backbone bb;
    avm::AvmModule avm;
    nc::Adam opt;
    nc::Adam avm_opt;
    memory::ReservoirMemory memory;
    Streams rng;
    std::uint64_t step = 0;
    std::size_t tasks_done = 0;
    eval::AccMatrix acc;
    eval::AccMatrix gap;
    std::vector<eval::RetrievalReport> latest;  // reports of the last evaluated row
};

/// Entry count of the run's memory: cfg.memory, or the byte-equalized count
/// for STELLA+.
std::size_t memory_capacity(const TrainConfig& cfg, const data::Geometry& geometry);

/// One update on a batch of the current stream. Replays from memory, selects
/// patches per strategy, inserts the current rows, trains the AVM module
/// (scoring strategies) and then the backbone.
StepRecord train_step(RunState& s, const TrainConfig& cfg, const data::Batch& current);

// Checkpoint: model, optimizers, RNG streams, counters and metric rows in one
// numcore container; the memory goes to its own snapshot file.
std::vector<nc::NamedTensor> state_tensors(const RunState& s, const TrainConfig& cfg);
void load_state_tensors(RunState& s, const TrainConfig& cfg, const std::vector<nc::NamedTensor>& t);

struct RunOptions {
    std::optional<std::filesystem::path> out_dir;  // run directory (artifacts and checkpoints)
    bool resume = false;                            // continue from out_dir's checkpoint
    std::optional<std::size_t> stop_after_task;     // return after this many tasks (simulated interruption)
    std::size_t eval_workers = 1;
    std::function<void(const StepRecord&)> on_step;
};

struct RunResult {
    eval::AccMatrix acc;
    eval::AccMatrix gap;
    std::vector<eval::RetrievalReport> final_reports;  // one per task, after the last task
    std::vector<StepRecord> losses;                   // steps run by this call
    std::size_t tasks_done = 0;
    std::size_t memory_entries = 0;
    std::size_t memory_capacity = 0;
    std::uint64_t steps = 0;

    bool complete() const { return tasks_done == acc.tasks(); }
};

/// Trains on each task in turn and evaluates every seen task after each one.
RunResult run_sequence(const std::vector<data::TaskDataset>& tasks, const TrainConfig& cfg,
                       const backbone::BackboneConfig& model, const data::Geometry& geometry,
                       const RunOptions& opts = {});

/// Final metrics of a completed run; F and gap decline need two tasks.
struct Summary {
    double a = 0.0;
    std::optional<double> f;
    std::optional<double> gap_decline;
    std::array<double, 3> a2v{};  // final-row mean over tasks
    std::array<double, 3> v2a{};
};
Summary summarize(const RunResult& r);

void write_matrix_csv(const std::filesystem::path& file, const eval::AccMatrix& m);
eval::AccMatrix read_matrix_csv(const std::filesystem::path& file);

}  // namespace stella::trainer
