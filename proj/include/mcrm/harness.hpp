#pragma once

// Experiment harness: configuration with per-task published defaults,
// the training loop (generate/load -> forward -> loss -> BPTT -> clip ->
// step), deterministic evaluation, binary checkpoints with exact resume,
// learning-curve CSV emission, and memory-state heat-map export.

#include "mcrm/grad.hpp"
#include "mcrm/metrics.hpp"
#include "mcrm/optim.hpp"
#include "mcrm/tasks.hpp"

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace mcrm {

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum class Task { Adding, Copy, Mnist, CharLm, WordLm };

Task parse_task(const std::string& name);
std::string task_name(Task task);

// Zero-valued numeric fields and the empty optimizer string resolve to the
// published per-task defaults. `bptt` is the BPTT window for the language
// tasks and the generated sequence length T for adding/copy.
struct TrainConfig {
  Task task = Task::Adding;
  Arch arch = Arch::Mcrm;
  Index hidden = 0;
  std::string optimizer;
  Real lr = 0.0;
  Real clip = 0.0;
  std::uint64_t seed = 1;
  std::int64_t iters = 0;
  Index batch = 32;
  Index bptt = 0;
  Index eval_interval = 0;  // language tasks default to once per epoch
  Index emb_dim = 0;        // language-model embedding width; 0 -> hidden
  std::string data_dir;
  std::string out_dir = "out";
};

// Published hidden sizes and optimizer regimes per task row, including the
// per-architecture overrides.
Index default_width(Task task, Arch arch);
struct OptimDefaults {
  std::string optimizer;
  Real lr = 0.0;
  Real clip = 0.0;
};
OptimDefaults default_optim(Task task, Arch arch);

TrainConfig resolved(TrainConfig config);  // fills defaults, validates

// What one task means for the model and loss head.
struct TaskSpec {
  Index input_dim = 0;   // m (embedding width for the language tasks)
  Index output_dim = 0;
  Index vocab = 0;       // 0 for dense-input tasks
  LossKind loss = LossKind::MseLast;
  std::string metric;    // primary reported metric token
};

struct Checkpoint {
  std::uint32_t version = 1;
  TrainConfig config;
  Model model;
  OptState opt;
  std::uint64_t rng_state = 0;
  std::int64_t iteration = 0;
  bool has_best_valid = false;
  Real best_valid = 0.0;
  CellState lm_carry;          // hidden state carried across LM windows
  Real train_loss_sum = 0.0;   // running train-loss accumulator for curves
  std::int64_t train_loss_count = 0;
};

void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

struct CurvePoint {
  std::int64_t iteration = 0;
  std::string split;
  std::string metric;
  Real value = 0.0;
  Real seconds = 0.0;
};

struct TrainOutcome {
  std::vector<EvalReport> final_reports;  // test-split metrics
  std::string checkpoint_path;
  std::string curve_path;
  std::int64_t iterations = 0;
};

TrainOutcome run_training(const TrainConfig& config);
TrainOutcome resume_training(const std::string& checkpoint_path, std::int64_t total_iters);

// Sequential replicas under each seed plus a mean-aggregated summary.csv in
// config.out_dir.
std::vector<TrainOutcome> run_seeds(TrainConfig config, const std::vector<std::uint64_t>& seeds);

EvalReport evaluate(const Checkpoint& ckpt, const std::string& split);

// The architecture's memory state over one sequence, one grid per exported
// state (two for NLSTM), each hidden-size x T.
struct MemoryGrids {
  std::vector<std::pair<std::string, Matrix>> grids;  // state name, grid
};
MemoryGrids memory_state_grids(const Model& model, const BatchInputs& sequence);

// Long-term score rewards sustained magnitude with little step-to-step
// change; short-term score is the mean absolute step-to-step change.
struct NeuronScore {
  Index neuron = 0;
  Real long_score = 0.0;
  Real short_score = 0.0;
  Index long_rank = 0;   // 1-based
  Index short_rank = 0;  // 1-based
};
std::vector<NeuronScore> rank_neurons(const Matrix& grid);

struct HeatmapFiles {
  std::vector<std::string> grid_paths;
  std::string neurons_path;
};

// For language checkpoints `text` drives the sequence; for generator tasks
// a sequence is drawn from `sequence_seed` with length `length` (0 -> the
// configured default).
HeatmapFiles export_heatmap(const Checkpoint& ckpt, const std::string& text,
                            std::uint64_t sequence_seed, Index length,
                            const std::string& out_base);

// Exposed for evaluation and tests.
TaskSpec task_spec(const TrainConfig& config);
EvalReport evaluate_model(const Model& model, const TrainConfig& config,
                          const std::string& split);

}  // namespace mcrm
