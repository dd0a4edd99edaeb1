// Command-line front end: train, eval, heatmap, count-params, gen-data.
// Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
// divergence.

#include "mcrm/harness.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <iostream>
#include <string>
#include <vector>

namespace {

struct CliOptions {
  mcrm::TrainConfig config;
  std::string task = "adding";
  std::string arch = "mcrm";
  std::vector<std::uint64_t> seeds;
  std::string resume;
};

void add_train_flags(CLI::App* cmd, CliOptions& opts) {
  cmd->add_option("--task", opts.task, "Task: adding|copy|mnist|char-lm|word-lm");
  cmd->add_option("--arch", opts.arch, "Architecture: rnn|gru|lstm|nlstm|mcrm");
  cmd->add_option("--hidden", opts.config.hidden, "Hidden size (0 = published default)");
  cmd->add_option("--optimizer", opts.config.optimizer, "sgd|rmsprop|adam (default per task)");
  cmd->add_option("--lr", opts.config.lr, "Learning rate (0 = published default)");
  cmd->add_option("--clip", opts.config.clip, "Gradient clip norm (0 = published default)");
  cmd->add_option("--seed", opts.config.seed, "Random seed");
  cmd->add_option("--seeds", opts.seeds, "Comma-separated seed list for replicated runs")
      ->delimiter(',');
  cmd->add_option("--iters", opts.config.iters, "Training iterations (0 = 1000)");
  cmd->add_option("--batch", opts.config.batch, "Batch size");
  cmd->add_option("--bptt", opts.config.bptt,
                  "BPTT window; sequence length T for adding/copy (0 = default)");
  cmd->add_option("--eval-interval", opts.config.eval_interval,
                  "Iterations between evaluations (0 = default cadence)");
  cmd->add_option("--emb", opts.config.emb_dim, "Embedding width for language tasks (0 = hidden)");
  cmd->add_option("--data-dir", opts.config.data_dir, "Directory with task data files");
  cmd->add_option("--out-dir", opts.config.out_dir, "Output directory");
  cmd->set_config("--config", "", "Flat key=value config file; flags override it");
}

void finalize_config(CliOptions& opts) {
  opts.config.task = mcrm::parse_task(opts.task);
  opts.config.arch = mcrm::parse_arch(opts.arch);
}

void print_report(const mcrm::EvalReport& report) {
  std::printf("%s %s = %.8g  (n=%lld)\n", report.split.c_str(), report.metric.c_str(),
              report.value, static_cast<long long>(report.sample_count));
}

int run(int argc, char** argv) {
  CLI::App app{"Recurrent-cell laboratory: MCRM and baselines with exact BPTT"};
  app.require_subcommand(1);

  CliOptions opts;

  auto* train = app.add_subcommand("train", "Train one model (or one per seed)");
  add_train_flags(train, opts);
  train->add_option("--resume", opts.resume, "Resume from a checkpoint file");

  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on a split");
  std::string eval_ckpt, eval_split = "test";
  eval->add_option("--ckpt", eval_ckpt, "Checkpoint path")->required();
  eval->add_option("--split", eval_split, "train|valid|test");

  auto* heatmap = app.add_subcommand("heatmap", "Export memory-state grids for a sequence");
  std::string hm_ckpt, hm_text, hm_out = "heatmap";
  std::uint64_t hm_seed = 1;
  mcrm::Index hm_len = 0;
  heatmap->add_option("--ckpt", hm_ckpt, "Checkpoint path")->required();
  heatmap->add_option("--text", hm_text, "Input text (language checkpoints)");
  heatmap->add_option("--seq-seed", hm_seed, "Seed for the generated sequence");
  heatmap->add_option("--length", hm_len, "Sequence length (0 = configured default)");
  heatmap->add_option("--out", hm_out, "Output base path");

  auto* count = app.add_subcommand("count-params", "Report exact parameter counts");
  std::string cp_arch, cp_task;
  mcrm::Index cp_m = 0, cp_p = 0, cp_out = 1;
  count->add_option("--arch", cp_arch, "Single architecture (default: all five)");
  count->add_option("--task", cp_task, "Use a task's dims and published widths");
  count->add_option("--input-dim", cp_m, "Cell input dimension m");
  count->add_option("--hidden", cp_p, "Hidden size p");
  count->add_option("--output-dim", cp_out, "Readout width");

  auto* gen = app.add_subcommand("gen-data", "Generate a batch and export it as CSV");
  std::string gd_task = "adding", gd_out = "batch.csv";
  std::uint64_t gd_seed = 1;
  mcrm::Index gd_t = 50, gd_batch = 4;
  gen->add_option("--task", gd_task, "adding|copy");
  gen->add_option("--bptt", gd_t, "Sequence length T");
  gen->add_option("--batch", gd_batch, "Sequences per batch");
  gen->add_option("--seed", gd_seed, "Random seed");
  gen->add_option("--out", gd_out, "Output CSV path");

  CLI11_PARSE(app, argc, argv);

  if (train->parsed()) {
    if (!opts.resume.empty()) {
      const auto outcome = mcrm::resume_training(opts.resume, opts.config.iters);
      for (const auto& report : outcome.final_reports) print_report(report);
      std::printf("checkpoint: %s\ncurve: %s\n", outcome.checkpoint_path.c_str(),
                  outcome.curve_path.c_str());
      return 0;
    }
    finalize_config(opts);
    if (!opts.seeds.empty()) {
      const auto outcomes = mcrm::run_seeds(opts.config, opts.seeds);
      for (const auto& outcome : outcomes) {
        for (const auto& report : outcome.final_reports) print_report(report);
      }
      std::printf("summary: %s/summary.csv\n", opts.config.out_dir.c_str());
      return 0;
    }
    const auto outcome = mcrm::run_training(opts.config);
    for (const auto& report : outcome.final_reports) print_report(report);
    std::printf("checkpoint: %s\ncurve: %s\n", outcome.checkpoint_path.c_str(),
                outcome.curve_path.c_str());
    return 0;
  }

  if (eval->parsed()) {
    const auto ckpt = mcrm::load_checkpoint(eval_ckpt);
    print_report(mcrm::evaluate(ckpt, eval_split));
    return 0;
  }

  if (heatmap->parsed()) {
    const auto ckpt = mcrm::load_checkpoint(hm_ckpt);
    const auto files = mcrm::export_heatmap(ckpt, hm_text, hm_seed, hm_len, hm_out);
    for (const auto& path : files.grid_paths) std::printf("grid: %s\n", path.c_str());
    std::printf("neurons: %s\n", files.neurons_path.c_str());
    return 0;
  }

  if (count->parsed()) {
    const std::vector<mcrm::Arch> archs =
        cp_arch.empty() ? mcrm::all_archs() : std::vector<mcrm::Arch>{mcrm::parse_arch(cp_arch)};
    if (!cp_task.empty()) {
      const mcrm::Task task = mcrm::parse_task(cp_task);
      mcrm::Index m = 0, out = 0;
      switch (task) {
        case mcrm::Task::Adding: m = 2; out = 1; break;
        case mcrm::Task::Copy: m = 10; out = 10; break;
        case mcrm::Task::Mnist: m = 1; out = 10; break;
        case mcrm::Task::CharLm:
        case mcrm::Task::WordLm:
          throw mcrm::ConfigError(
              "count-params --task covers adding|copy|mnist; language tasks need explicit dims");
      }
      for (const auto arch : archs) {
        const mcrm::Index width = cp_p > 0 ? cp_p : mcrm::default_width(task, arch);
        std::printf("%-6s p=%-5lld params=%lld\n", mcrm::arch_name(arch).c_str(),
                    static_cast<long long>(width),
                    static_cast<long long>(mcrm::count_params(arch, m, width, out)));
      }
      return 0;
    }
    if (cp_m < 1 || cp_p < 1) {
      throw mcrm::ConfigError("count-params needs --task or both --input-dim and --hidden");
    }
    for (const auto arch : archs) {
      std::printf("%-6s p=%-5lld params=%lld\n", mcrm::arch_name(arch).c_str(),
                  static_cast<long long>(cp_p),
                  static_cast<long long>(mcrm::count_params(arch, cp_m, cp_p, cp_out)));
    }
    return 0;
  }

  if (gen->parsed()) {
    mcrm::Rng rng(gd_seed);
    const mcrm::TaskBatch batch = gd_task == "adding" ? mcrm::gen_adding(rng, gd_t, gd_batch)
                                  : gd_task == "copy"
                                      ? mcrm::gen_copy(rng, gd_t, gd_batch)
                                      : throw mcrm::ConfigError("gen-data supports adding|copy");
    mcrm::export_batch_csv(batch, gd_out);
    std::printf("wrote %s\n", gd_out.c_str());
    return 0;
  }

  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const mcrm::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const mcrm::DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const mcrm::NumericalDivergence& e) {
    std::cerr << "numerical divergence: " << e.what() << "\n";
    return 4;
  } catch (const std::invalid_argument& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
