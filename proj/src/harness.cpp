#include "mcrm/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <sstream>

namespace mcrm {

namespace fs = std::filesystem;

namespace {

constexpr char kCurveFile[] = "curve.csv";
constexpr char kCheckpointFile[] = "ckpt.bin";
constexpr char kDivergedFile[] = "ckpt-diverged.bin";
constexpr char kCheckpointMagic[8] = {'M', 'C', 'R', 'M', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kCheckpointVersion = 1;

constexpr Index kSyntheticEvalSequences = 256;
constexpr Index kMnistEvalImages = 1024;

std::uint64_t fnv1a(const std::string& text) {
  std::uint64_t hash = 14695981039346656037ull;
  for (unsigned char ch : text) {
    hash ^= ch;
    hash *= 1099511628211ull;
  }
  return hash;
}

// Evaluation draws from a stream derived from (seed, split), so it never
// perturbs the training stream and repeated calls see the same data.
Rng eval_rng(std::uint64_t seed, const std::string& split) {
  return Rng(seed ^ (fnv1a("eval:" + split) | 1ull));
}

}  // namespace

Task parse_task(const std::string& name) {
  if (name == "adding") return Task::Adding;
  if (name == "copy") return Task::Copy;
  if (name == "mnist") return Task::Mnist;
  if (name == "char-lm") return Task::CharLm;
  if (name == "word-lm") return Task::WordLm;
  throw ConfigError("unknown task '" + name + "' (expected adding|copy|mnist|char-lm|word-lm)");
}

std::string task_name(Task task) {
  switch (task) {
    case Task::Adding: return "adding";
    case Task::Copy: return "copy";
    case Task::Mnist: return "mnist";
    case Task::CharLm: return "char-lm";
    case Task::WordLm: return "word-lm";
  }
  throw ConfigError("unknown task id");
}

Index default_width(Task task, Arch arch) {
  // Published per-task hidden sizes.
  switch (task) {
    case Task::Adding:
      switch (arch) {
        case Arch::Rnn: return 308;
        case Arch::Gru: return 177;
        case Arch::Lstm: return 153;
        case Arch::Nlstm: return 77;
        case Arch::Mcrm: return 85;
      }
      break;
    case Task::Mnist:
      switch (arch) {
        case Arch::Rnn: return 384;
        case Arch::Gru: return 222;
        case Arch::Lstm: return 192;
        case Arch::Nlstm: return 108;
        case Arch::Mcrm: return 97;
      }
      break;
    case Task::Copy:
      switch (arch) {
        case Arch::Rnn: return 1800;
        case Arch::Gru: return 1050;
        case Arch::Lstm: return 900;
        case Arch::Nlstm: return 448;
        case Arch::Mcrm: return 500;
      }
      break;
    case Task::WordLm:
      switch (arch) {
        case Arch::Rnn: return 125;
        case Arch::Gru: return 119;
        case Arch::Lstm: return 117;
        case Arch::Nlstm: return 100;
        case Arch::Mcrm: return 109;
      }
      break;
    case Task::CharLm:
      switch (arch) {
        case Arch::Rnn: return 2900;
        case Arch::Gru: return 1680;
        case Arch::Lstm: return 1050;
        case Arch::Nlstm: return 920;
        case Arch::Mcrm: return 1000;
      }
      break;
  }
  throw ConfigError("no default width for this task/architecture");
}

OptimDefaults default_optim(Task task, Arch arch) {
  switch (task) {
    case Task::Adding:
      if (arch == Arch::Nlstm) return {"adam", 0.01, 0.1};
      return {"adam", 1e-3, 0.5};
    case Task::Mnist:
      if (arch == Arch::Nlstm) return {"rmsprop", 1e-3, 0.25};
      if (arch == Arch::Lstm) return {"rmsprop", 1e-4, 1.0};
      return {"rmsprop", 1e-3, 1.0};
    case Task::Copy:
      if (arch == Arch::Nlstm) return {"rmsprop", 1e-4, 0.25};
      return {"rmsprop", 5e-4, 1.0};
    case Task::WordLm:
      return {"sgd", 30.0, 0.35};
    case Task::CharLm:
      return {"adam", 1e-3, 0.15};
  }
  throw ConfigError("no default optimizer for this task");
}

TrainConfig resolved(TrainConfig config) {
  if (config.hidden == 0) config.hidden = default_width(config.task, config.arch);
  const OptimDefaults defaults = default_optim(config.task, config.arch);
  if (config.optimizer.empty()) config.optimizer = defaults.optimizer;
  parse_optimizer(config.optimizer);  // validates the token
  if (config.lr == 0.0) config.lr = defaults.lr;
  if (config.clip == 0.0) config.clip = defaults.clip;
  if (config.iters == 0) config.iters = 1000;
  if (config.bptt == 0) {
    switch (config.task) {
      case Task::Adding: config.bptt = 200; break;
      case Task::Copy: config.bptt = 1000; break;
      case Task::Mnist: config.bptt = 784; break;  // fixed by the pixel count
      case Task::CharLm: config.bptt = 150; break;
      case Task::WordLm: config.bptt = 35; break;
    }
  }
  if (config.eval_interval == 0 &&
      (config.task == Task::Adding || config.task == Task::Copy || config.task == Task::Mnist)) {
    config.eval_interval = 100;
  }
  if (config.emb_dim == 0) config.emb_dim = config.hidden;

  if (config.hidden < 1) throw ConfigError("hidden size must be positive");
  if (config.batch < 1) throw ConfigError("batch size must be positive");
  if (config.bptt < 1) throw ConfigError("bptt window must be positive");
  if (config.iters < 1) throw ConfigError("iteration budget must be positive");
  if (!(config.lr > 0.0)) throw ConfigError("learning rate must be positive");
  if (!(config.clip > 0.0)) throw ConfigError("clip norm must be positive");
  if (config.task == Task::Adding && config.bptt < 2) {
    throw ConfigError("adding task needs a sequence length of at least 2");
  }
  const bool needs_data =
      config.task == Task::Mnist || config.task == Task::CharLm || config.task == Task::WordLm;
  if (needs_data && config.data_dir.empty()) {
    throw ConfigError("--data-dir is required for task " + task_name(config.task));
  }
  return config;
}

// ---------------------------------------------------------------------------
// Task data and batch construction.

namespace {

struct TaskData {
  CorpusSplit corpus;       // language tasks
  IdxImages mnist_train;    // mnist
  IdxImages mnist_test;
};

TaskData load_task_data(const TrainConfig& config) {
  TaskData data;
  switch (config.task) {
    case Task::Adding:
    case Task::Copy:
      break;
    case Task::Mnist:
      data.mnist_train = load_idx_images(config.data_dir + "/train-images-idx3-ubyte",
                                         config.data_dir + "/train-labels-idx1-ubyte");
      data.mnist_test = load_idx_images(config.data_dir + "/t10k-images-idx3-ubyte",
                                        config.data_dir + "/t10k-labels-idx1-ubyte");
      break;
    case Task::CharLm:
    case Task::WordLm:
      data.corpus = load_text_corpus(
          config.data_dir + "/train.txt", config.data_dir + "/valid.txt",
          config.data_dir + "/test.txt",
          config.task == Task::CharLm ? Granularity::Character : Granularity::Word);
      break;
  }
  return data;
}

TaskSpec make_spec(const TrainConfig& config, const TaskData& data) {
  TaskSpec spec;
  switch (config.task) {
    case Task::Adding:
      spec = {2, 1, 0, LossKind::MseLast, "mse"};
      break;
    case Task::Copy:
      spec = {kCopyAlphabet, kCopyAlphabet, 0, LossKind::CeAll, "ce"};
      break;
    case Task::Mnist:
      spec = {1, 10, 0, LossKind::CeLast, "acc"};
      break;
    case Task::CharLm:
      spec = {config.emb_dim, data.corpus.vocab_size(), data.corpus.vocab_size(),
              LossKind::CeAll, "bpc"};
      break;
    case Task::WordLm:
      spec = {config.emb_dim, data.corpus.vocab_size(), data.corpus.vocab_size(),
              LossKind::CeAll, "ppl"};
      break;
  }
  return spec;
}

void task_batch_to_grad(const TaskBatch& tb, BatchInputs& in, BatchTargets& tg) {
  in.dense = tb.inputs;
  tg.regression = tb.regression_targets;
  tg.step_labels = tb.step_labels;
}

void mnist_batch(const IdxImages& images, const std::vector<Index>& picks, BatchInputs& in,
                 BatchTargets& tg) {
  const Index steps = images.rows * images.cols;
  const Index batch = static_cast<Index>(picks.size());
  in.dense.assign(static_cast<std::size_t>(steps), Matrix(1, batch));
  for (Index b = 0; b < batch; ++b) {
    const Vector& seq = images.sequences[static_cast<std::size_t>(picks[static_cast<std::size_t>(b)])];
    for (Index t = 0; t < steps; ++t) {
      in.dense[static_cast<std::size_t>(t)](0, b) = seq[t];
    }
    tg.labels.push_back(images.labels[static_cast<std::size_t>(picks[static_cast<std::size_t>(b)])]);
  }
}

const std::vector<std::int32_t>& corpus_tokens(const CorpusSplit& corpus,
                                               const std::string& split) {
  if (split == "train") return corpus.train;
  if (split == "valid") return corpus.valid;
  if (split == "test") return corpus.test;
  throw ConfigError("unknown split '" + split + "' (expected train|valid|test)");
}

// Metric value derived from a mean cross-entropy (or passed through).
Real derive_metric(const std::string& metric, Real value) {
  if (metric == "bpc") return bpc(value);
  if (metric == "ppl") return ppl(value);
  return value;
}

EvalReport eval_with_data(const Model& model, const TrainConfig& config, const TaskSpec& spec,
                          const TaskData& data, const std::string& split) {
  EvalReport report;
  report.split = split;
  report.metric = spec.metric;
  switch (config.task) {
    case Task::Adding: {
      Rng rng = eval_rng(config.seed, split);
      const TaskBatch tb = gen_adding(rng, config.bptt, kSyntheticEvalSequences);
      BatchInputs in;
      BatchTargets tg;
      task_batch_to_grad(tb, in, tg);
      const Tape tape = run_forward(model, in, LossKind::MseLast);
      const Matrix& pred = tape.logits.back();
      report.value = mse(pred.row(0).transpose(), tb.regression_targets.row(0).transpose());
      report.sample_count = kSyntheticEvalSequences;
      break;
    }
    case Task::Copy: {
      Rng rng = eval_rng(config.seed, split);
      const TaskBatch tb = gen_copy(rng, config.bptt, kSyntheticEvalSequences);
      BatchInputs in;
      BatchTargets tg;
      task_batch_to_grad(tb, in, tg);
      const Real total = sequence_loss(model, in, tg, LossKind::CeAll);
      report.value = total / static_cast<Real>(kSyntheticEvalSequences);
      report.sample_count = kSyntheticEvalSequences;
      break;
    }
    case Task::Mnist: {
      const IdxImages& images = split == "train" ? data.mnist_train : data.mnist_test;
      if (images.image_count == 0) throw DataError("no images in split " + split);
      const Index count = std::min<Index>(kMnistEvalImages, images.image_count);
      std::vector<Index> picks(static_cast<std::size_t>(count));
      std::iota(picks.begin(), picks.end(), Index{0});
      BatchInputs in;
      BatchTargets tg;
      mnist_batch(images, picks, in, tg);
      const Tape tape = run_forward(model, in, LossKind::CeLast);
      report.value = accuracy(tape.logits.back(), tg.labels);
      report.sample_count = count;
      break;
    }
    case Task::CharLm:
    case Task::WordLm: {
      const auto& tokens = corpus_tokens(data.corpus, split);
      Index batch = config.batch;
      while (batch > 1 && static_cast<Index>(tokens.size()) < batch * (config.bptt + 1)) {
        --batch;
      }
      const LmBatches batches(tokens, batch, config.bptt);
      Real total = 0.0;
      // Hidden state carries across successive windows within the split.
      CellState carry = model.initial_state(batch);
      for (Index w = 0; w < batches.windows(); ++w) {
        const LmWindow window = batches.window(w);
        BatchInputs in;
        in.tokens = window.inputs;
        BatchTargets tg;
        tg.step_labels = window.targets;
        const Tape tape = run_forward(model, in, LossKind::CeAll, &carry);
        total += loss_from_tape(tape, tg, LossKind::CeAll, model.output_dim);
        carry = tape.states.back();
      }
      const Real mean_ce = total / static_cast<Real>(batches.windows() * batch);
      report.value = derive_metric(spec.metric, mean_ce);
      report.sample_count = batches.windows() * batch * config.bptt;
      break;
    }
  }
  return report;
}

}  // namespace

TaskSpec task_spec(const TrainConfig& config) {
  const TrainConfig cfg = resolved(config);
  const TaskData data = load_task_data(cfg);
  return make_spec(cfg, data);
}

EvalReport evaluate_model(const Model& model, const TrainConfig& config,
                          const std::string& split) {
  const TrainConfig cfg = resolved(config);
  const TaskData data = load_task_data(cfg);
  const TaskSpec spec = make_spec(cfg, data);
  return eval_with_data(model, cfg, spec, data, split);
}

EvalReport evaluate(const Checkpoint& ckpt, const std::string& split) {
  return evaluate_model(ckpt.model, ckpt.config, split);
}

// ---------------------------------------------------------------------------
// Checkpoint serialization: little-endian binary, written field-by-field in
// a fixed order so save -> load -> save is byte-identical.

namespace {

void write_raw(std::ostream& out, const void* data, std::size_t n) {
  out.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
}

template <typename T>
void write_pod(std::ostream& out, T value) {
  write_raw(out, &value, sizeof(T));
}

void write_string(std::ostream& out, const std::string& s) {
  write_pod<std::uint64_t>(out, s.size());
  write_raw(out, s.data(), s.size());
}

void write_matrix(std::ostream& out, const Matrix& m) {
  write_pod<std::int64_t>(out, m.rows());
  write_pod<std::int64_t>(out, m.cols());
  write_raw(out, m.data(), sizeof(Real) * static_cast<std::size_t>(m.size()));
}

void read_raw(std::istream& in, void* data, std::size_t n, const char* what) {
  in.read(static_cast<char*>(data), static_cast<std::streamsize>(n));
  if (in.gcount() != static_cast<std::streamsize>(n)) {
    throw DataError(std::string("corrupt or truncated checkpoint: ") + what);
  }
}

template <typename T>
T read_pod(std::istream& in, const char* what) {
  T value;
  read_raw(in, &value, sizeof(T), what);
  return value;
}

std::string read_string(std::istream& in, const char* what) {
  const auto n = read_pod<std::uint64_t>(in, what);
  if (n > (1ull << 32)) throw DataError(std::string("corrupt checkpoint string: ") + what);
  std::string s(n, '\0');
  read_raw(in, s.data(), n, what);
  return s;
}

Matrix read_matrix(std::istream& in, const char* what) {
  const auto rows = read_pod<std::int64_t>(in, what);
  const auto cols = read_pod<std::int64_t>(in, what);
  if (rows < 0 || cols < 0 || rows * cols > (1ll << 32)) {
    throw DataError(std::string("corrupt checkpoint tensor: ") + what);
  }
  Matrix m(rows, cols);
  read_raw(in, m.data(), sizeof(Real) * static_cast<std::size_t>(m.size()), what);
  return m;
}

}  // namespace

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot open checkpoint file for writing: " + path);

  write_raw(out, kCheckpointMagic, sizeof(kCheckpointMagic));
  write_pod<std::uint32_t>(out, kCheckpointVersion);

  const TrainConfig& c = ckpt.config;
  write_string(out, task_name(c.task));
  write_string(out, arch_name(c.arch));
  write_pod<std::int64_t>(out, c.hidden);
  write_string(out, c.optimizer);
  write_pod<Real>(out, c.lr);
  write_pod<Real>(out, c.clip);
  write_pod<std::uint64_t>(out, c.seed);
  write_pod<std::int64_t>(out, c.iters);
  write_pod<std::int64_t>(out, c.batch);
  write_pod<std::int64_t>(out, c.bptt);
  write_pod<std::int64_t>(out, c.eval_interval);
  write_pod<std::int64_t>(out, c.emb_dim);
  write_string(out, c.data_dir);
  write_string(out, c.out_dir);

  const Model& m = ckpt.model;
  write_pod<std::int64_t>(out, m.input_dim);
  write_pod<std::int64_t>(out, m.hidden);
  write_pod<std::int64_t>(out, m.output_dim);
  write_pod<std::int64_t>(out, m.vocab);
  const auto views = tensor_views(m);
  write_pod<std::uint64_t>(out, views.size());
  for (const auto& v : views) {
    write_string(out, v.name);
    write_pod<std::int64_t>(out, v.rows);
    write_pod<std::int64_t>(out, v.cols);
    write_raw(out, v.data, sizeof(Real) * static_cast<std::size_t>(v.size()));
  }

  write_string(out, optimizer_name(ckpt.opt.kind));
  write_pod<std::int64_t>(out, ckpt.opt.step);
  write_pod<std::uint8_t>(out, ckpt.opt.m.count() > 0 ? 1 : 0);
  write_pod<std::uint8_t>(out, ckpt.opt.v.count() > 0 ? 1 : 0);
  for (Index i = 0; i < ckpt.opt.m.count(); ++i) write_matrix(out, ckpt.opt.m[i]);
  for (Index i = 0; i < ckpt.opt.v.count(); ++i) write_matrix(out, ckpt.opt.v[i]);

  write_pod<std::uint64_t>(out, ckpt.rng_state);
  write_pod<std::int64_t>(out, ckpt.iteration);
  write_pod<std::uint8_t>(out, ckpt.has_best_valid ? 1 : 0);
  write_pod<Real>(out, ckpt.best_valid);
  write_matrix(out, ckpt.lm_carry.h);
  write_matrix(out, ckpt.lm_carry.c);
  write_matrix(out, ckpt.lm_carry.inner_h);
  write_matrix(out, ckpt.lm_carry.inner_c);
  write_pod<Real>(out, ckpt.train_loss_sum);
  write_pod<std::int64_t>(out, ckpt.train_loss_count);

  out.flush();
  if (!out) throw DataError("failed writing checkpoint: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint file: " + path);

  char magic[sizeof(kCheckpointMagic)];
  read_raw(in, magic, sizeof(magic), "magic");
  if (std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0) {
    throw DataError("not a checkpoint file: " + path);
  }
  const auto version = read_pod<std::uint32_t>(in, "version");
  if (version != kCheckpointVersion) {
    throw DataError("unsupported checkpoint version " + std::to_string(version));
  }

  Checkpoint ckpt;
  ckpt.version = version;
  TrainConfig& c = ckpt.config;
  c.task = parse_task(read_string(in, "task"));
  c.arch = parse_arch(read_string(in, "arch"));
  c.hidden = read_pod<std::int64_t>(in, "hidden");
  c.optimizer = read_string(in, "optimizer");
  c.lr = read_pod<Real>(in, "lr");
  c.clip = read_pod<Real>(in, "clip");
  c.seed = read_pod<std::uint64_t>(in, "seed");
  c.iters = read_pod<std::int64_t>(in, "iters");
  c.batch = read_pod<std::int64_t>(in, "batch");
  c.bptt = read_pod<std::int64_t>(in, "bptt");
  c.eval_interval = read_pod<std::int64_t>(in, "eval_interval");
  c.emb_dim = read_pod<std::int64_t>(in, "emb_dim");
  c.data_dir = read_string(in, "data_dir");
  c.out_dir = read_string(in, "out_dir");

  const auto input_dim = read_pod<std::int64_t>(in, "input_dim");
  const auto hidden = read_pod<std::int64_t>(in, "model hidden");
  const auto output_dim = read_pod<std::int64_t>(in, "output_dim");
  const auto vocab = read_pod<std::int64_t>(in, "vocab");
  ckpt.model = zero_model(c.arch, input_dim, hidden, output_dim, vocab);
  auto refs = tensor_refs(ckpt.model);
  const auto tensor_count = read_pod<std::uint64_t>(in, "tensor count");
  if (tensor_count != refs.size()) {
    throw DataError("corrupt checkpoint: tensor count mismatch");
  }
  for (auto& ref : refs) {
    const std::string name = read_string(in, "tensor name");
    const auto rows = read_pod<std::int64_t>(in, "tensor rows");
    const auto cols = read_pod<std::int64_t>(in, "tensor cols");
    if (name != ref.name || rows != ref.rows || cols != ref.cols) {
      throw DataError("corrupt checkpoint: tensor layout mismatch at " + ref.name);
    }
    read_raw(in, ref.data, sizeof(Real) * static_cast<std::size_t>(ref.size()), "tensor data");
  }

  ckpt.opt.kind = parse_optimizer(read_string(in, "optimizer kind"));
  ckpt.opt.step = read_pod<std::int64_t>(in, "optimizer step");
  const bool has_m = read_pod<std::uint8_t>(in, "has m") != 0;
  const bool has_v = read_pod<std::uint8_t>(in, "has v") != 0;
  if (has_m) {
    ckpt.opt.m = TensorSet(ckpt.model);
    for (Index i = 0; i < ckpt.opt.m.count(); ++i) {
      ckpt.opt.m[i] = read_matrix(in, "first moments");
    }
  }
  if (has_v) {
    ckpt.opt.v = TensorSet(ckpt.model);
    for (Index i = 0; i < ckpt.opt.v.count(); ++i) {
      ckpt.opt.v[i] = read_matrix(in, "second moments");
    }
  }

  ckpt.rng_state = read_pod<std::uint64_t>(in, "rng state");
  ckpt.iteration = read_pod<std::int64_t>(in, "iteration");
  ckpt.has_best_valid = read_pod<std::uint8_t>(in, "has best") != 0;
  ckpt.best_valid = read_pod<Real>(in, "best valid");
  ckpt.lm_carry.h = read_matrix(in, "carry h");
  ckpt.lm_carry.c = read_matrix(in, "carry c");
  ckpt.lm_carry.inner_h = read_matrix(in, "carry inner_h");
  ckpt.lm_carry.inner_c = read_matrix(in, "carry inner_c");
  ckpt.train_loss_sum = read_pod<Real>(in, "train loss sum");
  ckpt.train_loss_count = read_pod<std::int64_t>(in, "train loss count");
  return ckpt;
}

// ---------------------------------------------------------------------------
// Training loop.

namespace {

std::string train_metric_token(Task task) {
  switch (task) {
    case Task::Adding: return "mse";
    case Task::Copy: return "ce";
    case Task::Mnist: return "ce";
    case Task::CharLm: return "bpc";
    case Task::WordLm: return "ppl";
  }
  return "loss";
}

Real train_metric_value(Task task, Real mean_loss) {
  if (task == Task::CharLm) return bpc(mean_loss);
  if (task == Task::WordLm) return ppl(mean_loss);
  return mean_loss;
}

bool metric_improved(const std::string& metric, Real candidate, Real best) {
  return metric == "acc" ? candidate > best : candidate < best;
}

void write_curve_row(std::ofstream& out, std::int64_t iteration, const std::string& split,
                     const std::string& metric, Real value, Real seconds) {
  char buf[160];
  std::snprintf(buf, sizeof(buf), "%lld,%s,%s,%.17g,%.3f\n",
                static_cast<long long>(iteration), split.c_str(), metric.c_str(), value,
                seconds);
  out << buf;
}

bool model_finite(const Model& model) {
  for (const auto& v : tensor_views(model)) {
    if (!v.map().allFinite()) return false;
  }
  return true;
}

TrainOutcome run_training_impl(TrainConfig cfg, std::optional<Checkpoint> start) {
  cfg = resolved(cfg);
  fs::create_directories(cfg.out_dir);
  const TaskData data = load_task_data(cfg);  // missing data fails before training
  const TaskSpec spec = make_spec(cfg, data);
  const bool is_lm = cfg.task == Task::CharLm || cfg.task == Task::WordLm;

  std::optional<LmBatches> lm_windows;
  if (is_lm) {
    lm_windows.emplace(data.corpus.train, cfg.batch, cfg.bptt);
  }
  const std::int64_t eval_every =
      cfg.eval_interval > 0 ? cfg.eval_interval
                            : (lm_windows ? lm_windows->windows() : 100);

  Model model;
  OptState opt;
  Rng rng(cfg.seed);
  std::int64_t first_iter = 0;
  CellState carry;
  bool carry_valid = false;
  bool has_best = false;
  Real best = 0.0;
  Real loss_sum = 0.0;
  std::int64_t loss_count = 0;
  bool resuming = false;

  if (start.has_value()) {
    model = std::move(start->model);
    opt = std::move(start->opt);
    rng.set_state(start->rng_state);
    first_iter = start->iteration;
    carry = start->lm_carry;
    carry_valid = carry.h.size() > 0;
    has_best = start->has_best_valid;
    best = start->best_valid;
    loss_sum = start->train_loss_sum;
    loss_count = start->train_loss_count;
    resuming = true;
  } else {
    model = init_model(cfg.arch, spec.input_dim, cfg.hidden, spec.output_dim, spec.vocab, rng);
    const Index published = default_width(cfg.task, cfg.arch);
    if (cfg.hidden != published) {
      std::cerr << "note: hidden=" << cfg.hidden << " gives "
                << count_params(cfg.arch, spec.input_dim, cfg.hidden, spec.output_dim)
                << " cell+readout parameters; the published width " << published << " gives "
                << count_params(cfg.arch, spec.input_dim, published, spec.output_dim) << "\n";
    }
  }

  const std::string curve_path = cfg.out_dir + "/" + kCurveFile;
  std::ofstream curve(curve_path, resuming ? std::ios::app : std::ios::trunc);
  if (!curve) throw DataError("cannot open curve file: " + curve_path);
  if (!resuming) curve << "iteration,split,metric,value,seconds\n";

  const auto t_start = std::chrono::steady_clock::now();
  auto elapsed = [&] {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
  };

  auto make_checkpoint = [&](std::int64_t iteration) {
    Checkpoint ckpt;
    ckpt.config = cfg;
    ckpt.model = model;
    ckpt.opt = opt;
    ckpt.rng_state = rng.state();
    ckpt.iteration = iteration;
    ckpt.has_best_valid = has_best;
    ckpt.best_valid = best;
    ckpt.lm_carry = carry_valid ? carry : CellState{};
    ckpt.train_loss_sum = loss_sum;
    ckpt.train_loss_count = loss_count;
    return ckpt;
  };

  // Fallback state for the divergence policy: everything as of the end of
  // the previous iteration.
  Checkpoint snapshot = make_checkpoint(first_iter);

  for (std::int64_t it = first_iter + 1; it <= cfg.iters; ++it) {
    BatchInputs in;
    BatchTargets tg;
    const CellState* initial = nullptr;
    switch (cfg.task) {
      case Task::Adding: {
        const TaskBatch tb = gen_adding(rng, cfg.bptt, cfg.batch);
        task_batch_to_grad(tb, in, tg);
        break;
      }
      case Task::Copy: {
        const TaskBatch tb = gen_copy(rng, cfg.bptt, cfg.batch);
        task_batch_to_grad(tb, in, tg);
        break;
      }
      case Task::Mnist: {
        std::vector<Index> picks(static_cast<std::size_t>(cfg.batch));
        for (auto& p : picks) {
          p = static_cast<Index>(
              rng.next_below(static_cast<std::uint64_t>(data.mnist_train.image_count)));
        }
        mnist_batch(data.mnist_train, picks, in, tg);
        break;
      }
      case Task::CharLm:
      case Task::WordLm: {
        const Index w = static_cast<Index>((it - 1) % lm_windows->windows());
        if (w == 0) carry_valid = false;  // state resets at each epoch start
        const LmWindow window = lm_windows->window(w);
        in.tokens = window.inputs;
        tg.step_labels = window.targets;
        if (carry_valid) initial = &carry;
        break;
      }
    }

    BackpropResult bp;
    try {
      bp = backprop_sequence(model, in, tg, spec.loss, initial);
    } catch (const NumericalDivergence&) {
      save_checkpoint(snapshot, cfg.out_dir + "/" + kDivergedFile);
      throw;
    }
    if (is_lm) {
      carry = bp.final_state;
      carry_valid = true;
    }

    TensorSet grads = std::move(bp.grads);
    // The backward pass sums over batch lanes; the optimizer consumes
    // batch-mean gradients so lr and clip are batch-size independent.
    grads.scale(1.0 / static_cast<Real>(cfg.batch));
    clip_global_norm(grads, cfg.clip);
    apply_update(model, grads, opt, cfg.lr);

    if (!model_finite(model)) {
      save_checkpoint(snapshot, cfg.out_dir + "/" + kDivergedFile);
      throw NumericalDivergence("non-finite parameters after update at iteration " +
                                std::to_string(it));
    }

    loss_sum += bp.loss / static_cast<Real>(cfg.batch);
    loss_count += 1;

    if (it % eval_every == 0 || it == cfg.iters) {
      const Real mean_loss = loss_sum / static_cast<Real>(std::max<std::int64_t>(loss_count, 1));
      write_curve_row(curve, it, "train", train_metric_token(cfg.task),
                      train_metric_value(cfg.task, mean_loss), elapsed());
      loss_sum = 0.0;
      loss_count = 0;
      const EvalReport valid = eval_with_data(model, cfg, spec, data, "valid");
      write_curve_row(curve, it, "valid", valid.metric, valid.value, elapsed());
      curve.flush();
      if (!has_best || metric_improved(valid.metric, valid.value, best)) {
        has_best = true;
        best = valid.value;
      }
    }

    snapshot = make_checkpoint(it);
  }

  const std::string ckpt_path = cfg.out_dir + "/" + kCheckpointFile;
  save_checkpoint(make_checkpoint(cfg.iters), ckpt_path);

  TrainOutcome outcome;
  outcome.final_reports.push_back(eval_with_data(model, cfg, spec, data, "test"));
  outcome.checkpoint_path = ckpt_path;
  outcome.curve_path = curve_path;
  outcome.iterations = cfg.iters;
  return outcome;
}

}  // namespace

TrainOutcome run_training(const TrainConfig& config) {
  return run_training_impl(config, std::nullopt);
}

TrainOutcome resume_training(const std::string& checkpoint_path, std::int64_t total_iters) {
  Checkpoint ckpt = load_checkpoint(checkpoint_path);
  TrainConfig cfg = ckpt.config;
  if (total_iters > 0) cfg.iters = total_iters;
  if (cfg.iters < ckpt.iteration) {
    throw ConfigError("resume target of " + std::to_string(cfg.iters) +
                      " iterations is behind the checkpoint at " +
                      std::to_string(ckpt.iteration));
  }
  return run_training_impl(cfg, std::move(ckpt));
}

std::vector<TrainOutcome> run_seeds(TrainConfig config, const std::vector<std::uint64_t>& seeds) {
  if (seeds.empty()) throw ConfigError("run_seeds: no seeds given");
  const std::string base = config.out_dir;
  fs::create_directories(base);
  std::vector<TrainOutcome> outcomes;
  for (const auto seed : seeds) {
    TrainConfig replica = config;
    replica.seed = seed;
    replica.out_dir = base + "/seed-" + std::to_string(seed);
    outcomes.push_back(run_training(replica));
  }

  std::ofstream summary(base + "/summary.csv", std::ios::trunc);
  if (!summary) throw DataError("cannot open summary file in " + base);
  summary << "seed,metric,value\n";
  Real total = 0.0;
  std::string metric;
  for (std::size_t k = 0; k < seeds.size(); ++k) {
    const EvalReport& report = outcomes[k].final_reports.front();
    metric = report.metric;
    total += report.value;
    char buf[96];
    std::snprintf(buf, sizeof(buf), "%llu,%s,%.17g\n",
                  static_cast<unsigned long long>(seeds[k]), report.metric.c_str(),
                  report.value);
    summary << buf;
  }
  char buf[96];
  std::snprintf(buf, sizeof(buf), "mean,%s,%.17g\n", metric.c_str(),
                total / static_cast<Real>(seeds.size()));
  summary << buf;
  return outcomes;
}

// ---------------------------------------------------------------------------
// Memory-state heat maps.

MemoryGrids memory_state_grids(const Model& model, const BatchInputs& sequence) {
  if (sequence.batch() != 1) {
    throw std::invalid_argument("memory_state_grids expects a single sequence");
  }
  const Tape tape = run_forward(model, sequence, LossKind::CeLast);
  const Index steps = sequence.steps();
  const Index width = model.hidden;

  MemoryGrids out;
  auto collect = [&](const std::string& name, auto&& pick) {
    Matrix grid(width, steps);
    for (Index t = 0; t < steps; ++t) {
      grid.col(t) = pick(tape.states[static_cast<std::size_t>(t) + 1]);
    }
    out.grids.emplace_back(name, std::move(grid));
  };

  switch (model.arch) {
    case Arch::Rnn:
    case Arch::Gru:
      collect("h", [](const CellState& s) { return Vector(s.h.col(0)); });
      break;
    case Arch::Lstm:
      collect("c", [](const CellState& s) { return Vector(s.c.col(0)); });
      break;
    case Arch::Mcrm:
      collect("h_gru", [](const CellState& s) { return Vector(s.inner_h.col(0)); });
      break;
    case Arch::Nlstm:
      collect("c_outer", [](const CellState& s) { return Vector(s.c.col(0)); });
      collect("tanh_c_inner",
              [](const CellState& s) { return Vector(tanh(s.inner_c.col(0))); });
      break;
  }
  return out;
}

std::vector<NeuronScore> rank_neurons(const Matrix& grid) {
  const Index width = grid.rows();
  const Index steps = grid.cols();
  std::vector<NeuronScore> scores(static_cast<std::size_t>(width));
  for (Index i = 0; i < width; ++i) {
    Real variation = 0.0;
    for (Index t = 1; t < steps; ++t) {
      variation += std::abs(grid(i, t) - grid(i, t - 1));
    }
    const Real short_score = steps > 1 ? variation / static_cast<Real>(steps - 1) : 0.0;
    const Real mean_abs = grid.row(i).cwiseAbs().mean();
    auto& s = scores[static_cast<std::size_t>(i)];
    s.neuron = i;
    s.short_score = short_score;
    s.long_score = mean_abs - 0.5 * short_score;
  }

  auto assign_ranks = [&](auto key, auto setter) {
    std::vector<Index> order(static_cast<std::size_t>(width));
    std::iota(order.begin(), order.end(), Index{0});
    std::sort(order.begin(), order.end(), [&](Index a, Index b) {
      const Real ka = key(scores[static_cast<std::size_t>(a)]);
      const Real kb = key(scores[static_cast<std::size_t>(b)]);
      if (ka != kb) return ka > kb;
      return a < b;
    });
    for (Index rank = 0; rank < width; ++rank) {
      setter(scores[static_cast<std::size_t>(order[static_cast<std::size_t>(rank)])], rank + 1);
    }
  };
  assign_ranks([](const NeuronScore& s) { return s.long_score; },
               [](NeuronScore& s, Index r) { s.long_rank = r; });
  assign_ranks([](const NeuronScore& s) { return s.short_score; },
               [](NeuronScore& s, Index r) { s.short_rank = r; });
  return scores;
}

HeatmapFiles export_heatmap(const Checkpoint& ckpt, const std::string& text,
                            std::uint64_t sequence_seed, Index length,
                            const std::string& out_base) {
  const TrainConfig cfg = resolved(ckpt.config);
  BatchInputs sequence;
  switch (cfg.task) {
    case Task::Adding: {
      Rng rng(sequence_seed);
      sequence.dense = gen_adding(rng, length > 0 ? length : cfg.bptt, 1).inputs;
      break;
    }
    case Task::Copy: {
      Rng rng(sequence_seed);
      sequence.dense = gen_copy(rng, length > 0 ? length : cfg.bptt, 1).inputs;
      break;
    }
    case Task::Mnist: {
      const TaskData data = load_task_data(cfg);
      const Index pick = static_cast<Index>(
          sequence_seed % static_cast<std::uint64_t>(data.mnist_test.image_count));
      const Vector& seq = data.mnist_test.sequences[static_cast<std::size_t>(pick)];
      sequence.dense.assign(static_cast<std::size_t>(seq.size()), Matrix(1, 1));
      for (Index t = 0; t < seq.size(); ++t) {
        sequence.dense[static_cast<std::size_t>(t)](0, 0) = seq[t];
      }
      break;
    }
    case Task::CharLm:
    case Task::WordLm: {
      if (text.empty()) {
        throw ConfigError("heat-map export for language tasks needs input text");
      }
      const TaskData data = load_task_data(cfg);
      const auto ids = encode(data.corpus, text);
      if (ids.empty()) throw ConfigError("input text encodes to an empty sequence");
      sequence.tokens.reserve(ids.size());
      for (const auto id : ids) {
        sequence.tokens.push_back({id});
      }
      break;
    }
  }

  const MemoryGrids grids = memory_state_grids(ckpt.model, sequence);
  HeatmapFiles files;
  for (const auto& [state, grid] : grids.grids) {
    const std::string path = out_base + "." + state + ".csv";
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw DataError("cannot open heat-map file: " + path);
    out << "# arch=" << arch_name(ckpt.model.arch) << " state=" << state
        << " rows=" << grid.rows() << " cols=" << grid.cols() << "\n";
    out.precision(17);
    for (Index i = 0; i < grid.rows(); ++i) {
      for (Index t = 0; t < grid.cols(); ++t) {
        if (t > 0) out << ",";
        out << grid(i, t);
      }
      out << "\n";
    }
    files.grid_paths.push_back(path);
  }

  files.neurons_path = out_base + ".neurons.csv";
  std::ofstream neurons(files.neurons_path, std::ios::trunc);
  if (!neurons) throw DataError("cannot open neurons file: " + files.neurons_path);
  neurons << "grid,neuron,long_score,short_score,long_rank,short_rank\n";
  neurons.precision(17);
  for (const auto& [state, grid] : grids.grids) {
    for (const auto& s : rank_neurons(grid)) {
      neurons << state << "," << s.neuron << "," << s.long_score << "," << s.short_score << ","
              << s.long_rank << "," << s.short_rank << "\n";
    }
  }
  return files;
}

}  // namespace mcrm
