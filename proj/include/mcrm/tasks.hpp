#pragma once

// Generators and loaders for the four benchmark task families: the adding
// problem, copy memory, sequential pixel classification over IDX image
// files, and character/word language modeling over plain-text corpora.

#include "mcrm/numkit.hpp"

#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace mcrm {

// Problems with input files (missing, malformed, truncated, inconsistent).
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct TaskBatch {
  std::string task;
  Index steps = 0;
  std::vector<Matrix> inputs;  // T entries of m x B (one-hot for categorical tasks)
  Matrix regression_targets;   // adding: 1 x B, the sum of the two marked values
  std::vector<std::vector<std::int32_t>> step_labels;    // copy: T x B target symbols
  std::vector<std::vector<std::int32_t>> input_symbols;  // categorical tasks: T x B
};

// Depth-2 sequences: dimension one holds uniform [0,1) values, dimension
// two is zero except for one marker in each half of the sequence; the
// target is the sum of the two marked values.
TaskBatch gen_adding(Rng& rng, Index t_len, Index batch);

// Length T+20 over the alphabet {0..9}: ten data digits from {1..8}, T-1
// blanks, the delimiter 9, then ten more 9s; the target is blank except for
// the final ten positions, which repeat the data digits.
TaskBatch gen_copy(Rng& rng, Index t_len, Index batch);

constexpr Index kCopyAlphabet = 10;
constexpr Index kCopyBlank = 0;
constexpr Index kCopyDelimiter = 9;

// One column per timestep with a single 1 at the symbol's row.
Matrix one_hot(const std::vector<std::int32_t>& symbols, Index alphabet);

struct IdxImages {
  Index image_count = 0;
  Index rows = 0;
  Index cols = 0;
  std::vector<Vector> sequences;  // rows*cols pixels in [0,1], row-major
  std::vector<std::int32_t> labels;
};

// Standard IDX pair (big-endian magic 0x00000803 images / 0x00000801 labels).
IdxImages load_idx_images(const std::string& images_path, const std::string& labels_path);

enum class Granularity { Character, Word };

struct CorpusSplit {
  Granularity granularity = Granularity::Character;
  std::vector<std::string> vocabulary;           // id -> symbol
  std::map<std::string, std::int32_t> symbol_id;
  std::int32_t unknown_id = -1;  // word granularity only
  std::vector<std::int32_t> train, valid, test;

  Index vocab_size() const { return static_cast<Index>(vocabulary.size()); }
};

// Character granularity: the vocabulary is the distinct train characters;
// a valid/test character outside it is a data error. Word granularity:
// whitespace tokens, vocabulary ordered by frequency then lexicographically,
// with a reserved <unk> id appended for out-of-vocabulary tokens.
CorpusSplit load_text_corpus(const std::string& train_path, const std::string& valid_path,
                             const std::string& test_path, Granularity granularity);

// Same vocabulary construction applied to in-memory text (used by tests and
// the corpus loader itself).
CorpusSplit build_corpus(const std::string& train_text, const std::string& valid_text,
                         const std::string& test_text, Granularity granularity);

std::vector<std::int32_t> encode(const CorpusSplit& corpus, const std::string& text);
std::string decode(const CorpusSplit& corpus, const std::vector<std::int32_t>& ids);

// Contiguous-stream language-model batching: the corpus is cut into `batch`
// equal streams and consumed in windows of bptt_len inputs with next-token
// targets; hidden state is meant to carry across successive windows.
struct LmWindow {
  std::vector<std::vector<std::int32_t>> inputs;   // T entries of B ids
  std::vector<std::vector<std::int32_t>> targets;  // T entries of B ids
};

class LmBatches {
 public:
  LmBatches(std::vector<std::int32_t> tokens, Index batch, Index bptt_len);

  Index windows() const { return windows_; }
  Index batch() const { return batch_; }
  Index tokens_per_stream() const { return stream_len_; }
  LmWindow window(Index w) const;

 private:
  std::vector<std::int32_t> tokens_;
  Index batch_ = 0;
  Index bptt_ = 0;
  Index stream_len_ = 0;
  Index windows_ = 0;
};

// One row per timestep, for external inspection of generated batches.
void export_batch_csv(const TaskBatch& batch, const std::string& path);

}  // namespace mcrm
