#include "mcrm/tasks.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <sstream>

namespace mcrm {

TaskBatch gen_adding(Rng& rng, Index t_len, Index batch) {
  if (t_len < 2) {
    throw std::invalid_argument("gen_adding: sequence length must be >= 2, got " +
                                std::to_string(t_len));
  }
  TaskBatch out;
  out.task = "adding";
  out.steps = t_len;
  out.inputs.assign(static_cast<std::size_t>(t_len), Matrix::Zero(2, batch));
  out.regression_targets = Matrix::Zero(1, batch);

  const Index half = t_len / 2;
  for (Index b = 0; b < batch; ++b) {
    std::vector<Real> values(static_cast<std::size_t>(t_len));
    for (Index t = 0; t < t_len; ++t) {
      values[static_cast<std::size_t>(t)] = rng.next_real();
      out.inputs[static_cast<std::size_t>(t)](0, b) = values[static_cast<std::size_t>(t)];
    }
    // One marker per half keeps the distance between them long on average.
    const Index first = static_cast<Index>(rng.next_below(static_cast<std::uint64_t>(half)));
    const Index second =
        half + static_cast<Index>(rng.next_below(static_cast<std::uint64_t>(t_len - half)));
    out.inputs[static_cast<std::size_t>(first)](1, b) = 1.0;
    out.inputs[static_cast<std::size_t>(second)](1, b) = 1.0;
    out.regression_targets(0, b) =
        values[static_cast<std::size_t>(first)] + values[static_cast<std::size_t>(second)];
  }
  return out;
}

TaskBatch gen_copy(Rng& rng, Index t_len, Index batch) {
  if (t_len < 1) {
    throw std::invalid_argument("gen_copy: sequence length must be >= 1, got " +
                                std::to_string(t_len));
  }
  const Index total = t_len + 20;
  TaskBatch out;
  out.task = "copy";
  out.steps = total;
  out.input_symbols.assign(static_cast<std::size_t>(total),
                           std::vector<std::int32_t>(static_cast<std::size_t>(batch), 0));
  out.step_labels.assign(static_cast<std::size_t>(total),
                         std::vector<std::int32_t>(static_cast<std::size_t>(batch), 0));

  for (Index b = 0; b < batch; ++b) {
    std::int32_t data[10];
    for (int k = 0; k < 10; ++k) {
      data[k] = 1 + static_cast<std::int32_t>(rng.next_below(8));
    }
    // 10 data digits, t_len - 1 blanks, the delimiter, ten more 9s.
    for (int k = 0; k < 10; ++k) {
      out.input_symbols[static_cast<std::size_t>(k)][static_cast<std::size_t>(b)] = data[k];
    }
    for (Index t = 10 + t_len - 1; t < total; ++t) {
      out.input_symbols[static_cast<std::size_t>(t)][static_cast<std::size_t>(b)] =
          kCopyDelimiter;
    }
    for (int k = 0; k < 10; ++k) {
      out.step_labels[static_cast<std::size_t>(total - 10 + k)][static_cast<std::size_t>(b)] =
          data[k];
    }
  }

  out.inputs.reserve(static_cast<std::size_t>(total));
  for (Index t = 0; t < total; ++t) {
    out.inputs.push_back(one_hot(out.input_symbols[static_cast<std::size_t>(t)], kCopyAlphabet));
  }
  return out;
}

Matrix one_hot(const std::vector<std::int32_t>& symbols, Index alphabet) {
  Matrix out = Matrix::Zero(alphabet, static_cast<Index>(symbols.size()));
  for (Index b = 0; b < out.cols(); ++b) {
    const std::int32_t s = symbols[static_cast<std::size_t>(b)];
    if (s < 0 || s >= alphabet) {
      throw std::invalid_argument("one_hot: symbol " + std::to_string(s) +
                                  " outside alphabet of " + std::to_string(alphabet));
    }
    out(s, b) = 1.0;
  }
  return out;
}

namespace {

std::uint32_t read_be_u32(std::istream& in, const std::string& path) {
  unsigned char bytes[4];
  in.read(reinterpret_cast<char*>(bytes), 4);
  if (!in) {
    throw DataError("truncated IDX file: " + path);
  }
  return (static_cast<std::uint32_t>(bytes[0]) << 24) |
         (static_cast<std::uint32_t>(bytes[1]) << 16) |
         (static_cast<std::uint32_t>(bytes[2]) << 8) | static_cast<std::uint32_t>(bytes[3]);
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw DataError("cannot open file: " + path);
  }
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

}  // namespace

IdxImages load_idx_images(const std::string& images_path, const std::string& labels_path) {
  std::ifstream img(images_path, std::ios::binary);
  if (!img) throw DataError("cannot open IDX image file: " + images_path);
  if (read_be_u32(img, images_path) != 0x00000803u) {
    throw DataError("bad magic number in IDX image file: " + images_path);
  }
  IdxImages out;
  out.image_count = static_cast<Index>(read_be_u32(img, images_path));
  out.rows = static_cast<Index>(read_be_u32(img, images_path));
  out.cols = static_cast<Index>(read_be_u32(img, images_path));

  const Index pixels = out.rows * out.cols;
  std::vector<unsigned char> raw(static_cast<std::size_t>(out.image_count * pixels));
  img.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (img.gcount() != static_cast<std::streamsize>(raw.size())) {
    throw DataError("truncated IDX image file: " + images_path);
  }

  std::ifstream lab(labels_path, std::ios::binary);
  if (!lab) throw DataError("cannot open IDX label file: " + labels_path);
  if (read_be_u32(lab, labels_path) != 0x00000801u) {
    throw DataError("bad magic number in IDX label file: " + labels_path);
  }
  const Index label_count = static_cast<Index>(read_be_u32(lab, labels_path));
  if (label_count != out.image_count) {
    throw DataError("IDX image/label count mismatch: " + std::to_string(out.image_count) +
                    " images vs " + std::to_string(label_count) + " labels");
  }
  std::vector<unsigned char> raw_labels(static_cast<std::size_t>(label_count));
  lab.read(reinterpret_cast<char*>(raw_labels.data()),
           static_cast<std::streamsize>(raw_labels.size()));
  if (lab.gcount() != static_cast<std::streamsize>(raw_labels.size())) {
    throw DataError("truncated IDX label file: " + labels_path);
  }

  out.sequences.reserve(static_cast<std::size_t>(out.image_count));
  for (Index n = 0; n < out.image_count; ++n) {
    Vector seq(pixels);
    // Row-major flattening: pixel (r, c) lands at index cols*r + c.
    for (Index k = 0; k < pixels; ++k) {
      seq[k] = static_cast<Real>(raw[static_cast<std::size_t>(n * pixels + k)]) / 255.0;
    }
    out.sequences.push_back(std::move(seq));
  }
  out.labels.assign(raw_labels.begin(), raw_labels.end());
  return out;
}

namespace {

std::vector<std::string> whitespace_tokens(const std::string& text) {
  std::vector<std::string> tokens;
  std::string current;
  for (char ch : text) {
    if (std::isspace(static_cast<unsigned char>(ch))) {
      if (!current.empty()) {
        tokens.push_back(std::move(current));
        current.clear();
      }
    } else {
      current.push_back(ch);
    }
  }
  if (!current.empty()) tokens.push_back(std::move(current));
  return tokens;
}

std::vector<std::int32_t> encode_chars(const CorpusSplit& corpus, const std::string& text) {
  std::vector<std::int32_t> ids;
  ids.reserve(text.size());
  for (char ch : text) {
    const auto it = corpus.symbol_id.find(std::string(1, ch));
    if (it == corpus.symbol_id.end()) {
      throw DataError("character not in training vocabulary: byte " +
                      std::to_string(static_cast<int>(static_cast<unsigned char>(ch))));
    }
    ids.push_back(it->second);
  }
  return ids;
}

std::vector<std::int32_t> encode_words(const CorpusSplit& corpus, const std::string& text) {
  std::vector<std::int32_t> ids;
  for (const auto& tok : whitespace_tokens(text)) {
    const auto it = corpus.symbol_id.find(tok);
    ids.push_back(it == corpus.symbol_id.end() ? corpus.unknown_id : it->second);
  }
  return ids;
}

}  // namespace

CorpusSplit build_corpus(const std::string& train_text, const std::string& valid_text,
                         const std::string& test_text, Granularity granularity) {
  if (train_text.empty()) {
    throw DataError("empty train corpus");
  }
  CorpusSplit corpus;
  corpus.granularity = granularity;

  if (granularity == Granularity::Character) {
    // Distinct train characters in byte order.
    bool seen[256] = {};
    for (char ch : train_text) seen[static_cast<unsigned char>(ch)] = true;
    for (int v = 0; v < 256; ++v) {
      if (seen[v]) {
        const std::string symbol(1, static_cast<char>(v));
        corpus.symbol_id[symbol] = static_cast<std::int32_t>(corpus.vocabulary.size());
        corpus.vocabulary.push_back(symbol);
      }
    }
  } else {
    std::map<std::string, std::int64_t> counts;
    for (const auto& tok : whitespace_tokens(train_text)) ++counts[tok];
    if (counts.empty()) {
      throw DataError("empty train corpus");
    }
    std::vector<std::pair<std::string, std::int64_t>> ordered(counts.begin(), counts.end());
    // Frequency-descending, then lexicographic.
    std::sort(ordered.begin(), ordered.end(), [](const auto& a, const auto& b) {
      if (a.second != b.second) return a.second > b.second;
      return a.first < b.first;
    });
    for (const auto& [word, count] : ordered) {
      (void)count;
      corpus.symbol_id[word] = static_cast<std::int32_t>(corpus.vocabulary.size());
      corpus.vocabulary.push_back(word);
    }
    corpus.unknown_id = static_cast<std::int32_t>(corpus.vocabulary.size());
    corpus.symbol_id["<unk>"] = corpus.unknown_id;
    corpus.vocabulary.push_back("<unk>");
  }

  corpus.train = encode(corpus, train_text);
  corpus.valid = encode(corpus, valid_text);
  corpus.test = encode(corpus, test_text);
  return corpus;
}

CorpusSplit load_text_corpus(const std::string& train_path, const std::string& valid_path,
                             const std::string& test_path, Granularity granularity) {
  return build_corpus(read_file(train_path), read_file(valid_path), read_file(test_path),
                      granularity);
}

std::vector<std::int32_t> encode(const CorpusSplit& corpus, const std::string& text) {
  return corpus.granularity == Granularity::Character ? encode_chars(corpus, text)
                                                      : encode_words(corpus, text);
}

std::string decode(const CorpusSplit& corpus, const std::vector<std::int32_t>& ids) {
  std::string out;
  for (std::size_t k = 0; k < ids.size(); ++k) {
    const std::int32_t id = ids[k];
    if (id < 0 || id >= corpus.vocab_size()) {
      throw std::invalid_argument("decode: id " + std::to_string(id) + " out of range");
    }
    if (corpus.granularity == Granularity::Word && k > 0) out.push_back(' ');
    out += corpus.vocabulary[static_cast<std::size_t>(id)];
  }
  return out;
}

LmBatches::LmBatches(std::vector<std::int32_t> tokens, Index batch, Index bptt_len)
    : tokens_(std::move(tokens)), batch_(batch), bptt_(bptt_len) {
  if (batch_ < 1 || bptt_ < 1) {
    throw std::invalid_argument("batchify: batch and bptt must be >= 1");
  }
  const Index len = static_cast<Index>(tokens_.size());
  if (len < batch_ * (bptt_ + 1)) {
    throw DataError("corpus too short to batch: " + std::to_string(len) + " tokens < " +
                    std::to_string(batch_) + " x (" + std::to_string(bptt_) + " + 1)");
  }
  stream_len_ = len / batch_;
  windows_ = (stream_len_ - 1) / bptt_;
}

LmWindow LmBatches::window(Index w) const {
  if (w < 0 || w >= windows_) {
    throw std::invalid_argument("batchify: window " + std::to_string(w) + " out of range");
  }
  LmWindow out;
  out.inputs.assign(static_cast<std::size_t>(bptt_),
                    std::vector<std::int32_t>(static_cast<std::size_t>(batch_), 0));
  out.targets = out.inputs;
  for (Index t = 0; t < bptt_; ++t) {
    for (Index b = 0; b < batch_; ++b) {
      const Index base = b * stream_len_ + w * bptt_ + t;
      out.inputs[static_cast<std::size_t>(t)][static_cast<std::size_t>(b)] =
          tokens_[static_cast<std::size_t>(base)];
      out.targets[static_cast<std::size_t>(t)][static_cast<std::size_t>(b)] =
          tokens_[static_cast<std::size_t>(base + 1)];
    }
  }
  return out;
}

void export_batch_csv(const TaskBatch& batch, const std::string& path) {
  std::ofstream out(path);
  if (!out) {
    throw DataError("cannot open output file: " + path);
  }
  const bool categorical = !batch.input_symbols.empty();
  const Index batch_size =
      categorical ? static_cast<Index>(batch.input_symbols.front().size())
                  : batch.inputs.front().cols();
  if (categorical) {
    out << "sequence,timestep,symbol,target\n";
  } else {
    out << "sequence,timestep";
    for (Index d = 0; d < batch.inputs.front().rows(); ++d) out << ",x" << d;
    out << ",target\n";
  }
  out.precision(17);
  for (Index b = 0; b < batch_size; ++b) {
    for (Index t = 0; t < batch.steps; ++t) {
      out << b << "," << t;
      if (categorical) {
        out << "," << batch.input_symbols[static_cast<std::size_t>(t)][static_cast<std::size_t>(b)]
            << "," << batch.step_labels[static_cast<std::size_t>(t)][static_cast<std::size_t>(b)];
      } else {
        const Matrix& x = batch.inputs[static_cast<std::size_t>(t)];
        for (Index d = 0; d < x.rows(); ++d) out << "," << x(d, b);
        out << "," << batch.regression_targets(0, b);
      }
      out << "\n";
    }
  }
}

}  // namespace mcrm
