// SPDX-License-Identifier: Apache-2.0
#include "fslr/data.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numeric>

namespace fslr {

namespace {

constexpr std::size_t kCifarPixels = 3072;
constexpr std::size_t kCifarRecord = kCifarPixels + 1;

template <typename T>
void shuffle(std::vector<T>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[rng.index(i)]);
}

std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::size_t probe_split(std::size_t n) {
  return n - static_cast<std::size_t>(std::ceil(kProbeFraction * static_cast<double>(n)));
}

}  // namespace

ClassificationData synthetic_classification(Rng& rng, std::size_t n, std::size_t d, std::size_t k,
                                            double separation) {
  if (k < 2) throw DataError("synthetic_classification: need at least 2 classes");
  if (d < k) throw DataError("synthetic_classification: dimension must be >= number of classes");
  ClassificationData out;
  out.num_classes = k;
  out.features = Tensor::zeros({n, d});
  out.labels.resize(n);
  const double offset = separation / std::sqrt(2.0);
  for (std::size_t i = 0; i < n; ++i) {
    const auto label = static_cast<int>(rng.index(k));
    out.labels[i] = label;
    for (std::size_t j = 0; j < d; ++j) out.features.at(i, j) = rng.normal();
    out.features.at(i, static_cast<std::size_t>(label)) += offset;
  }
  return out;
}

ClassificationData parse_cifar10(std::span<const std::uint8_t> bytes) {
  if (bytes.size() % kCifarRecord != 0) {
    throw DataError("CIFAR-10: truncated record (" + std::to_string(bytes.size()) +
                    " bytes is not a multiple of 3073)");
  }
  const std::size_t n = bytes.size() / kCifarRecord;
  ClassificationData out;
  out.num_classes = 10;
  out.features = Tensor::zeros({n, kCifarPixels});
  out.labels.resize(n);
  for (std::size_t r = 0; r < n; ++r) {
    const std::uint8_t* rec = bytes.data() + r * kCifarRecord;
    if (rec[0] >= 10) {
      throw DataError("CIFAR-10: record " + std::to_string(r) + " has label " +
                      std::to_string(rec[0]));
    }
    out.labels[r] = rec[0];
    double* row = out.features.data() + r * kCifarPixels;
    for (std::size_t p = 0; p < kCifarPixels; ++p) row[p] = rec[1 + p] / 255.0;
  }
  return out;
}

ClassificationData load_cifar10_bin(const std::string& path) {
  const auto bytes = read_file(path);
  return parse_cifar10(bytes);
}

TextCorpus make_corpus(const std::string& text) {
  std::array<bool, 256> seen{};
  for (unsigned char c : text) seen[c] = true;
  TextCorpus out;
  std::array<int, 256> id{};
  for (std::size_t c = 0; c < 256; ++c) {
    if (!seen[c]) continue;
    id[c] = static_cast<int>(out.alphabet.size());
    out.alphabet.push_back(static_cast<unsigned char>(c));
  }
  if (out.alphabet.size() > kMaxVocab) {
    throw DataError("corpus has " + std::to_string(out.alphabet.size()) +
                    " distinct bytes, more than " + std::to_string(kMaxVocab));
  }
  out.tokens.reserve(text.size());
  for (unsigned char c : text) out.tokens.push_back(id[c]);
  return out;
}

TextCorpus load_corpus(const std::string& path) {
  const auto bytes = read_file(path);
  return make_corpus(std::string(bytes.begin(), bytes.end()));
}

std::string synthetic_text(Rng& rng, std::size_t length) {
  static const std::vector<std::string> kWords = {
      "the",   "a",     "cat",   "dog",  "sat",   "ran",    "on",    "under", "mat",  "tree",
      "and",   "then",  "it",    "was",  "small", "large",  "red",   "blue",  "bird", "flew",
      "over",  "house", "quiet", "loud", "river", "stone",  "green", "field", "at",   "night",
      "in",    "day",   "sun",   "rain", "fell",  "slowly", "fast",  "home",  "road", "old"};
  const std::size_t w = kWords.size();
  // Each word has four likely successors drawn once per corpus.
  std::vector<std::array<std::size_t, 4>> next(w);
  for (auto& row : next) {
    for (auto& s : row) s = rng.index(w);
  }
  std::string out;
  out.reserve(length + 16);
  std::size_t cur = rng.index(w);
  std::size_t sentence = 0;
  while (out.size() < length) {
    out += kWords[cur];
    ++sentence;
    if (sentence >= 6 + rng.index(6)) {
      out += ".\n";
      sentence = 0;
    } else {
      out += ' ';
    }
    cur = rng.uniform() < 0.9 ? next[cur][rng.index(4)] : rng.index(w);
  }
  out.resize(length);
  return out;
}

Batch char_window(const TextCorpus& corpus, std::size_t offset, std::size_t seq_len) {
  if (offset + seq_len >= corpus.tokens.size()) {
    throw DataError("char_window: window at " + std::to_string(offset) + " runs past the text");
  }
  Batch b;
  b.inputs = Tensor::zeros({1, seq_len});
  b.targets.resize(seq_len);
  for (std::size_t t = 0; t < seq_len; ++t) {
    b.inputs[t] = corpus.tokens[offset + t];
    b.targets[t] = corpus.tokens[offset + t + 1];
  }
  return b;
}

ClassificationStream::ClassificationStream(const ClassificationData& data, std::size_t begin,
                                           std::size_t end, std::size_t batch_size, Rng rng)
    : data_(&data), batch_(batch_size), rng_(std::move(rng)) {
  if (begin >= end || end > data.size()) throw DataError("classification stream: empty range");
  if (batch_size == 0) throw DataError("batch size must be positive");
  rows_.resize(end - begin);
  std::iota(rows_.begin(), rows_.end(), begin);
  reshuffle();
}

void ClassificationStream::reshuffle() {
  shuffle(rows_, rng_);
  cursor_ = 0;
}

Batch ClassificationStream::next() {
  const std::size_t d = data_->dim();
  Batch b;
  b.id = counter_++;
  b.inputs = Tensor::zeros({batch_, d});
  b.targets.resize(batch_);
  for (std::size_t i = 0; i < batch_; ++i) {
    if (cursor_ == rows_.size()) reshuffle();
    const std::size_t r = rows_[cursor_++];
    std::copy_n(data_->features.data() + r * d, d, b.inputs.data() + i * d);
    b.targets[i] = data_->labels[r];
  }
  return b;
}

CharStream::CharStream(const TextCorpus& corpus, std::size_t begin, std::size_t end,
                       std::size_t seq_len, std::size_t batch_size, Rng rng)
    : corpus_(&corpus), seq_len_(seq_len), batch_(batch_size), rng_(std::move(rng)) {
  if (seq_len == 0 || batch_size == 0) throw DataError("char stream: zero size");
  if (begin >= end) throw DataError("char stream: text too short for seq_len");
  offsets_.resize(end - begin);
  std::iota(offsets_.begin(), offsets_.end(), begin);
  shuffle(offsets_, rng_);
}

Batch CharStream::next() {
  Batch b;
  b.id = counter_++;
  b.inputs = Tensor::zeros({batch_, seq_len_});
  b.targets.resize(batch_ * seq_len_);
  for (std::size_t i = 0; i < batch_; ++i) {
    if (cursor_ == offsets_.size()) {
      shuffle(offsets_, rng_);
      cursor_ = 0;
    }
    const std::size_t o = offsets_[cursor_++];
    for (std::size_t t = 0; t < seq_len_; ++t) {
      b.inputs[i * seq_len_ + t] = corpus_->tokens[o + t];
      b.targets[i * seq_len_ + t] = corpus_->tokens[o + t + 1];
    }
  }
  return b;
}

DataStreams classification_streams(const ClassificationData& data, std::size_t batch_size,
                                   const Rng& run_rng) {
  const std::size_t split = probe_split(data.size());
  DataStreams s;
  s.train = std::make_unique<ClassificationStream>(
      data, 0, split, batch_size, run_rng.derive(static_cast<std::uint64_t>(StreamPurpose::kTrainOrder)));
  s.probe = std::make_unique<ClassificationStream>(
      data, split, data.size(), batch_size,
      run_rng.derive(static_cast<std::uint64_t>(StreamPurpose::kProbeOrder)));
  return s;
}

DataStreams char_streams(const TextCorpus& corpus, std::size_t seq_len, std::size_t batch_size,
                         const Rng& run_rng) {
  const std::size_t n = corpus.tokens.size();
  const std::size_t split = probe_split(n);
  // A window at offset o reads tokens [o, o + seq_len].
  if (split < seq_len + 1 || n - split < seq_len + 1) {
    throw DataError("char streams: text too short for seq_len " + std::to_string(seq_len));
  }
  DataStreams s;
  s.train = std::make_unique<CharStream>(
      corpus, 0, split - seq_len, seq_len, batch_size,
      run_rng.derive(static_cast<std::uint64_t>(StreamPurpose::kTrainOrder)));
  s.probe = std::make_unique<CharStream>(
      corpus, split, n - seq_len, seq_len, batch_size,
      run_rng.derive(static_cast<std::uint64_t>(StreamPurpose::kProbeOrder)));
  return s;
}

}  // namespace fslr
