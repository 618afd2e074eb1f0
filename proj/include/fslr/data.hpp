// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "fslr/rng.hpp"
#include "fslr/tensor.hpp"

namespace fslr {

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Batch {
  /// [N×d] features or [N×T] token ids.
  Tensor inputs;
  /// N labels, or N·T next-token ids in row-major order.
  std::vector<int> targets;
  std::uint64_t id = 0;
};

/// Feature vectors with integer labels.
struct ClassificationData {
  Tensor features;  // [n×d]
  std::vector<int> labels;
  std::size_t num_classes = 0;

  std::size_t size() const { return labels.size(); }
  std::size_t dim() const { return features.rank() == 2 ? features.dim(1) : 0; }
};

/// K unit-covariance Gaussian clusters. Cluster k has mean (s/√2)·e_k, so any
/// two means are `separation` apart. Requires d ≥ K.
ClassificationData synthetic_classification(Rng& rng, std::size_t n, std::size_t d, std::size_t k,
                                            double separation = 4.0);

/// Parses CIFAR-10 binary records (label byte, then 3072 R/G/B plane bytes).
ClassificationData parse_cifar10(std::span<const std::uint8_t> bytes);
ClassificationData load_cifar10_bin(const std::string& path);

/// Character-level corpus: each distinct byte gets an id in sorted order.
struct TextCorpus {
  std::vector<int> tokens;
  std::vector<unsigned char> alphabet;

  std::size_t vocab() const { return alphabet.size(); }
};

inline constexpr std::size_t kMaxVocab = 128;

/// Throws DataError when the text has more than kMaxVocab distinct bytes.
TextCorpus make_corpus(const std::string& text);
TextCorpus load_corpus(const std::string& path);

/// Word-level first-order Markov text over a small fixed lexicon.
std::string synthetic_text(Rng& rng, std::size_t length);

/// One window starting at `offset`: inputs tokens[o..o+T), targets shifted by one.
Batch char_window(const TextCorpus& corpus, std::size_t offset, std::size_t seq_len);

/// Infinite stream of fixed-size batches.
class BatchSource {
 public:
  virtual ~BatchSource() = default;
  virtual Batch next() = 0;
  virtual std::size_t batch_size() const = 0;
};

/// Reshuffled epochs over rows [begin, end) of a classification set.
class ClassificationStream : public BatchSource {
 public:
  ClassificationStream(const ClassificationData& data, std::size_t begin, std::size_t end,
                       std::size_t batch_size, Rng rng);
  Batch next() override;
  std::size_t batch_size() const override { return batch_; }

 private:
  void reshuffle();

  const ClassificationData* data_;
  std::vector<std::size_t> rows_;
  std::size_t batch_;
  Rng rng_;
  std::size_t cursor_ = 0;
  std::uint64_t counter_ = 0;
};

/// Reshuffled epochs over window start offsets [begin, end).
class CharStream : public BatchSource {
 public:
  CharStream(const TextCorpus& corpus, std::size_t begin, std::size_t end, std::size_t seq_len,
             std::size_t batch_size, Rng rng);
  Batch next() override;
  std::size_t batch_size() const override { return batch_; }
  const std::vector<std::size_t>& offsets() const { return offsets_; }

 private:
  const TextCorpus* corpus_;
  std::vector<std::size_t> offsets_;
  std::size_t seq_len_;
  std::size_t batch_;
  Rng rng_;
  std::size_t cursor_ = 0;
  std::uint64_t counter_ = 0;
};

/// Fraction of every dataset held out for probe batches.
inline constexpr double kProbeFraction = 0.1;

/// Training and probe streams over disjoint slices (the last 10% is probe).
struct DataStreams {
  std::unique_ptr<BatchSource> train;
  std::unique_ptr<BatchSource> probe;
};

DataStreams classification_streams(const ClassificationData& data, std::size_t batch_size,
                                   const Rng& run_rng);
/// Training windows lie entirely in the first 90% of the text, probe windows
/// in the rest.
DataStreams char_streams(const TextCorpus& corpus, std::size_t seq_len, std::size_t batch_size,
                         const Rng& run_rng);

}  // namespace fslr
