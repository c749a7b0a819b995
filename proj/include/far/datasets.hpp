#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <unordered_map>
#include <vector>

#include "far/model.hpp"

namespace far {

inline constexpr std::int32_t kPadId = 0;
inline constexpr std::int32_t kUnknownId = 1;

struct Example {
  /// Exactly max_seq_len ids, padded with kPadId.
  std::vector<std::int32_t> token_ids;
  std::int32_t label = 0;

  friend bool operator==(const Example&, const Example&) = default;
};

using Split = std::vector<Example>;

struct Dataset {
  Split train;
  Split dev;
  Split test;
  std::size_t vocab_size = 0;
  std::size_t num_classes = 0;
  std::size_t seq_len = 0;
};

/// Whitespace-token vocabulary: id 0 is padding, id 1 is unknown, then the
/// most frequent training tokens (ties in lexicographic order).
class Vocabulary {
 public:
  static constexpr const char* kPadToken = "<pad>";
  static constexpr const char* kUnknownToken = "<unk>";

  Vocabulary();
  static Vocabulary build(const std::vector<std::vector<std::string>>& corpus, std::size_t vocab_size);

  std::int32_t id(const std::string& token) const;
  const std::string& token(std::int32_t id) const;
  std::size_t size() const { return tokens_.size(); }

  std::vector<std::int32_t> encode(const std::vector<std::string>& tokens, std::size_t seq_len) const;
  /// Tokens for the non-padding ids.
  std::vector<std::string> decode(const std::vector<std::int32_t>& ids) const;

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::int32_t> ids_;
};

struct TsvSchema {
  std::size_t text_column = 0;
  std::size_t label_column = 1;
  char delimiter = '\t';
  bool has_header = true;
};

struct TsvSplit {
  Split examples;
  std::size_t num_classes = 0;
};

/// Raw rows of a TSV file: (whitespace tokens, label). Throws FormatError
/// naming the line for missing columns or bad labels, InputError when the
/// file has no data rows.
std::vector<std::pair<std::vector<std::string>, std::int32_t>> read_tsv_rows(const std::filesystem::path& path,
                                                                             const TsvSchema& schema);

/// Loads a split, encoding with `vocab`.
TsvSplit load_tsv(const std::filesystem::path& path, const TsvSchema& schema, const Vocabulary& vocab,
                  std::size_t seq_len);

/// Loads a training split and builds its vocabulary.
TsvSplit load_tsv(const std::filesystem::path& path, const TsvSchema& schema, std::size_t vocab_size,
                  std::size_t seq_len, Vocabulary& vocab_out);

enum class SyntheticTask { keyword_detect, majority_token };

const char* synthetic_task_name(SyntheticTask task);
SyntheticTask parse_synthetic_task(const std::string& name);

struct SyntheticTaskSpec {
  SyntheticTask task = SyntheticTask::keyword_detect;
  std::size_t vocab_size = 32;
  std::size_t seq_len = 12;
  /// Sequences hold between min_len and seq_len real tokens.
  std::size_t min_len = 6;
  /// Marker tokens for keyword-detect.
  std::size_t markers = 2;
  std::size_t train_size = 800;
  std::size_t dev_size = 100;
  std::size_t test_size = 100;
  std::uint64_t seed = 7;

  void validate() const;
  friend bool operator==(const SyntheticTaskSpec&, const SyntheticTaskSpec&) = default;
};

/// Marker token ids used by keyword-detect for `spec`.
std::vector<std::int32_t> marker_tokens(const SyntheticTaskSpec& spec);

/// Label a keyword-detect or majority-token sequence by its definition.
std::int32_t synthetic_label(const SyntheticTaskSpec& spec, const std::vector<std::int32_t>& token_ids);

/// Seeded, class-balanced, pairwise-distinct splits. Throws GenerationError
/// when the vocabulary or lengths cannot supply enough distinct examples.
Dataset make_synthetic(const SyntheticTaskSpec& spec);

struct Batch {
  TokenBatch tokens;
  std::vector<std::int32_t> labels;
};

/// Batches in corpus order, or in a seeded per-call permutation when
/// `shuffle` is set. The final partial batch is kept.
std::vector<Batch> batches(const Split& split, std::size_t batch_size, std::uint64_t seed, bool shuffle);

/// Stable 64-bit FNV-1a hash of an example.
std::uint64_t example_hash(const Example& e);

}  // namespace far
