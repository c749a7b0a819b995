#include "far/datasets.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "far/random.hpp"

namespace far {

Vocabulary::Vocabulary() {
  tokens_ = {kPadToken, kUnknownToken};
  ids_ = {{kPadToken, kPadId}, {kUnknownToken, kUnknownId}};
}

Vocabulary Vocabulary::build(const std::vector<std::vector<std::string>>& corpus, std::size_t vocab_size) {
  if (vocab_size < 2) throw ConfigError("vocabulary needs room for the pad and unknown ids");
  std::map<std::string, std::size_t> counts;
  for (const auto& line : corpus)
    for (const auto& tok : line) {
      if (tok != kPadToken && tok != kUnknownToken) ++counts[tok];
    }
  std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(), counts.end());
  std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  Vocabulary v;
  for (const auto& [tok, count] : ranked) {
    if (v.tokens_.size() >= vocab_size) break;
    v.ids_.emplace(tok, static_cast<std::int32_t>(v.tokens_.size()));
    v.tokens_.push_back(tok);
  }
  return v;
}

std::int32_t Vocabulary::id(const std::string& token) const {
  auto it = ids_.find(token);
  return it == ids_.end() ? kUnknownId : it->second;
}

const std::string& Vocabulary::token(std::int32_t id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) throw InputError("token id outside vocabulary");
  return tokens_[static_cast<std::size_t>(id)];
}

std::vector<std::int32_t> Vocabulary::encode(const std::vector<std::string>& tokens, std::size_t seq_len) const {
  std::vector<std::int32_t> ids(seq_len, kPadId);
  for (std::size_t i = 0; i < std::min(seq_len, tokens.size()); ++i) ids[i] = id(tokens[i]);
  return ids;
}

std::vector<std::string> Vocabulary::decode(const std::vector<std::int32_t>& ids) const {
  std::vector<std::string> out;
  for (std::int32_t id : ids) {
    if (id != kPadId) out.push_back(token(id));
  }
  return out;
}

namespace {

std::vector<std::string> split_fields(const std::string& line, char delimiter) {
  std::vector<std::string> fields;
  std::string field;
  std::istringstream in(line);
  while (std::getline(in, field, delimiter)) fields.push_back(field);
  if (!line.empty() && line.back() == delimiter) fields.emplace_back();
  return fields;
}

std::vector<std::string> whitespace_tokens(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  std::string tok;
  while (in >> tok) out.push_back(tok);
  return out;
}

}  // namespace

std::vector<std::pair<std::vector<std::string>, std::int32_t>> read_tsv_rows(const std::filesystem::path& path,
                                                                             const TsvSchema& schema) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open " + path.string());
  std::vector<std::pair<std::vector<std::string>, std::int32_t>> rows;
  std::string line;
  std::size_t line_no = 0;
  const std::size_t needed = std::max(schema.text_column, schema.label_column) + 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line_no == 1 && schema.has_header) continue;
    if (line.empty()) continue;
    const auto fields = split_fields(line, schema.delimiter);
    if (fields.size() < needed) {
      throw FormatError(path.string() + ":" + std::to_string(line_no) + ": expected at least " +
                        std::to_string(needed) + " columns, found " + std::to_string(fields.size()));
    }
    const std::string& label_text = fields[schema.label_column];
    std::int32_t label = -1;
    try {
      std::size_t used = 0;
      const long v = std::stol(label_text, &used);
      if (used == label_text.size() && v >= 0 && v < (1L << 30)) label = static_cast<std::int32_t>(v);
    } catch (const std::exception&) {
    }
    if (label < 0) {
      throw FormatError(path.string() + ":" + std::to_string(line_no) + ": label '" + label_text +
                        "' is not a non-negative integer");
    }
    rows.emplace_back(whitespace_tokens(fields[schema.text_column]), label);
  }
  if (rows.empty()) throw InputError(path.string() + " contains no examples");
  return rows;
}

TsvSplit load_tsv(const std::filesystem::path& path, const TsvSchema& schema, const Vocabulary& vocab,
                  std::size_t seq_len) {
  TsvSplit out;
  for (auto& [tokens, label] : read_tsv_rows(path, schema)) {
    out.examples.push_back({vocab.encode(tokens, seq_len), label});
    out.num_classes = std::max(out.num_classes, static_cast<std::size_t>(label) + 1);
  }
  return out;
}

TsvSplit load_tsv(const std::filesystem::path& path, const TsvSchema& schema, std::size_t vocab_size,
                  std::size_t seq_len, Vocabulary& vocab_out) {
  const auto rows = read_tsv_rows(path, schema);
  std::vector<std::vector<std::string>> corpus;
  corpus.reserve(rows.size());
  for (const auto& r : rows) corpus.push_back(r.first);
  vocab_out = Vocabulary::build(corpus, vocab_size);
  TsvSplit out;
  for (const auto& [tokens, label] : rows) {
    out.examples.push_back({vocab_out.encode(tokens, seq_len), label});
    out.num_classes = std::max(out.num_classes, static_cast<std::size_t>(label) + 1);
  }
  return out;
}

const char* synthetic_task_name(SyntheticTask task) {
  return task == SyntheticTask::keyword_detect ? "keyword-detect" : "majority-token";
}

SyntheticTask parse_synthetic_task(const std::string& name) {
  if (name == "keyword-detect") return SyntheticTask::keyword_detect;
  if (name == "majority-token") return SyntheticTask::majority_token;
  throw ConfigError("unknown synthetic task '" + name + "' (expected keyword-detect or majority-token)");
}

void SyntheticTaskSpec::validate() const {
  if (seq_len < 1) throw ConfigError("data.synthetic.seq_len must be at least 1");
  if (min_len < 1 || min_len > seq_len) throw ConfigError("data.synthetic.min_len must lie in [1, seq_len]");
  if (train_size < 2 || dev_size < 2 || test_size < 2) {
    throw ConfigError("data.synthetic split sizes must be at least 2");
  }
  if (vocab_size < 4) throw ConfigError("data.synthetic.vocab_size must be at least 4");
}

std::vector<std::int32_t> marker_tokens(const SyntheticTaskSpec& spec) {
  std::vector<std::int32_t> ids(spec.vocab_size - 2);
  std::iota(ids.begin(), ids.end(), 2);
  Rng rng(mix_seed(spec.seed, 0x6d61726b));
  rng.shuffle(ids);
  ids.resize(std::min(spec.markers, ids.size()));
  std::sort(ids.begin(), ids.end());
  return ids;
}

std::int32_t synthetic_label(const SyntheticTaskSpec& spec, const std::vector<std::int32_t>& token_ids) {
  if (spec.task == SyntheticTask::keyword_detect) {
    const auto markers = marker_tokens(spec);
    for (std::int32_t id : token_ids) {
      if (std::binary_search(markers.begin(), markers.end(), id)) return 1;
    }
    return 0;
  }
  std::map<std::int32_t, std::size_t> counts;
  for (std::int32_t id : token_ids) {
    if (id != kPadId) ++counts[id];
  }
  std::int32_t best = 0;
  std::size_t best_count = 0;
  for (const auto& [id, count] : counts) {
    if (count > best_count) {
      best = id;
      best_count = count;
    }
  }
  return best % 2;
}

std::uint64_t example_hash(const Example& e) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&](std::uint32_t v) {
    for (int i = 0; i < 4; ++i) {
      h ^= (v >> (8 * i)) & 0xff;
      h *= 0x100000001b3ULL;
    }
  };
  for (std::int32_t id : e.token_ids) mix(static_cast<std::uint32_t>(id));
  return h;
}

Dataset make_synthetic(const SyntheticTaskSpec& spec) {
  spec.validate();
  const auto markers = marker_tokens(spec);
  std::vector<std::int32_t> filler;
  for (std::int32_t id = 2; id < static_cast<std::int32_t>(spec.vocab_size); ++id) {
    if (spec.task == SyntheticTask::majority_token || !std::binary_search(markers.begin(), markers.end(), id)) {
      filler.push_back(id);
    }
  }
  if (spec.task == SyntheticTask::keyword_detect && (markers.empty() || filler.size() < 2)) {
    throw GenerationError("keyword-detect needs at least one marker and two filler tokens; vocabulary of " +
                          std::to_string(spec.vocab_size) + " with " + std::to_string(spec.markers) +
                          " markers cannot be balanced");
  }
  const std::size_t total = spec.train_size + spec.dev_size + spec.test_size;
  // Each class needs total/2 distinct sequences; the all-filler class is the
  // scarcer one for keyword-detect.
  const double capacity = static_cast<double>(spec.seq_len - spec.min_len + 1) *
                          std::pow(static_cast<double>(filler.size()), static_cast<double>(spec.min_len));
  if (capacity < static_cast<double>(total)) {
    throw GenerationError("synthetic spec admits too few distinct sequences for " + std::to_string(total) +
                          " examples");
  }

  Rng rng(spec.seed);
  std::unordered_set<std::uint64_t> seen;
  auto draw = [&](std::int32_t want) -> Example {
    const std::size_t max_attempts = 100000;
    for (std::size_t attempt = 0; attempt < max_attempts; ++attempt) {
      const std::size_t len = spec.min_len + rng.below(spec.seq_len - spec.min_len + 1);
      Example e{std::vector<std::int32_t>(spec.seq_len, kPadId), want};
      for (std::size_t i = 0; i < len; ++i) e.token_ids[i] = filler[rng.below(filler.size())];
      if (spec.task == SyntheticTask::keyword_detect && want == 1) {
        const std::size_t count = 1 + rng.below(2);
        for (std::size_t k = 0; k < count; ++k) e.token_ids[rng.below(len)] = markers[rng.below(markers.size())];
      }
      if (synthetic_label(spec, e.token_ids) != want) continue;
      if (!seen.insert(example_hash(e)).second) continue;
      return e;
    }
    throw GenerationError("could not draw a distinct example of class " + std::to_string(want));
  };

  auto make_split = [&](std::size_t n) {
    Split split;
    split.reserve(n);
    for (std::size_t i = 0; i < n; ++i) split.push_back(draw(static_cast<std::int32_t>(i % 2)));
    rng.shuffle(split);
    return split;
  };

  Dataset d;
  d.train = make_split(spec.train_size);
  d.dev = make_split(spec.dev_size);
  d.test = make_split(spec.test_size);
  d.vocab_size = spec.vocab_size;
  d.num_classes = 2;
  d.seq_len = spec.seq_len;
  return d;
}

std::vector<Batch> batches(const Split& split, std::size_t batch_size, std::uint64_t seed, bool shuffle) {
  if (batch_size == 0) throw ConfigError("batch size must be at least 1");
  std::vector<std::size_t> order(split.size());
  std::iota(order.begin(), order.end(), 0);
  if (shuffle) {
    Rng rng(seed);
    rng.shuffle(order);
  }
  std::vector<Batch> out;
  for (std::size_t start = 0; start < order.size(); start += batch_size) {
    const std::size_t n = std::min(batch_size, order.size() - start);
    const std::size_t seq = split[order[start]].token_ids.size();
    Batch b;
    b.tokens.batch = n;
    b.tokens.seq = seq;
    b.tokens.ids.reserve(n * seq);
    for (std::size_t i = 0; i < n; ++i) {
      const Example& e = split[order[start + i]];
      if (e.token_ids.size() != seq) throw DimensionError("examples in a split must share one sequence length");
      b.tokens.ids.insert(b.tokens.ids.end(), e.token_ids.begin(), e.token_ids.end());
      b.labels.push_back(e.label);
    }
    out.push_back(std::move(b));
  }
  return out;
}

}  // namespace far
