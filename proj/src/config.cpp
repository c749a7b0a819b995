#include "far/config.hpp"

#include <charconv>
#include <fstream>
#include <set>
#include <sstream>

namespace far {

const char* activation_name(Activation a) {
  switch (a) {
    case Activation::gelu_tanh:
      return "gelu_tanh";
    case Activation::gelu_erf:
      return "gelu_erf";
    case Activation::relu:
      return "relu";
  }
  return "?";
}

Activation parse_activation(const std::string& name) {
  if (name == "gelu_tanh") return Activation::gelu_tanh;
  if (name == "gelu_erf") return Activation::gelu_erf;
  if (name == "relu") return Activation::relu;
  throw ConfigError("unknown activation '" + name + "' (expected gelu_tanh, gelu_erf or relu)");
}

std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

namespace {

// Reads the keys of one JSON object, remembering which were consumed so
// leftovers can be reported.
class Section {
 public:
  Section(const Json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError("'" + path_ + "' must be an object");
  }

  bool has(const char* key) const { return j_.contains(key); }

  const Json& raw(const char* key) {
    seen_.insert(key);
    return j_.at(key);
  }

  static_assert(std::is_same_v<std::size_t, std::uint64_t>);
  void get(const char* key, std::size_t& out) { read(key, out, [](const Json& v) { return v.is_number_unsigned(); }); }
  void get(const char* key, double& out) { read(key, out, [](const Json& v) { return v.is_number(); }); }
  void get(const char* key, bool& out) { read(key, out, [](const Json& v) { return v.is_boolean(); }); }
  void get(const char* key, std::string& out) { read(key, out, [](const Json& v) { return v.is_string(); }); }

  template <typename Parse>
  void get_enum(const char* key, Parse parse) {
    std::string s;
    get(key, s);
    if (has(key)) parse(s);
  }

  std::string path(const char* key) const { return path_.empty() ? key : path_ + "." + key; }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.count(it.key())) throw ConfigError("unknown config key '" + path(it.key().c_str()) + "'");
    }
  }

 private:
  template <typename T, typename Check>
  void read(const char* key, T& out, Check check) {
    if (!j_.contains(key)) return;
    seen_.insert(key);
    const Json& v = j_.at(key);
    if (!check(v)) throw ConfigError("config key '" + path(key) + "' has the wrong type: " + v.dump());
    out = v.get<T>();
  }

  const Json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

ModelConfig read_model(const Json& j) {
  ModelConfig c;
  Section s(j, "model");
  s.get("num_layers", c.num_layers);
  s.get("d_model", c.d_model);
  s.get("d_ff", c.d_ff);
  s.get("num_heads", c.num_heads);
  s.get("vocab_size", c.vocab_size);
  s.get("max_seq_len", c.max_seq_len);
  s.get("num_classes", c.num_classes);
  s.get("seed", c.seed);
  s.get_enum("activation", [&](const std::string& v) { c.activation = parse_activation(v); });
  s.get("dropout", c.dropout);
  s.get("layer_norm_eps", c.layer_norm_eps);
  s.finish();
  return c;
}

void read_train(const Json& j, TrainConfig& c) {
  Section s(j, "train");
  s.get("learning_rate", c.learning_rate);
  s.get("batch_size", c.batch_size);
  s.get("max_epochs", c.max_epochs);
  if (s.has("seeds")) {
    const Json& seeds = s.raw("seeds");
    if (!seeds.is_array()) throw ConfigError("'train.seeds' must be an array of non-negative integers");
    c.seeds.clear();
    for (const Json& v : seeds) {
      if (!v.is_number_unsigned()) throw ConfigError("'train.seeds' must be an array of non-negative integers");
      c.seeds.push_back(v.get<std::uint64_t>());
    }
  }
  s.get_enum("optimizer", [&](const std::string& v) { c.optimizer = parse_optimizer(v); });
  s.get_enum("metric", [&](const std::string& v) { c.metric = parse_eval_metric(v); });
  s.get_enum("precision", [&](const std::string& v) { c.precision = parse_precision(v); });
  s.get("record_wall_clock", c.record_wall_clock);
  s.finish();
}

FarConfig read_far(const Json& j) {
  FarConfig c;
  Section s(j, "far");
  s.get("p", c.priming_percent);
  s.get("r", c.retention_percent);
  s.get_enum("selection_mode", [&](const std::string& v) { c.selection_mode = parse_selection_mode(v); });
  s.get("seed", c.seed);
  s.get("freeze_nonlearner_bias", c.freeze_nonlearner_bias);
  s.finish();
  return c;
}

SyntheticTaskSpec read_synthetic(const Json& j) {
  SyntheticTaskSpec c;
  Section s(j, "data.synthetic");
  s.get_enum("task", [&](const std::string& v) { c.task = parse_synthetic_task(v); });
  s.get("vocab_size", c.vocab_size);
  s.get("seq_len", c.seq_len);
  s.get("min_len", c.min_len);
  s.get("markers", c.markers);
  s.get("train_size", c.train_size);
  s.get("dev_size", c.dev_size);
  s.get("test_size", c.test_size);
  s.get("seed", c.seed);
  s.finish();
  return c;
}

TsvDataConfig read_tsv(const Json& j) {
  TsvDataConfig c;
  Section s(j, "data.tsv");
  s.get("train", c.train);
  s.get("dev", c.dev);
  s.get("test", c.test);
  s.get("vocab_size", c.vocab_size);
  s.get("seq_len", c.seq_len);
  s.get("text_column", c.schema.text_column);
  s.get("label_column", c.schema.label_column);
  if (s.has("delimiter")) {
    std::string d;
    s.get("delimiter", d);
    if (d.size() != 1) throw ConfigError("'data.tsv.delimiter' must be a single character");
    c.schema.delimiter = d[0];
  }
  s.get("has_header", c.schema.has_header);
  s.finish();
  return c;
}

DataConfig read_data(const Json& j) {
  DataConfig c;
  Section s(j, "data");
  s.get_enum("source", [&](const std::string& v) {
    if (v == "synthetic") {
      c.source = DataSource::synthetic;
    } else if (v == "tsv") {
      c.source = DataSource::tsv;
    } else {
      throw ConfigError("unknown data.source '" + v + "' (expected synthetic or tsv)");
    }
  });
  if (s.has("synthetic")) c.synthetic = read_synthetic(s.raw("synthetic"));
  if (s.has("tsv")) c.tsv = read_tsv(s.raw("tsv"));
  s.finish();
  return c;
}

// Walks (creating objects as needed) to the parent of a dotted path.
Json& parent_of(Json& doc, const std::string& path, std::string& leaf) {
  Json* node = &doc;
  std::size_t start = 0;
  while (true) {
    const std::size_t dot = path.find('.', start);
    const std::string part = path.substr(start, dot - start);
    if (part.empty()) throw ConfigError("malformed override key '" + path + "'");
    if (!node->is_object()) throw ConfigError("override '" + path + "' descends into a non-object");
    if (dot == std::string::npos) {
      leaf = part;
      return *node;
    }
    if (!node->contains(part)) (*node)[part] = Json::object();
    node = &(*node)[part];
    start = dot + 1;
  }
}

std::filesystem::path resolve(const RunConfig& c, const std::string& p) {
  const std::filesystem::path path(p);
  return path.is_absolute() || c.base_directory.empty() ? path : c.base_directory / path;
}

}  // namespace

void RunConfig::validate() const {
  model.validate();
  train.validate();
  if (data.source == DataSource::synthetic) {
    data.synthetic.validate();
    if (data.synthetic.vocab_size > model.vocab_size) {
      throw ConfigError("data.synthetic.vocab_size exceeds model.vocab_size");
    }
    if (data.synthetic.seq_len > model.max_seq_len) throw ConfigError("data.synthetic.seq_len exceeds model.max_seq_len");
  } else {
    if (data.tsv.train.empty() || data.tsv.dev.empty()) throw ConfigError("data.tsv.train and data.tsv.dev are required");
    if (data.tsv.vocab_size > model.vocab_size) throw ConfigError("data.tsv.vocab_size exceeds model.vocab_size");
    if (data.tsv.seq_len > model.max_seq_len) throw ConfigError("data.tsv.seq_len exceeds model.max_seq_len");
  }
  if (output_directory.empty()) throw ConfigError("output.directory must not be empty");
}

Json to_json(const ModelConfig& c) {
  Json j;
  j["num_layers"] = c.num_layers;
  j["d_model"] = c.d_model;
  j["d_ff"] = c.d_ff;
  j["num_heads"] = c.num_heads;
  j["vocab_size"] = c.vocab_size;
  j["max_seq_len"] = c.max_seq_len;
  j["num_classes"] = c.num_classes;
  j["seed"] = c.seed;
  j["activation"] = activation_name(c.activation);
  j["dropout"] = c.dropout;
  j["layer_norm_eps"] = c.layer_norm_eps;
  return j;
}

Json to_json(const FarConfig& c) {
  Json j;
  j["p"] = c.priming_percent;
  j["r"] = c.retention_percent;
  j["selection_mode"] = selection_mode_name(c.selection_mode);
  j["seed"] = c.seed;
  j["freeze_nonlearner_bias"] = c.freeze_nonlearner_bias;
  return j;
}

Json to_json(const SyntheticTaskSpec& s) {
  Json j;
  j["task"] = synthetic_task_name(s.task);
  j["vocab_size"] = s.vocab_size;
  j["seq_len"] = s.seq_len;
  j["min_len"] = s.min_len;
  j["markers"] = s.markers;
  j["train_size"] = s.train_size;
  j["dev_size"] = s.dev_size;
  j["test_size"] = s.test_size;
  j["seed"] = s.seed;
  return j;
}

Json to_json(const RunConfig& c) {
  Json j;
  j["model"] = to_json(c.model);
  Json t;
  t["learning_rate"] = c.train.learning_rate;
  t["batch_size"] = c.train.batch_size;
  t["max_epochs"] = c.train.max_epochs;
  t["seeds"] = c.train.seeds;
  t["optimizer"] = optimizer_name(c.train.optimizer);
  t["metric"] = eval_metric_name(c.train.metric);
  t["precision"] = precision_name(c.train.precision);
  t["record_wall_clock"] = c.train.record_wall_clock;
  j["train"] = t;
  j["far"] = to_json(c.train.far);
  Json d;
  d["source"] = c.data.source == DataSource::synthetic ? "synthetic" : "tsv";
  if (c.data.source == DataSource::synthetic) {
    d["synthetic"] = to_json(c.data.synthetic);
  } else {
    Json tsv;
    tsv["train"] = c.data.tsv.train;
    tsv["dev"] = c.data.tsv.dev;
    tsv["test"] = c.data.tsv.test;
    tsv["vocab_size"] = c.data.tsv.vocab_size;
    tsv["seq_len"] = c.data.tsv.seq_len;
    tsv["text_column"] = c.data.tsv.schema.text_column;
    tsv["label_column"] = c.data.tsv.schema.label_column;
    tsv["delimiter"] = std::string(1, c.data.tsv.schema.delimiter);
    tsv["has_header"] = c.data.tsv.schema.has_header;
    d["tsv"] = tsv;
  }
  j["data"] = d;
  j["output"] = Json{{"directory", c.output_directory}, {"save_checkpoints", c.save_checkpoints}};
  return j;
}

ModelConfig model_config_from_json(const Json& j) { return read_model(j); }

RunConfig run_config_from_json(const Json& doc) {
  RunConfig c;
  Section s(doc, "");
  if (s.has("model")) c.model = read_model(s.raw("model"));
  if (s.has("train")) read_train(s.raw("train"), c.train);
  if (s.has("far")) c.train.far = read_far(s.raw("far"));
  if (s.has("data")) c.data = read_data(s.raw("data"));
  if (s.has("output")) {
    Section o(s.raw("output"), "output");
    o.get("directory", c.output_directory);
    o.get("save_checkpoints", c.save_checkpoints);
    o.finish();
  }
  s.finish();
  c.validate();
  return c;
}

void apply_override(Json& doc, const std::string& assignment) {
  std::string text = assignment;
  if (text.rfind("--", 0) == 0) text = text.substr(2);
  const std::size_t eq = text.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not key=value");
  const std::string key = text.substr(0, eq);
  const std::string value = text.substr(eq + 1);
  std::string leaf;
  Json& parent = parent_of(doc, key, leaf);
  Json parsed = Json::parse(value, nullptr, false);
  parent[leaf] = parsed.is_discarded() ? Json(value) : parsed;
}

RunConfig load_run_config(const std::filesystem::path& path, const std::vector<std::string>& overrides) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  Json doc = Json::parse(in, nullptr, false);
  if (doc.is_discarded()) throw ConfigError("config file " + path.string() + " is not valid JSON");
  for (const auto& o : overrides) apply_override(doc, o);
  RunConfig c = run_config_from_json(doc);
  c.base_directory = path.parent_path();
  return c;
}

Dataset load_dataset(const RunConfig& config) {
  if (config.data.source == DataSource::synthetic) return make_synthetic(config.data.synthetic);
  const TsvDataConfig& t = config.data.tsv;
  Vocabulary vocab;
  TsvSplit train = load_tsv(resolve(config, t.train), t.schema, t.vocab_size, t.seq_len, vocab);
  TsvSplit dev = load_tsv(resolve(config, t.dev), t.schema, vocab, t.seq_len);
  Dataset d;
  d.train = std::move(train.examples);
  d.dev = std::move(dev.examples);
  if (!t.test.empty()) d.test = load_tsv(resolve(config, t.test), t.schema, vocab, t.seq_len).examples;
  d.vocab_size = vocab.size();
  d.num_classes = std::max(train.num_classes, dev.num_classes);
  d.seq_len = t.seq_len;
  return d;
}

namespace {

Json ops_json(const MemoryOps& ops) {
  Json j;
  for (const auto& [name, value] : counter_list(ops)) j[name] = value;
  return j;
}

MemoryOps ops_from_json(const Json& j) {
  MemoryOps ops;
  ops.parameter_reads = j.at("parameter_reads").get<std::uint64_t>();
  ops.parameter_writes = j.at("parameter_writes").get<std::uint64_t>();
  ops.activation_stores = j.at("activation_stores").get<std::uint64_t>();
  ops.activation_loads = j.at("activation_loads").get<std::uint64_t>();
  ops.data_reads = j.at("data_reads").get<std::uint64_t>();
  ops.optimizer_state_reads = j.at("optimizer_state_reads").get<std::uint64_t>();
  ops.optimizer_state_writes = j.at("optimizer_state_writes").get<std::uint64_t>();
  return ops;
}

}  // namespace

Json to_json(const ResourceReport& r) {
  Json j;
  j["total_parameters"] = r.total_parameters;
  j["trainable_parameters"] = r.trainable_parameters;
  j["frozen_parameters"] = r.frozen_parameters;
  Json phases = Json::array();
  for (const auto& p : r.phases) {
    Json pj;
    pj["name"] = p.name;
    pj["kind"] = p.kind == CostPhase::training ? "training" : "inference";
    pj["steps"] = p.steps;
    pj["counters"] = ops_json(p.ops);
    if (p.wall_seconds) pj["wall_seconds"] = *p.wall_seconds;
    phases.push_back(pj);
  }
  j["phases"] = phases;
  j["training_totals"] = ops_json(r.training_totals());
  return j;
}

ResourceReport resource_report_from_json(const Json& j) {
  try {
    ResourceReport r;
    r.total_parameters = j.at("total_parameters").get<std::size_t>();
    r.trainable_parameters = j.at("trainable_parameters").get<std::size_t>();
    r.frozen_parameters = j.at("frozen_parameters").get<std::size_t>();
    for (const Json& pj : j.at("phases")) {
      PhaseTotals p;
      p.name = pj.at("name").get<std::string>();
      p.kind = pj.at("kind").get<std::string>() == "training" ? CostPhase::training : CostPhase::inference;
      p.steps = pj.at("steps").get<std::size_t>();
      p.ops = ops_from_json(pj.at("counters"));
      if (pj.contains("wall_seconds")) p.wall_seconds = pj.at("wall_seconds").get<double>();
      r.phases.push_back(p);
    }
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed resource report: ") + e.what());
  }
}

Json to_json(const SeedResult& s) {
  Json j;
  j["seed"] = s.seed;
  j["score"] = s.score;
  j["total_steps"] = s.total_steps;
  j["priming_steps"] = s.priming_steps;
  j["post_reconfiguration_steps"] = s.post_reconfiguration_steps;
  j["trainable_fraction"] = s.trainable_fraction;
  j["optimizer_state_entries"] = s.optimizer_state_entries;
  Json learners = Json::object();
  for (const auto& [address, nodes] : s.learners) learners[address.label()] = nodes;
  j["learners"] = learners;
  j["resources"] = to_json(s.resources);
  return j;
}

Json to_json(const RunResult& r) {
  Json j;
  j["selection_mode"] = selection_mode_name(r.selection_mode);
  j["p"] = r.priming_percent;
  j["r"] = r.retention_percent;
  j["metric"] = eval_metric_name(r.metric);
  Json scores = Json::array();
  for (const auto& s : r.seeds) scores.push_back(s.score);
  j["scores"] = scores;
  j["mean"] = r.mean();
  j["resources"] = to_json(r.resources());
  return j;
}

void write_step_log(std::ostream& out, const std::vector<StepRecord>& steps) {
  out << "step\tphase\tloss\tlr\n";
  for (const auto& s : steps) {
    out << s.step << '\t' << s.phase << '\t' << format_double(s.loss) << '\t' << format_double(s.lr) << '\n';
  }
}

}  // namespace far
