#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "far/datasets.hpp"
#include "far/model.hpp"
#include "far/trainer.hpp"

namespace far {

using Json = nlohmann::ordered_json;

const char* activation_name(Activation a);
Activation parse_activation(const std::string& name);

enum class DataSource { synthetic, tsv };

struct TsvDataConfig {
  /// Paths are resolved against the config file's directory.
  std::string train;
  std::string dev;
  std::string test;
  TsvSchema schema;
  std::size_t vocab_size = 1000;
  std::size_t seq_len = 32;
};

struct DataConfig {
  DataSource source = DataSource::synthetic;
  SyntheticTaskSpec synthetic;
  TsvDataConfig tsv;
};

/// Everything one `far train` invocation needs.
struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  DataConfig data;
  std::string output_directory = "runs/latest";
  /// Write a checkpoint of each seed's final model.
  bool save_checkpoints = false;
  /// Directory relative paths are resolved against.
  std::filesystem::path base_directory;

  void validate() const;
};

Json to_json(const ModelConfig& c);
Json to_json(const FarConfig& c);
Json to_json(const SyntheticTaskSpec& s);
Json to_json(const RunConfig& c);

ModelConfig model_config_from_json(const Json& j);

/// Strict parse: unknown keys and wrongly typed values throw ConfigError
/// naming the key path. Missing keys keep their defaults.
RunConfig run_config_from_json(const Json& doc);

/// Applies "section.key=value" to a config document. The value is parsed
/// as JSON when possible and taken as a string otherwise.
void apply_override(Json& doc, const std::string& assignment);

/// Reads a config file, applies overrides in order and parses the result.
RunConfig load_run_config(const std::filesystem::path& path, const std::vector<std::string>& overrides = {});

/// Synthetic generation or TSV ingestion (train and dev required).
Dataset load_dataset(const RunConfig& config);

Json to_json(const ResourceReport& r);
ResourceReport resource_report_from_json(const Json& j);
Json to_json(const SeedResult& s);
Json to_json(const RunResult& r);

/// Tab-separated step log: step, phase, loss, lr.
void write_step_log(std::ostream& out, const std::vector<StepRecord>& steps);

/// Shortest decimal that round-trips a double.
std::string format_double(double v);

}  // namespace far
