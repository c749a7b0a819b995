#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "far/model.hpp"

namespace far {

/// Container layout (all integers little-endian):
///
///   "FARCKPT1"                      8-byte magic
///   u64 n, n bytes                  ModelConfig as JSON text
///   u64 tensor_count
///   per tensor:
///     u64 n, n bytes                name
///     u8 dtype                      0 = f32, 1 = f64
///     u64 rank, rank x u64          dims
///     raw values                    IEEE-754 little-endian, row-major
///   "FAREND\0\0"                    8-byte trailer
///
/// Reconfigured FFN sublayers are written consolidated under their
/// unpartitioned names, so every checkpoint loads into a fresh model.
struct CheckpointTensor {
  std::string name;
  Precision dtype = Precision::f32;
  Shape shape;
  /// Raw little-endian bytes.
  std::vector<unsigned char> bytes;
};

struct Checkpoint {
  ModelConfig config;
  std::vector<CheckpointTensor> tensors;

  std::size_t element_count() const;
};

template <typename Real>
Checkpoint make_checkpoint(const EncoderModel<Real>& model);

void write_checkpoint(std::ostream& out, const Checkpoint& ckpt);
void save_checkpoint_file(const std::filesystem::path& path, const Checkpoint& ckpt);

/// Throws FormatError for a bad magic, truncation or malformed header.
Checkpoint read_checkpoint(std::istream& in);
Checkpoint read_checkpoint_file(const std::filesystem::path& path);

template <typename Real>
void save_checkpoint(const EncoderModel<Real>& model, const std::filesystem::path& path) {
  save_checkpoint_file(path, make_checkpoint(model));
}

/// Copies every tensor into an unpartitioned model. Throws FormatError
/// naming the tensor on a missing or extra name, a shape mismatch or a
/// dtype that differs from Real; StateError for a reconfigured model.
template <typename Real>
void load_checkpoint_into(EncoderModel<Real>& model, const Checkpoint& ckpt);

/// Builds a model from the stored config and loads its tensors.
template <typename Real>
EncoderModel<Real> load_checkpoint(const std::filesystem::path& path);

}  // namespace far
