#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "sslab/model.hpp"
#include "sslab/tensor.hpp"

namespace sslab {

// Container layout, all integers little-endian:
//   "SSLABCK1"                      8-byte magic
//   u64 header_len, header bytes    UTF-8 JSON
//   u64 array_count
//   per array: u32 name_len, name, u32 rank, u64 dims[rank], f64 values
//   "SSLABEND"                      8-byte trailer
struct NamedArray {
  std::string name;
  Shape shape;
  std::vector<double> values;
};

struct Checkpoint {
  nlohmann::json header;
  std::vector<NamedArray> arrays;

  const NamedArray* find(const std::string& name) const;
};

std::string encode_checkpoint(const Checkpoint& ckpt);
// Throws FormatError on bad magic, truncation, or trailing garbage.
Checkpoint decode_checkpoint(const std::string& bytes);

// Writes to a temporary sibling and renames, so readers never see a partial file.
void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint read_checkpoint(const std::filesystem::path& path);

// Parameters as "param/<name>" arrays; header["model"] holds the config.
void add_model(Checkpoint& ckpt, const Transformer& model);
// Rebuilds the model from header["model"] and the param arrays. Missing
// arrays or shape mismatches throw FormatError naming the parameter.
Transformer model_from_checkpoint(const Checkpoint& ckpt);

NamedArray to_named_array(const std::string& name, const Tensor& t);
// Copies values into an existing tensor of the same shape.
void load_into(const NamedArray& array, Tensor& t);

}  // namespace sslab
