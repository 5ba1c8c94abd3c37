#include "sslab/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "sslab/errors.hpp"

namespace sslab {

namespace {

constexpr char kMagic[] = "SSLABCK1";
constexpr char kTrailer[] = "SSLABEND";

template <typename T>
void put_le(std::string& out, T value) {
  static_assert(std::is_integral_v<T>);
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    out.push_back(static_cast<char>((static_cast<std::uint64_t>(value) >> (8 * i)) & 0xFF));
  }
}

void put_f64(std::string& out, double v) { put_le(out, std::bit_cast<std::uint64_t>(v)); }

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}

  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) {
      throw FormatError("checkpoint truncated at byte " + std::to_string(pos_));
    }
  }

  template <typename T>
  T le() {
    need(sizeof(T));
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) {
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    }
    pos_ += sizeof(T);
    return static_cast<T>(v);
  }

  double f64() { return std::bit_cast<double>(le<std::uint64_t>()); }

  std::string take(std::size_t n) {
    need(n);
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  const std::string& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

const NamedArray* Checkpoint::find(const std::string& name) const {
  for (const auto& a : arrays) {
    if (a.name == name) {
      return &a;
    }
  }
  return nullptr;
}

std::string encode_checkpoint(const Checkpoint& ckpt) {
  std::string out(kMagic, 8);
  const auto header = ckpt.header.dump();
  put_le<std::uint64_t>(out, header.size());
  out += header;
  put_le<std::uint64_t>(out, ckpt.arrays.size());
  for (const auto& a : ckpt.arrays) {
    if (numel(a.shape) != a.values.size()) {
      throw ContractError("checkpoint array '" + a.name + "' has inconsistent shape");
    }
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(a.name.size()));
    out += a.name;
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(a.shape.size()));
    for (const auto d : a.shape) {
      put_le<std::uint64_t>(out, d);
    }
    for (const auto v : a.values) {
      put_f64(out, v);
    }
  }
  out.append(kTrailer, 8);
  return out;
}

Checkpoint decode_checkpoint(const std::string& bytes) {
  Reader in(bytes);
  if (in.take(8) != std::string(kMagic, 8)) {
    throw FormatError("not a checkpoint (bad magic)");
  }
  Checkpoint ckpt;
  const auto header_len = in.le<std::uint64_t>();
  try {
    ckpt.header = nlohmann::json::parse(in.take(header_len));
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(std::string("checkpoint header is not valid JSON: ") + e.what());
  }
  const auto count = in.le<std::uint64_t>();
  for (std::uint64_t i = 0; i < count; ++i) {
    NamedArray a;
    a.name = in.take(in.le<std::uint32_t>());
    const auto rank = in.le<std::uint32_t>();
    for (std::uint32_t r = 0; r < rank; ++r) {
      a.shape.push_back(in.le<std::uint64_t>());
    }
    const auto n = numel(a.shape);
    in.need(n * 8);
    a.values.resize(n);
    for (auto& v : a.values) {
      v = in.f64();
    }
    ckpt.arrays.push_back(std::move(a));
  }
  if (in.take(8) != std::string(kTrailer, 8)) {
    throw FormatError("checkpoint trailer missing");
  }
  if (!in.done()) {
    throw FormatError("unexpected bytes after checkpoint trailer");
  }
  return ckpt;
}

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  const auto bytes = encode_checkpoint(ckpt);
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) {
      throw FormatError("cannot write checkpoint " + tmp.string());
    }
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) {
      throw FormatError("short write to " + tmp.string());
    }
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw FormatError("cannot open checkpoint " + path.string());
  }
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    return decode_checkpoint(bytes);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

NamedArray to_named_array(const std::string& name, const Tensor& t) {
  const auto v = t.data();
  return {name, t.shape(), std::vector<double>(v.begin(), v.end())};
}

void load_into(const NamedArray& array, Tensor& t) {
  if (array.shape != t.shape()) {
    throw FormatError("array '" + array.name + "' has shape " + shape_str(array.shape) + ", expected " +
                      shape_str(t.shape()));
  }
  auto dst = t.mutable_data();
  for (std::size_t i = 0; i < dst.size(); ++i) {
    dst[i] = static_cast<Scalar>(array.values[i]);
  }
}

void add_model(Checkpoint& ckpt, const Transformer& model) {
  ckpt.header["model"] = model.config();
  for (const auto& [name, t] : model.params().named()) {
    ckpt.arrays.push_back(to_named_array("param/" + name, t));
  }
}

Transformer model_from_checkpoint(const Checkpoint& ckpt) {
  if (!ckpt.header.contains("model")) {
    throw FormatError("checkpoint has no model config");
  }
  ModelConfig config;
  try {
    config = ckpt.header.at("model").get<ModelConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("invalid model config in checkpoint: ") + e.what());
  }
  // Structure comes from the config; values are overwritten below.
  Rng scratch(0);
  Transformer model(config, scratch);
  for (auto& [name, t] : model.params().named()) {
    const auto* array = ckpt.find("param/" + name);
    if (array == nullptr) {
      throw FormatError("checkpoint is missing parameter '" + name + "'");
    }
    load_into(*array, t);
  }
  return model;
}

}  // namespace sslab
