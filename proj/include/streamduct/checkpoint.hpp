#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "streamduct/config.hpp"
#include "streamduct/errors.hpp"
#include "streamduct/model.hpp"

namespace streamduct {

// Layout: "STTT", u32 version, u64 manifest length, manifest text, blob.
// Manifest lines are `name dtype shape offset`, shape written as AxB, offset
// relative to the start of the blob. f32 entries hold 4 bytes per element;
// u8 entries hold one code per element followed by f64 scale and f64 min.
// All numbers are little-endian.

inline constexpr char kCheckpointMagic[4] = {'S', 'T', 'T', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr const char* kConfigTensor = "meta/config";

struct CheckpointEntry {
  std::string name;
  std::string dtype;  // "f32" or "u8"
  Shape shape;
  std::uint64_t offset = 0;

  std::size_t elements() const {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return n;
  }
  std::size_t bytes() const { return dtype == "f32" ? 4 * elements() : elements() + 16; }
};

/// One stored tensor: float values, or 8-bit codes with their decoded values.
struct StoredTensor {
  CheckpointEntry entry;
  Tensor value;
  QuantizedTensor codes;  // u8 only
  bool quantized() const { return entry.dtype == "u8"; }
};

namespace detail {

template <class T>
void put_le(std::string& out, T v) {
  static_assert(std::is_unsigned_v<T>);
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

template <class T>
T get_le(const char* p) {
  T v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(static_cast<unsigned char>(p[i])) << (8 * i);
  return v;
}

inline void put_f64(std::string& out, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, 8);
  put_le(out, bits);
}

inline double get_f64(const char* p) {
  const auto bits = get_le<std::uint64_t>(p);
  double v;
  std::memcpy(&v, &bits, 8);
  return v;
}

inline std::string shape_token(const Shape& s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "x" : "") + std::to_string(s[i]);
  return out;
}

inline Shape parse_shape_token(const std::string& tok) {
  Shape s;
  std::size_t start = 0;
  while (start <= tok.size()) {
    const std::size_t x = std::min(tok.find('x', start), tok.size());
    const std::string part = tok.substr(start, x - start);
    if (part.empty() || part.find_first_not_of("0123456789") != std::string::npos) {
      throw FormatError("bad shape '" + tok + "' in checkpoint manifest");
    }
    s.push_back(std::stoull(part));
    start = x + 1;
  }
  return s;
}

class CheckpointWriter {
 public:
  void add_f32(const std::string& name, const Tensor& t) {
    CheckpointEntry e{name, "f32", t.shape(), blob_.size()};
    for (double v : t.data()) {
      const float f = static_cast<float>(v);
      std::uint32_t bits;
      std::memcpy(&bits, &f, 4);
      put_le(blob_, bits);
    }
    entries_.push_back(std::move(e));
  }

  void add_u8(const std::string& name, const QuantizedTensor& q) {
    CheckpointEntry e{name, "u8", q.shape, blob_.size()};
    blob_.append(reinterpret_cast<const char*>(q.codes.data()), q.codes.size());
    put_f64(blob_, q.scale);
    put_f64(blob_, q.min);
    entries_.push_back(std::move(e));
  }

  std::string bytes() const {
    std::string manifest;
    for (const auto& e : entries_) {
      manifest += e.name + " " + e.dtype + " " + shape_token(e.shape) + " " + std::to_string(e.offset) + "\n";
    }
    std::string out(kCheckpointMagic, 4);
    put_le(out, kCheckpointVersion);
    put_le(out, static_cast<std::uint64_t>(manifest.size()));
    out += manifest;
    out += blob_;
    return out;
  }

 private:
  std::vector<CheckpointEntry> entries_;
  std::string blob_;
};

inline std::string config_text(const Model& m) {
  return to_text(m.config) + "branches = " + join_languages(m.languages()) + "\n";
}

}  // namespace detail

/// Exact byte image of a checkpoint for `m`.
inline std::string serialize(const Model& m) {
  detail::CheckpointWriter w;
  const std::string text = detail::config_text(m);
  QuantizedTensor meta;
  meta.shape = {text.size()};
  meta.codes.assign(text.begin(), text.end());
  meta.scale = 1.0;
  meta.min = 0.0;
  w.add_u8(kConfigTensor, meta);
  Model::visit(m, [&](const std::string& name, const Tensor& t) {
    const auto q = m.quantized.find(name);
    if (q != m.quantized.end()) {
      w.add_u8(name, q->second);
    } else {
      w.add_f32(name, t);
    }
  });
  return w.bytes();
}

inline void save_checkpoint(const Model& m, const std::string& path) {
  const std::string bytes = serialize(m);
  std::ofstream os(path, std::ios::binary);
  if (!os) throw InvalidArgument("cannot open '" + path + "' for writing");
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw IntegrityError("short write to '" + path + "'");
}

/// Parse a checkpoint image into its stored tensors, in manifest order.
inline std::vector<StoredTensor> parse_checkpoint(const std::string& bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0) {
    throw FormatError("not a checkpoint (bad magic)");
  }
  if (bytes.size() < 16) throw IntegrityError("checkpoint header truncated");
  const auto version = detail::get_le<std::uint32_t>(bytes.data() + 4);
  if (version != kCheckpointVersion) throw FormatError("unsupported checkpoint version " + std::to_string(version));
  const auto manifest_len = detail::get_le<std::uint64_t>(bytes.data() + 8);
  if (manifest_len > bytes.size() - 16) throw IntegrityError("checkpoint manifest truncated");
  const std::string manifest = bytes.substr(16, manifest_len);
  const std::string_view blob(bytes.data() + 16 + manifest_len, bytes.size() - 16 - manifest_len);

  std::vector<StoredTensor> out;
  std::set<std::string> names;
  std::istringstream is(manifest);
  std::string line;
  while (std::getline(is, line)) {
    std::istringstream ls(line);
    StoredTensor st;
    std::string shape;
    std::uint64_t offset;
    if (!(ls >> st.entry.name >> st.entry.dtype >> shape >> offset)) {
      throw FormatError("bad manifest line '" + line + "'");
    }
    st.entry.offset = offset;
    st.entry.shape = detail::parse_shape_token(shape);
    if (st.entry.dtype != "f32" && st.entry.dtype != "u8") {
      throw FormatError("tensor '" + st.entry.name + "' has unknown dtype '" + st.entry.dtype + "'");
    }
    if (!names.insert(st.entry.name).second) throw FormatError("duplicate tensor '" + st.entry.name + "'");
    const std::size_t n = st.entry.elements();
    if (n == 0) throw FormatError("tensor '" + st.entry.name + "' has an empty shape");
    if (offset > blob.size() || st.entry.bytes() > blob.size() - offset) {
      throw IntegrityError("tensor '" + st.entry.name + "' extends past the end of the data");
    }
    const char* p = blob.data() + offset;
    st.value = Tensor(st.entry.shape);
    if (st.entry.dtype == "f32") {
      for (std::size_t i = 0; i < n; ++i) {
        const auto bits = detail::get_le<std::uint32_t>(p + 4 * i);
        float f;
        std::memcpy(&f, &bits, 4);
        st.value[i] = f;
      }
    } else {
      st.codes.shape = st.entry.shape;
      st.codes.codes.assign(reinterpret_cast<const std::uint8_t*>(p), reinterpret_cast<const std::uint8_t*>(p) + n);
      st.codes.scale = detail::get_f64(p + n);
      st.codes.min = detail::get_f64(p + n + 8);
      st.value = st.codes.dequantize();
    }
    out.push_back(std::move(st));
  }
  return out;
}

inline std::string read_file_bytes(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw InvalidArgument("cannot open '" + path + "'");
  return std::string(std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>());
}

inline std::vector<StoredTensor> read_checkpoint_tensors(const std::string& path) {
  return parse_checkpoint(read_file_bytes(path));
}

inline Model deserialize(const std::string& bytes) {
  const std::vector<StoredTensor> stored = parse_checkpoint(bytes);
  std::map<std::string, const StoredTensor*> by_name;
  for (const auto& st : stored) by_name[st.entry.name] = &st;

  const auto meta = by_name.find(kConfigTensor);
  if (meta == by_name.end() || !meta->second->quantized()) throw FormatError("checkpoint has no meta/config entry");
  const auto& codes = meta->second->codes.codes;
  std::istringstream cfg_text(std::string(codes.begin(), codes.end()));
  std::map<std::string, std::string> extras;
  TrainConfig cfg;
  try {
    cfg = parse_config(cfg_text, {"branches"}, &extras);
  } catch (const ParseError& e) {
    throw FormatError(std::string("checkpoint config: ") + e.what());
  }
  if (!extras.count("branches")) throw FormatError("checkpoint config lists no branches");

  Model m = init_model(cfg, parse_languages(extras["branches"]));
  std::size_t used = 1;
  Model::visit(m, [&](const std::string& name, Tensor& t) {
    const auto it = by_name.find(name);
    if (it == by_name.end()) throw FormatError("checkpoint is missing tensor '" + name + "'");
    const StoredTensor& st = *it->second;
    if (st.entry.shape != t.shape()) {
      throw FormatError("tensor '" + name + "' has shape " + shape_string(st.entry.shape) + ", expected " +
                        shape_string(t.shape()));
    }
    t = st.value;
    if (st.quantized()) m.quantized[name] = st.codes;
    ++used;
  });
  if (used != stored.size()) throw FormatError("checkpoint holds tensors the model does not use");
  return m;
}

inline Model load_checkpoint(const std::string& path) { return deserialize(read_file_bytes(path)); }

/// Replace the encoder of `model` with the one stored at `path`; branches
/// are left as they are.
inline Model load_encoder_only(const std::string& path, Model model) {
  const std::vector<StoredTensor> stored = read_checkpoint_tensors(path);
  std::map<std::string, const StoredTensor*> by_name;
  for (const auto& st : stored) by_name[st.entry.name] = &st;
  EncoderWeights<Tensor>::visit(model.encoder, [&](const std::string& name, Tensor& t) {
    const auto it = by_name.find(name);
    if (it == by_name.end()) throw InvalidArgument("encoder tensor '" + name + "' missing from " + path);
    if (it->second->entry.shape != t.shape()) {
      throw InvalidArgument("encoder tensor '" + name + "' has shape " + shape_string(it->second->entry.shape) +
                            " in " + path + ", model expects " + shape_string(t.shape()));
    }
    t = it->second->value;
  });
  model.quantized.clear();
  return model;
}

struct QuantizationEntry {
  std::string name;
  double scale = 0.0;
  double max_error = 0.0;
};

struct QuantizationReport {
  std::vector<QuantizationEntry> tensors;
  double max_error() const {
    double e = 0.0;
    for (const auto& t : tensors) e = std::max(e, t.max_error);
    return e;
  }
};

/// Replace every encoder tensor by its 8-bit reconstruction.
inline std::pair<Model, QuantizationReport> quantize_encoder(Model m) {
  QuantizationReport report;
  m.quantized.clear();
  EncoderWeights<Tensor>::visit(m.encoder, [&](const std::string& name, Tensor& t) {
    QuantizedTensor q = quantize(t);
    Tensor back = q.dequantize();
    double err = 0.0;
    for (std::size_t i = 0; i < t.size(); ++i) err = std::max(err, std::abs(back[i] - t[i]));
    report.tensors.push_back({name, q.scale, err});
    t = std::move(back);
    m.quantized[name] = std::move(q);
  });
  return {std::move(m), std::move(report)};
}

}  // namespace streamduct
