// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <boost/crc.hpp>
#include <openssl/evp.h>

#include "json.hpp"
#include "platemark/mdn.hpp"
#include "platemark/model.hpp"

namespace platemark {

class FormatError : public DataError {
 public:
  using DataError::DataError;
};

namespace io {

inline std::uint32_t crc32(const std::uint8_t* data, std::size_t n) {
  boost::crc_32_type crc;
  crc.process_bytes(data, n);
  return crc.checksum();
}

/// Little-endian byte sink.
class Writer {
 public:
  void bytes(const void* p, std::size_t n) {
    auto b = static_cast<const std::uint8_t*>(p);
    buf_.insert(buf_.end(), b, b + n);
  }
  void u8(std::uint8_t v) { buf_.push_back(v); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_.push_back(std::uint8_t(v >> (8 * i)));
  }
  void f32(float f) { u32(std::bit_cast<std::uint32_t>(f)); }
  void str(std::string_view s) {
    u32(std::uint32_t(s.size()));
    bytes(s.data(), s.size());
  }
  void crc() { u32(crc32(buf_.data(), buf_.size())); }
  std::vector<std::uint8_t>& buffer() { return buf_; }

 private:
  std::vector<std::uint8_t> buf_;
};

/// Bounds-checked little-endian reader; any overrun is a truncation error.
class Reader {
 public:
  /// Reads at most the first `limit` bytes of `buf`.
  Reader(const std::vector<std::uint8_t>& buf, std::string what, std::size_t limit = SIZE_MAX)
      : buf_(buf), what_(std::move(what)), end_(std::min(limit, buf.size())) {}

  void need(std::size_t n) const {
    if (end_ - pos_ < n) throw FormatError(what_ + ": truncated file");
  }
  std::uint8_t u8() {
    need(1);
    return buf_[pos_++];
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(buf_[pos_ + std::size_t(i)]) << (8 * i);
    pos_ += 4;
    return v;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  std::string str(std::size_t max_len = 1u << 20) {
    std::uint32_t n = u32();
    if (n > max_len) throw FormatError(what_ + ": string length out of range");
    need(n);
    std::string s(reinterpret_cast<const char*>(buf_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  void bytes(void* out, std::size_t n) {
    need(n);
    std::memcpy(out, buf_.data() + pos_, n);
    pos_ += n;
  }
  std::size_t pos() const { return pos_; }
  std::size_t remaining() const { return end_ - pos_; }

 private:
  const std::vector<std::uint8_t>& buf_;
  std::string what_;
  std::size_t end_;
  std::size_t pos_ = 0;
};

/// Checks magic, version and the trailing CRC32 over everything before it.
/// Returns the payload length (file size minus the CRC).
inline std::size_t verify_container(const std::vector<std::uint8_t>& buf, std::string_view magic,
                                    std::uint8_t version, const std::string& what) {
  if (buf.size() < magic.size() + 1 + 4) {
    if (buf.size() >= magic.size() && std::memcmp(buf.data(), magic.data(), magic.size()) != 0)
      throw FormatError(what + ": bad magic");
    throw FormatError(what + ": truncated file");
  }
  if (std::memcmp(buf.data(), magic.data(), magic.size()) != 0) throw FormatError(what + ": bad magic");
  if (buf[magic.size()] != version)
    throw FormatError(what + ": unsupported version " + std::to_string(buf[magic.size()]));
  const std::size_t payload = buf.size() - 4;
  std::uint32_t stored = 0;
  for (int i = 0; i < 4; ++i) stored |= std::uint32_t(buf[payload + std::size_t(i)]) << (8 * i);
  if (stored != crc32(buf.data(), payload)) throw FormatError(what + ": CRC mismatch (corrupt or truncated file)");
  return payload;
}

inline std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::string& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
  if (!out) throw DataError("write failed for " + path);
}

}  // namespace io

// ---------------------------------------------------------------------------
// Model fingerprint

using Fingerprint = std::array<std::uint8_t, 32>;

/// SHA-256 over the persisted (float32) values of the model's own tensors,
/// in name order. Mixture-network tensors are not part of it, so fitting a
/// mixture head keeps existing indexes valid.
inline Fingerprint model_fingerprint(Model& model) {
  std::map<std::string, Tensor*> sorted;
  for (auto& [name, t] : model.named_state()) sorted.emplace(name, t);
  io::Writer w;
  for (const auto& [name, t] : sorted) {
    w.str(name);
    w.u32(std::uint32_t(t->rank()));
    for (auto d : t->shape()) w.u32(std::uint32_t(d));
    for (double v : t->values()) w.f32(float(v));
  }
  Fingerprint fp{};
  unsigned int len = 0;
  if (EVP_Digest(w.buffer().data(), w.buffer().size(), fp.data(), &len, EVP_sha256(), nullptr) != 1 || len != 32)
    throw Error("SHA-256 computation failed");
  return fp;
}

inline std::string fingerprint_hex(const Fingerprint& fp) {
  static const char* digits = "0123456789abcdef";
  std::string s;
  for (auto b : fp) {
    s.push_back(digits[b >> 4]);
    s.push_back(digits[b & 15]);
  }
  return s;
}

// ---------------------------------------------------------------------------
// PMRK model container

inline constexpr std::string_view kModelMagic = "PMRK";
inline constexpr std::uint8_t kModelVersion = 1;

/// A model together with its optional mixture head and the metadata needed
/// to serve it (aux-input standardization, reference inputs, split seed).
struct ModelBundle {
  std::unique_ptr<Model> model;
  std::unique_ptr<MDNModel> mdn;
  nlohmann::json metadata = nlohmann::json::object();
};

namespace detail {

inline void write_tensor(io::Writer& w, const std::string& name, const Tensor& t) {
  w.str(name);
  w.u32(std::uint32_t(t.rank()));
  for (auto d : t.shape()) w.u32(std::uint32_t(d));
  for (double v : t.values()) w.f32(float(v));
}

}  // namespace detail

/// Layout: magic "PMRK", version byte, u32 config length + UTF-8 JSON,
/// u32 tensor count, per tensor (u32 name length, name, u32 rank, u32 dims,
/// float32 data), trailing CRC32 over all preceding bytes. All integers and
/// floats little-endian.
inline std::vector<std::uint8_t> serialize_model(Model& model, MDNModel* mdn = nullptr,
                                                 const nlohmann::json& metadata = nlohmann::json::object()) {
  nlohmann::json doc;
  doc["model"] = to_json(model.config());
  doc["metadata"] = metadata;
  if (mdn) doc["mdn"] = {{"components", mdn->components()}, {"hidden", mdn->hidden()}};
  const std::string config = doc.dump();

  auto state = model.named_state();
  std::vector<std::pair<std::string, Tensor*>> mdn_state;
  if (mdn) mdn_state = mdn->named_state();

  io::Writer w;
  w.bytes(kModelMagic.data(), kModelMagic.size());
  w.u8(kModelVersion);
  w.str(config);
  w.u32(std::uint32_t(state.size() + mdn_state.size()));
  for (auto& [name, t] : state) detail::write_tensor(w, name, *t);
  for (auto& [name, t] : mdn_state) detail::write_tensor(w, name, *t);
  w.crc();
  return std::move(w.buffer());
}

inline ModelBundle deserialize_model(const std::vector<std::uint8_t>& bytes) {
  const std::string what = "model file";
  const std::size_t payload = io::verify_container(bytes, kModelMagic, kModelVersion, what);
  io::Reader r(bytes, what, payload);
  std::uint8_t skip[5];
  r.bytes(skip, 5);
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(r.str(1u << 24));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(what + ": bad config JSON: " + e.what());
  }
  if (!doc.contains("model")) throw FormatError(what + ": config lacks a model section");

  ModelBundle b;
  b.model = std::make_unique<Model>(model_config_from_json(doc.at("model")), false);
  if (doc.contains("metadata")) b.metadata = doc.at("metadata");
  if (doc.contains("mdn")) {
    const auto& m = doc.at("mdn");
    b.mdn = std::make_unique<MDNModel>(m.at("components").get<std::size_t>(), m.at("hidden").get<std::size_t>(), 0);
  }

  std::map<std::string, Tensor*> targets;
  for (auto& [name, t] : b.model->named_state()) targets.emplace(name, t);
  if (b.mdn)
    for (auto& [name, t] : b.mdn->named_state()) targets.emplace(name, t);

  const std::uint32_t count = r.u32();
  if (count != targets.size())
    throw FormatError(what + ": expected " + std::to_string(targets.size()) + " tensors, found " +
                      std::to_string(count));
  std::map<std::string, bool> seen;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string name = r.str(4096);
    auto it = targets.find(name);
    if (it == targets.end())
      throw FormatError(what + " (version " + std::to_string(kModelVersion) + "): unknown tensor '" + name + "'");
    if (seen[name]) throw FormatError(what + ": duplicate tensor '" + name + "'");
    seen[name] = true;
    Tensor& t = *it->second;
    const std::uint32_t rank = r.u32();
    if (rank != t.rank()) throw FormatError(what + ": rank mismatch for '" + name + "'");
    for (std::size_t d = 0; d < rank; ++d)
      if (r.u32() != t.dim(d)) throw FormatError(what + ": shape mismatch for '" + name + "'");
    r.need(4 * t.size());
    for (std::size_t k = 0; k < t.size(); ++k) t[k] = double(r.f32());
  }
  if (r.pos() != payload) throw FormatError(what + ": trailing bytes before checksum");
  return b;
}

inline void save_model(const std::string& path, Model& model, MDNModel* mdn = nullptr,
                       const nlohmann::json& metadata = nlohmann::json::object()) {
  io::write_file(path, serialize_model(model, mdn, metadata));
}

inline ModelBundle load_model(const std::string& path) { return deserialize_model(io::read_file(path)); }

// Metadata helpers: what the service and CLI need beyond the weights.

inline nlohmann::json dataset_metadata(const SplitDataset& ds) {
  return {{"split_seed", ds.seed},
          {"aux_mean", ds.standardization.mean},
          {"aux_scale", ds.standardization.scale},
          {"reference_aux_in", ds.reference_aux_in}};
}

inline Standardization standardization_from_metadata(const nlohmann::json& meta) {
  Standardization st;
  try {
    st.mean = meta.at("aux_mean").get<AuxInput>();
    st.scale = meta.at("aux_scale").get<AuxInput>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("model metadata lacks aux-input standardization: ") + e.what());
  }
  return st;
}

}  // namespace platemark
