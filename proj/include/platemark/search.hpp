// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "platemark/persistence.hpp"
#include "platemark/training.hpp"

namespace platemark {

struct Neighbor {
  std::string plate;
  double distance;

  bool operator==(const Neighbor&) const = default;
};

struct QueryResult {
  std::vector<Neighbor> neighbors;
  bool truncated = false;  // fewer than k candidates were available
};

/// Unit feature vectors of a plate universe, searched by exact linear scan.
/// Vectors are stored as float32 (the file representation); the unit
/// vectors used for distances are derived from those floats in double, so a
/// reloaded index answers queries bit-identically.
class LatentIndex {
 public:
  LatentIndex() = default;

  /// `vectors` is row-major [plates.size(), dim].
  LatentIndex(const Fingerprint& fingerprint, std::size_t dim, std::vector<std::string> plates,
              std::vector<float> vectors)
      : fingerprint_(fingerprint), dim_(dim), plates_(std::move(plates)), stored_(std::move(vectors)) {
    if (dim_ == 0) throw ShapeError("index: feature dimension must be positive");
    if (stored_.size() != plates_.size() * dim_) throw ShapeError("index: vector data does not match dimension");
    unit_.resize(stored_.size());
    for (std::size_t i = 0; i < plates_.size(); ++i) {
      if (!position_.emplace(plates_[i], i).second) throw DataError("index: duplicate plate " + plates_[i]);
      normalize(&stored_[i * dim_], &unit_[i * dim_]);
    }
  }

  const Fingerprint& fingerprint() const { return fingerprint_; }
  std::size_t dim() const { return dim_; }
  std::size_t size() const { return plates_.size(); }
  const std::vector<std::string>& plates() const { return plates_; }
  const std::vector<float>& stored_vectors() const { return stored_; }
  std::span<const double> unit_vector(std::size_t i) const { return {unit_.data() + i * dim_, dim_}; }
  bool contains(const std::string& plate) const { return position_.count(plate) != 0; }

  /// Unit vector in the index's convention (rounded through float first).
  std::vector<double> unit_from_features(std::span<const double> features) const {
    if (features.size() != dim_)
      throw ShapeError("index: query dimension " + std::to_string(features.size()) + " != " + std::to_string(dim_));
    std::vector<float> f(features.begin(), features.end());
    std::vector<double> u(dim_);
    normalize(f.data(), u.data());
    return u;
  }

  /// k nearest entries by cosine distance, ascending, ties by plate string;
  /// `exclude` (the query plate) never appears in the results.
  QueryResult query(std::span<const double> unit_query, const std::string& exclude, std::size_t k) const {
    if (k < 1) throw ConfigError("query: k must be >= 1");
    if (unit_query.size() != dim_) throw ShapeError("query: dimension mismatch");
    std::vector<Neighbor> all;
    all.reserve(plates_.size());
    for (std::size_t i = 0; i < plates_.size(); ++i) {
      if (plates_[i] == exclude) continue;
      double dot = 0.0;
      const double* u = &unit_[i * dim_];
      for (std::size_t d = 0; d < dim_; ++d) dot += u[d] * unit_query[d];
      all.push_back({plates_[i], 1.0 - dot});
    }
    auto less = [](const Neighbor& a, const Neighbor& b) {
      return a.distance < b.distance || (a.distance == b.distance && a.plate < b.plate);
    };
    QueryResult r;
    r.truncated = all.size() < k;
    const std::size_t take = std::min(k, all.size());
    std::partial_sort(all.begin(), all.begin() + long(take), all.end(), less);
    all.resize(take);
    r.neighbors = std::move(all);
    return r;
  }

  /// Adds the entries of `other`, which must come from the same model.
  void append(const LatentIndex& other) {
    if (other.dim_ != dim_) throw ShapeError("index: dimension mismatch with existing index");
    if (other.fingerprint_ != fingerprint_) throw DataError("index: model fingerprint mismatch");
    std::vector<std::string> plates = plates_;
    std::vector<float> stored = stored_;
    plates.insert(plates.end(), other.plates_.begin(), other.plates_.end());
    stored.insert(stored.end(), other.stored_.begin(), other.stored_.end());
    *this = LatentIndex(fingerprint_, dim_, std::move(plates), std::move(stored));
  }

 private:
  template <typename T>
  void normalize(const T* in, double* out) const {
    double norm = 0.0;
    for (std::size_t d = 0; d < dim_; ++d) norm += double(in[d]) * double(in[d]);
    norm = std::sqrt(norm);
    if (!(norm > 0.0) || !std::isfinite(norm)) throw NumericError("index: zero or non-finite feature vector");
    for (std::size_t d = 0; d < dim_; ++d) out[d] = double(in[d]) / norm;
  }

  Fingerprint fingerprint_{};
  std::size_t dim_ = 0;
  std::vector<std::string> plates_;
  std::vector<float> stored_;
  std::vector<double> unit_;
  std::map<std::string, std::size_t> position_;
};

/// Eval-mode feature vectors [n, F] for a list of plates.
inline Tensor plate_features(Model& model, std::span<const Plate> plates, std::size_t chunk = 1024) {
  const std::size_t F = model.feature_dim();
  Tensor out({plates.size(), F});
  for (std::size_t start = 0; start < plates.size(); start += chunk) {
    const std::size_t end = std::min(plates.size(), start + chunk);
    Tensor tokens({end - start, kPlateLength});
    for (std::size_t i = start; i < end; ++i) {
      auto e = encode_plate(plates[i]);
      for (std::size_t t = 0; t < kPlateLength; ++t) tokens[(i - start) * kPlateLength + t] = e[t];
    }
    Tensor f = model.features(tokens);
    std::copy(f.values().begin(), f.values().end(), out.data() + start * F);
  }
  return out;
}

inline LatentIndex build_index(Model& model, std::span<const Plate> plates) {
  Tensor f = plate_features(model, plates);
  std::vector<std::string> names;
  names.reserve(plates.size());
  for (const auto& p : plates) names.push_back(p.canonical());
  std::vector<float> stored(f.values().begin(), f.values().end());
  return LatentIndex(model_fingerprint(model), model.feature_dim(), std::move(names), std::move(stored));
}

inline QueryResult query(Model& model, const LatentIndex& index, const Plate& plate, std::size_t k) {
  const Plate one[1] = {plate};
  Tensor f = plate_features(model, one);
  return index.query(index.unit_from_features(f.values()), plate.canonical(), k);
}

// ---------------------------------------------------------------------------
// PMIX index file

inline constexpr std::string_view kIndexMagic = "PMIX";
inline constexpr std::uint8_t kIndexVersion = 1;

/// Layout: magic "PMIX", version byte, 32-byte model fingerprint, u32 entry
/// count, u32 feature dimension, per entry (u32 length + UTF-8 plate,
/// dimension float32 values), trailing CRC32. Little-endian throughout.
inline std::vector<std::uint8_t> serialize_index(const LatentIndex& index) {
  io::Writer w;
  w.bytes(kIndexMagic.data(), kIndexMagic.size());
  w.u8(kIndexVersion);
  w.bytes(index.fingerprint().data(), index.fingerprint().size());
  w.u32(std::uint32_t(index.size()));
  w.u32(std::uint32_t(index.dim()));
  const auto& v = index.stored_vectors();
  for (std::size_t i = 0; i < index.size(); ++i) {
    w.str(index.plates()[i]);
    for (std::size_t d = 0; d < index.dim(); ++d) w.f32(v[i * index.dim() + d]);
  }
  w.crc();
  return std::move(w.buffer());
}

inline LatentIndex deserialize_index(const std::vector<std::uint8_t>& bytes) {
  const std::string what = "index file";
  const std::size_t payload = io::verify_container(bytes, kIndexMagic, kIndexVersion, what);
  io::Reader r(bytes, what, payload);
  std::uint8_t skip[5];
  r.bytes(skip, 5);
  Fingerprint fp{};
  r.bytes(fp.data(), fp.size());
  const std::uint32_t count = r.u32();
  const std::uint32_t dim = r.u32();
  if (dim == 0) throw FormatError(what + ": zero feature dimension");
  if (std::uint64_t(count) * (4 + 4ull * dim) > r.remaining()) throw FormatError(what + ": truncated file");
  std::vector<std::string> plates;
  std::vector<float> vectors;
  plates.reserve(count);
  vectors.reserve(std::size_t(count) * dim);
  for (std::uint32_t i = 0; i < count; ++i) {
    plates.push_back(r.str(64));
    for (std::uint32_t d = 0; d < dim; ++d) vectors.push_back(r.f32());
  }
  if (r.pos() != payload) throw FormatError(what + ": trailing bytes before checksum");
  return LatentIndex(fp, dim, std::move(plates), std::move(vectors));
}

inline void save_index(const std::string& path, const LatentIndex& index) {
  io::write_file(path, serialize_index(index));
}
inline LatentIndex load_index(const std::string& path) { return deserialize_index(io::read_file(path)); }

// ---------------------------------------------------------------------------
// Run-to-run consistency

/// Fraction of the top-k results shared by every run: |intersection| / k.
inline double consistency(const std::vector<std::vector<std::string>>& runs) {
  if (runs.size() < 2) throw ConfigError("consistency needs at least two runs");
  const std::size_t k = runs[0].size();
  if (k == 0) throw ConfigError("consistency needs k >= 1");
  for (const auto& r : runs)
    if (r.size() != k) throw ConfigError("consistency: runs have unequal k");
  std::set<std::string> common(runs[0].begin(), runs[0].end());
  for (std::size_t i = 1; i < runs.size(); ++i) {
    std::set<std::string> next;
    for (const auto& p : runs[i])
      if (common.count(p)) next.insert(p);
    common = std::move(next);
  }
  return double(common.size()) / double(k);
}

struct ConsistencyReport {
  std::vector<std::string> queries;
  std::vector<double> per_query;
  double median = 0.0;
  double mean = 0.0;
  std::vector<RunRecord> runs;
};

inline double median_of(std::vector<double> v) {
  if (v.empty()) throw DataError("median of an empty list");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

struct ConsistencyOptions {
  std::size_t runs = 3;
  std::size_t n_queries = 1000;
  std::size_t k = 10;
  bool with_aux = true;
  std::uint64_t seed = 0;
};

/// Distinct plates of every split, in canonical order.
inline std::vector<Plate> plate_universe(const SplitDataset& ds) {
  std::map<std::string, Plate> unique;
  for (const auto* split : {&ds.train, &ds.valid, &ds.test})
    for (const auto& e : *split) unique.emplace(e.plate.canonical(), e.plate);
  std::vector<Plate> out;
  for (auto& [name, p] : unique) out.push_back(p);
  return out;
}

/// Random plates absent from the training split, drawn with the synthetic
/// plate distribution.
inline std::vector<Plate> sample_query_plates(const SplitDataset& ds, std::size_t n, std::uint64_t seed) {
  std::set<std::string> seen;
  for (const auto& e : ds.train) seen.insert(e.plate.canonical());
  PlateSampler sampler;
  Rng rng(derive_seed(seed, 0x9e7));
  std::vector<Plate> out;
  std::size_t attempts = 0;
  while (out.size() < n) {
    if (++attempts > 1000 * (n + 10)) throw DataError("cannot draw enough plates outside the training split");
    Plate p = sampler(rng);
    if (seen.insert(p.canonical()).second) out.push_back(p);
  }
  return out;
}

/// Trains `runs` models that differ only in their seeds, indexes the shared
/// plate universe with each and measures per-query consistency of the top-k
/// results. Without auxiliary targets the auxiliary head keeps its shape
/// but regresses the standardized price instead.
inline ConsistencyReport consistency_experiment(ModelConfig model_cfg, const SplitDataset& ds,
                                                const TrainConfig& train_cfg, const ConsistencyOptions& opt,
                                                bool search_ranges = true) {
  if (opt.runs < 2) throw ConfigError("consistency experiment needs at least two runs");
  model_cfg.aux_targets = opt.with_aux ? AuxTargets::Features : AuxTargets::DuplicatedPrice;
  const std::vector<Plate> universe = plate_universe(ds);
  const std::vector<Plate> queries = sample_query_plates(ds, opt.n_queries, opt.seed);

  ConsistencyReport report;
  for (const auto& q : queries) report.queries.push_back(q.canonical());
  std::vector<std::vector<std::vector<std::string>>> results(queries.size());
  for (std::size_t run = 0; run < opt.runs; ++run) {
    const std::uint64_t seed = derive_seed(opt.seed, 0xc0de00 + run);
    ModelConfig mc = model_cfg;
    mc.seed = seed;
    Model model(mc, search_ranges);
    TrainConfig tc = train_cfg;
    tc.seed = seed;
    report.runs.push_back(train(model, ds, tc));
    LatentIndex index = build_index(model, universe);
    Tensor qf = plate_features(model, queries);
    for (std::size_t i = 0; i < queries.size(); ++i) {
      std::span<const double> f(qf.data() + i * qf.cols(), qf.cols());
      auto r = index.query(index.unit_from_features(f), queries[i].canonical(), opt.k);
      std::vector<std::string> top;
      for (const auto& nb : r.neighbors) top.push_back(nb.plate);
      results[i].push_back(std::move(top));
    }
  }
  for (const auto& per_run : results) report.per_query.push_back(consistency(per_run));
  report.median = median_of(report.per_query);
  double s = 0.0;
  for (double v : report.per_query) s += v;
  report.mean = s / double(report.per_query.size());
  return report;
}

}  // namespace platemark
