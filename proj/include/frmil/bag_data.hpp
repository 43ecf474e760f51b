#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "frmil/tensor.hpp"

namespace frmil {

namespace fs = std::filesystem;

/// One slide: its instance features [n x D], label, and validity mask.
struct InstanceBag {
  std::string id;
  int label = 0;
  Tensor<float> features;
  Mask mask;

  std::size_t rows() const { return features.rows(); }
  std::size_t real_count() const { return count_true(mask); }
};

struct ManifestEntry {
  std::string id;
  int label = 0;
  std::size_t n = 0;
  std::string path;
};

struct BagStore {
  fs::path root;
  std::size_t dim = 0;
  std::vector<ManifestEntry> manifest;
  std::vector<InstanceBag> bags;

  const InstanceBag& at(const std::string& id) const {
    auto it = index_.find(id);
    if (it == index_.end()) throw DataError("bag '" + id + "' is not in the store");
    return bags[it->second];
  }
  bool contains(const std::string& id) const { return index_.count(id) != 0; }

  void reindex() {
    index_.clear();
    for (std::size_t i = 0; i < bags.size(); ++i) {
      if (!index_.emplace(bags[i].id, i).second) throw DataError("duplicate bag id '" + bags[i].id + "'");
    }
  }

 private:
  std::map<std::string, std::size_t> index_;
};

namespace detail {

inline void write_f32_le(std::ostream& os, const std::vector<float>& values) {
  std::vector<char> bytes(values.size() * 4);
  for (std::size_t i = 0; i < values.size(); ++i) {
    auto bits = std::bit_cast<std::uint32_t>(values[i]);
    for (int b = 0; b < 4; ++b) bytes[i * 4 + b] = static_cast<char>((bits >> (8 * b)) & 0xffu);
  }
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

inline std::vector<float> decode_f32_le(const char* bytes, std::size_t count) {
  std::vector<float> out(count);
  for (std::size_t i = 0; i < count; ++i) {
    std::uint32_t bits = 0;
    for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[i * 4 + b])) << (8 * b);
    out[i] = std::bit_cast<float>(bits);
  }
  return out;
}

inline std::vector<char> read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return std::vector<char>(std::istreambuf_iterator<char>(in), {});
}

}  // namespace detail

/// Writes `manifest.json` plus one raw little-endian f32 file per bag under
/// `root/features/`. Only real (unmasked) rows are stored.
inline void write_store(const fs::path& root, std::size_t dim, const std::vector<InstanceBag>& bags) {
  std::error_code ec;
  fs::create_directories(root / "features", ec);
  if (ec) throw IoError("cannot create " + (root / "features").string() + ": " + ec.message());
  nlohmann::ordered_json manifest;
  manifest["dim"] = dim;
  manifest["bags"] = nlohmann::ordered_json::array();
  for (const auto& bag : bags) {
    if (bag.features.cols() != dim) {
      throw DataError("bag '" + bag.id + "' has dim " + std::to_string(bag.features.cols()) + ", store dim is " +
                      std::to_string(dim));
    }
    std::vector<float> real;
    real.reserve(bag.features.numel());
    for (std::size_t r = 0; r < bag.rows(); ++r) {
      if (!bag.mask[r]) continue;
      real.insert(real.end(), bag.features.data.begin() + static_cast<std::ptrdiff_t>(r * dim),
                  bag.features.data.begin() + static_cast<std::ptrdiff_t>((r + 1) * dim));
    }
    const std::string rel = "features/" + bag.id + ".f32";
    std::ofstream out(root / rel, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + (root / rel).string());
    detail::write_f32_le(out, real);
    if (!out) throw IoError("short write to " + (root / rel).string());
    manifest["bags"].push_back({{"id", bag.id}, {"label", bag.label}, {"n", bag.real_count()}, {"path", rel}});
  }
  std::ofstream out(root / "manifest.json", std::ios::trunc);
  if (!out) throw IoError("cannot write " + (root / "manifest.json").string());
  out << manifest.dump(2) << '\n';
}

/// Loads and validates a store: every file must exist, hold exactly n*D*4
/// bytes, and contain only finite values.
inline BagStore read_store(const fs::path& root) {
  const fs::path manifest_path = root / "manifest.json";
  if (!fs::exists(manifest_path)) {
    throw StoreError(StoreError::Kind::MissingFile, "missing manifest " + manifest_path.string());
  }
  nlohmann::json manifest;
  try {
    const auto text = detail::read_file(manifest_path);
    manifest = nlohmann::json::parse(text.begin(), text.end());
  } catch (const nlohmann::json::exception& e) {
    throw StoreError(StoreError::Kind::BadManifest, "cannot parse " + manifest_path.string() + ": " + e.what());
  }

  BagStore store;
  store.root = root;
  try {
    store.dim = manifest.at("dim").get<std::size_t>();
    for (const auto& b : manifest.at("bags")) {
      ManifestEntry e{b.at("id").get<std::string>(), b.at("label").get<int>(), b.at("n").get<std::size_t>(),
                      b.at("path").get<std::string>()};
      if (e.label != 0 && e.label != 1) throw DataError("bag '" + e.id + "' has label " + std::to_string(e.label));
      if (e.n == 0) throw DataError("bag '" + e.id + "' declares zero instances");
      store.manifest.push_back(std::move(e));
    }
  } catch (const nlohmann::json::exception& e) {
    throw StoreError(StoreError::Kind::BadManifest, "malformed manifest " + manifest_path.string() + ": " + e.what());
  }
  if (store.dim == 0 && !store.manifest.empty()) throw DataError("store dim must be positive");

  for (const auto& e : store.manifest) {
    const fs::path file = root / e.path;
    if (!fs::exists(file)) {
      throw StoreError(StoreError::Kind::MissingFile, "bag '" + e.id + "': missing feature file " + file.string());
    }
    const auto bytes = detail::read_file(file);
    const std::size_t expected = e.n * store.dim * 4;
    if (bytes.size() != expected) {
      throw StoreError(StoreError::Kind::SizeMismatch, "bag '" + e.id + "': feature file has " +
                                                           std::to_string(bytes.size()) + " bytes, expected " +
                                                           std::to_string(expected));
    }
    InstanceBag bag;
    bag.id = e.id;
    bag.label = e.label;
    bag.features = Tensor<float>({e.n, store.dim}, detail::decode_f32_le(bytes.data(), e.n * store.dim));
    if (!bag.features.all_finite()) {
      throw StoreError(StoreError::Kind::NonFinite, "bag '" + e.id + "': non-finite feature value");
    }
    bag.mask.assign(e.n, true);
    store.bags.push_back(std::move(bag));
  }
  store.reindex();
  return store;
}

// ---------------------------------------------------------------------------
// Synthetic bags

struct SyntheticSpec {
  std::size_t n_bags = 200;
  std::size_t dim = 64;
  std::size_t bag_min = 32;
  std::size_t bag_max = 128;
  double witness_rate = 0.1;
  double pos_frac = 0.5;
  double separation = 1.0;
  double noise = 1.0;
  std::uint64_t seed = 0;

  void validate() const {
    if (n_bags == 0) throw ConfigError("bag count must be positive");
    if (dim == 0) throw ConfigError("dim must be positive");
    if (bag_min == 0 || bag_max < bag_min) throw ConfigError("bag size range must satisfy 1 <= min <= max");
    if (!(witness_rate > 0.0 && witness_rate <= 1.0)) throw ConfigError("witness rate must lie in (0, 1]");
    if (!(pos_frac > 0.0 && pos_frac < 1.0)) throw ConfigError("positive fraction must lie in (0, 1)");
    if (!(separation >= 0.0) || !std::isfinite(separation)) throw ConfigError("class separation must be >= 0");
    if (!(noise > 0.0) || !std::isfinite(noise)) throw ConfigError("noise scale must be > 0");
  }

  std::size_t positive_bags() const {
    return static_cast<std::size_t>(std::llround(pos_frac * static_cast<double>(n_bags)));
  }
  std::size_t witnesses(std::size_t n) const {
    return std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(witness_rate * static_cast<double>(n))));
  }
};

/// The unit direction along which witness instances are shifted.
inline std::vector<double> witness_direction(std::size_t dim, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> u(dim);
  double norm = 0.0;
  do {
    norm = 0.0;
    for (auto& v : u) {
      v = normal(rng);
      norm += v * v;
    }
  } while (norm == 0.0);
  norm = std::sqrt(norm);
  for (auto& v : u) v /= norm;
  return u;
}

/// Negative instances ~ N(0, noise^2 I); witnesses ~ N(separation * u, noise^2 I).
/// Positive bags hold max(1, round(witness_rate * n)) witnesses at random rows.
inline std::vector<InstanceBag> generate_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(spec.seed);
  const auto u = witness_direction(spec.dim, rng);

  std::vector<int> labels(spec.n_bags, 0);
  std::fill_n(labels.begin(), spec.positive_bags(), 1);
  std::shuffle(labels.begin(), labels.end(), rng);

  std::uniform_int_distribution<std::size_t> size_dist(spec.bag_min, spec.bag_max);
  std::normal_distribution<double> normal(0.0, spec.noise);
  const int width = std::max(4, static_cast<int>(std::to_string(spec.n_bags - 1).size()));

  std::vector<InstanceBag> bags;
  bags.reserve(spec.n_bags);
  for (std::size_t b = 0; b < spec.n_bags; ++b) {
    InstanceBag bag;
    std::string num = std::to_string(b);
    bag.id = "bag_" + std::string(static_cast<std::size_t>(width) - std::min(num.size(), std::size_t(width)), '0') + num;
    bag.label = labels[b];
    const std::size_t n = size_dist(rng);
    bag.features = Tensor<float>({n, spec.dim});
    for (auto& v : bag.features.data) v = static_cast<float>(normal(rng));
    if (bag.label) {
      std::vector<std::size_t> rows(n);
      std::iota(rows.begin(), rows.end(), std::size_t{0});
      std::shuffle(rows.begin(), rows.end(), rng);
      for (std::size_t k = 0; k < spec.witnesses(n); ++k)
        for (std::size_t j = 0; j < spec.dim; ++j)
          bag.features(rows[k], j) += static_cast<float>(spec.separation * u[j]);
    }
    bag.mask.assign(n, true);
    bags.push_back(std::move(bag));
  }
  return bags;
}

// ---------------------------------------------------------------------------
// Splits and sampling

struct Split {
  std::vector<std::string> train, val, test;

  const std::vector<std::string>& named(const std::string& name) const {
    if (name == "train") return train;
    if (name == "val") return val;
    if (name == "test") return test;
    throw ConfigError("unknown split '" + name + "' (expected train, val or test)");
  }
};

struct LabeledId {
  std::string id;
  int label = 0;
};

inline std::vector<LabeledId> labeled_ids(const BagStore& store, const std::vector<std::string>& ids) {
  std::vector<LabeledId> out;
  out.reserve(ids.size());
  for (const auto& id : ids) out.push_back({id, store.at(id).label});
  return out;
}

/// Stratified split: each class is shuffled and cut by the fractions, so
/// every split's positive share tracks the global one.
inline Split split_bags(const std::vector<LabeledId>& bags, std::array<double, 3> fractions, std::uint64_t seed) {
  for (double f : fractions)
    if (!(f >= 0.0)) throw ConfigError("split fractions must be nonnegative");
  if (std::abs(fractions[0] + fractions[1] + fractions[2] - 1.0) > 1e-9) {
    throw ConfigError("split fractions must sum to 1");
  }
  std::mt19937_64 rng(seed);
  Split out;
  for (int label : {0, 1}) {
    std::vector<std::string> ids;
    for (const auto& b : bags)
      if (b.label == label) ids.push_back(b.id);
    std::shuffle(ids.begin(), ids.end(), rng);
    const double n = static_cast<double>(ids.size());
    auto n_train = static_cast<std::size_t>(std::llround(fractions[0] * n));
    auto n_val = static_cast<std::size_t>(std::llround(fractions[1] * n));
    n_train = std::min(n_train, ids.size());
    n_val = std::min(n_val, ids.size() - n_train);
    const std::size_t n_test = ids.size() - n_train - n_val;
    const std::array<std::size_t, 3> counts{n_train, n_val, n_test};
    const char* names[] = {"train", "val", "test"};
    for (int s = 0; s < 3; ++s) {
      if (fractions[s] > 0.0 && counts[s] == 0) {
        throw DataError(std::string("class ") + std::to_string(label) + " has no bag for the " + names[s] + " split");
      }
    }
    auto begin = ids.begin();
    out.train.insert(out.train.end(), begin, begin + static_cast<std::ptrdiff_t>(n_train));
    begin += static_cast<std::ptrdiff_t>(n_train);
    out.val.insert(out.val.end(), begin, begin + static_cast<std::ptrdiff_t>(n_val));
    begin += static_cast<std::ptrdiff_t>(n_val);
    out.test.insert(out.test.end(), begin, ids.end());
  }
  for (auto* part : {&out.train, &out.val, &out.test}) std::sort(part->begin(), part->end());
  return out;
}

inline void write_split(const fs::path& path, const Split& split) {
  nlohmann::ordered_json j{{"train", split.train}, {"val", split.val}, {"test", split.test}};
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

inline Split read_split(const fs::path& path) {
  if (!fs::exists(path)) throw IoError("missing split file " + path.string());
  try {
    const auto text = detail::read_file(path);
    auto j = nlohmann::json::parse(text.begin(), text.end());
    Split s;
    s.train = j.at("train").get<std::vector<std::string>>();
    s.val = j.at("val").get<std::vector<std::string>>();
    s.test = j.at("test").get<std::vector<std::string>>();
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed split file " + path.string() + ": " + e.what());
  }
}

/// One epoch of (positive, negative) pairs. The epoch is as long as the
/// larger class, whose bags each appear once; the smaller class cycles,
/// reshuffled at the start of every cycle.
inline std::vector<std::pair<std::string, std::string>> balanced_batches(const std::vector<LabeledId>& bags,
                                                                         std::uint64_t seed, std::uint64_t epoch) {
  std::vector<std::string> pos, neg;
  for (const auto& b : bags) (b.label ? pos : neg).push_back(b.id);
  if (pos.empty() || neg.empty()) {
    throw DataError(std::string("balanced sampling needs both classes; no ") + (pos.empty() ? "positive" : "negative") +
                    " bag in the training set");
  }
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(epoch), static_cast<std::uint32_t>(epoch >> 32), 0x6261u};
  std::mt19937_64 rng(seq);
  const std::size_t length = std::max(pos.size(), neg.size());
  auto stream = [&](std::vector<std::string> ids) {
    std::vector<std::string> out;
    out.reserve(length);
    while (out.size() < length) {
      std::shuffle(ids.begin(), ids.end(), rng);
      for (const auto& id : ids) {
        if (out.size() == length) break;
        out.push_back(id);
      }
    }
    return out;
  };
  const auto p = stream(pos);
  const auto n = stream(neg);
  std::vector<std::pair<std::string, std::string>> batches;
  batches.reserve(length);
  for (std::size_t i = 0; i < length; ++i) batches.emplace_back(p[i], n[i]);
  return batches;
}

/// Appends zero rows up to `target` with mask false on the padding.
inline InstanceBag pad_to(const InstanceBag& bag, std::size_t target) {
  if (target < bag.rows()) {
    throw DataError("pad_to: bag '" + bag.id + "' has " + std::to_string(bag.rows()) + " rows, target " +
                    std::to_string(target));
  }
  InstanceBag out = bag;
  if (target == bag.rows()) return out;
  out.features = Tensor<float>({target, bag.features.cols()});
  std::copy(bag.features.data.begin(), bag.features.data.end(), out.features.data.begin());
  out.mask.resize(target, false);
  return out;
}

}  // namespace frmil
