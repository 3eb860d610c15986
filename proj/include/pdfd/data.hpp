#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "pdfd/errors.hpp"
#include "pdfd/random.hpp"
#include "pdfd/tensor.hpp"

namespace pdfd {

struct MixtureSpec {
  std::size_t num_classes = 0;
  std::size_t input_dim = 0;
  std::vector<Tensor> means;        // one length-input_dim vector per class
  std::vector<double> stds;         // isotropic, per class
  std::size_t samples_per_class = 0;
  std::uint64_t seed = 0;

  void validate() const {
    if (num_classes < 2) throw ConfigError("mixture needs at least 2 classes");
    if (input_dim == 0) throw ConfigError("mixture input_dim must be positive");
    if (samples_per_class == 0) throw ConfigError("mixture samples_per_class must be positive");
    if (means.size() != num_classes || stds.size() != num_classes) {
      throw ConfigError("mixture means/stds must have one entry per class");
    }
    for (std::size_t c = 0; c < num_classes; ++c) {
      if (means[c].numel() != input_dim) {
        throw ConfigError("mixture mean " + std::to_string(c) + " has wrong dimension");
      }
      if (!(stds[c] > 0.0)) throw ConfigError("mixture std must be > 0");
    }
    for (std::size_t a = 0; a < num_classes; ++a) {
      for (std::size_t b = a + 1; b < num_classes; ++b) {
        if (approx_equal(means[a], means[b], 0.0)) {
          throw ConfigError("mixture means must be pairwise distinct");
        }
      }
    }
  }
};

// Rows of x are instances; instance id = row index. Labels are ground truth
// and may be hidden from training by the split.
struct Dataset {
  std::size_t input_dim = 0;
  std::size_t num_classes = 0;
  Tensor x;                 // (N, input_dim)
  std::vector<int> labels;  // length N, values in [0, num_classes)

  std::size_t size() const { return labels.size(); }

  void validate() const {
    if (x.rank() != 2 || x.dim(1) != input_dim || x.dim(0) != labels.size()) {
      throw DataError("dataset tensor shape disagrees with labels");
    }
    for (const int y : labels) {
      if (y < 0 || static_cast<std::size_t>(y) >= num_classes) {
        throw DataError("dataset label out of range");
      }
    }
  }
};

// Default toy task: well separated isotropic Gaussians. Means are random unit
// directions scaled to mean_radius and re-sampled until the pairwise distance
// is at least min_separation.
inline MixtureSpec make_toy_mixture_spec(std::uint64_t seed,
                                         std::size_t num_classes = 6,
                                         std::size_t input_dim = 16,
                                         double std_dev = 1.0,
                                         std::size_t samples_per_class = 100,
                                         double mean_radius = 4.0,
                                         double min_separation = 4.0) {
  MixtureSpec spec;
  spec.num_classes = num_classes;
  spec.input_dim = input_dim;
  spec.samples_per_class = samples_per_class;
  spec.seed = seed;
  spec.stds.assign(num_classes, std_dev);
  RngStream rng(seed, "toy-means");
  for (int attempt = 0; attempt < 1000; ++attempt) {
    spec.means.clear();
    for (std::size_t c = 0; c < num_classes; ++c) {
      Tensor m(Shape{input_dim}, rng.gaussian_vector(input_dim));
      double norm = 0.0;
      for (const double v : m.data()) norm += v * v;
      norm = std::sqrt(norm);
      for (double& v : m.data()) v = v / norm * mean_radius;
      spec.means.push_back(std::move(m));
    }
    double min_dist = std::numeric_limits<double>::infinity();
    for (std::size_t a = 0; a < num_classes; ++a) {
      for (std::size_t b = a + 1; b < num_classes; ++b) {
        double d2 = 0.0;
        for (std::size_t i = 0; i < input_dim; ++i) {
          const double d = spec.means[a][i] - spec.means[b][i];
          d2 += d * d;
        }
        min_dist = std::min(min_dist, std::sqrt(d2));
      }
    }
    if (min_dist >= min_separation) return spec;
  }
  throw ConfigError("could not place class means at the requested separation");
}

inline Dataset generate_gaussian_mixture(const MixtureSpec& spec) {
  spec.validate();
  Dataset ds;
  ds.input_dim = spec.input_dim;
  ds.num_classes = spec.num_classes;
  const std::size_t n = spec.num_classes * spec.samples_per_class;
  ds.x = Tensor(Shape{n, spec.input_dim});
  ds.labels.resize(n);
  for (std::size_t c = 0; c < spec.num_classes; ++c) {
    RngStream rng(spec.seed, "mixture-class", c);
    for (std::size_t k = 0; k < spec.samples_per_class; ++k) {
      const std::size_t row = c * spec.samples_per_class + k;
      ds.labels[row] = static_cast<int>(c);
      for (std::size_t i = 0; i < spec.input_dim; ++i) {
        ds.x[row * spec.input_dim + i] =
            spec.means[c][i] + spec.stds[c] * rng.next_gaussian();
      }
    }
  }
  return ds;
}

// D_l / D_u / test partition. All id vectors hold row indices into the source
// dataset; ground-truth labels stay in the dataset for telemetry only.
struct OwsslSplit {
  std::vector<std::size_t> labeled_ids;
  std::vector<std::size_t> unlabeled_ids;
  std::vector<std::size_t> test_ids;
  std::vector<int> seen_classes;
  std::vector<int> novel_classes;

  bool is_seen(int cls) const {
    return std::find(seen_classes.begin(), seen_classes.end(), cls) != seen_classes.end();
  }
};

inline OwsslSplit make_owssl_split(const Dataset& ds, double seen_fraction,
                                   double labeled_fraction, double test_fraction,
                                   std::uint64_t seed) {
  ds.validate();
  if (!(seen_fraction > 0.0 && seen_fraction < 1.0)) {
    throw ConfigError("seen_fraction must lie in (0,1)");
  }
  if (!(labeled_fraction > 0.0 && labeled_fraction <= 1.0)) {
    throw ConfigError("labeled_fraction must lie in (0,1]");
  }
  if (!(test_fraction > 0.0 && test_fraction < 1.0)) {
    throw ConfigError("test_fraction must lie in (0,1)");
  }

  OwsslSplit split;
  const std::size_t num_seen = static_cast<std::size_t>(
      std::ceil(seen_fraction * static_cast<double>(ds.num_classes)));
  for (std::size_t c = 0; c < ds.num_classes; ++c) {
    if (c < num_seen) split.seen_classes.push_back(static_cast<int>(c));
    else split.novel_classes.push_back(static_cast<int>(c));
  }

  std::vector<std::vector<std::size_t>> by_class(ds.num_classes);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    by_class[static_cast<std::size_t>(ds.labels[i])].push_back(i);
  }

  for (std::size_t c = 0; c < ds.num_classes; ++c) {
    std::vector<std::size_t>& ids = by_class[c];
    if (ids.empty()) throw DataError("class " + std::to_string(c) + " has no instances");
    RngStream rng(seed, "split-class", c);
    const std::vector<std::size_t> perm = rng.permutation(ids.size());
    std::vector<std::size_t> shuffled(ids.size());
    for (std::size_t k = 0; k < ids.size(); ++k) shuffled[k] = ids[perm[k]];

    const std::size_t n = shuffled.size();
    std::size_t test_count = static_cast<std::size_t>(
        std::llround(test_fraction * static_cast<double>(n)));
    test_count = std::clamp<std::size_t>(test_count, 1, n - 1);
    const std::size_t rest = n - test_count;
    if (rest < 2) {
      throw DataError("class " + std::to_string(c) + " has fewer than 2 non-test samples");
    }
    for (std::size_t k = 0; k < test_count; ++k) split.test_ids.push_back(shuffled[k]);

    const bool seen = c < num_seen;
    std::size_t labeled_count = 0;
    if (seen) {
      labeled_count = static_cast<std::size_t>(
          std::llround(labeled_fraction * static_cast<double>(rest)));
      labeled_count = std::min(labeled_count, rest);
    }
    for (std::size_t k = 0; k < rest; ++k) {
      const std::size_t id = shuffled[test_count + k];
      if (k < labeled_count) split.labeled_ids.push_back(id);
      else split.unlabeled_ids.push_back(id);
    }
  }

  std::sort(split.labeled_ids.begin(), split.labeled_ids.end());
  std::sort(split.unlabeled_ids.begin(), split.unlabeled_ids.end());
  std::sort(split.test_ids.begin(), split.test_ids.end());

  std::unordered_set<std::size_t> train_ids(split.labeled_ids.begin(), split.labeled_ids.end());
  train_ids.insert(split.unlabeled_ids.begin(), split.unlabeled_ids.end());
  if (train_ids.size() != split.labeled_ids.size() + split.unlabeled_ids.size()) {
    throw DataError("split produced an instance in both D_l and D_u");
  }
  for (const std::size_t id : split.test_ids) {
    if (train_ids.count(id)) throw DataError("split leaked a test instance into training");
  }
  return split;
}

// Additive Gaussian jitter, the weak augmentation used for pseudo-labeling.
inline Tensor weak_augment(const Tensor& x, double sigma, RngStream& rng) {
  Tensor out = x;
  if (sigma > 0.0) {
    for (double& v : out.data()) v += sigma * rng.next_gaussian();
  }
  return out;
}

inline Dataset subset(const Dataset& ds, const std::vector<std::size_t>& ids) {
  Dataset out;
  out.input_dim = ds.input_dim;
  out.num_classes = ds.num_classes;
  out.x = Tensor(Shape{ids.size(), ds.input_dim});
  out.labels.resize(ids.size());
  for (std::size_t k = 0; k < ids.size(); ++k) {
    out.labels[k] = ds.labels[ids[k]];
    for (std::size_t i = 0; i < ds.input_dim; ++i) {
      out.x[k * ds.input_dim + i] = ds.x[ids[k] * ds.input_dim + i];
    }
  }
  return out;
}

// ---- feature files ---------------------------------------------------------
//
// CSV: first line "dim,num_classes"; each row "label,v0,...,v{dim-1}" with
// doubles printed as %.17g so the round trip is bit exact.
//
// Binary: magic "PDFD", u16 version (currently 1), u64 count, u64 dim,
// u64 num_classes, count i32 labels, count*dim little-endian float64 values.

namespace detail {

inline std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline double parse_double(std::string_view s, std::size_t line_no) {
  double v = 0.0;
  const char* first = s.data();
  const char* last = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(first, last, v);
  if (ec != std::errc() || ptr != last) {
    throw FormatError("bad numeric field on line " + std::to_string(line_no));
  }
  return v;
}

inline std::vector<std::string_view> split_fields(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t comma = line.find(',', start);
    if (comma == std::string_view::npos) {
      out.push_back(line.substr(start));
      return out;
    }
    out.push_back(line.substr(start, comma - start));
    start = comma + 1;
  }
}

}  // namespace detail

inline void save_features_csv(const Dataset& ds, const std::string& path) {
  ds.validate();
  std::ofstream out(path);
  if (!out) throw DataError("cannot open " + path + " for writing");
  out << ds.input_dim << ',' << ds.num_classes << '\n';
  for (std::size_t r = 0; r < ds.size(); ++r) {
    out << ds.labels[r];
    for (std::size_t i = 0; i < ds.input_dim; ++i) {
      out << ',' << detail::format_double(ds.x[r * ds.input_dim + i]);
    }
    out << '\n';
  }
  if (!out) throw DataError("write failed for " + path);
}

inline Dataset load_features_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path);
  std::string line;
  if (!std::getline(in, line)) throw FormatError(path + ": empty file (offset 0)");
  auto header = detail::split_fields(line);
  if (header.size() != 2) throw FormatError(path + ": header must be 'dim,num_classes'");
  Dataset ds;
  ds.input_dim = static_cast<std::size_t>(detail::parse_double(header[0], 1));
  ds.num_classes = static_cast<std::size_t>(detail::parse_double(header[1], 1));
  if (ds.input_dim == 0 || ds.num_classes == 0) {
    throw FormatError(path + ": header dims must be positive");
  }
  std::vector<double> values;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    auto fields = detail::split_fields(line);
    if (fields.size() != ds.input_dim + 1) {
      throw FormatError(path + ": line " + std::to_string(line_no) + " has " +
                        std::to_string(fields.size()) + " fields, expected " +
                        std::to_string(ds.input_dim + 1));
    }
    const double label = detail::parse_double(fields[0], line_no);
    ds.labels.push_back(static_cast<int>(label));
    for (std::size_t i = 1; i < fields.size(); ++i) {
      values.push_back(detail::parse_double(fields[i], line_no));
    }
  }
  ds.x = Tensor(Shape{ds.labels.size(), ds.input_dim}, std::move(values));
  ds.validate();
  return ds;
}

inline void save_features_bin(const Dataset& ds, const std::string& path) {
  ds.validate();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open " + path + " for writing");
  out.write("PDFD", 4);
  const std::uint16_t version = 1;
  out.write(reinterpret_cast<const char*>(&version), sizeof version);
  const std::uint64_t n = ds.size(), dim = ds.input_dim, k = ds.num_classes;
  out.write(reinterpret_cast<const char*>(&n), sizeof n);
  out.write(reinterpret_cast<const char*>(&dim), sizeof dim);
  out.write(reinterpret_cast<const char*>(&k), sizeof k);
  for (const int y : ds.labels) {
    const std::int32_t v = y;
    out.write(reinterpret_cast<const char*>(&v), sizeof v);
  }
  out.write(reinterpret_cast<const char*>(ds.x.data().data()),
            static_cast<std::streamsize>(ds.x.numel() * sizeof(double)));
  if (!out) throw DataError("write failed for " + path);
}

inline Dataset load_features_bin(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path);
  std::size_t offset = 0;
  auto need = [&](void* dst, std::size_t len, const char* what) {
    in.read(reinterpret_cast<char*>(dst), static_cast<std::streamsize>(len));
    if (static_cast<std::size_t>(in.gcount()) != len) {
      throw FormatError(path + ": truncated " + what + " at byte offset " +
                        std::to_string(offset));
    }
    offset += len;
  };
  char magic[4];
  need(magic, 4, "magic");
  if (std::memcmp(magic, "PDFD", 4) != 0) {
    throw FormatError(path + ": bad magic at byte offset 0");
  }
  std::uint16_t version = 0;
  need(&version, sizeof version, "version");
  if (version != 1) {
    throw FormatError(path + ": unsupported version " + std::to_string(version) +
                      " at byte offset 4");
  }
  std::uint64_t n = 0, dim = 0, k = 0;
  need(&n, sizeof n, "count");
  need(&dim, sizeof dim, "dim");
  need(&k, sizeof k, "num_classes");
  if (dim == 0 || k == 0) throw FormatError(path + ": zero dims in header");
  Dataset ds;
  ds.input_dim = dim;
  ds.num_classes = k;
  ds.labels.resize(n);
  for (std::uint64_t i = 0; i < n; ++i) {
    std::int32_t v = 0;
    need(&v, sizeof v, "label");
    ds.labels[static_cast<std::size_t>(i)] = v;
  }
  ds.x = Tensor(Shape{static_cast<std::size_t>(n), static_cast<std::size_t>(dim)});
  need(ds.x.data().data(), static_cast<std::size_t>(n * dim) * sizeof(double), "payload");
  char extra;
  if (in.read(&extra, 1); in.gcount() != 0) {
    throw FormatError(path + ": trailing bytes at offset " + std::to_string(offset));
  }
  ds.validate();
  return ds;
}

// Sniffs the magic bytes and dispatches to the binary or CSV loader.
inline Dataset load_features(const std::string& path) {
  std::ifstream probe(path, std::ios::binary);
  if (!probe) throw DataError("cannot open " + path);
  char magic[4] = {0, 0, 0, 0};
  probe.read(magic, 4);
  probe.close();
  if (std::memcmp(magic, "PDFD", 4) == 0) return load_features_bin(path);
  return load_features_csv(path);
}

inline void save_features(const Dataset& ds, const std::string& path) {
  if (path.size() >= 4 && path.substr(path.size() - 4) == ".csv") {
    save_features_csv(ds, path);
  } else {
    save_features_bin(ds, path);
  }
}

}  // namespace pdfd
