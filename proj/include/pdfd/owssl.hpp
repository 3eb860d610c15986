#pragma once

#include <algorithm>
#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

#include "pdfd/autodiff.hpp"
#include "pdfd/data.hpp"
#include "pdfd/errors.hpp"
#include "pdfd/eval.hpp"
#include "pdfd/models.hpp"
#include "pdfd/random.hpp"
#include "pdfd/tensor.hpp"

namespace pdfd {

// ---- pseudo-label cache ----------------------------------------------------

struct PseudoLabelCache {
  Tensor soft;                     // (N_u, |Y|), rows sum to 1
  std::vector<int> hard;           // argmax per row, lowest index on ties
  std::vector<double> confidence;  // max(soft row)

  std::size_t size() const { return hard.size(); }
  std::size_t num_classes() const { return soft.numel() ? soft.cols() : 0; }
};

inline PseudoLabelCache cache_from_soft(const Tensor& soft) {
  if (soft.rank() != 2 || soft.cols() == 0) {
    throw UsageError("pseudo-label cache needs a (N, |Y|) probability matrix");
  }
  PseudoLabelCache cache;
  cache.soft = soft;
  cache.hard = argmax_rows(soft);
  cache.confidence.resize(soft.rows());
  for (std::size_t i = 0; i < soft.rows(); ++i) {
    cache.confidence[i] = soft.at(i, static_cast<std::size_t>(cache.hard[i]));
  }
  return cache;
}

// Seeds the cache from hard assignments (the K-means warm start): one-hot
// rows, confidence 1, so every instance clears any threshold below 1.
inline PseudoLabelCache cache_from_hard_labels(const std::vector<int>& hard,
                                               std::size_t num_classes) {
  return cache_from_soft(onehot_rows(hard, num_classes));
}

inline PseudoLabelCache predict_pseudo_labels(const EncoderParams& enc,
                                              const ClassifierParams& cls,
                                              const Tensor& xu,
                                              double augment_noise_std,
                                              RngStream& rng) {
  const Tensor augmented = weak_augment(xu, augment_noise_std, rng);
  return cache_from_soft(classify(cls, encode(enc, augmented)));
}

// ---- cross-entropy losses --------------------------------------------------

inline Var supervised_loss(Tape& t, const EncoderParams& enc, const ClassifierParams& cls,
                           const Tensor& x, const std::vector<int>& labels,
                           std::size_t num_classes) {
  if (x.rows() == 0 || labels.empty()) throw UsageError("supervised loss on an empty batch");
  if (x.rows() != labels.size()) throw UsageError("batch and label counts differ");
  const Var logits = classifier_logits(t, cls, encoder_forward(t, enc, t.constant(x)));
  return cross_entropy_with_logits(logits, onehot_rows(labels, num_classes));
}

// Mean cross-entropy against the cached hard pseudo-labels over the selected
// ids, on un-augmented inputs. Empty selection contributes exactly zero.
inline Var unlabeled_loss(Tape& t, const EncoderParams& enc, const ClassifierParams& cls,
                          const Tensor& xu, const PseudoLabelCache& cache,
                          const std::vector<std::size_t>& selected) {
  if (selected.empty()) return t.constant_scalar(0.0);
  Tensor xq(Shape{selected.size(), xu.cols()});
  std::vector<int> labels(selected.size());
  for (std::size_t r = 0; r < selected.size(); ++r) {
    const std::size_t id = selected[r];
    if (id >= cache.size() || id >= xu.rows()) {
      throw UsageError("selected id outside the unlabeled set");
    }
    for (std::size_t j = 0; j < xu.cols(); ++j) xq.at(r, j) = xu.at(id, j);
    labels[r] = cache.hard[id];
  }
  const Var logits = classifier_logits(t, cls, encoder_forward(t, enc, t.constant(xq)));
  return cross_entropy_with_logits(logits, onehot_rows(labels, cache.num_classes()));
}

// ---- distribution-aware selection ------------------------------------------

struct SelectionResult {
  // Per class: confident ids sorted by confidence descending, id ascending.
  std::vector<std::vector<std::size_t>> confident;
  std::size_t n_min = 0;
  // Q: per class in index order, the top-n_min ids from its confident list.
  std::vector<std::size_t> selected;
};

inline SelectionResult select_confident(const PseudoLabelCache& cache, double tau) {
  if (tau <= 0.0 || tau >= 1.0) throw ConfigError("confidence threshold must lie in (0,1)");
  const std::size_t k = cache.num_classes();
  if (k == 0) throw UsageError("selection requires a populated pseudo-label cache");
  SelectionResult result;
  result.confident.assign(k, {});
  for (std::size_t i = 0; i < cache.size(); ++i) {
    if (cache.confidence[i] > tau) {
      result.confident[static_cast<std::size_t>(cache.hard[i])].push_back(i);
    }
  }
  result.n_min = cache.size();
  for (std::size_t c = 0; c < k; ++c) {
    auto& ids = result.confident[c];
    std::sort(ids.begin(), ids.end(), [&](std::size_t a, std::size_t b) {
      if (cache.confidence[a] != cache.confidence[b]) {
        return cache.confidence[a] > cache.confidence[b];
      }
      return a < b;
    });
    result.n_min = std::min(result.n_min, ids.size());
  }
  if (result.n_min > 0) {
    for (std::size_t c = 0; c < k; ++c) {
      for (std::size_t r = 0; r < result.n_min; ++r) {
        result.selected.push_back(result.confident[c][r]);
      }
    }
  }
  return result;
}

// ---- K-means warm start ------------------------------------------------------

struct KmeansResult {
  Tensor centroids;                  // (|Y|, d)
  std::vector<int> cluster;          // cluster of every instance, labeled rows first
  std::vector<int> class_of_cluster; // cluster id -> class id
  std::vector<int> unlabeled_labels; // class id per unlabeled instance
};

namespace detail {

inline double sq_dist_row(const Tensor& a, std::size_t ra, const Tensor& b, std::size_t rb) {
  double s = 0.0;
  for (std::size_t j = 0; j < a.cols(); ++j) {
    const double d = a.at(ra, j) - b.at(rb, j);
    s += d * d;
  }
  return s;
}

// Mean of the selected rows as base + mean of deltas, so identical members
// yield exactly their shared vector.
inline std::vector<double> mean_rows(const Tensor& feats, const std::vector<std::size_t>& ids) {
  const std::size_t d = feats.cols();
  std::vector<double> mean(d, 0.0);
  if (ids.empty()) return mean;
  for (std::size_t j = 0; j < d; ++j) {
    double acc = 0.0;
    for (const std::size_t i : ids) acc += feats.at(i, j) - feats.at(ids[0], j);
    mean[j] = feats.at(ids[0], j) + acc / static_cast<double>(ids.size());
  }
  return mean;
}

}  // namespace detail

// Lloyd's algorithm with k-means++ seeding over the stacked labeled+unlabeled
// features, then a vote-based cluster->class mapping: clusters holding labeled
// members are matched to classes by minimum-cost assignment on negated vote
// counts; clusters with no labeled members take the leftover ids in
// descending cluster-size order (largest cluster -> smallest leftover id).
inline KmeansResult kmeans_init(const Tensor& feats_labeled, const std::vector<int>& labels,
                                const Tensor& feats_unlabeled, std::size_t num_classes,
                                std::uint64_t seed) {
  const std::size_t nl = feats_labeled.rows();
  const std::size_t nu = feats_unlabeled.rows();
  const std::size_t n = nl + nu;
  const std::size_t k = num_classes;
  if (labels.size() != nl) throw UsageError("labeled feature and label counts differ");
  if (k == 0) throw UsageError("class count must be positive");
  if (n < k) throw UsageError("fewer instances than classes");
  if (nl > 0 && nu > 0 && feats_labeled.cols() != feats_unlabeled.cols()) {
    throw ShapeError("labeled and unlabeled feature widths differ");
  }
  for (const int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= k) throw DataError("label outside the class set");
  }
  const std::size_t d = nl > 0 ? feats_labeled.cols() : feats_unlabeled.cols();

  Tensor points(Shape{n, d});
  for (std::size_t i = 0; i < nl; ++i) {
    for (std::size_t j = 0; j < d; ++j) points.at(i, j) = feats_labeled.at(i, j);
  }
  for (std::size_t i = 0; i < nu; ++i) {
    for (std::size_t j = 0; j < d; ++j) points.at(nl + i, j) = feats_unlabeled.at(i, j);
  }

  RngStream rng(seed, "kmeans");
  Tensor centroids(Shape{k, d});
  std::vector<double> dist2(n, 0.0);

  // k-means++: first centroid uniform, later ones weighted by squared distance.
  std::size_t first = rng.next_below(n);
  for (std::size_t j = 0; j < d; ++j) centroids.at(0, j) = points.at(first, j);
  for (std::size_t c = 1; c < k; ++c) {
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      double best = detail::sq_dist_row(points, i, centroids, 0);
      for (std::size_t m = 1; m < c; ++m) {
        best = std::min(best, detail::sq_dist_row(points, i, centroids, m));
      }
      dist2[i] = best;
      total += best;
    }
    std::size_t pick;
    if (total <= 0.0) {
      pick = rng.next_below(n);
    } else {
      const double r = rng.next_double() * total;
      double acc = 0.0;
      pick = n - 1;
      for (std::size_t i = 0; i < n; ++i) {
        acc += dist2[i];
        if (acc > r) {
          pick = i;
          break;
        }
      }
    }
    for (std::size_t j = 0; j < d; ++j) centroids.at(c, j) = points.at(pick, j);
  }

  std::vector<int> assign(n, 0);
  for (int iter = 0; iter < 100; ++iter) {
    for (std::size_t i = 0; i < n; ++i) {
      std::size_t best = 0;
      double best_d = detail::sq_dist_row(points, i, centroids, 0);
      for (std::size_t c = 1; c < k; ++c) {
        const double dc = detail::sq_dist_row(points, i, centroids, c);
        if (dc < best_d) {
          best_d = dc;
          best = c;
        }
      }
      assign[i] = static_cast<int>(best);
    }

    Tensor next(Shape{k, d});
    std::vector<std::size_t> count(k, 0);
    for (std::size_t i = 0; i < n; ++i) {
      const auto c = static_cast<std::size_t>(assign[i]);
      ++count[c];
      for (std::size_t j = 0; j < d; ++j) next.at(c, j) += points.at(i, j);
    }
    for (std::size_t c = 0; c < k; ++c) {
      if (count[c] == 0) continue;
      for (std::size_t j = 0; j < d; ++j) next.at(c, j) /= static_cast<double>(count[c]);
    }

    // Empty clusters re-seed from the farthest points (distance to their own
    // centroid), one distinct point per empty cluster.
    std::vector<std::size_t> empties;
    for (std::size_t c = 0; c < k; ++c) {
      if (count[c] == 0) empties.push_back(c);
    }
    if (!empties.empty()) {
      std::vector<std::pair<double, std::size_t>> far(n);
      for (std::size_t i = 0; i < n; ++i) {
        far[i] = {detail::sq_dist_row(points, i, centroids,
                                      static_cast<std::size_t>(assign[i])),
                  i};
      }
      std::sort(far.begin(), far.end(), [](const auto& a, const auto& b) {
        if (a.first != b.first) return a.first > b.first;
        return a.second < b.second;
      });
      for (std::size_t e = 0; e < empties.size(); ++e) {
        const std::size_t p = far[std::min(e, n - 1)].second;
        for (std::size_t j = 0; j < d; ++j) next.at(empties[e], j) = points.at(p, j);
      }
    }

    double shift = 0.0;
    for (std::size_t c = 0; c < k; ++c) {
      shift = std::max(shift, std::sqrt(detail::sq_dist_row(next, c, centroids, c)));
    }
    centroids = next;
    if (empties.empty() && shift < 1e-6) break;
  }

  // Final assignment against the converged centroids.
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t best = 0;
    double best_d = detail::sq_dist_row(points, i, centroids, 0);
    for (std::size_t c = 1; c < k; ++c) {
      const double dc = detail::sq_dist_row(points, i, centroids, c);
      if (dc < best_d) {
        best_d = dc;
        best = c;
      }
    }
    assign[i] = static_cast<int>(best);
  }

  Tensor votes(Shape{k, k});
  for (std::size_t i = 0; i < nl; ++i) {
    votes.at(static_cast<std::size_t>(assign[i]), static_cast<std::size_t>(labels[i])) += 1.0;
  }
  Tensor cost(Shape{k, k});
  for (std::size_t i = 0; i < k * k; ++i) cost[i] = -votes[i];
  const Assignment match = hungarian_match(cost);

  KmeansResult result;
  result.centroids = centroids;
  result.cluster = assign;
  result.class_of_cluster = match.map;

  std::vector<std::size_t> cluster_size(k, 0);
  for (std::size_t i = 0; i < n; ++i) ++cluster_size[static_cast<std::size_t>(assign[i])];
  std::vector<std::size_t> voteless;
  for (std::size_t c = 0; c < k; ++c) {
    bool any = false;
    for (std::size_t y = 0; y < k; ++y) any = any || votes.at(c, y) > 0.0;
    if (!any) voteless.push_back(c);
  }
  std::vector<int> pool;
  for (const std::size_t c : voteless) pool.push_back(result.class_of_cluster[c]);
  std::sort(pool.begin(), pool.end());
  std::sort(voteless.begin(), voteless.end(), [&](std::size_t a, std::size_t b) {
    if (cluster_size[a] != cluster_size[b]) return cluster_size[a] > cluster_size[b];
    return a < b;
  });
  for (std::size_t i = 0; i < voteless.size(); ++i) {
    result.class_of_cluster[voteless[i]] = pool[i];
  }

  result.unlabeled_labels.resize(nu);
  for (std::size_t i = 0; i < nu; ++i) {
    result.unlabeled_labels[i] =
        result.class_of_cluster[static_cast<std::size_t>(assign[nl + i])];
  }
  return result;
}

// ---- class prototypes --------------------------------------------------------

struct PrototypeState {
  Tensor matrix;            // (d, |Y|), columns in class index order
  std::vector<char> valid;  // novel columns start invalid (zero until computed)

  static PrototypeState make(std::size_t feature_dim, std::size_t num_classes) {
    PrototypeState s;
    s.matrix = Tensor(Shape{feature_dim, num_classes});
    s.valid.assign(num_classes, 0);
    return s;
  }
};

inline void update_seen_prototypes(PrototypeState& state, const EncoderParams& enc,
                                   const Tensor& xl, const std::vector<int>& labels,
                                   const std::vector<int>& seen_classes) {
  if (xl.rows() != labels.size()) throw UsageError("batch and label counts differ");
  const Tensor feats = encode(enc, xl);
  const std::size_t d = state.matrix.rows();
  if (feats.cols() != d) throw ShapeError("encoder width does not match the prototype matrix");
  for (const int s : seen_classes) {
    const auto c = static_cast<std::size_t>(s);
    if (s < 0 || c >= state.valid.size()) throw UsageError("seen class id outside the class set");
    std::vector<std::size_t> members;
    for (std::size_t i = 0; i < feats.rows(); ++i) {
      if (labels[i] == s) members.push_back(i);
    }
    if (members.empty()) {
      throw DataError("seen class " + std::to_string(s) + " has no labeled instances");
    }
    const std::vector<double> mean = detail::mean_rows(feats, members);
    for (std::size_t j = 0; j < d; ++j) state.matrix.at(j, c) = mean[j];
    state.valid[c] = 1;
  }
}

// Novel prototypes average the confident members. A class with none this
// epoch keeps its previous column value (zero before the first computation)
// and its column is marked invalid.
inline void update_novel_prototypes(PrototypeState& state, const EncoderParams& enc,
                                    const Tensor& xu, const PseudoLabelCache& cache,
                                    double tau, const std::vector<int>& novel_classes) {
  if (xu.rows() != cache.size()) throw UsageError("cache does not match the unlabeled set");
  const Tensor feats = encode(enc, xu);
  const std::size_t d = state.matrix.rows();
  if (feats.cols() != d) throw ShapeError("encoder width does not match the prototype matrix");
  for (const int nc : novel_classes) {
    const auto c = static_cast<std::size_t>(nc);
    if (nc < 0 || c >= state.valid.size()) throw UsageError("novel class id outside the class set");
    std::vector<std::size_t> members;
    for (std::size_t i = 0; i < feats.rows(); ++i) {
      if (cache.hard[i] == nc && cache.confidence[i] > tau) members.push_back(i);
    }
    if (members.empty()) {
      state.valid[c] = 0;
      continue;
    }
    const std::vector<double> mean = detail::mean_rows(feats, members);
    for (std::size_t j = 0; j < d; ++j) state.matrix.at(j, c) = mean[j];
    state.valid[c] = 1;
  }
}

// ---- pseudo-label telemetry --------------------------------------------------

struct ClassTelemetry {
  int class_id = 0;
  std::size_t confident_count = 0;
  double mean_confidence = 0.0;          // over instances predicted as this class
  double pseudo_label_accuracy = 0.0;    // over the confident set, aligned ids
};

// Maps each predicted class id to a ground-truth id: seen ids stay fixed and
// novel ids are matched by co-occurrence, as in the seen-fixed eval protocol.
inline std::vector<int> align_pseudo_ids(const PseudoLabelCache& cache,
                                         const std::vector<int>& truth,
                                         const std::vector<int>& seen_classes,
                                         std::size_t num_classes) {
  const EvalReport r = score_predictions(cache.hard, truth, num_classes, seen_classes,
                                         EvalProtocol::seen_fixed);
  return r.assignment;
}

inline double pseudo_accuracy_over(const std::vector<std::size_t>& ids,
                                   const PseudoLabelCache& cache,
                                   const std::vector<int>& truth,
                                   const std::vector<int>& aligned) {
  if (ids.empty()) return 0.0;
  std::size_t hit = 0;
  for (const std::size_t i : ids) {
    if (aligned[static_cast<std::size_t>(cache.hard[i])] == truth[i]) ++hit;
  }
  return static_cast<double>(hit) / static_cast<double>(ids.size());
}

inline std::vector<ClassTelemetry> pseudo_label_telemetry(const PseudoLabelCache& cache,
                                                          const SelectionResult& selection,
                                                          const std::vector<int>& truth,
                                                          const std::vector<int>& seen_classes,
                                                          std::size_t num_classes) {
  if (truth.size() != cache.size()) throw UsageError("ground truth does not match the cache");
  const std::vector<int> aligned = align_pseudo_ids(cache, truth, seen_classes, num_classes);
  std::vector<ClassTelemetry> rows(num_classes);
  std::vector<double> conf_sum(num_classes, 0.0);
  std::vector<std::size_t> pred_count(num_classes, 0);
  for (std::size_t i = 0; i < cache.size(); ++i) {
    const auto c = static_cast<std::size_t>(cache.hard[i]);
    conf_sum[c] += cache.confidence[i];
    ++pred_count[c];
  }
  for (std::size_t c = 0; c < num_classes; ++c) {
    rows[c].class_id = static_cast<int>(c);
    rows[c].confident_count = selection.confident[c].size();
    rows[c].mean_confidence = pred_count[c] ? conf_sum[c] / static_cast<double>(pred_count[c]) : 0.0;
    rows[c].pseudo_label_accuracy =
        pseudo_accuracy_over(selection.confident[c], cache, truth, aligned);
  }
  return rows;
}

inline void write_telemetry_header(std::ostream& out) {
  out << "epoch,class_id,confident_count,mean_confidence,pseudo_label_accuracy\n";
}

inline void append_telemetry(std::ostream& out, int epoch,
                             const std::vector<ClassTelemetry>& rows) {
  for (const ClassTelemetry& r : rows) {
    out << epoch << ',' << r.class_id << ',' << r.confident_count << ','
        << detail::format_double(r.mean_confidence) << ','
        << detail::format_double(r.pseudo_label_accuracy) << '\n';
  }
}

}  // namespace pdfd
