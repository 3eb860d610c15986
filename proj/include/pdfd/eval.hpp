#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pdfd/data.hpp"
#include "pdfd/errors.hpp"
#include "pdfd/models.hpp"
#include "pdfd/tensor.hpp"

namespace pdfd {

struct Assignment {
  std::vector<int> map;  // predicted id -> matched id, a permutation
  double total_cost = 0.0;
};

namespace detail {

// Potential-based shortest augmenting path solver, O(n^3). Returns the
// minimum total cost; fills col_of_row if given.
inline double hungarian_min_cost(const std::vector<std::vector<double>>& a,
                                 std::vector<int>* col_of_row = nullptr) {
  const int n = static_cast<int>(a.size());
  if (n == 0) return 0.0;
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(static_cast<std::size_t>(n) + 1, 0.0);
  std::vector<double> v(static_cast<std::size_t>(n) + 1, 0.0);
  std::vector<int> p(static_cast<std::size_t>(n) + 1, 0);
  std::vector<int> way(static_cast<std::size_t>(n) + 1, 0);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(static_cast<std::size_t>(n) + 1, inf);
    std::vector<char> used(static_cast<std::size_t>(n) + 1, 0);
    do {
      used[static_cast<std::size_t>(j0)] = 1;
      const int i0 = p[static_cast<std::size_t>(j0)];
      double delta = inf;
      int j1 = 0;
      for (int j = 1; j <= n; ++j) {
        if (used[static_cast<std::size_t>(j)]) continue;
        const double cur = a[static_cast<std::size_t>(i0 - 1)][static_cast<std::size_t>(j - 1)] -
                           u[static_cast<std::size_t>(i0)] - v[static_cast<std::size_t>(j)];
        if (cur < minv[static_cast<std::size_t>(j)]) {
          minv[static_cast<std::size_t>(j)] = cur;
          way[static_cast<std::size_t>(j)] = j0;
        }
        if (minv[static_cast<std::size_t>(j)] < delta) {
          delta = minv[static_cast<std::size_t>(j)];
          j1 = j;
        }
      }
      for (int j = 0; j <= n; ++j) {
        if (used[static_cast<std::size_t>(j)]) {
          u[static_cast<std::size_t>(p[static_cast<std::size_t>(j)])] += delta;
          v[static_cast<std::size_t>(j)] -= delta;
        } else {
          minv[static_cast<std::size_t>(j)] -= delta;
        }
      }
      j0 = j1;
    } while (p[static_cast<std::size_t>(j0)] != 0);
    do {
      const int j1 = way[static_cast<std::size_t>(j0)];
      p[static_cast<std::size_t>(j0)] = p[static_cast<std::size_t>(j1)];
      j0 = j1;
    } while (j0 != 0);
  }
  double total = 0.0;
  if (col_of_row) col_of_row->assign(static_cast<std::size_t>(n), -1);
  for (int j = 1; j <= n; ++j) {
    const int i = p[static_cast<std::size_t>(j)];
    total += a[static_cast<std::size_t>(i - 1)][static_cast<std::size_t>(j - 1)];
    if (col_of_row) (*col_of_row)[static_cast<std::size_t>(i - 1)] = j - 1;
  }
  return total;
}

}  // namespace detail

// Minimum-cost perfect matching with the lexicographically smallest assignment
// vector among all optima: rows are fixed in order to the smallest column that
// keeps the total optimal, each candidate verified by re-solving the residual
// subproblem.
inline Assignment hungarian_match(const Tensor& cost) {
  if (cost.rank() != 2 || cost.dim(0) != cost.dim(1)) {
    throw UsageError("hungarian matching needs a square cost matrix");
  }
  const std::size_t n = cost.dim(0);
  if (n == 0) throw UsageError("hungarian matching needs a nonempty matrix");
  if (!cost.all_finite()) throw UsageError("hungarian matching needs finite costs");

  std::vector<std::vector<double>> a(n, std::vector<double>(n));
  double scale = 1.0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      a[i][j] = cost[i * n + j];
      scale = std::max(scale, std::abs(a[i][j]));
    }
  }
  const double opt = detail::hungarian_min_cost(a);
  const double tol = 1e-9 * scale * static_cast<double>(n);

  Assignment out;
  out.map.assign(n, -1);
  out.total_cost = opt;
  std::vector<char> col_taken(n, 0);
  std::vector<std::size_t> free_rows(n);
  for (std::size_t i = 0; i < n; ++i) free_rows[i] = i;
  double fixed_cost = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<std::size_t> rest_rows;
    for (std::size_t r : free_rows) {
      if (r != i) rest_rows.push_back(r);
    }
    for (std::size_t j = 0; j < n; ++j) {
      if (col_taken[j]) continue;
      std::vector<std::size_t> rest_cols;
      for (std::size_t c = 0; c < n; ++c) {
        if (!col_taken[c] && c != j) rest_cols.push_back(c);
      }
      std::vector<std::vector<double>> sub(rest_rows.size(),
                                           std::vector<double>(rest_cols.size()));
      for (std::size_t r = 0; r < rest_rows.size(); ++r) {
        for (std::size_t c = 0; c < rest_cols.size(); ++c) {
          sub[r][c] = a[rest_rows[r]][rest_cols[c]];
        }
      }
      const double candidate = fixed_cost + a[i][j] + detail::hungarian_min_cost(sub);
      if (candidate <= opt + tol) {
        out.map[i] = static_cast<int>(j);
        col_taken[j] = 1;
        fixed_cost += a[i][j];
        break;
      }
    }
    free_rows.erase(std::find(free_rows.begin(), free_rows.end(), i));
  }
  return out;
}

enum class EvalProtocol { seen_fixed, all_matched };

struct EvalReport {
  double seen_acc = 0.0;
  double unseen_acc = 0.0;
  double all_acc = 0.0;
  std::vector<double> per_class_acc;
  std::vector<std::vector<int>> confusion;  // [true class][aligned prediction]
  std::vector<int> assignment;              // predicted id -> aligned id
};

// Aligns raw argmax predictions to ground-truth ids and scores them.
// seen-fixed: seen ids map to themselves, only novel predicted ids are matched
// (to novel ground-truth ids). all-matched: one Hungarian over all of Y.
inline EvalReport score_predictions(const std::vector<int>& predictions,
                                    const std::vector<int>& truth,
                                    std::size_t num_classes,
                                    const std::vector<int>& seen_classes,
                                    EvalProtocol protocol) {
  if (predictions.size() != truth.size()) {
    throw UsageError("prediction and label counts differ");
  }
  if (predictions.empty()) throw UsageError("empty test set");
  for (const int y : truth) {
    if (y < 0 || static_cast<std::size_t>(y) >= num_classes) {
      throw DataError("test label outside the class set");
    }
  }
  for (const int y : predictions) {
    if (y < 0 || static_cast<std::size_t>(y) >= num_classes) {
      throw UsageError("prediction outside the class set");
    }
  }

  std::vector<std::vector<double>> count(num_classes, std::vector<double>(num_classes, 0.0));
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    count[static_cast<std::size_t>(predictions[i])][static_cast<std::size_t>(truth[i])] += 1.0;
  }

  std::vector<char> seen_mask(num_classes, 0);
  for (const int c : seen_classes) {
    if (c < 0 || static_cast<std::size_t>(c) >= num_classes) {
      throw UsageError("seen class id outside the class set");
    }
    seen_mask[static_cast<std::size_t>(c)] = 1;
  }

  EvalReport report;
  report.assignment.assign(num_classes, -1);
  if (protocol == EvalProtocol::all_matched) {
    Tensor cost(Shape{num_classes, num_classes});
    for (std::size_t p = 0; p < num_classes; ++p) {
      for (std::size_t t = 0; t < num_classes; ++t) {
        cost[p * num_classes + t] = -count[p][t];
      }
    }
    const Assignment match = hungarian_match(cost);
    report.assignment = match.map;
  } else {
    std::vector<std::size_t> novel;
    for (std::size_t c = 0; c < num_classes; ++c) {
      if (seen_mask[c]) report.assignment[c] = static_cast<int>(c);
      else novel.push_back(c);
    }
    if (!novel.empty()) {
      Tensor cost(Shape{novel.size(), novel.size()});
      for (std::size_t p = 0; p < novel.size(); ++p) {
        for (std::size_t t = 0; t < novel.size(); ++t) {
          cost[p * novel.size() + t] = -count[novel[p]][novel[t]];
        }
      }
      const Assignment match = hungarian_match(cost);
      for (std::size_t p = 0; p < novel.size(); ++p) {
        report.assignment[novel[p]] = static_cast<int>(novel[match.map[static_cast<std::size_t>(p)]]);
      }
    }
  }

  report.confusion.assign(num_classes, std::vector<int>(num_classes, 0));
  std::size_t seen_total = 0, seen_hit = 0, novel_total = 0, novel_hit = 0;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    const int aligned = report.assignment[static_cast<std::size_t>(predictions[i])];
    const int y = truth[i];
    report.confusion[static_cast<std::size_t>(y)][static_cast<std::size_t>(aligned)] += 1;
    const bool hit = aligned == y;
    if (seen_mask[static_cast<std::size_t>(y)]) {
      ++seen_total;
      seen_hit += hit ? 1 : 0;
    } else {
      ++novel_total;
      novel_hit += hit ? 1 : 0;
    }
  }
  report.seen_acc = seen_total ? static_cast<double>(seen_hit) / static_cast<double>(seen_total) : 0.0;
  report.unseen_acc = novel_total ? static_cast<double>(novel_hit) / static_cast<double>(novel_total) : 0.0;
  report.all_acc = static_cast<double>(seen_hit + novel_hit) /
                   static_cast<double>(predictions.size());
  report.per_class_acc.assign(num_classes, 0.0);
  for (std::size_t c = 0; c < num_classes; ++c) {
    int row_total = 0;
    for (std::size_t j = 0; j < num_classes; ++j) row_total += report.confusion[c][j];
    if (row_total > 0) {
      report.per_class_acc[c] = static_cast<double>(report.confusion[c][c]) /
                                static_cast<double>(row_total);
    }
  }
  return report;
}

inline std::vector<int> argmax_rows(const Tensor& probs) {
  const std::size_t m = probs.rows(), n = probs.cols();
  std::vector<int> out(m, 0);
  for (std::size_t i = 0; i < m; ++i) {
    double best = probs[i * n];
    for (std::size_t j = 1; j < n; ++j) {
      if (probs[i * n + j] > best) {
        best = probs[i * n + j];
        out[i] = static_cast<int>(j);
      }
    }
  }
  return out;
}

inline EvalReport evaluate(const Dataset& test, const EncoderParams& enc,
                           const ClassifierParams& cls,
                           const std::vector<int>& seen_classes,
                           EvalProtocol protocol = EvalProtocol::seen_fixed) {
  const Tensor probs = classify(cls, encode(enc, test.x));
  return score_predictions(argmax_rows(probs), test.labels, test.num_classes,
                           seen_classes, protocol);
}

inline nlohmann::json report_json(const EvalReport& r) {
  nlohmann::json j;
  j["seen_acc"] = r.seen_acc;
  j["unseen_acc"] = r.unseen_acc;
  j["all_acc"] = r.all_acc;
  j["per_class_acc"] = r.per_class_acc;
  j["assignment"] = r.assignment;
  j["confusion"] = r.confusion;
  return j;
}

inline std::string report_text(const EvalReport& r) {
  std::ostringstream out;
  out << "group    accuracy\n";
  char buf[64];
  std::snprintf(buf, sizeof buf, "seen     %7.4f\n", r.seen_acc);
  out << buf;
  std::snprintf(buf, sizeof buf, "unseen   %7.4f\n", r.unseen_acc);
  out << buf;
  std::snprintf(buf, sizeof buf, "all      %7.4f\n", r.all_acc);
  out << buf;
  return out.str();
}

}  // namespace pdfd
