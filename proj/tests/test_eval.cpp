#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "pdfd/eval.hpp"
#include "pdfd/random.hpp"

namespace {

using pdfd::Assignment;
using pdfd::EvalProtocol;
using pdfd::EvalReport;
using pdfd::RngStream;
using pdfd::Shape;
using pdfd::Tensor;

// Exhaustive oracle: lexicographically smallest permutation among all minima.
Assignment brute_force(const Tensor& cost) {
  const std::size_t n = cost.dim(0);
  std::vector<int> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  Assignment best;
  best.total_cost = std::numeric_limits<double>::infinity();
  do {
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      total += cost[i * n + static_cast<std::size_t>(perm[i])];
    }
    if (total < best.total_cost - 1e-12) {
      best.total_cost = total;
      best.map = perm;
    }
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best;
}

TEST(Hungarian, DiagonalOptimum) {
  Tensor cost(Shape{4, 4}, 1.0);
  for (std::size_t i = 0; i < 4; ++i) cost[i * 4 + i] = 0.0;
  Assignment a = pdfd::hungarian_match(cost);
  EXPECT_DOUBLE_EQ(a.total_cost, 0.0);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(a.map[i], static_cast<int>(i));
}

TEST(Hungarian, MatchesBruteForceOnRandomIntegerMatrices) {
  RngStream rng(51, "hungarian-brute");
  for (int rep = 0; rep < 120; ++rep) {
    const std::size_t n = 2 + rng.next_below(5);  // 2..6
    Tensor cost(Shape{n, n});
    for (double& v : cost.data()) v = static_cast<double>(rng.next_below(10));
    Assignment fast = pdfd::hungarian_match(cost);
    Assignment slow = brute_force(cost);
    EXPECT_DOUBLE_EQ(fast.total_cost, slow.total_cost) << "rep " << rep;
    EXPECT_EQ(fast.map, slow.map) << "rep " << rep;
  }
}

TEST(Hungarian, RowShiftLeavesAssignmentUnchanged) {
  RngStream rng(52, "hungarian-shift");
  Tensor cost(Shape{5, 5});
  for (double& v : cost.data()) v = rng.next_uniform(0.0, 9.0);
  Assignment base = pdfd::hungarian_match(cost);
  Tensor shifted = cost;
  for (std::size_t j = 0; j < 5; ++j) shifted[2 * 5 + j] += 7.5;
  Assignment moved = pdfd::hungarian_match(shifted);
  EXPECT_EQ(base.map, moved.map);
}

TEST(Hungarian, CostNeverExceedsAnyPermutation) {
  RngStream rng(53, "hungarian-bound");
  for (const std::size_t n : {3u, 5u, 8u}) {
    Tensor cost(Shape{n, n});
    for (double& v : cost.data()) v = rng.next_uniform(-5.0, 5.0);
    Assignment fast = pdfd::hungarian_match(cost);
    std::vector<int> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    do {
      double total = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        total += cost[i * n + static_cast<std::size_t>(perm[i])];
      }
      EXPECT_LE(fast.total_cost, total + 1e-9);
    } while (std::next_permutation(perm.begin(), perm.end()));
  }
}

TEST(Hungarian, RejectsMalformedInput) {
  EXPECT_THROW(pdfd::hungarian_match(Tensor(Shape{2, 3})), pdfd::UsageError);
  EXPECT_THROW(pdfd::hungarian_match(Tensor::vec({1, 2})), pdfd::UsageError);
  Tensor inf_cost(Shape{2, 2});
  inf_cost[3] = std::numeric_limits<double>::infinity();
  EXPECT_THROW(pdfd::hungarian_match(inf_cost), pdfd::UsageError);
}

TEST(Scoring, NovelPermutationScoresPerfectlyUnderSeenFixed) {
  // truth classes 0..5, seen {0,1,2}; predictor permutes novel ids 3->4->5->3
  std::vector<int> truth, preds;
  for (int c = 0; c < 6; ++c) {
    for (int k = 0; k < 10; ++k) {
      truth.push_back(c);
      if (c < 3) preds.push_back(c);
      else preds.push_back(3 + (c - 3 + 1) % 3);
    }
  }
  EvalReport r = pdfd::score_predictions(preds, truth, 6, {0, 1, 2},
                                         EvalProtocol::seen_fixed);
  EXPECT_DOUBLE_EQ(r.seen_acc, 1.0);
  EXPECT_DOUBLE_EQ(r.unseen_acc, 1.0);
  EXPECT_DOUBLE_EQ(r.all_acc, 1.0);
  for (int c = 0; c < 3; ++c) EXPECT_EQ(r.assignment[static_cast<std::size_t>(c)], c);
}

TEST(Scoring, SeenIdsNeverRemappedUnderSeenFixed) {
  RngStream rng(54, "seen-fixed-property");
  for (int rep = 0; rep < 20; ++rep) {
    std::vector<int> truth, preds;
    for (int i = 0; i < 300; ++i) {
      truth.push_back(static_cast<int>(rng.next_below(6)));
      preds.push_back(static_cast<int>(rng.next_below(6)));
    }
    EvalReport r = pdfd::score_predictions(preds, truth, 6, {0, 1, 2},
                                           EvalProtocol::seen_fixed);
    for (int c = 0; c < 3; ++c) EXPECT_EQ(r.assignment[static_cast<std::size_t>(c)], c);
    std::vector<int> novel_targets;
    for (int c = 3; c < 6; ++c) novel_targets.push_back(r.assignment[static_cast<std::size_t>(c)]);
    std::sort(novel_targets.begin(), novel_targets.end());
    EXPECT_EQ(novel_targets, (std::vector<int>{3, 4, 5}));
  }
}

TEST(Scoring, UniformRandomPredictorNearChance) {
  RngStream rng(55, "uniform-chance");
  const std::size_t n = 10000;
  std::vector<int> truth(n), preds(n);
  for (std::size_t i = 0; i < n; ++i) {
    truth[i] = static_cast<int>(i % 6);
    preds[i] = static_cast<int>(rng.next_below(6));
  }
  EvalReport r = pdfd::score_predictions(preds, truth, 6, {0, 1, 2},
                                         EvalProtocol::seen_fixed);
  const double p = 1.0 / 6.0;
  const double se = std::sqrt(p * (1.0 - p) / static_cast<double>(n));
  // alignment over the novel block picks the best of 3! permutations, which
  // inflates the estimate slightly; allow that on the high side
  EXPECT_GT(r.all_acc, p - 3.0 * se);
  EXPECT_LT(r.all_acc, p + 3.0 * se + 0.012);
}

TEST(Scoring, AccuraciesAgreeWithConfusionRecount) {
  RngStream rng(56, "confusion-recount");
  std::vector<int> truth, preds;
  for (int i = 0; i < 500; ++i) {
    truth.push_back(static_cast<int>(rng.next_below(6)));
    preds.push_back(static_cast<int>(rng.next_below(6)));
  }
  EvalReport r = pdfd::score_predictions(preds, truth, 6, {0, 1, 2},
                                         EvalProtocol::seen_fixed);
  int trace = 0, total = 0;
  int seen_hit = 0, seen_total = 0;
  for (std::size_t c = 0; c < 6; ++c) {
    for (std::size_t j = 0; j < 6; ++j) {
      total += r.confusion[c][j];
      if (c == j) trace += r.confusion[c][j];
      if (c < 3) {
        seen_total += r.confusion[c][j];
        if (c == j) seen_hit += r.confusion[c][j];
      }
    }
  }
  EXPECT_EQ(total, 500);
  EXPECT_DOUBLE_EQ(r.all_acc, static_cast<double>(trace) / 500.0);
  EXPECT_DOUBLE_EQ(r.seen_acc, static_cast<double>(seen_hit) / static_cast<double>(seen_total));
  for (std::size_t c = 0; c < 6; ++c) {
    int row = 0;
    for (std::size_t j = 0; j < 6; ++j) row += r.confusion[c][j];
    if (row > 0) {
      EXPECT_DOUBLE_EQ(r.per_class_acc[c],
                       static_cast<double>(r.confusion[c][c]) / static_cast<double>(row));
    }
  }
}

TEST(Scoring, BalancedGroupsKeepAllAccBetweenGroupAccs) {
  RngStream rng(57, "balance-bound");
  for (int rep = 0; rep < 10; ++rep) {
    std::vector<int> truth, preds;
    for (int c = 0; c < 6; ++c) {
      for (int k = 0; k < 50; ++k) {
        truth.push_back(c);
        preds.push_back(static_cast<int>(rng.next_below(6)));
      }
    }
    EvalReport r = pdfd::score_predictions(preds, truth, 6, {0, 1, 2},
                                           EvalProtocol::seen_fixed);
    EXPECT_GE(r.all_acc, std::min(r.seen_acc, r.unseen_acc) - 1e-12);
    EXPECT_LE(r.all_acc, std::max(r.seen_acc, r.unseen_acc) + 1e-12);
  }
}

TEST(Scoring, AllMatchedProtocolRescuesGlobalPermutation) {
  // predictor permutes every class by +1 mod 6; all-matched fixes it all
  std::vector<int> truth, preds;
  for (int c = 0; c < 6; ++c) {
    for (int k = 0; k < 10; ++k) {
      truth.push_back(c);
      preds.push_back((c + 1) % 6);
    }
  }
  EvalReport fixed = pdfd::score_predictions(preds, truth, 6, {0, 1, 2},
                                             EvalProtocol::seen_fixed);
  EvalReport matched = pdfd::score_predictions(preds, truth, 6, {0, 1, 2},
                                               EvalProtocol::all_matched);
  EXPECT_LT(fixed.all_acc, 0.5);
  EXPECT_DOUBLE_EQ(matched.all_acc, 1.0);
}

TEST(Scoring, LabelOutsideClassSetIsDataError) {
  EXPECT_THROW(pdfd::score_predictions({0}, {7}, 6, {0, 1, 2},
                                       EvalProtocol::seen_fixed),
               pdfd::DataError);
}

TEST(Report, JsonAndTextCarryTheAccuracies) {
  std::vector<int> truth{0, 0, 1, 1, 2, 3};
  std::vector<int> preds{0, 0, 1, 0, 2, 3};
  EvalReport r = pdfd::score_predictions(preds, truth, 4, {0, 1},
                                         EvalProtocol::seen_fixed);
  const nlohmann::json j = pdfd::report_json(r);
  EXPECT_DOUBLE_EQ(j.at("all_acc").get<double>(), r.all_acc);
  EXPECT_EQ(j.at("assignment").size(), 4u);
  const std::string text = pdfd::report_text(r);
  EXPECT_NE(text.find("seen"), std::string::npos);
  EXPECT_NE(text.find("unseen"), std::string::npos);
  EXPECT_NE(text.find("all"), std::string::npos);
}

TEST(Argmax, LowestIndexWinsTies) {
  Tensor probs = Tensor::matrix(2, 3, {0.4, 0.4, 0.2,
                                       0.1, 0.45, 0.45});
  const std::vector<int> picks = pdfd::argmax_rows(probs);
  EXPECT_EQ(picks[0], 0);
  EXPECT_EQ(picks[1], 1);
}

}  // namespace
