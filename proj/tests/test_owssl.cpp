#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <set>
#include <sstream>
#include <vector>

#include "pdfd/checkpoint.hpp"
#include "pdfd/diffusion.hpp"
#include "pdfd/owssl.hpp"

using pdfd::cache_from_hard_labels;
using pdfd::cache_from_soft;
using pdfd::ClassifierParams;
using pdfd::ClassTelemetry;
using pdfd::EncoderParams;
using pdfd::KmeansResult;
using pdfd::Linear;
using pdfd::ModelConfig;
using pdfd::PrototypeState;
using pdfd::PseudoLabelCache;
using pdfd::RngStream;
using pdfd::SelectionResult;
using pdfd::Shape;
using pdfd::Tape;
using pdfd::Tensor;
using pdfd::Var;

namespace {

EncoderParams identity_encoder(std::size_t d) {
  EncoderParams enc;
  enc.layers.push_back(Linear::zeros(d, d));
  for (std::size_t i = 0; i < d; ++i) enc.layers[0].w[i * d + i] = 1.0;
  return enc;
}

ClassifierParams identity_classifier(std::size_t d) {
  ClassifierParams cls;
  cls.out = Linear::zeros(d, d);
  for (std::size_t i = 0; i < d; ++i) cls.out.w[i * d + i] = 1.0;
  return cls;
}

Tensor random_rows(RngStream& rng, std::size_t n, std::size_t d) {
  return Tensor(Shape{n, d}, rng.gaussian_vector(n * d));
}

}  // namespace

// ---- supervised loss --------------------------------------------------------

TEST(SupervisedLoss, NearPerfectPredictionGivesZero) {
  auto enc = identity_encoder(2);
  auto cls = identity_classifier(2);
  for (double& v : cls.out.w.data()) v *= 100.0;
  Tensor x = Tensor::matrix(2, 2, {1.0, 0.0, 0.0, 1.0});
  Tape t;
  Var loss = pdfd::supervised_loss(t, enc, cls, x, {0, 1}, 2);
  EXPECT_NEAR(loss.value()[0], 0.0, 1e-12);
}

TEST(SupervisedLoss, UniformPredictionGivesLogClassCount) {
  EncoderParams enc;
  enc.layers.push_back(Linear::zeros(3, 4));
  ClassifierParams cls;
  cls.out = Linear::zeros(4, 4);
  RngStream rng(7, "sup-uniform");
  Tensor x = random_rows(rng, 5, 3);
  Tape t;
  Var loss = pdfd::supervised_loss(t, enc, cls, x, {0, 1, 2, 3, 0}, 4);
  EXPECT_NEAR(loss.value()[0], std::log(4.0), 1e-12);
}

TEST(SupervisedLoss, ClosedFormTwoClassValue) {
  auto enc = identity_encoder(2);
  auto cls = identity_classifier(2);
  Tensor x = Tensor::matrix(1, 2, {1.0, 0.0});
  Tape t;
  Var loss = pdfd::supervised_loss(t, enc, cls, x, {0}, 2);
  EXPECT_NEAR(loss.value()[0], std::log(1.0 + std::exp(-1.0)), 1e-12);
}

TEST(SupervisedLoss, EmptyBatchThrows) {
  auto enc = identity_encoder(2);
  auto cls = identity_classifier(2);
  Tensor x(Shape{0, 2});
  EXPECT_THROW(
      {
        Tape t;
        pdfd::supervised_loss(t, enc, cls, x, {}, 2);
      },
      pdfd::UsageError);
}

TEST(SupervisedLoss, GradientReachesEncoderAndClassifier) {
  ModelConfig cfg;
  cfg.input_dim = 3;
  cfg.feature_dim = 4;
  cfg.num_classes = 3;
  cfg.enc_hidden = 5;
  cfg.enc_layers = 1;
  auto enc = EncoderParams::init(cfg, 11);
  auto cls = ClassifierParams::init(cfg, 11);
  RngStream rng(12, "sup-grad");
  Tensor x = random_rows(rng, 4, 3);
  Tape t;
  Var loss = pdfd::supervised_loss(t, enc, cls, x, {0, 1, 2, 0}, 3);
  t.backward(loss);
  const Tensor gw = t.grad(t.leaf_for(&cls.out.w));
  double norm = 0.0;
  for (std::size_t i = 0; i < gw.numel(); ++i) norm += std::abs(gw[i]);
  EXPECT_GT(norm, 0.0);
}

// ---- pseudo-label prediction --------------------------------------------------

TEST(PseudoLabels, ZeroClassifierGivesUniformAndTieBreaksToZero) {
  EncoderParams enc;
  enc.layers.push_back(Linear::zeros(3, 4));
  ClassifierParams cls;
  cls.out = Linear::zeros(4, 5);
  RngStream rng(3, "pl-uniform");
  Tensor xu = random_rows(rng, 6, 3);
  RngStream aug(3, "augment");
  PseudoLabelCache cache = pdfd::predict_pseudo_labels(enc, cls, xu, 0.0, aug);
  ASSERT_EQ(cache.size(), 6u);
  for (std::size_t i = 0; i < cache.size(); ++i) {
    EXPECT_EQ(cache.hard[i], 0);
    EXPECT_NEAR(cache.confidence[i], 0.2, 1e-12);
    for (std::size_t c = 0; c < 5; ++c) EXPECT_NEAR(cache.soft.at(i, c), 0.2, 1e-12);
  }
}

TEST(PseudoLabels, SeededAugmentationIsDeterministic) {
  ModelConfig cfg;
  cfg.input_dim = 4;
  cfg.feature_dim = 3;
  cfg.num_classes = 4;
  cfg.enc_layers = 1;
  cfg.enc_hidden = 6;
  auto enc = EncoderParams::init(cfg, 5);
  auto cls = ClassifierParams::init(cfg, 5);
  RngStream rng(9, "pl-data");
  Tensor xu = random_rows(rng, 8, 4);
  RngStream aug_a(42, "augment", 3);
  RngStream aug_b(42, "augment", 3);
  PseudoLabelCache a = pdfd::predict_pseudo_labels(enc, cls, xu, 0.1, aug_a);
  PseudoLabelCache b = pdfd::predict_pseudo_labels(enc, cls, xu, 0.1, aug_b);
  ASSERT_EQ(a.soft.numel(), b.soft.numel());
  EXPECT_EQ(0, std::memcmp(a.soft.data().data(), b.soft.data().data(),
                           a.soft.numel() * sizeof(double)));
  EXPECT_EQ(a.hard, b.hard);
}

TEST(PseudoLabels, MatchesHandSteppedOracleOnTinyModel) {
  auto enc = identity_encoder(2);
  auto cls = identity_classifier(2);
  Tensor xu = Tensor::matrix(3, 2, {0.2, -0.1, 2.0, 1.0, -1.0, 3.0});
  RngStream aug(1, "augment");
  PseudoLabelCache cache = pdfd::predict_pseudo_labels(enc, cls, xu, 0.0, aug);
  const std::vector<int> expect_hard = {0, 0, 1};
  EXPECT_EQ(cache.hard, expect_hard);
  for (std::size_t i = 0; i < 3; ++i) {
    const double a = xu.at(i, 0), b = xu.at(i, 1);
    const double pa = std::exp(a) / (std::exp(a) + std::exp(b));
    EXPECT_NEAR(cache.soft.at(i, 0), pa, 1e-12);
    EXPECT_NEAR(cache.soft.at(i, 1), 1.0 - pa, 1e-12);
    EXPECT_NEAR(cache.confidence[i], std::max(pa, 1.0 - pa), 1e-12);
  }
}

TEST(PseudoLabels, HardeningInvariantHoldsOnRandomSoftRows) {
  RngStream rng(17, "pl-hardening");
  Tensor raw = random_rows(rng, 20, 6);
  for (double& v : raw.data()) v = std::abs(v) + 0.01;
  for (std::size_t i = 0; i < 20; ++i) {
    double s = 0.0;
    for (std::size_t c = 0; c < 6; ++c) s += raw.at(i, c);
    for (std::size_t c = 0; c < 6; ++c) raw.at(i, c) /= s;
  }
  PseudoLabelCache cache = cache_from_soft(raw);
  for (std::size_t i = 0; i < cache.size(); ++i) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < 6; ++c) {
      if (raw.at(i, c) > raw.at(i, best)) best = c;
    }
    EXPECT_EQ(cache.hard[i], static_cast<int>(best));
    EXPECT_EQ(cache.confidence[i], raw.at(i, best));
  }
}

// ---- selection ----------------------------------------------------------------

TEST(Selection, WorkedFiveInstanceExample) {
  // Instances a..e with |Y|=2; class-0 confidences {a:0.9, b:0.6, e:0.55},
  // class-1 confidences {c:0.6, d:0.7}.
  Tensor soft = Tensor::matrix(5, 2,
                               {0.9, 0.1,    // a
                                0.6, 0.4,    // b
                                0.4, 0.6,    // c
                                0.3, 0.7,    // d
                                0.55, 0.45});  // e
  PseudoLabelCache cache = cache_from_soft(soft);
  SelectionResult sel = pdfd::select_confident(cache, 0.5);
  const std::vector<std::size_t> c0 = {0, 1, 4};
  const std::vector<std::size_t> c1 = {3, 2};
  EXPECT_EQ(sel.confident[0], c0);
  EXPECT_EQ(sel.confident[1], c1);
  EXPECT_EQ(sel.n_min, 2u);
  const std::vector<std::size_t> q = {0, 1, 3, 2};
  EXPECT_EQ(sel.selected, q);
}

TEST(Selection, AllBelowOrAtThresholdGivesEmptySelection) {
  Tensor soft = Tensor::matrix(3, 2, {0.5, 0.5, 0.5, 0.5, 0.4, 0.6});
  PseudoLabelCache cache = cache_from_soft(soft);
  SelectionResult sel = pdfd::select_confident(cache, 0.6);
  EXPECT_EQ(sel.n_min, 0u);
  EXPECT_TRUE(sel.selected.empty());
}

TEST(Selection, ConfidenceEqualToTauIsExcluded) {
  Tensor soft = Tensor::matrix(2, 2, {0.5, 0.5, 0.8, 0.2});
  PseudoLabelCache cache = cache_from_soft(soft);
  SelectionResult sel = pdfd::select_confident(cache, 0.5);
  EXPECT_TRUE(sel.confident[0].size() == 1 && sel.confident[0][0] == 1);
}

TEST(Selection, OneEmptyClassZeroesTheWholeSelection) {
  Tensor soft = Tensor::matrix(4, 3,
                               {0.9, 0.05, 0.05,
                                0.8, 0.1, 0.1,
                                0.1, 0.8, 0.1,
                                0.2, 0.7, 0.1});
  PseudoLabelCache cache = cache_from_soft(soft);
  SelectionResult sel = pdfd::select_confident(cache, 0.5);
  EXPECT_EQ(sel.confident[0].size(), 2u);
  EXPECT_EQ(sel.confident[1].size(), 2u);
  EXPECT_TRUE(sel.confident[2].empty());
  EXPECT_EQ(sel.n_min, 0u);
  EXPECT_TRUE(sel.selected.empty());
}

TEST(Selection, TiesBreakTowardLowerInstanceId) {
  Tensor soft = Tensor::matrix(4, 2, {0.7, 0.3, 0.7, 0.3, 0.3, 0.7, 0.25, 0.75});
  PseudoLabelCache cache = cache_from_soft(soft);
  SelectionResult sel = pdfd::select_confident(cache, 0.5);
  ASSERT_EQ(sel.confident[0].size(), 2u);
  EXPECT_EQ(sel.confident[0][0], 0u);
  EXPECT_EQ(sel.confident[0][1], 1u);
  ASSERT_EQ(sel.n_min, 2u);
  const std::vector<std::size_t> q = {0, 1, 3, 2};
  EXPECT_EQ(sel.selected, q);
}

TEST(Selection, BalancePropertyOnRandomCaches) {
  RngStream rng(23, "sel-balance");
  for (int rep = 0; rep < 20; ++rep) {
    const std::size_t n = 30, k = 4;
    Tensor soft(Shape{n, k});
    for (std::size_t i = 0; i < n; ++i) {
      double s = 0.0;
      for (std::size_t c = 0; c < k; ++c) {
        soft.at(i, c) = -std::log(rng.next_double() + 1e-12);
        s += soft.at(i, c);
      }
      for (std::size_t c = 0; c < k; ++c) soft.at(i, c) /= s;
    }
    PseudoLabelCache cache = cache_from_soft(soft);
    SelectionResult sel = pdfd::select_confident(cache, 0.4);
    if (sel.n_min == 0) {
      EXPECT_TRUE(sel.selected.empty());
      continue;
    }
    EXPECT_EQ(sel.selected.size(), sel.n_min * k);
    std::vector<std::size_t> per_class(k, 0);
    std::set<std::size_t> uniq;
    for (const std::size_t id : sel.selected) {
      ++per_class[static_cast<std::size_t>(cache.hard[id])];
      uniq.insert(id);
    }
    EXPECT_EQ(uniq.size(), sel.selected.size());
    for (std::size_t c = 0; c < k; ++c) EXPECT_EQ(per_class[c], sel.n_min);
  }
}

TEST(Selection, RaisingTauNeverGrowsConfidentSets) {
  RngStream rng(29, "sel-mono");
  const std::size_t n = 40, k = 5;
  Tensor soft(Shape{n, k});
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t c = 0; c < k; ++c) {
      soft.at(i, c) = rng.next_double() + 0.01;
      s += soft.at(i, c);
    }
    for (std::size_t c = 0; c < k; ++c) soft.at(i, c) /= s;
  }
  PseudoLabelCache cache = cache_from_soft(soft);
  std::vector<std::size_t> prev(k, n + 1);
  for (const double tau : {0.21, 0.3, 0.5, 0.7, 0.9}) {
    SelectionResult sel = pdfd::select_confident(cache, tau);
    for (std::size_t c = 0; c < k; ++c) {
      EXPECT_LE(sel.confident[c].size(), prev[c]);
      prev[c] = sel.confident[c].size();
    }
  }
}

TEST(Selection, RejectsDegenerateThreshold) {
  PseudoLabelCache cache = cache_from_hard_labels({0, 1}, 2);
  EXPECT_THROW(pdfd::select_confident(cache, 0.0), pdfd::ConfigError);
  EXPECT_THROW(pdfd::select_confident(cache, 1.0), pdfd::ConfigError);
}

// ---- unlabeled loss -------------------------------------------------------------

TEST(UnlabeledLoss, EmptySelectionGivesExactZero) {
  auto enc = identity_encoder(2);
  auto cls = identity_classifier(2);
  Tensor xu = Tensor::matrix(2, 2, {1.0, 0.0, 0.0, 1.0});
  PseudoLabelCache cache = cache_from_hard_labels({0, 1}, 2);
  Tape t;
  Var loss = pdfd::unlabeled_loss(t, enc, cls, xu, cache, {});
  EXPECT_EQ(loss.value()[0], 0.0);
}

TEST(UnlabeledLoss, ConsistentConfidentModelGivesNearZero) {
  auto enc = identity_encoder(2);
  auto cls = identity_classifier(2);
  for (double& v : cls.out.w.data()) v *= 50.0;
  Tensor xu = Tensor::matrix(2, 2, {3.0, -3.0, -3.0, 3.0});
  PseudoLabelCache cache = cache_from_hard_labels({0, 1}, 2);
  Tape t;
  Var loss = pdfd::unlabeled_loss(t, enc, cls, xu, cache, {0, 1});
  EXPECT_NEAR(loss.value()[0], 0.0, 1e-12);
}

TEST(UnlabeledLoss, TwoInstanceHandComputedValue) {
  auto enc = identity_encoder(2);
  auto cls = identity_classifier(2);
  Tensor xu = Tensor::matrix(2, 2, {1.0, 0.0, 0.0, 2.0});
  PseudoLabelCache cache = cache_from_hard_labels({0, 1}, 2);
  Tape t;
  Var loss = pdfd::unlabeled_loss(t, enc, cls, xu, cache, {0, 1});
  const double expect =
      0.5 * (std::log(1.0 + std::exp(-1.0)) + std::log(1.0 + std::exp(-2.0)));
  EXPECT_NEAR(loss.value()[0], expect, 1e-12);
}

TEST(UnlabeledLoss, UsesUnaugmentedInputsAndSelectedIdsOnly) {
  auto enc = identity_encoder(2);
  auto cls = identity_classifier(2);
  Tensor xu = Tensor::matrix(3, 2, {1.0, 0.0, 100.0, 100.0, 0.0, 2.0});
  PseudoLabelCache cache = cache_from_hard_labels({0, 1, 1}, 2);
  Tape t;
  Var loss = pdfd::unlabeled_loss(t, enc, cls, xu, cache, {0, 2});
  const double expect =
      0.5 * (std::log(1.0 + std::exp(-1.0)) + std::log(1.0 + std::exp(-2.0)));
  EXPECT_NEAR(loss.value()[0], expect, 1e-12);
}

TEST(UnlabeledLoss, OutOfRangeSelectionThrows) {
  auto enc = identity_encoder(2);
  auto cls = identity_classifier(2);
  Tensor xu = Tensor::matrix(2, 2, {1.0, 0.0, 0.0, 2.0});
  PseudoLabelCache cache = cache_from_hard_labels({0, 1}, 2);
  EXPECT_THROW(
      {
        Tape t;
        pdfd::unlabeled_loss(t, enc, cls, xu, cache, {5});
      },
      pdfd::UsageError);
}

// ---- K-means warm start ----------------------------------------------------------

TEST(KmeansInit, TwoSeparatedBlobsGetConsistentLabels) {
  Tensor fl = Tensor::matrix(2, 1, {-5.0, -5.2});
  std::vector<int> labels = {0, 0};
  Tensor fu = Tensor::matrix(6, 1, {-4.9, -5.1, -5.05, 5.0, 5.1, 4.9});
  KmeansResult r = pdfd::kmeans_init(fl, labels, fu, 2, 123);
  EXPECT_EQ(r.unlabeled_labels[0], 0);
  EXPECT_EQ(r.unlabeled_labels[1], 0);
  EXPECT_EQ(r.unlabeled_labels[2], 0);
  EXPECT_EQ(r.unlabeled_labels[3], 1);
  EXPECT_EQ(r.unlabeled_labels[4], 1);
  EXPECT_EQ(r.unlabeled_labels[5], 1);
}

TEST(KmeansInit, IdenticalInstancesStillProduceKCentroids) {
  Tensor fl = Tensor::matrix(2, 2, {1.0, 1.0, 1.0, 1.0});
  std::vector<int> labels = {0, 0};
  Tensor fu(Shape{5, 2}, std::vector<double>(10, 1.0));
  KmeansResult r = pdfd::kmeans_init(fl, labels, fu, 3, 7);
  EXPECT_EQ(r.centroids.rows(), 3u);
  for (const int c : r.cluster) {
    EXPECT_GE(c, 0);
    EXPECT_LT(c, 3);
  }
  for (const int y : r.unlabeled_labels) {
    EXPECT_GE(y, 0);
    EXPECT_LT(y, 3);
  }
}

TEST(KmeansInit, SeededRunsAreIdentical) {
  RngStream rng(31, "km-data");
  Tensor fl = random_rows(rng, 10, 3);
  std::vector<int> labels;
  for (int i = 0; i < 10; ++i) labels.push_back(i % 2);
  Tensor fu = random_rows(rng, 40, 3);
  KmeansResult a = pdfd::kmeans_init(fl, labels, fu, 4, 99);
  KmeansResult b = pdfd::kmeans_init(fl, labels, fu, 4, 99);
  EXPECT_EQ(a.cluster, b.cluster);
  EXPECT_EQ(a.class_of_cluster, b.class_of_cluster);
  EXPECT_EQ(a.unlabeled_labels, b.unlabeled_labels);
  EXPECT_TRUE(pdfd::approx_equal(a.centroids, b.centroids, 0.0));
}

TEST(KmeansInit, VotesMapSeenBlobsAndLeftoversGoToNovelIdsBySize) {
  // Blob layout: class-0 blob near -10, class-1 blob near 0, two unlabeled-only
  // blobs near +10 (8 points) and +20 (4 points). Seen ids {0,1} are claimed by
  // votes; leftover ids {2,3} go to the unlabeled-only blobs, largest first.
  std::vector<double> lvals = {-10.1, -9.9, -10.0, 0.1, -0.1, 0.0};
  Tensor fl = Tensor::matrix(6, 1, lvals);
  std::vector<int> labels = {0, 0, 0, 1, 1, 1};
  std::vector<double> uvals;
  for (int i = 0; i < 6; ++i) uvals.push_back(-10.0 + 0.01 * i);
  for (int i = 0; i < 6; ++i) uvals.push_back(0.0 + 0.01 * i);
  for (int i = 0; i < 8; ++i) uvals.push_back(10.0 + 0.01 * i);
  for (int i = 0; i < 4; ++i) uvals.push_back(20.0 + 0.01 * i);
  Tensor fu = Tensor::matrix(24, 1, uvals);
  KmeansResult r = pdfd::kmeans_init(fl, labels, fu, 4, 5);
  for (int i = 0; i < 6; ++i) EXPECT_EQ(r.unlabeled_labels[i], 0) << "id " << i;
  for (int i = 6; i < 12; ++i) EXPECT_EQ(r.unlabeled_labels[i], 1) << "id " << i;
  for (int i = 12; i < 20; ++i) EXPECT_EQ(r.unlabeled_labels[i], 2) << "id " << i;
  for (int i = 20; i < 24; ++i) EXPECT_EQ(r.unlabeled_labels[i], 3) << "id " << i;
}

TEST(KmeansInit, RejectsBadArguments) {
  Tensor fl = Tensor::matrix(2, 1, {0.0, 1.0});
  Tensor fu(Shape{0, 1});
  EXPECT_THROW(pdfd::kmeans_init(fl, {0}, fu, 2, 1), pdfd::UsageError);
  EXPECT_THROW(pdfd::kmeans_init(fl, {0, 0}, fu, 3, 1), pdfd::UsageError);
  EXPECT_THROW(pdfd::kmeans_init(fl, {0, 5}, fu, 2, 1), pdfd::DataError);
}

// ---- prototypes -------------------------------------------------------------------

TEST(Prototypes, SeenMeanOfTwoPointsIsMidpoint) {
  auto enc = identity_encoder(2);
  PrototypeState state = PrototypeState::make(2, 2);
  Tensor xl = Tensor::matrix(2, 2, {1.0, 0.0, 3.0, 0.0});
  pdfd::update_seen_prototypes(state, enc, xl, {0, 0}, {0});
  EXPECT_EQ(state.matrix.at(0, 0), 2.0);
  EXPECT_EQ(state.matrix.at(1, 0), 0.0);
  EXPECT_EQ(state.valid[0], 1);
}

TEST(Prototypes, SingletonClassEqualsItsFeature) {
  auto enc = identity_encoder(3);
  PrototypeState state = PrototypeState::make(3, 2);
  Tensor xl = Tensor::matrix(2, 3, {0.1, -0.2, 0.3, 2.0, 2.0, 2.0});
  pdfd::update_seen_prototypes(state, enc, xl, {0, 1}, {0, 1});
  EXPECT_EQ(state.matrix.at(0, 0), 0.1);
  EXPECT_EQ(state.matrix.at(1, 0), -0.2);
  EXPECT_EQ(state.matrix.at(2, 0), 0.3);
  EXPECT_EQ(state.matrix.at(0, 1), 2.0);
}

TEST(Prototypes, IdenticalMembersYieldExactlyThatVector) {
  auto enc = identity_encoder(1);
  PrototypeState state = PrototypeState::make(1, 1);
  Tensor xl = Tensor::matrix(3, 1, {0.1, 0.1, 0.1});
  pdfd::update_seen_prototypes(state, enc, xl, {0, 0, 0}, {0});
  EXPECT_EQ(state.matrix.at(0, 0), 0.1);
}

TEST(Prototypes, RandomSeenClassesMatchIndependentMeanOracle) {
  ModelConfig cfg;
  cfg.input_dim = 5;
  cfg.feature_dim = 4;
  cfg.num_classes = 3;
  cfg.enc_layers = 1;
  cfg.enc_hidden = 7;
  auto enc = EncoderParams::init(cfg, 21);
  RngStream rng(22, "proto-data");
  Tensor xl = random_rows(rng, 12, 5);
  std::vector<int> labels;
  for (int i = 0; i < 12; ++i) labels.push_back(i % 3);
  PrototypeState state = PrototypeState::make(4, 3);
  pdfd::update_seen_prototypes(state, enc, xl, labels, {0, 1, 2});
  const Tensor feats = pdfd::encode(enc, xl);
  for (int c = 0; c < 3; ++c) {
    for (std::size_t j = 0; j < 4; ++j) {
      double sum = 0.0;
      int count = 0;
      for (int i = 0; i < 12; ++i) {
        if (labels[static_cast<std::size_t>(i)] == c) {
          sum += feats.at(static_cast<std::size_t>(i), j);
          ++count;
        }
      }
      EXPECT_NEAR(state.matrix.at(j, static_cast<std::size_t>(c)), sum / count, 1e-12);
    }
  }
}

TEST(Prototypes, SeenClassWithNoInstancesThrows) {
  auto enc = identity_encoder(2);
  PrototypeState state = PrototypeState::make(2, 3);
  Tensor xl = Tensor::matrix(2, 2, {1.0, 0.0, 3.0, 0.0});
  EXPECT_THROW(pdfd::update_seen_prototypes(state, enc, xl, {0, 0}, {0, 1}),
               pdfd::DataError);
}

TEST(Prototypes, NovelColumnsFollowConfidenceAndRetainLastValue) {
  auto enc = identity_encoder(2);
  PrototypeState state = PrototypeState::make(2, 3);
  Tensor xu = Tensor::matrix(3, 2, {1.0, 1.0, 3.0, 3.0, 9.0, 9.0});

  Tensor soft_a = Tensor::matrix(3, 3, {0.1, 0.8, 0.1,
                                        0.1, 0.7, 0.2,
                                        0.2, 0.2, 0.6});
  pdfd::update_novel_prototypes(state, enc, xu, cache_from_soft(soft_a), 0.5, {1, 2});
  EXPECT_EQ(state.matrix.at(0, 1), 2.0);
  EXPECT_EQ(state.matrix.at(0, 2), 9.0);
  EXPECT_EQ(state.valid[1], 1);
  EXPECT_EQ(state.valid[2], 1);

  // Class 2 loses all confident members: value retained, column invalid.
  Tensor soft_b = Tensor::matrix(3, 3, {0.1, 0.8, 0.1,
                                        0.1, 0.7, 0.2,
                                        0.4, 0.4, 0.2});
  pdfd::update_novel_prototypes(state, enc, xu, cache_from_soft(soft_b), 0.5, {1, 2});
  EXPECT_EQ(state.matrix.at(0, 1), 2.0);
  EXPECT_EQ(state.matrix.at(0, 2), 9.0);
  EXPECT_EQ(state.valid[1], 1);
  EXPECT_EQ(state.valid[2], 0);
}

TEST(Prototypes, NovelColumnsAreZeroBeforeFirstComputation) {
  PrototypeState state = PrototypeState::make(3, 4);
  for (std::size_t j = 0; j < 3; ++j) {
    for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(state.matrix.at(j, c), 0.0);
  }
  for (const char v : state.valid) EXPECT_EQ(v, 0);
}

TEST(Prototypes, MatrixSurvivesCheckpointRoundTripBitExactly) {
  RngStream rng(41, "proto-ckpt");
  PrototypeState state = PrototypeState::make(4, 5);
  for (double& v : state.matrix.data()) v = rng.next_gaussian();
  state.valid = {1, 1, 0, 1, 0};
  pdfd::ParamRefs refs;
  refs.emplace_back("prototypes", &state.matrix);
  nlohmann::json meta;
  meta["prototype_valid"] = std::vector<int>(state.valid.begin(), state.valid.end());
  const std::string path = ::testing::TempDir() + "proto_ckpt.bin";
  pdfd::save_checkpoint(path, refs, meta);

  PrototypeState loaded = PrototypeState::make(4, 5);
  pdfd::ParamRefs out_refs;
  out_refs.emplace_back("prototypes", &loaded.matrix);
  nlohmann::json meta_in = pdfd::load_checkpoint(path, out_refs);
  EXPECT_EQ(0, std::memcmp(state.matrix.data().data(), loaded.matrix.data().data(),
                           state.matrix.numel() * sizeof(double)));
  const auto valid = meta_in["prototype_valid"].get<std::vector<int>>();
  for (std::size_t c = 0; c < 5; ++c) EXPECT_EQ(valid[c], state.valid[c]);
}

TEST(Prototypes, PromptColumnExtractionMatchesMatrixColumns) {
  PrototypeState state = PrototypeState::make(3, 4);
  RngStream rng(43, "proto-prompt");
  for (double& v : state.matrix.data()) v = rng.next_gaussian();
  const Tensor rows = pdfd::prompt_rows(state.matrix, {2, 0, 3});
  for (std::size_t j = 0; j < 3; ++j) {
    EXPECT_EQ(rows.at(0, j), state.matrix.at(j, 2));
    EXPECT_EQ(rows.at(1, j), state.matrix.at(j, 0));
    EXPECT_EQ(rows.at(2, j), state.matrix.at(j, 3));
  }
}

// ---- telemetry ----------------------------------------------------------------------

TEST(Telemetry, PerClassRowsMatchHandComputation) {
  // 4 classes, seen {0,1}; predictions chosen so novel id 2 lines up with
  // ground-truth 3 and vice versa under the co-occurrence matching.
  Tensor soft = Tensor::matrix(6, 4,
                               {0.9, 0.1, 0.0, 0.0,
                                0.8, 0.2, 0.0, 0.0,
                                0.1, 0.7, 0.1, 0.1,
                                0.0, 0.1, 0.8, 0.1,
                                0.0, 0.1, 0.7, 0.2,
                                0.1, 0.1, 0.1, 0.7});
  PseudoLabelCache cache = cache_from_soft(soft);
  const std::vector<int> truth = {0, 1, 1, 3, 3, 2};
  SelectionResult sel = pdfd::select_confident(cache, 0.5);
  std::vector<ClassTelemetry> rows =
      pdfd::pseudo_label_telemetry(cache, sel, truth, {0, 1}, 4);

  ASSERT_EQ(rows.size(), 4u);
  EXPECT_EQ(rows[0].confident_count, 2u);
  EXPECT_NEAR(rows[0].mean_confidence, 0.85, 1e-12);
  EXPECT_NEAR(rows[0].pseudo_label_accuracy, 0.5, 1e-12);
  EXPECT_EQ(rows[1].confident_count, 1u);
  EXPECT_NEAR(rows[1].mean_confidence, 0.7, 1e-12);
  EXPECT_NEAR(rows[1].pseudo_label_accuracy, 1.0, 1e-12);
  EXPECT_EQ(rows[2].confident_count, 2u);
  EXPECT_NEAR(rows[2].mean_confidence, 0.75, 1e-12);
  EXPECT_NEAR(rows[2].pseudo_label_accuracy, 1.0, 1e-12);
  EXPECT_EQ(rows[3].confident_count, 1u);
  EXPECT_NEAR(rows[3].mean_confidence, 0.7, 1e-12);
  EXPECT_NEAR(rows[3].pseudo_label_accuracy, 1.0, 1e-12);
}

TEST(Telemetry, CsvWriterEmitsHeaderAndRows) {
  std::ostringstream out;
  pdfd::write_telemetry_header(out);
  std::vector<ClassTelemetry> rows(2);
  rows[0] = {0, 3, 0.75, 1.0};
  rows[1] = {1, 0, 0.0, 0.0};
  pdfd::append_telemetry(out, 7, rows);
  EXPECT_EQ(out.str(),
            "epoch,class_id,confident_count,mean_confidence,pseudo_label_accuracy\n"
            "7,0,3,0.75,1\n"
            "7,1,0,0,0\n");
}

TEST(Telemetry, AccuracyHelperScoresSelectedSubset) {
  Tensor soft = Tensor::matrix(4, 2, {0.9, 0.1, 0.8, 0.2, 0.3, 0.7, 0.4, 0.6});
  PseudoLabelCache cache = cache_from_soft(soft);
  const std::vector<int> truth = {0, 1, 1, 1};
  const std::vector<int> aligned = {0, 1};
  EXPECT_NEAR(pdfd::pseudo_accuracy_over({0, 1}, cache, truth, aligned), 0.5, 1e-12);
  EXPECT_NEAR(pdfd::pseudo_accuracy_over({2, 3}, cache, truth, aligned), 1.0, 1e-12);
  EXPECT_EQ(pdfd::pseudo_accuracy_over({}, cache, truth, aligned), 0.0);
}
