#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "pdfd/autodiff.hpp"
#include "pdfd/errors.hpp"
#include "pdfd/random.hpp"
#include "pdfd/tensor.hpp"

namespace pdfd {

struct Linear {
  Tensor w;  // (in, out)
  Tensor b;  // (1, out)

  static Linear zeros(std::size_t in, std::size_t out) {
    Linear l;
    l.w = Tensor(Shape{in, out});
    l.b = Tensor(Shape{1, out});
    return l;
  }

  // He-style fan-in scaling; gain 1 for output heads, sqrt(2) before ReLU.
  static Linear init(std::size_t in, std::size_t out, RngStream& rng, double gain) {
    Linear l = zeros(in, out);
    const double std_dev = gain / std::sqrt(static_cast<double>(in));
    for (double& v : l.w.data()) v = std_dev * rng.next_gaussian();
    return l;
  }

  std::size_t in_dim() const { return w.dim(0); }
  std::size_t out_dim() const { return w.dim(1); }
};

inline Var linear_forward(Tape& t, const Linear& lin, Var x) {
  if (x.value().rank() != 2 || x.value().dim(1) != lin.in_dim()) {
    throw ShapeError("linear layer expects width " + std::to_string(lin.in_dim()) +
                     ", got " + shape_str(x.value().shape()));
  }
  Var wx = t.matmul(x, t.leaf_for(&lin.w));
  return t.add(wx, t.broadcast_to(t.leaf_for(&lin.b), wx.value().shape()));
}

struct ModelConfig {
  std::size_t input_dim = 16;
  std::size_t feature_dim = 8;   // d
  std::size_t num_classes = 6;   // |Y|
  std::size_t enc_hidden = 32;
  std::size_t enc_layers = 2;    // hidden layers; 0 gives a single linear map
  std::size_t den_hidden = 64;
  std::size_t disc_hidden = 0;   // 0 -> defaults to 2d
  int denoiser_variant = 0;      // 0 mlp, 1 single-block attention

  std::size_t disc_width() const { return disc_hidden ? disc_hidden : 2 * feature_dim; }
};

// ---- encoder f ------------------------------------------------------------

struct EncoderParams {
  std::vector<Linear> layers;  // ReLU between layers, none after the last

  static EncoderParams init(const ModelConfig& cfg, std::uint64_t seed) {
    EncoderParams p;
    RngStream rng(seed, "encoder-init");
    std::size_t in = cfg.input_dim;
    for (std::size_t i = 0; i < cfg.enc_layers; ++i) {
      p.layers.push_back(Linear::init(in, cfg.enc_hidden, rng, std::sqrt(2.0)));
      in = cfg.enc_hidden;
    }
    p.layers.push_back(Linear::init(in, cfg.feature_dim, rng, 1.0));
    return p;
  }

  std::size_t input_dim() const { return layers.front().in_dim(); }
  std::size_t feature_dim() const { return layers.back().out_dim(); }

  void collect(ParamRefs& out, const std::string& prefix = "encoder") {
    for (std::size_t i = 0; i < layers.size(); ++i) {
      out.emplace_back(prefix + ".l" + std::to_string(i) + ".w", &layers[i].w);
      out.emplace_back(prefix + ".l" + std::to_string(i) + ".b", &layers[i].b);
    }
  }
};

inline Var encoder_forward(Tape& t, const EncoderParams& p, Var x) {
  Var h = x;
  for (std::size_t i = 0; i < p.layers.size(); ++i) {
    h = linear_forward(t, p.layers[i], h);
    if (i + 1 < p.layers.size()) h = t.relu(h);
  }
  return h;
}

inline Tensor encode(const EncoderParams& p, const Tensor& x) {
  Tape t;
  return encoder_forward(t, p, t.constant(x)).value();
}

// ---- classifier h ----------------------------------------------------------

struct ClassifierParams {
  Linear out;  // d -> |Y|

  static ClassifierParams init(const ModelConfig& cfg, std::uint64_t seed) {
    ClassifierParams p;
    RngStream rng(seed, "classifier-init");
    p.out = Linear::init(cfg.feature_dim, cfg.num_classes, rng, 1.0);
    return p;
  }

  void collect(ParamRefs& refs, const std::string& prefix = "classifier") {
    refs.emplace_back(prefix + ".w", &out.w);
    refs.emplace_back(prefix + ".b", &out.b);
  }
};

inline Var classifier_logits(Tape& t, const ClassifierParams& p, Var z) {
  return linear_forward(t, p.out, z);
}

inline Var classifier_forward(Tape& t, const ClassifierParams& p, Var z) {
  return t.softmax_rows(classifier_logits(t, p, z));
}

inline Tensor classify(const ClassifierParams& p, const Tensor& z) {
  Tape t;
  return classifier_forward(t, p, t.constant(z)).value();
}

// ---- time embedding --------------------------------------------------------

// Sinusoidal embedding of integer step t into a width-d vector.
inline Tensor time_embedding(int t, std::size_t d) {
  Tensor out(Shape{1, d});
  for (std::size_t i = 0; i < d; ++i) {
    const std::size_t pair = i / 2;
    const double freq = std::pow(10000.0, -2.0 * static_cast<double>(pair) /
                                              static_cast<double>(d));
    const double angle = static_cast<double>(t) * freq;
    out[i] = (i % 2 == 0) ? std::sin(angle) : std::cos(angle);
  }
  return out;
}

inline Tensor time_embedding_rows(const std::vector<int>& ts, std::size_t d) {
  Tensor out(Shape{ts.size(), d});
  for (std::size_t r = 0; r < ts.size(); ++r) {
    const Tensor e = time_embedding(ts[r], d);
    for (std::size_t i = 0; i < d; ++i) out[r * d + i] = e[i];
  }
  return out;
}

// ---- denoiser xi ------------------------------------------------------------

// Variant 0: MLP on concat(z_t, prompt, emb(t)).
// Variant 1: single-block self-attention over the 3-token sequence
// [z_t, prompt, emb(t)] with a residual feedforward, read out at the z_t token.
struct DenoiserParams {
  int variant = 0;
  std::size_t d = 0;
  // variant 0
  Linear m1, m2, m3;  // 3d -> h -> h -> d
  // variant 1
  Linear wq, wk, wv;  // d -> d, no bias used but kept for uniformity
  Linear ff1, ff2;    // d -> h -> d
  Linear head;        // d -> d

  static DenoiserParams init(const ModelConfig& cfg, std::uint64_t seed) {
    DenoiserParams p;
    p.variant = cfg.denoiser_variant;
    p.d = cfg.feature_dim;
    RngStream rng(seed, "denoiser-init");
    const std::size_t d = cfg.feature_dim, h = cfg.den_hidden;
    if (p.variant == 0) {
      p.m1 = Linear::init(3 * d, h, rng, std::sqrt(2.0));
      p.m2 = Linear::init(h, h, rng, std::sqrt(2.0));
      p.m3 = Linear::init(h, d, rng, 1.0);
    } else if (p.variant == 1) {
      p.wq = Linear::init(d, d, rng, 1.0);
      p.wk = Linear::init(d, d, rng, 1.0);
      p.wv = Linear::init(d, d, rng, 1.0);
      p.ff1 = Linear::init(d, h, rng, std::sqrt(2.0));
      p.ff2 = Linear::init(h, d, rng, 1.0);
      p.head = Linear::init(d, d, rng, 1.0);
    } else {
      throw ConfigError("denoiser variant must be 0 (mlp) or 1 (attention)");
    }
    return p;
  }

  void collect(ParamRefs& refs, const std::string& prefix = "denoiser") {
    if (variant == 0) {
      refs.emplace_back(prefix + ".m1.w", &m1.w);
      refs.emplace_back(prefix + ".m1.b", &m1.b);
      refs.emplace_back(prefix + ".m2.w", &m2.w);
      refs.emplace_back(prefix + ".m2.b", &m2.b);
      refs.emplace_back(prefix + ".m3.w", &m3.w);
      refs.emplace_back(prefix + ".m3.b", &m3.b);
    } else {
      refs.emplace_back(prefix + ".wq.w", &wq.w);
      refs.emplace_back(prefix + ".wq.b", &wq.b);
      refs.emplace_back(prefix + ".wk.w", &wk.w);
      refs.emplace_back(prefix + ".wk.b", &wk.b);
      refs.emplace_back(prefix + ".wv.w", &wv.w);
      refs.emplace_back(prefix + ".wv.b", &wv.b);
      refs.emplace_back(prefix + ".ff1.w", &ff1.w);
      refs.emplace_back(prefix + ".ff1.b", &ff1.b);
      refs.emplace_back(prefix + ".ff2.w", &ff2.w);
      refs.emplace_back(prefix + ".ff2.b", &ff2.b);
      refs.emplace_back(prefix + ".head.w", &head.w);
      refs.emplace_back(prefix + ".head.b", &head.b);
    }
  }
};

// z_t and prompt are (B, d); ts gives the step per row, each in [0, T].
inline Var denoiser_forward(Tape& t, const DenoiserParams& p, Var z_t, Var prompt,
                            const std::vector<int>& ts, int T) {
  const Tensor& zv = z_t.value();
  if (zv.rank() != 2 || zv.dim(1) != p.d) {
    throw ShapeError("denoiser expects (B," + std::to_string(p.d) + ") features");
  }
  if (!prompt.value().same_shape(zv)) {
    throw ShapeError("denoiser prompt batch must match feature batch shape");
  }
  const std::size_t batch = zv.dim(0);
  if (ts.size() != batch) throw UsageError("denoiser needs one step per row");
  for (const int step : ts) {
    if (step < 0 || step > T) throw UsageError("denoiser step out of [0,T]");
  }
  Var emb = t.constant(time_embedding_rows(ts, p.d));
  if (p.variant == 0) {
    Var in = t.concat({z_t, prompt, emb}, 1);
    Var h = t.relu(linear_forward(t, p.m1, in));
    h = t.relu(linear_forward(t, p.m2, h));
    return linear_forward(t, p.m3, h);
  }
  // attention variant, one 3-token block per instance
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(p.d));
  std::vector<Var> rows;
  rows.reserve(batch);
  for (std::size_t i = 0; i < batch; ++i) {
    Var zi = t.slice(z_t, 0, i, i + 1);
    Var pi = t.slice(prompt, 0, i, i + 1);
    Var ei = t.slice(emb, 0, i, i + 1);
    Var tok = t.concat({zi, pi, ei}, 0);  // (3, d)
    Var q = linear_forward(t, p.wq, tok);
    Var k = linear_forward(t, p.wk, tok);
    Var v = linear_forward(t, p.wv, tok);
    // scores (3,3) via q k^T assembled column by column
    std::vector<Var> score_cols;
    score_cols.reserve(3);
    for (std::size_t j = 0; j < 3; ++j) {
      Var kj = t.slice(k, 0, j, j + 1);                      // (1, d)
      Var prod = t.mul(q, t.broadcast_to(kj, q.value().shape()));
      score_cols.push_back(t.sum(prod, 1));                  // (3, 1)
    }
    Var scores = t.scale(t.concat(score_cols, 1), inv_sqrt_d);
    Var attn = t.softmax_rows(scores);
    Var mixed = t.matmul(attn, v);                           // (3, d)
    Var blended = t.add(tok, mixed);
    Var ff = linear_forward(t, p.ff2, t.relu(linear_forward(t, p.ff1, blended)));
    Var out_tokens = t.add(blended, ff);
    rows.push_back(t.slice(out_tokens, 0, 0, 1));            // z_t token
  }
  Var stacked = rows.size() == 1 ? rows[0] : t.concat(rows, 0);
  return linear_forward(t, p.head, stacked);
}

// ---- conditional discriminator D --------------------------------------------

struct BatchNormState {
  Tensor gamma, beta;           // trainable
  Tensor running_mean, running_var;  // tracked, momentum 0.1
  double eps = 1e-5;
  double momentum = 0.1;

  static BatchNormState init(std::size_t width) {
    BatchNormState s;
    s.gamma = Tensor(Shape{width}, 1.0);
    s.beta = Tensor(Shape{width});
    s.running_mean = Tensor(Shape{width});
    s.running_var = Tensor(Shape{width}, 1.0);
    return s;
  }

  void update_running(const Tensor& x) {
    const std::size_t b = x.dim(0), f = x.dim(1);
    for (std::size_t j = 0; j < f; ++j) {
      double mu = 0.0;
      for (std::size_t i = 0; i < b; ++i) mu += x[i * f + j];
      mu /= static_cast<double>(b);
      double var = 0.0;
      for (std::size_t i = 0; i < b; ++i) {
        const double d = x[i * f + j] - mu;
        var += d * d;
      }
      var /= static_cast<double>(b);
      running_mean[j] = (1.0 - momentum) * running_mean[j] + momentum * mu;
      running_var[j] = (1.0 - momentum) * running_var[j] + momentum * var;
    }
  }
};

// Normalization through tracked statistics for eval-mode (or B=1) forwards.
inline Var batchnorm_eval(Tape& t, const BatchNormState& bn, Var x) {
  const std::size_t b = x.value().dim(0), f = x.value().dim(1);
  Tensor shift(Shape{1, f}), scl(Shape{1, f});
  for (std::size_t j = 0; j < f; ++j) {
    const double inv = 1.0 / std::sqrt(bn.running_var[j] + bn.eps);
    scl[j] = inv;
    shift[j] = -bn.running_mean[j] * inv;
  }
  const Shape full{b, f};
  Var normalized = t.add(t.mul(x, t.broadcast_to(t.constant(scl), full)),
                         t.broadcast_to(t.constant(shift), full));
  Var g = t.broadcast_to(t.leaf_for(&bn.gamma), full);
  Var be = t.broadcast_to(t.leaf_for(&bn.beta), full);
  return t.add(t.mul(normalized, g), be);
}

struct DiscriminatorParams {
  Linear l1, l2, l3;
  BatchNormState bn1, bn2;

  static DiscriminatorParams init(const ModelConfig& cfg, std::uint64_t seed) {
    DiscriminatorParams p;
    RngStream rng(seed, "discriminator-init");
    const std::size_t in = cfg.feature_dim + cfg.num_classes;
    const std::size_t h = cfg.disc_width();
    p.l1 = Linear::init(in, h, rng, std::sqrt(2.0));
    p.l2 = Linear::init(h, h, rng, std::sqrt(2.0));
    p.l3 = Linear::init(h, 1, rng, 1.0);
    p.bn1 = BatchNormState::init(h);
    p.bn2 = BatchNormState::init(h);
    return p;
  }

  void collect(ParamRefs& refs, const std::string& prefix = "discriminator") {
    refs.emplace_back(prefix + ".l1.w", &l1.w);
    refs.emplace_back(prefix + ".l1.b", &l1.b);
    refs.emplace_back(prefix + ".l2.w", &l2.w);
    refs.emplace_back(prefix + ".l2.b", &l2.b);
    refs.emplace_back(prefix + ".l3.w", &l3.w);
    refs.emplace_back(prefix + ".l3.b", &l3.b);
    refs.emplace_back(prefix + ".bn1.gamma", &bn1.gamma);
    refs.emplace_back(prefix + ".bn1.beta", &bn1.beta);
    refs.emplace_back(prefix + ".bn2.gamma", &bn2.gamma);
    refs.emplace_back(prefix + ".bn2.beta", &bn2.beta);
  }

  // Tracked but not trained; serialized with the checkpoint.
  void collect_tracked(ParamRefs& refs, const std::string& prefix = "discriminator") {
    refs.emplace_back(prefix + ".bn1.running_mean", &bn1.running_mean);
    refs.emplace_back(prefix + ".bn1.running_var", &bn1.running_var);
    refs.emplace_back(prefix + ".bn2.running_mean", &bn2.running_mean);
    refs.emplace_back(prefix + ".bn2.running_var", &bn2.running_var);
  }
};

inline void check_onehot_rows(const Tensor& onehot) {
  const std::size_t m = onehot.rows(), n = onehot.cols();
  for (std::size_t i = 0; i < m; ++i) {
    std::size_t ones = 0;
    for (std::size_t j = 0; j < n; ++j) {
      const double v = onehot[i * n + j];
      if (v == 1.0) ++ones;
      else if (v != 0.0) throw UsageError("one-hot rows must contain only 0 and 1");
    }
    if (ones != 1) throw UsageError("one-hot row must contain exactly one 1");
  }
}

// z: (B, d) feature batch; onehot: (B, |Y|). Output (B, 1) in (0,1).
// Training mode uses per-batch statistics (B >= 2) and, when update_stats is
// set, folds them into the running estimates.
inline Var discriminator_forward(Tape& t, DiscriminatorParams& p, Var z,
                                 Var onehot, bool training,
                                 bool update_stats = false) {
  check_onehot_rows(onehot.value());
  if (onehot.value().rows() != z.value().rows()) {
    throw ShapeError("discriminator label batch must match feature batch");
  }
  Var h = linear_forward(t, p.l1, t.concat({z, onehot}, 1));
  if (training) {
    if (update_stats) p.bn1.update_running(h.value());
    h = t.batchnorm(h, t.leaf_for(&p.bn1.gamma), t.leaf_for(&p.bn1.beta), p.bn1.eps);
  } else {
    h = batchnorm_eval(t, p.bn1, h);
  }
  h = t.relu(h);
  h = linear_forward(t, p.l2, h);
  if (training) {
    if (update_stats) p.bn2.update_running(h.value());
    h = t.batchnorm(h, t.leaf_for(&p.bn2.gamma), t.leaf_for(&p.bn2.beta), p.bn2.eps);
  } else {
    h = batchnorm_eval(t, p.bn2, h);
  }
  h = t.relu(h);
  return sigmoid_columns(linear_forward(t, p.l3, h));
}

inline Tensor onehot_rows(const std::vector<int>& classes, std::size_t num_classes) {
  Tensor out(Shape{classes.size(), num_classes});
  for (std::size_t i = 0; i < classes.size(); ++i) {
    if (classes[i] < 0 || static_cast<std::size_t>(classes[i]) >= num_classes) {
      throw UsageError("class id out of range for one-hot encoding");
    }
    out[i * num_classes + static_cast<std::size_t>(classes[i])] = 1.0;
  }
  return out;
}

}  // namespace pdfd
