#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "pdfd/autodiff.hpp"
#include "pdfd/diffusion.hpp"
#include "pdfd/errors.hpp"
#include "pdfd/models.hpp"
#include "pdfd/random.hpp"
#include "pdfd/tensor.hpp"

namespace pdfd {

// ---- batch assembly ----------------------------------------------------------

// Real side: encoded unlabeled features with their hard pseudo-labels.
// Fake side: a noise start, a prompt column and a sampled class per row,
// c ~ Uniform(Y); sides are equal-sized by construction.
struct AdvBatch {
  Tensor real_features;  // (B, d), encoded without gradient
  Tensor real_onehot;    // (B, |Y|)
  Tensor fake_noise;     // (B, d)
  Tensor fake_prompts;   // (B, d)
  Tensor fake_onehot;    // (B, |Y|)
  std::vector<int> fake_classes;

  std::size_t size() const { return real_features.rows(); }
};

inline AdvBatch make_adv_batch(const EncoderParams& enc, const Tensor& xu_batch,
                               const std::vector<int>& pseudo_hard,
                               const Tensor& prototypes, std::size_t num_classes,
                               RngStream& class_rng, RngStream& noise_rng) {
  const std::size_t b = xu_batch.rows();
  if (b == 0) throw UsageError("adversarial batch must be nonempty");
  if (pseudo_hard.size() != b) throw UsageError("pseudo-label count must match the batch");
  AdvBatch batch;
  batch.real_features = encode(enc, xu_batch);
  batch.real_onehot = onehot_rows(pseudo_hard, num_classes);
  batch.fake_classes.resize(b);
  for (std::size_t i = 0; i < b; ++i) {
    batch.fake_classes[i] = static_cast<int>(class_rng.next_below(num_classes));
  }
  batch.fake_noise = sample_noise(b, prototypes.dim(0), noise_rng);
  batch.fake_prompts = prompt_rows(prototypes, batch.fake_classes);
  batch.fake_onehot = onehot_rows(batch.fake_classes, num_classes);
  return batch;
}

inline Tensor generate_fake_features(const DenoiserParams& den, const NoiseSchedule& sched,
                                     const AdvBatch& batch, int t_start = -1) {
  return reverse_generate(batch.fake_noise, batch.fake_prompts, sched, den, false, nullptr,
                          t_start);
}

// ---- objectives ----------------------------------------------------------------

inline Var clamped_log(Tape& t, Var x) { return t.log(clamp_min(x, 1e-12)); }

// E_real[log D(f(x), y~)] + E_fake[log(1 - D(z0, 1_c))], with the fake
// features passed in as a gradient-free snapshot. This is the quantity the
// discriminator ascends; both forwards run in the requested mode.
inline Var adversarial_value(Tape& t, DiscriminatorParams& disc, const AdvBatch& batch,
                             const Tensor& fake_features, bool training = true,
                             bool update_stats = false) {
  if (batch.size() == 0) throw UsageError("adversarial batch must be nonempty");
  if (fake_features.rows() != batch.size()) {
    throw UsageError("real and fake sides must be equal-sized");
  }
  Var d_real = discriminator_forward(t, disc, t.constant(batch.real_features),
                                     t.constant(batch.real_onehot), training, update_stats);
  Var d_fake = discriminator_forward(t, disc, t.constant(fake_features),
                                     t.constant(batch.fake_onehot), training, update_stats);
  Var ones = t.constant(Tensor(d_fake.value().shape(), 1.0));
  Var real_term = t.mean(clamped_log(t, d_real));
  Var fake_term = t.mean(clamped_log(t, t.sub(ones, d_fake)));
  return t.add(real_term, fake_term);
}

// Convenience overload generating the fake side without gradient.
inline Var adversarial_value(Tape& t, DiscriminatorParams& disc, const DenoiserParams& den,
                             const NoiseSchedule& sched, const AdvBatch& batch,
                             bool training = true, bool update_stats = false) {
  return adversarial_value(t, disc, batch, generate_fake_features(den, sched, batch),
                           training, update_stats);
}

// Fake-side term with the reverse chain on the tape, so gradients reach the
// denoiser through every differentiated step. Saturating form log(1 - D) by
// default; the alternative minimizes -log D instead.
inline Var generator_objective(Tape& t, DiscriminatorParams& disc, const DenoiserParams& den,
                               const NoiseSchedule& sched, const AdvBatch& batch,
                               bool saturating = true, int t_start = -1) {
  if (batch.size() == 0) throw UsageError("adversarial batch must be nonempty");
  const std::size_t steps = t_start < 0 ? static_cast<std::size_t>(sched.T)
                                        : static_cast<std::size_t>(t_start);
  const std::size_t h = den.variant == 0 ? den.m1.out_dim() : den.ff1.out_dim();
  const std::size_t per_step = batch.size() * (16 * den.d + 4 * h) + 64;
  if (steps * per_step > (1ull << 28)) {
    throw ConfigError("differentiated reverse chain would exceed the tape budget; "
                      "lower t_adv");
  }
  Var z0 = reverse_generate_var(t, batch.fake_noise, batch.fake_prompts, sched, den, false,
                                nullptr, t_start);
  Var d_fake = discriminator_forward(t, disc, z0, t.constant(batch.fake_onehot), true, false);
  if (saturating) {
    Var ones = t.constant(Tensor(d_fake.value().shape(), 1.0));
    return t.mean(clamped_log(t, t.sub(ones, d_fake)));
  }
  return t.scale(t.mean(clamped_log(t, d_fake)), -1.0);
}

// ---- alternating steps -----------------------------------------------------------

// One plain ascent step on the adversarial value w.r.t. the discriminator's
// trainable parameters; batch-statistic normalization, running stats folded
// in. Returns the pre-step objective.
inline double discriminator_step(DiscriminatorParams& disc, const AdvBatch& batch,
                                 const Tensor& fake_features, double lr) {
  Tape t;
  Var v = adversarial_value(t, disc, batch, fake_features, true, true);
  t.backward(v);
  ParamRefs refs;
  disc.collect(refs);
  for (auto& [name, param] : refs) {
    const Tensor g = t.grad(t.leaf_for(param));
    for (std::size_t i = 0; i < param->numel(); ++i) param->data()[i] += lr * g[i];
  }
  return v.value()[0];
}

// One plain descent step on the fake-side term w.r.t. the denoiser, the
// discriminator frozen. Returns the pre-step objective.
inline double generator_step(DiscriminatorParams& disc, DenoiserParams& den,
                             const NoiseSchedule& sched, const AdvBatch& batch, double lr,
                             bool saturating = true, int t_start = -1) {
  Tape t;
  Var g = generator_objective(t, disc, den, sched, batch, saturating, t_start);
  t.backward(g);
  ParamRefs refs;
  den.collect(refs);
  for (auto& [name, param] : refs) {
    const Tensor grad = t.grad(t.leaf_for(param));
    for (std::size_t i = 0; i < param->numel(); ++i) param->data()[i] -= lr * grad[i];
  }
  return g.value()[0];
}

// ---- telemetry --------------------------------------------------------------------

struct DiscAccuracy {
  double real_acc = 0.0;  // fraction of real rows with D > 0.5
  double fake_acc = 0.0;  // fraction of fake rows with D < 0.5
};

// Measured in eval mode (running statistics), leaving all state untouched.
inline DiscAccuracy discriminator_accuracy(DiscriminatorParams& disc, const AdvBatch& batch,
                                           const Tensor& fake_features) {
  Tape t;
  const Tensor d_real = discriminator_forward(t, disc, t.constant(batch.real_features),
                                              t.constant(batch.real_onehot), false)
                            .value();
  const Tensor d_fake = discriminator_forward(t, disc, t.constant(fake_features),
                                              t.constant(batch.fake_onehot), false)
                            .value();
  DiscAccuracy acc;
  for (std::size_t i = 0; i < d_real.numel(); ++i) acc.real_acc += d_real[i] > 0.5 ? 1.0 : 0.0;
  for (std::size_t i = 0; i < d_fake.numel(); ++i) acc.fake_acc += d_fake[i] < 0.5 ? 1.0 : 0.0;
  acc.real_acc /= static_cast<double>(d_real.numel());
  acc.fake_acc /= static_cast<double>(d_fake.numel());
  return acc;
}

}  // namespace pdfd
