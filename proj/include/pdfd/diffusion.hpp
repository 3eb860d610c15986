#pragma once

#include <cmath>
#include <fstream>
#include <string>
#include <vector>

#include "pdfd/autodiff.hpp"
#include "pdfd/data.hpp"
#include "pdfd/errors.hpp"
#include "pdfd/models.hpp"
#include "pdfd/random.hpp"
#include "pdfd/tensor.hpp"

namespace pdfd {

// beta/alpha/sigma are 1-indexed (index 0 unused); alpha_bar is 0-indexed
// with alpha_bar[0] = 1.
struct NoiseSchedule {
  int T = 0;
  std::vector<double> beta;
  std::vector<double> alpha;
  std::vector<double> alpha_bar;
  std::vector<double> sigma;

  void check_step(int t, int lo) const {
    if (t < lo || t > T) {
      throw UsageError("step " + std::to_string(t) + " outside [" +
                       std::to_string(lo) + "," + std::to_string(T) + "]");
    }
  }
};

inline NoiseSchedule build_schedule(int T, double beta_min = 1e-4,
                                    double beta_max = 0.02) {
  if (T < 1) throw ConfigError("schedule needs T >= 1");
  if (!(beta_min > 0.0) || !(beta_min <= beta_max) || !(beta_max < 1.0)) {
    throw ConfigError("schedule needs 0 < beta_min <= beta_max < 1");
  }
  NoiseSchedule s;
  s.T = T;
  s.beta.resize(static_cast<std::size_t>(T) + 1, 0.0);
  s.alpha.resize(static_cast<std::size_t>(T) + 1, 0.0);
  s.sigma.resize(static_cast<std::size_t>(T) + 1, 0.0);
  s.alpha_bar.resize(static_cast<std::size_t>(T) + 1, 0.0);
  s.alpha_bar[0] = 1.0;
  for (int t = 1; t <= T; ++t) {
    const double frac = T == 1 ? 0.0
                               : static_cast<double>(t - 1) / static_cast<double>(T - 1);
    s.beta[static_cast<std::size_t>(t)] = beta_min + frac * (beta_max - beta_min);
    s.alpha[static_cast<std::size_t>(t)] = 1.0 - s.beta[static_cast<std::size_t>(t)];
    s.sigma[static_cast<std::size_t>(t)] = std::sqrt(s.beta[static_cast<std::size_t>(t)]);
    s.alpha_bar[static_cast<std::size_t>(t)] =
        s.alpha_bar[static_cast<std::size_t>(t - 1)] * s.alpha[static_cast<std::size_t>(t)];
  }
  return s;
}

// z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps, elementwise over any shape.
inline Tensor forward_diffuse(const Tensor& z0, int t, const Tensor& eps,
                              const NoiseSchedule& sched) {
  sched.check_step(t, 0);
  if (!z0.same_shape(eps)) throw ShapeError("noise draw must match feature shape");
  const double ab = sched.alpha_bar[static_cast<std::size_t>(t)];
  const double a = std::sqrt(ab), b = std::sqrt(1.0 - ab);
  Tensor out = z0;
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a * out[i] + b * eps[i];
  return out;
}

// Batched on-tape forward noising with a per-row step; eps is a detached draw.
inline Var forward_diffuse_rows(Tape& tape, Var z0, const std::vector<int>& ts,
                                const Tensor& eps, const NoiseSchedule& sched) {
  const Tensor& zv = z0.value();
  if (zv.rank() != 2) throw ShapeError("forward diffusion expects a (B,d) batch");
  if (!zv.same_shape(eps)) throw ShapeError("noise draw must match feature shape");
  const std::size_t b = zv.dim(0), d = zv.dim(1);
  if (ts.size() != b) throw UsageError("one diffusion step per row required");
  Tensor keep(Shape{b, 1});
  Tensor noise(Shape{b, d});
  for (std::size_t i = 0; i < b; ++i) {
    sched.check_step(ts[i], 0);
    const double ab = sched.alpha_bar[static_cast<std::size_t>(ts[i])];
    keep[i] = std::sqrt(ab);
    const double w = std::sqrt(1.0 - ab);
    for (std::size_t j = 0; j < d; ++j) noise[i * d + j] = w * eps[i * d + j];
  }
  Var scaled = tape.mul(z0, tape.broadcast_to(tape.constant(keep), Shape{b, d}));
  return tape.add(scaled, tape.constant(noise));
}

// One deterministic reverse update (Eq. style: no noise term):
// z_{t-1} = (z_t - ((1-alpha_t)/sqrt(1-abar_t)) eps_hat) / sqrt(alpha_t)
inline Tensor reverse_step(const Tensor& z_t, const Tensor& eps_hat, int t,
                           const NoiseSchedule& sched) {
  sched.check_step(t, 1);
  if (!z_t.same_shape(eps_hat)) throw ShapeError("noise prediction must match feature shape");
  const double a = sched.alpha[static_cast<std::size_t>(t)];
  const double ab = sched.alpha_bar[static_cast<std::size_t>(t)];
  const double coef = (1.0 - a) / std::sqrt(1.0 - ab);
  const double inv = 1.0 / std::sqrt(a);
  Tensor out = z_t;
  for (std::size_t i = 0; i < out.numel(); ++i) {
    out[i] = inv * (out[i] - coef * eps_hat[i]);
  }
  return out;
}

// Posterior mean of q(z_{t-1} | z_t, z0):
// mu = sqrt(abar_{t-1}) beta_t / (1-abar_t) * z0
//    + sqrt(alpha_t) (1-abar_{t-1}) / (1-abar_t) * z_t
inline Tensor posterior_mean(const Tensor& z0, const Tensor& z_t, int t,
                             const NoiseSchedule& sched) {
  sched.check_step(t, 1);
  if (!z0.same_shape(z_t)) throw ShapeError("posterior mean needs matching shapes");
  const double ab_t = sched.alpha_bar[static_cast<std::size_t>(t)];
  const double ab_prev = sched.alpha_bar[static_cast<std::size_t>(t - 1)];
  const double beta_t = sched.beta[static_cast<std::size_t>(t)];
  const double alpha_t = sched.alpha[static_cast<std::size_t>(t)];
  const double c0 = std::sqrt(ab_prev) * beta_t / (1.0 - ab_t);
  const double ct = std::sqrt(alpha_t) * (1.0 - ab_prev) / (1.0 - ab_t);
  Tensor out = z0;
  for (std::size_t i = 0; i < out.numel(); ++i) {
    out[i] = c0 * z0[i] + ct * z_t[i];
  }
  return out;
}

// Prompt rows for a batch: row i copies column classes[i] of the (d, |Y|)
// prototype matrix. The result is a plain tensor, deliberately detached.
inline Tensor prompt_rows(const Tensor& prototypes, const std::vector<int>& classes) {
  if (prototypes.rank() != 2) throw ShapeError("prototype matrix must be (d, |Y|)");
  const std::size_t d = prototypes.dim(0), k = prototypes.dim(1);
  Tensor out(Shape{classes.size(), d});
  for (std::size_t i = 0; i < classes.size(); ++i) {
    if (classes[i] < 0 || static_cast<std::size_t>(classes[i]) >= k) {
      throw UsageError("class id out of range for prompt lookup");
    }
    for (std::size_t j = 0; j < d; ++j) {
      out[i * d + j] = prototypes[j * k + static_cast<std::size_t>(classes[i])];
    }
  }
  return out;
}

inline std::vector<int> sample_steps(std::size_t n, const NoiseSchedule& sched,
                                     RngStream& rng) {
  std::vector<int> ts(n);
  for (std::size_t i = 0; i < n; ++i) {
    ts[i] = 1 + static_cast<int>(rng.next_below(static_cast<std::uint64_t>(sched.T)));
  }
  return ts;
}

inline Tensor sample_noise(std::size_t rows, std::size_t cols, RngStream& rng) {
  return Tensor(Shape{rows, cols}, rng.gaussian_vector(rows * cols));
}

using DenoiseFn =
    std::function<Var(Tape&, Var /*z_t*/, Var /*prompts*/, const std::vector<int>& /*ts*/)>;

// Noise-prediction objective with an injectable noise predictor (used by the
// oracle tests): mean over the batch of the squared L2 distance between the
// drawn noise and the prediction at per-row steps.
inline Var diffusion_loss_with(Tape& tape, const EncoderParams& enc,
                               const DenoiseFn& predict, const Tensor& x,
                               const Tensor& prompts, const NoiseSchedule& sched,
                               const std::vector<int>& ts, const Tensor& eps) {
  if (x.rank() != 2 || x.dim(0) == 0) throw UsageError("diffusion loss needs a nonempty batch");
  Var z0 = encoder_forward(tape, enc, tape.constant(x));
  Var z_t = forward_diffuse_rows(tape, z0, ts, eps, sched);
  Var eps_hat = predict(tape, z_t, tape.constant(prompts), ts);
  Var diff = tape.sub(tape.constant(eps), eps_hat);
  return tape.mean(tape.sum(tape.square(diff), 1));
}

// Gradients flow into the denoiser and into the encoder through z0; prompts
// arrive as a detached tensor.
inline Var diffusion_loss(Tape& tape, const EncoderParams& enc,
                          const DenoiserParams& den, const Tensor& x,
                          const Tensor& prompts, const NoiseSchedule& sched,
                          const std::vector<int>& ts, const Tensor& eps) {
  const DenoiseFn predict = [&den, &sched](Tape& t, Var z_t, Var p,
                                           const std::vector<int>& steps) {
    return denoiser_forward(t, den, z_t, p, steps, sched.T);
  };
  return diffusion_loss_with(tape, enc, predict, x, prompts, sched, ts, eps);
}

// Reverse chain on the tape, z_{t_start} = eps down to z_0 (t_start denoiser
// calls; default t_start = T). Deterministic by default; the stochastic flag
// adds sigma_t * eps' per step.
inline Var reverse_generate_var(Tape& tape, const Tensor& eps,
                                const Tensor& prompts, const NoiseSchedule& sched,
                                const DenoiserParams& den, bool stochastic = false,
                                RngStream* noise_rng = nullptr, int t_start = -1) {
  if (eps.rank() != 2) throw ShapeError("reverse generation expects a (B,d) start");
  if (!eps.same_shape(prompts)) throw ShapeError("prompt batch must match start shape");
  if (stochastic && noise_rng == nullptr) {
    throw UsageError("stochastic sampling needs a noise stream");
  }
  if (t_start < 0) t_start = sched.T;
  if (t_start < 1 || t_start > sched.T) {
    throw ConfigError("reverse start step must lie in [1, T]");
  }
  const std::size_t b = eps.dim(0), d = eps.dim(1);
  Var prompt_var = tape.constant(prompts);
  Var z = tape.constant(eps);
  for (int t = t_start; t >= 1; --t) {
    const std::vector<int> ts(b, t);
    Var eps_hat = denoiser_forward(tape, den, z, prompt_var, ts, sched.T);
    const double a = sched.alpha[static_cast<std::size_t>(t)];
    const double ab = sched.alpha_bar[static_cast<std::size_t>(t)];
    const double coef = (1.0 - a) / std::sqrt(1.0 - ab);
    const double inv = 1.0 / std::sqrt(a);
    z = tape.scale(tape.sub(z, tape.scale(eps_hat, coef)), inv);
    if (stochastic) {
      Tensor extra(Shape{b, d}, noise_rng->gaussian_vector(b * d));
      for (double& v : extra.data()) v *= sched.sigma[static_cast<std::size_t>(t)];
      z = tape.add(z, tape.constant(extra));
    }
  }
  return z;
}

inline Tensor reverse_generate(const Tensor& eps, const Tensor& prompts,
                               const NoiseSchedule& sched, const DenoiserParams& den,
                               bool stochastic = false, RngStream* noise_rng = nullptr,
                               int t_start = -1) {
  Tape tape;
  return reverse_generate_var(tape, eps, prompts, sched, den, stochastic, noise_rng, t_start)
      .value();
}

// Generated-feature dump: "class_id,z0,...,z{d-1}", one row per sample.
inline void save_generated_csv(const std::string& path,
                               const std::vector<int>& classes,
                               const Tensor& features) {
  if (features.rank() != 2 || features.dim(0) != classes.size()) {
    throw ShapeError("generated dump needs one class per feature row");
  }
  std::ofstream out(path);
  if (!out) throw DataError("cannot open " + path + " for writing");
  const std::size_t d = features.dim(1);
  out << "class_id";
  for (std::size_t j = 0; j < d; ++j) out << ",z" << j;
  out << '\n';
  for (std::size_t i = 0; i < classes.size(); ++i) {
    out << classes[i];
    for (std::size_t j = 0; j < d; ++j) {
      out << ',' << detail::format_double(features[i * d + j]);
    }
    out << '\n';
  }
  if (!out) throw DataError("write failed for " + path);
}

}  // namespace pdfd
