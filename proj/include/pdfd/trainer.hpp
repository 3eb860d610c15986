#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numbers>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pdfd/adversarial.hpp"
#include "pdfd/autodiff.hpp"
#include "pdfd/checkpoint.hpp"
#include "pdfd/data.hpp"
#include "pdfd/diffusion.hpp"
#include "pdfd/errors.hpp"
#include "pdfd/eval.hpp"
#include "pdfd/models.hpp"
#include "pdfd/owssl.hpp"
#include "pdfd/random.hpp"
#include "pdfd/tensor.hpp"

namespace pdfd {

// ---- configuration ----------------------------------------------------------

struct TrainConfig {
  double gamma_u = 0.5;      // weight on the pseudo-labeled CE term
  double gamma_diff = 1.0;   // weight on the denoising term
  double gamma_adv = 1.0;    // weight on the generator term
  double tau = 0.5;          // pseudo-label confidence threshold
  int T = 50;                // diffusion steps
  int t_adv = -1;            // differentiated reverse-chain start; -1 means T
  double base_lr = 0.05;
  double min_lr = 0.0;
  int epochs = 200;
  std::size_t batch_size = 64;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  double disc_lr_scale = 1.0;
  double grad_clip = 100.0;  // global-norm cap per update; 0 disables
  std::uint64_t seed = 1;
  double augment_noise_std = 0.1;
  int denoiser_variant = 0;
  int checkpoint_every = 0;  // epochs between periodic checkpoints; 0 disables
  int warmup_epochs = 1;     // epochs labeled by k-means before self-labeling

  // Ablation switches. A disabled term is skipped entirely, not just zeroed,
  // and every random consumer owns its own stream, so toggling one term leaves
  // the rest of the run untouched.
  bool no_ce_l = false;
  bool no_ce_u = false;
  bool no_diff = false;
  bool no_adv = false;
  bool no_class_condition = false;  // zero prompts, uninformative class inputs
  bool naive_selection = false;     // keep every confident instance, skip balancing

  std::string prompt_mode = "prototype";  // prototype | onehot | probs
  bool adv_real_confident_only = false;   // restrict the real side to Q
  bool adv_nonsaturating = false;         // -log D(fake) instead of log(1 - D)

  void validate() const {
    if (gamma_u < 0.0 || gamma_diff < 0.0 || gamma_adv < 0.0) {
      throw ConfigError("loss weights must be >= 0");
    }
    if (!(tau > 0.0 && tau < 1.0)) throw ConfigError("tau must lie in (0,1)");
    if (T < 1) throw ConfigError("T must be >= 1");
    if (t_adv != -1 && (t_adv < 1 || t_adv > T)) {
      throw ConfigError("t_adv must lie in [1, T] or be -1");
    }
    if (!(base_lr > 0.0)) throw ConfigError("base_lr must be positive");
    if (min_lr < 0.0 || min_lr > base_lr) {
      throw ConfigError("min_lr must lie in [0, base_lr]");
    }
    if (epochs < 0) throw ConfigError("epochs must be >= 0");
    if (batch_size < 2) throw ConfigError("batch_size must be >= 2");
    if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("momentum must lie in [0,1)");
    if (weight_decay < 0.0) throw ConfigError("weight_decay must be >= 0");
    if (!(disc_lr_scale > 0.0)) throw ConfigError("disc_lr_scale must be positive");
    if (grad_clip < 0.0) throw ConfigError("grad_clip must be >= 0");
    if (augment_noise_std < 0.0) throw ConfigError("augment_noise_std must be >= 0");
    if (denoiser_variant != 0 && denoiser_variant != 1) {
      throw ConfigError("denoiser_variant must be 0 or 1");
    }
    if (checkpoint_every < 0) throw ConfigError("checkpoint_every must be >= 0");
    if (warmup_epochs < 1) throw ConfigError("warmup_epochs must be >= 1");
    if (prompt_mode != "prototype" && prompt_mode != "onehot" && prompt_mode != "probs") {
      throw ConfigError("prompt_mode must be one of prototype, onehot, probs");
    }
    if (no_ce_l && no_ce_u && no_diff && no_adv) {
      throw ConfigError("every loss term is disabled");
    }
  }
};

// Toy-task generation knobs, kept alongside the trainer config so one flat
// JSON document describes a full run.
struct DataConfig {
  std::size_t data_classes = 6;
  std::size_t data_dim = 16;
  std::size_t data_per_class = 100;
  double data_std = 1.0;
  double data_radius = 4.0;
  double data_separation = 4.0;
  double seen_fraction = 0.5;
  double labeled_fraction = 0.5;
  double test_fraction = 0.2;
  std::uint64_t data_seed = 13;  // mixture generation and split assignment
  std::string data_path;         // when set, load features from disk instead

  void validate() const {
    if (data_path.empty()) {
      if (data_classes < 2) throw ConfigError("data_classes must be >= 2");
      if (data_dim == 0) throw ConfigError("data_dim must be positive");
      if (data_per_class == 0) throw ConfigError("data_per_class must be positive");
      if (!(data_std > 0.0)) throw ConfigError("data_std must be positive");
      if (!(data_radius > 0.0)) throw ConfigError("data_radius must be positive");
      if (data_separation < 0.0) throw ConfigError("data_separation must be >= 0");
    }
    if (!(seen_fraction > 0.0 && seen_fraction < 1.0)) {
      throw ConfigError("seen_fraction must lie in (0,1)");
    }
    if (!(labeled_fraction > 0.0 && labeled_fraction <= 1.0)) {
      throw ConfigError("labeled_fraction must lie in (0,1]");
    }
    if (!(test_fraction > 0.0 && test_fraction < 1.0)) {
      throw ConfigError("test_fraction must lie in (0,1)");
    }
  }
};

// Loads the feature file when data_path is set, otherwise generates the toy
// mixture described by the config.
inline Dataset build_dataset(const DataConfig& dcfg) {
  dcfg.validate();
  if (!dcfg.data_path.empty()) return load_features(dcfg.data_path);
  const MixtureSpec spec =
      make_toy_mixture_spec(dcfg.data_seed, dcfg.data_classes, dcfg.data_dim, dcfg.data_std,
                            dcfg.data_per_class, dcfg.data_radius, dcfg.data_separation);
  return generate_gaussian_mixture(spec);
}

inline OwsslSplit build_split(const Dataset& ds, const DataConfig& dcfg) {
  return make_owssl_split(ds, dcfg.seen_fraction, dcfg.labeled_fraction, dcfg.test_fraction,
                          dcfg.data_seed);
}

namespace detail {

template <typename T>
inline T json_get(const nlohmann::json& value, const std::string& key) {
  try {
    return value.get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError("config key '" + key + "' has the wrong type");
  }
}

}  // namespace detail

// Parses a flat JSON object into the three config structs; unknown keys are
// rejected by name so typos never silently fall back to defaults.
inline void parse_train_config(const nlohmann::json& doc, TrainConfig& cfg,
                               ModelConfig& mcfg, DataConfig& dcfg) {
  if (!doc.is_object()) throw ConfigError("config document must be a JSON object");
  using detail::json_get;
  for (const auto& [key, value] : doc.items()) {
    if (key == "gamma_u") cfg.gamma_u = json_get<double>(value, key);
    else if (key == "gamma_diff") cfg.gamma_diff = json_get<double>(value, key);
    else if (key == "gamma_adv") cfg.gamma_adv = json_get<double>(value, key);
    else if (key == "tau") cfg.tau = json_get<double>(value, key);
    else if (key == "T") cfg.T = json_get<int>(value, key);
    else if (key == "t_adv") cfg.t_adv = json_get<int>(value, key);
    else if (key == "base_lr") cfg.base_lr = json_get<double>(value, key);
    else if (key == "min_lr") cfg.min_lr = json_get<double>(value, key);
    else if (key == "epochs") cfg.epochs = json_get<int>(value, key);
    else if (key == "batch_size") cfg.batch_size = json_get<std::size_t>(value, key);
    else if (key == "momentum") cfg.momentum = json_get<double>(value, key);
    else if (key == "weight_decay") cfg.weight_decay = json_get<double>(value, key);
    else if (key == "disc_lr_scale") cfg.disc_lr_scale = json_get<double>(value, key);
    else if (key == "grad_clip") cfg.grad_clip = json_get<double>(value, key);
    else if (key == "seed") cfg.seed = json_get<std::uint64_t>(value, key);
    else if (key == "augment_noise_std") cfg.augment_noise_std = json_get<double>(value, key);
    else if (key == "denoiser_variant") cfg.denoiser_variant = json_get<int>(value, key);
    else if (key == "checkpoint_every") cfg.checkpoint_every = json_get<int>(value, key);
    else if (key == "warmup_epochs") cfg.warmup_epochs = json_get<int>(value, key);
    else if (key == "no_ce_l") cfg.no_ce_l = json_get<bool>(value, key);
    else if (key == "no_ce_u") cfg.no_ce_u = json_get<bool>(value, key);
    else if (key == "no_diff") cfg.no_diff = json_get<bool>(value, key);
    else if (key == "no_adv") cfg.no_adv = json_get<bool>(value, key);
    else if (key == "no_class_condition") cfg.no_class_condition = json_get<bool>(value, key);
    else if (key == "naive_selection") cfg.naive_selection = json_get<bool>(value, key);
    else if (key == "prompt_mode") cfg.prompt_mode = json_get<std::string>(value, key);
    else if (key == "adv_real_confident_only") cfg.adv_real_confident_only = json_get<bool>(value, key);
    else if (key == "adv_nonsaturating") cfg.adv_nonsaturating = json_get<bool>(value, key);
    else if (key == "feature_dim") mcfg.feature_dim = json_get<std::size_t>(value, key);
    else if (key == "enc_hidden") mcfg.enc_hidden = json_get<std::size_t>(value, key);
    else if (key == "enc_layers") mcfg.enc_layers = json_get<std::size_t>(value, key);
    else if (key == "den_hidden") mcfg.den_hidden = json_get<std::size_t>(value, key);
    else if (key == "disc_hidden") mcfg.disc_hidden = json_get<std::size_t>(value, key);
    else if (key == "data_classes") dcfg.data_classes = json_get<std::size_t>(value, key);
    else if (key == "data_dim") dcfg.data_dim = json_get<std::size_t>(value, key);
    else if (key == "data_per_class") dcfg.data_per_class = json_get<std::size_t>(value, key);
    else if (key == "data_std") dcfg.data_std = json_get<double>(value, key);
    else if (key == "data_radius") dcfg.data_radius = json_get<double>(value, key);
    else if (key == "data_separation") dcfg.data_separation = json_get<double>(value, key);
    else if (key == "seen_fraction") dcfg.seen_fraction = json_get<double>(value, key);
    else if (key == "labeled_fraction") dcfg.labeled_fraction = json_get<double>(value, key);
    else if (key == "test_fraction") dcfg.test_fraction = json_get<double>(value, key);
    else if (key == "data_seed") dcfg.data_seed = json_get<std::uint64_t>(value, key);
    else if (key == "data_path") dcfg.data_path = json_get<std::string>(value, key);
    else throw ConfigError("unknown config key: " + key);
  }
  mcfg.denoiser_variant = cfg.denoiser_variant;
  cfg.validate();
  dcfg.validate();
}

// Every knob, including defaulted ones, in one reproducible document.
inline nlohmann::json resolved_config_json(const TrainConfig& cfg, const ModelConfig& mcfg,
                                           const DataConfig& dcfg) {
  nlohmann::json doc;
  doc["gamma_u"] = cfg.gamma_u;
  doc["gamma_diff"] = cfg.gamma_diff;
  doc["gamma_adv"] = cfg.gamma_adv;
  doc["tau"] = cfg.tau;
  doc["T"] = cfg.T;
  doc["t_adv"] = cfg.t_adv;
  doc["base_lr"] = cfg.base_lr;
  doc["min_lr"] = cfg.min_lr;
  doc["epochs"] = cfg.epochs;
  doc["batch_size"] = cfg.batch_size;
  doc["momentum"] = cfg.momentum;
  doc["weight_decay"] = cfg.weight_decay;
  doc["disc_lr_scale"] = cfg.disc_lr_scale;
  doc["grad_clip"] = cfg.grad_clip;
  doc["seed"] = cfg.seed;
  doc["augment_noise_std"] = cfg.augment_noise_std;
  doc["denoiser_variant"] = cfg.denoiser_variant;
  doc["checkpoint_every"] = cfg.checkpoint_every;
  doc["warmup_epochs"] = cfg.warmup_epochs;
  doc["no_ce_l"] = cfg.no_ce_l;
  doc["no_ce_u"] = cfg.no_ce_u;
  doc["no_diff"] = cfg.no_diff;
  doc["no_adv"] = cfg.no_adv;
  doc["no_class_condition"] = cfg.no_class_condition;
  doc["naive_selection"] = cfg.naive_selection;
  doc["prompt_mode"] = cfg.prompt_mode;
  doc["adv_real_confident_only"] = cfg.adv_real_confident_only;
  doc["adv_nonsaturating"] = cfg.adv_nonsaturating;
  doc["feature_dim"] = mcfg.feature_dim;
  doc["enc_hidden"] = mcfg.enc_hidden;
  doc["enc_layers"] = mcfg.enc_layers;
  doc["den_hidden"] = mcfg.den_hidden;
  doc["disc_hidden"] = mcfg.disc_hidden;
  doc["data_classes"] = dcfg.data_classes;
  doc["data_dim"] = dcfg.data_dim;
  doc["data_per_class"] = dcfg.data_per_class;
  doc["data_std"] = dcfg.data_std;
  doc["data_radius"] = dcfg.data_radius;
  doc["data_separation"] = dcfg.data_separation;
  doc["seen_fraction"] = dcfg.seen_fraction;
  doc["labeled_fraction"] = dcfg.labeled_fraction;
  doc["test_fraction"] = dcfg.test_fraction;
  doc["data_seed"] = dcfg.data_seed;
  doc["data_path"] = dcfg.data_path;
  return doc;
}

// ---- optimizer ---------------------------------------------------------------

struct SgdState {
  std::vector<Tensor> buf;

  static SgdState make(const ParamRefs& refs) {
    SgdState s;
    s.buf.reserve(refs.size());
    for (const auto& [name, p] : refs) s.buf.emplace_back(p->shape());
    return s;
  }
};

// buf <- momentum * buf + grad + weight_decay * param; param <- param - lr * buf.
// decay_mask[i] == 0 exempts refs[i] from weight decay (batchnorm scale/shift).
inline void sgd_update(const ParamRefs& refs, const std::vector<Tensor>& grads,
                       SgdState& state, double lr, double momentum, double weight_decay,
                       const std::vector<char>* decay_mask = nullptr) {
  if (grads.size() != refs.size() || state.buf.size() != refs.size()) {
    throw UsageError("optimizer state does not match the parameter set");
  }
  if (decay_mask && decay_mask->size() != refs.size()) {
    throw UsageError("decay mask does not match the parameter set");
  }
  for (std::size_t i = 0; i < refs.size(); ++i) {
    Tensor& p = *refs[i].second;
    const Tensor& g = grads[i];
    Tensor& b = state.buf[i];
    if (g.shape() != p.shape() || b.shape() != p.shape()) {
      throw UsageError("gradient shape mismatch for " + refs[i].first);
    }
    const double wd = (decay_mask && !(*decay_mask)[i]) ? 0.0 : weight_decay;
    for (std::size_t j = 0; j < p.numel(); ++j) {
      b[j] = momentum * b[j] + g[j] + wd * p[j];
      p[j] -= lr * b[j];
    }
  }
}

// Rescales the gradient set so its global L2 norm is at most max_norm.
// max_norm == 0 disables clipping. Returns the pre-clip norm.
inline double clip_global_norm(std::vector<Tensor>& grads, double max_norm) {
  if (max_norm < 0.0) throw UsageError("max_norm must be >= 0");
  double sq = 0.0;
  for (const Tensor& g : grads) {
    for (std::size_t j = 0; j < g.numel(); ++j) sq += g[j] * g[j];
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double scale = max_norm / norm;
    for (Tensor& g : grads) {
      for (double& v : g.data()) v *= scale;
    }
  }
  return norm;
}

// Cosine decay from base_lr at epoch 0 toward min_lr at epoch == epochs.
inline double cosine_lr(int epoch, int epochs, double base_lr, double min_lr = 0.0) {
  if (epochs < 1 || epoch < 0 || epoch >= epochs) {
    throw UsageError("epoch out of range for the lr schedule");
  }
  const double phase = std::numbers::pi * static_cast<double>(epoch) /
                       static_cast<double>(epochs);
  return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + std::cos(phase));
}

// ---- model bundle -------------------------------------------------------------

struct ModelBundle {
  ModelConfig cfg;
  EncoderParams enc;
  ClassifierParams cls;
  DenoiserParams den;
  DiscriminatorParams disc;
  PrototypeState protos;
  NoiseSchedule sched;

  static ModelBundle init(const ModelConfig& mcfg, int T, std::uint64_t seed) {
    ModelBundle b;
    b.cfg = mcfg;
    b.enc = EncoderParams::init(mcfg, seed);
    b.cls = ClassifierParams::init(mcfg, seed);
    b.den = DenoiserParams::init(mcfg, seed);
    b.disc = DiscriminatorParams::init(mcfg, seed);
    b.protos = PrototypeState::make(mcfg.feature_dim, mcfg.num_classes);
    b.sched = build_schedule(T);
    return b;
  }

  // Encoder, classifier and denoiser: the parameters moved by the joint step.
  ParamRefs main_params() {
    ParamRefs refs;
    enc.collect(refs);
    cls.collect(refs);
    den.collect(refs);
    return refs;
  }

  ParamRefs disc_params() {
    ParamRefs refs;
    disc.collect(refs);
    return refs;
  }

  ParamRefs checkpoint_tensors() {
    ParamRefs refs = main_params();
    disc.collect(refs);
    disc.collect_tracked(refs);
    refs.emplace_back("prototypes", &protos.matrix);
    return refs;
  }
};

inline void save_bundle(const std::string& path, ModelBundle& b, nlohmann::json meta = {}) {
  meta["input_dim"] = b.cfg.input_dim;
  meta["feature_dim"] = b.cfg.feature_dim;
  meta["num_classes"] = b.cfg.num_classes;
  meta["enc_hidden"] = b.cfg.enc_hidden;
  meta["enc_layers"] = b.cfg.enc_layers;
  meta["den_hidden"] = b.cfg.den_hidden;
  meta["disc_hidden"] = b.cfg.disc_hidden;
  meta["denoiser_variant"] = b.cfg.denoiser_variant;
  meta["T"] = b.sched.T;
  meta["prototype_valid"] = std::vector<int>(b.protos.valid.begin(), b.protos.valid.end());
  save_checkpoint(path, b.checkpoint_tensors(), meta);
}

inline ModelBundle load_bundle(const std::string& path, nlohmann::json* meta_out = nullptr) {
  const nlohmann::json meta = load_checkpoint(path, {});
  using detail::json_get;
  ModelConfig mcfg;
  try {
    mcfg.input_dim = meta.at("input_dim").get<std::size_t>();
    mcfg.feature_dim = meta.at("feature_dim").get<std::size_t>();
    mcfg.num_classes = meta.at("num_classes").get<std::size_t>();
    mcfg.enc_hidden = meta.at("enc_hidden").get<std::size_t>();
    mcfg.enc_layers = meta.at("enc_layers").get<std::size_t>();
    mcfg.den_hidden = meta.at("den_hidden").get<std::size_t>();
    mcfg.disc_hidden = meta.at("disc_hidden").get<std::size_t>();
    mcfg.denoiser_variant = meta.at("denoiser_variant").get<int>();
  } catch (const nlohmann::json::exception&) {
    throw FormatError(path + ": checkpoint meta is missing model dimensions");
  }
  int T = 0;
  try {
    T = meta.at("T").get<int>();
  } catch (const nlohmann::json::exception&) {
    throw FormatError(path + ": checkpoint meta is missing T");
  }
  ModelBundle b = ModelBundle::init(mcfg, T, 0);
  load_checkpoint(path, b.checkpoint_tensors());
  if (meta.contains("prototype_valid")) {
    const auto valid = meta.at("prototype_valid").get<std::vector<int>>();
    if (valid.size() == b.protos.valid.size()) {
      for (std::size_t i = 0; i < valid.size(); ++i) {
        b.protos.valid[i] = static_cast<char>(valid[i] != 0);
      }
    }
  }
  if (meta_out) *meta_out = meta;
  return b;
}

// ---- metrics -------------------------------------------------------------------

struct EpochMetrics {
  int epoch = 0;
  double lr = 0.0;
  double ce_l = 0.0;
  double ce_u = 0.0;
  double diff = 0.0;
  double adv_g = 0.0;
  double adv_d = 0.0;
  std::size_t n_min = 0;
  std::size_t q_size = 0;
  double disc_real_acc = 0.0;
  double disc_fake_acc = 0.0;
  double seen_acc = 0.0;
  double unseen_acc = 0.0;
  double all_acc = 0.0;
};

inline void write_metrics_header(std::ostream& out) {
  out << "epoch,lr,L_ce_l,L_ce_u,L_diff,L_adv_G,L_adv_D,N_m,|Q|,"
         "disc_real_acc,disc_fake_acc,seen_acc,unseen_acc,all_acc\n";
}

inline void append_metrics(std::ostream& out, const EpochMetrics& m) {
  using detail::format_double;
  out << m.epoch << ',' << format_double(m.lr) << ',' << format_double(m.ce_l) << ','
      << format_double(m.ce_u) << ',' << format_double(m.diff) << ','
      << format_double(m.adv_g) << ',' << format_double(m.adv_d) << ',' << m.n_min << ','
      << m.q_size << ',' << format_double(m.disc_real_acc) << ','
      << format_double(m.disc_fake_acc) << ',' << format_double(m.seen_acc) << ','
      << format_double(m.unseen_acc) << ',' << format_double(m.all_acc) << '\n';
}

inline void write_metrics_csv(std::ostream& out, const std::vector<EpochMetrics>& rows) {
  write_metrics_header(out);
  for (const EpochMetrics& m : rows) append_metrics(out, m);
}

inline std::string metrics_csv_string(const std::vector<EpochMetrics>& rows) {
  std::ostringstream out;
  write_metrics_csv(out, rows);
  return out.str();
}

// ---- joint objective -------------------------------------------------------------

// One optimization batch. diff_x/diff_prompts cover the labeled and unlabeled
// rows that feed the denoising term; adv may be null when the adversarial term
// is off for this iteration.
struct JointBatch {
  Tensor x_l;
  std::vector<int> y_l;
  Tensor x_u;
  std::vector<int> u_hard;
  std::vector<std::size_t> q_rows;  // rows of x_u inside the balanced set
  Tensor diff_x;
  Tensor diff_prompts;
  std::vector<int> ts;
  Tensor eps;
  const AdvBatch* adv = nullptr;
};

struct JointParts {
  Var total;
  double ce_l = 0.0;
  double ce_u = 0.0;
  double diff = 0.0;
  double adv_g = 0.0;
};

// L = ce_l + gamma_u * ce_u + gamma_diff * diff + gamma_adv * adv_g. Disabled
// or weight-zero terms are skipped outright so they add no tape nodes.
inline JointParts joint_loss(Tape& t, const TrainConfig& cfg, ModelBundle& b,
                             const JointBatch& batch) {
  const std::size_t k = b.cfg.num_classes;
  JointParts parts;
  bool has_total = false;
  Var total;
  const auto accumulate = [&](Var v, double weight) {
    const Var scaled = weight == 1.0 ? v : t.scale(v, weight);
    total = has_total ? t.add(total, scaled) : scaled;
    has_total = true;
  };
  if (!cfg.no_ce_l) {
    Var ce_l = supervised_loss(t, b.enc, b.cls, batch.x_l, batch.y_l, k);
    parts.ce_l = ce_l.value()[0];
    accumulate(ce_l, 1.0);
  }
  if (!cfg.no_ce_u && cfg.gamma_u > 0.0 && !batch.q_rows.empty()) {
    const PseudoLabelCache cache = cache_from_hard_labels(batch.u_hard, k);
    Var ce_u = unlabeled_loss(t, b.enc, b.cls, batch.x_u, cache, batch.q_rows);
    parts.ce_u = ce_u.value()[0];
    accumulate(ce_u, cfg.gamma_u);
  }
  if (!cfg.no_diff && cfg.gamma_diff > 0.0) {
    Var diff = diffusion_loss(t, b.enc, b.den, batch.diff_x, batch.diff_prompts, b.sched,
                              batch.ts, batch.eps);
    parts.diff = diff.value()[0];
    accumulate(diff, cfg.gamma_diff);
  }
  if (!cfg.no_adv && cfg.gamma_adv > 0.0 && batch.adv != nullptr) {
    Var g = generator_objective(t, b.disc, b.den, b.sched, *batch.adv,
                                !cfg.adv_nonsaturating, cfg.t_adv);
    parts.adv_g = g.value()[0];
    accumulate(g, cfg.gamma_adv);
  }
  if (!has_total) throw ConfigError("every loss term is disabled");
  parts.total = total;
  return parts;
}

// ---- training loop ----------------------------------------------------------------

struct TrainResult {
  ModelBundle bundle;
  std::vector<EpochMetrics> history;
  std::vector<std::vector<ClassTelemetry>> pseudo_history;  // one entry per epoch
  // Accuracy of the pseudo-labels admitted for training, restricted to
  // instances whose pseudo class is novel; 0 when none were admitted.
  std::vector<double> novel_selection_accuracy;
};

struct TrainHooks {
  std::function<void(int epoch, const ModelBundle&, const EpochMetrics&)> on_epoch;
};

namespace detail {

inline void ensure_finite_loss(double v, const char* component, int epoch, std::size_t iter) {
  if (!std::isfinite(v)) {
    throw NumericError(std::string("non-finite ") + component + " at epoch " +
                       std::to_string(epoch) + " iteration " + std::to_string(iter));
  }
}

// Tensor ops report non-finite values without training context; add the phase,
// epoch and, when applicable, iteration before propagating.
[[noreturn]] inline void rethrow_with_context(const NumericError& e, const char* phase,
                                              int epoch, long long iter) {
  std::string msg = std::string(e.what()) + "; " + phase + " at epoch " +
                    std::to_string(epoch);
  if (iter >= 0) msg += " iteration " + std::to_string(iter);
  throw NumericError(msg);
}

// Prompt rows for the configured conditioning mode. prototype: columns of the
// prototype matrix. onehot: the class indicator written into the first
// min(|Y|, d) slots of a zero row. probs: the model's probability row, padded
// the same way; class ids without a probability row fall back to indicators.
inline Tensor prompts_for(const TrainConfig& cfg, const Tensor& proto_matrix,
                          const std::vector<int>& classes, const Tensor* soft_rows,
                          const std::vector<std::size_t>* soft_ids) {
  const std::size_t d = proto_matrix.dim(0);
  const std::size_t k = proto_matrix.dim(1);
  Tensor out(Shape{classes.size(), d});
  if (cfg.no_class_condition) return out;
  if (cfg.prompt_mode == "prototype") return prompt_rows(proto_matrix, classes);
  const std::size_t width = std::min(k, d);
  for (std::size_t i = 0; i < classes.size(); ++i) {
    const bool have_soft = cfg.prompt_mode == "probs" && soft_rows != nullptr;
    if (have_soft) {
      const std::size_t r = soft_ids ? (*soft_ids)[i] : i;
      for (std::size_t j = 0; j < width; ++j) out.at(i, j) = soft_rows->at(r, j);
    } else {
      const auto c = static_cast<std::size_t>(classes[i]);
      if (c < width) out.at(i, c) = 1.0;
    }
  }
  return out;
}

inline Tensor stack_rows(const Tensor& a, const Tensor& b) {
  const std::size_t cols = a.dim(1);
  Tensor out(Shape{a.dim(0) + b.dim(0), cols});
  std::copy(a.data().begin(), a.data().end(), out.data().begin());
  std::copy(b.data().begin(), b.data().end(), out.data().begin() + a.numel());
  return out;
}

}  // namespace detail

// Joint alternating optimization. Epoch 0 warm-starts pseudo-labels from
// k-means over encoder features; later epochs re-label the unlabeled pool from
// classifier confidence on weakly augmented inputs. Each iteration takes one
// discriminator ascent step and one descent step on the composite objective.
inline TrainResult train(const TrainConfig& cfg, const ModelConfig& mcfg_in,
                         const Dataset& data, const OwsslSplit& split,
                         const TrainHooks* hooks = nullptr) {
  cfg.validate();
  data.validate();
  ModelConfig mcfg = mcfg_in;
  mcfg.input_dim = data.input_dim;
  mcfg.num_classes = data.num_classes;
  mcfg.denoiser_variant = cfg.denoiser_variant;

  TrainResult result{ModelBundle::init(mcfg, cfg.T, cfg.seed), {}, {}};
  ModelBundle& b = result.bundle;

  const Dataset dl = subset(data, split.labeled_ids);
  const Dataset du = subset(data, split.unlabeled_ids);
  const Dataset dtest = subset(data, split.test_ids);
  const std::size_t nl = dl.size();
  const std::size_t nu = du.size();
  if (nl == 0 || nu == 0 || dtest.size() == 0) {
    throw DataError("training needs labeled, unlabeled and test instances");
  }
  const std::size_t k = mcfg.num_classes;
  const std::size_t in_dim = mcfg.input_dim;

  const ParamRefs main_refs = b.main_params();
  const ParamRefs disc_refs = b.disc_params();
  std::vector<char> disc_decay_mask;
  disc_decay_mask.reserve(disc_refs.size());
  for (const auto& [name, p] : disc_refs) {
    disc_decay_mask.push_back(name.find(".bn") == std::string::npos);
  }
  SgdState main_state = SgdState::make(main_refs);
  SgdState disc_state = SgdState::make(disc_refs);

  // Computed once at epoch 0 and held fixed through the warmup window so the
  // classifier sees consistent novel-class targets; re-clustering each epoch
  // would permute novel ids between epochs.
  PseudoLabelCache warm_cache;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = cosine_lr(epoch, cfg.epochs, cfg.base_lr, cfg.min_lr);

    PseudoLabelCache cache;
    SelectionResult sel;
    std::vector<std::size_t> active;
    try {
      if (epoch < cfg.warmup_epochs) {
        if (epoch == 0) {
          const KmeansResult km =
              kmeans_init(encode(b.enc, dl.x), dl.labels, encode(b.enc, du.x), k, cfg.seed);
          warm_cache = cache_from_hard_labels(km.unlabeled_labels, k);
        }
        cache = warm_cache;
      } else {
        RngStream aug(cfg.seed, "augment", static_cast<std::uint64_t>(epoch));
        cache = predict_pseudo_labels(b.enc, b.cls, du.x, cfg.augment_noise_std, aug);
      }
      sel = select_confident(cache, cfg.tau);
      active = sel.selected;
      if (cfg.naive_selection) {
        active.clear();
        for (const auto& ids : sel.confident) {
          active.insert(active.end(), ids.begin(), ids.end());
        }
        std::sort(active.begin(), active.end());
      }

      update_seen_prototypes(b.protos, b.enc, dl.x, dl.labels, split.seen_classes);
      update_novel_prototypes(b.protos, b.enc, du.x, cache, cfg.tau, split.novel_classes);
      result.pseudo_history.push_back(
          pseudo_label_telemetry(cache, sel, du.labels, split.seen_classes, k));

      std::vector<char> is_seen(k, 0);
      for (const int c : split.seen_classes) is_seen[static_cast<std::size_t>(c)] = 1;
      std::vector<std::size_t> admitted_novel;
      for (const std::size_t id : active) {
        if (!is_seen[static_cast<std::size_t>(cache.hard[id])]) admitted_novel.push_back(id);
      }
      const std::vector<int> aligned =
          align_pseudo_ids(cache, du.labels, split.seen_classes, k);
      result.novel_selection_accuracy.push_back(
          pseudo_accuracy_over(admitted_novel, cache, du.labels, aligned));
    } catch (const NumericError& e) {
      detail::rethrow_with_context(e, "pseudo-labeling", epoch, -1);
    }

    std::vector<char> in_q(nu, 0);
    for (const std::size_t id : active) in_q[id] = 1;

    const std::vector<std::size_t> perm_u =
        RngStream(cfg.seed, "shuffle-u", static_cast<std::uint64_t>(epoch)).permutation(nu);
    const std::vector<std::size_t> perm_l =
        RngStream(cfg.seed, "shuffle-l", static_cast<std::uint64_t>(epoch)).permutation(nl);

    const std::size_t bs = cfg.batch_size;
    const std::size_t iters = (nu + bs - 1) / bs;
    EpochMetrics m;
    m.epoch = epoch;
    m.lr = lr;
    m.n_min = sel.n_min;
    m.q_size = active.size();
    std::size_t adv_iters = 0;

    for (std::size_t it = 0; it < iters; ++it) {
      const auto e64 = static_cast<std::uint64_t>(epoch);
      const std::size_t begin = it * bs;
      const std::size_t end = std::min(nu, begin + bs);
      const std::size_t bu = end - begin;

      JointBatch batch;
      batch.x_u = Tensor(Shape{bu, in_dim});
      batch.u_hard.resize(bu);
      std::vector<std::size_t> u_ids(bu);
      for (std::size_t r = 0; r < bu; ++r) {
        const std::size_t src = perm_u[begin + r];
        u_ids[r] = src;
        batch.u_hard[r] = cache.hard[src];
        for (std::size_t j = 0; j < in_dim; ++j) batch.x_u.at(r, j) = du.x.at(src, j);
        if (in_q[src]) batch.q_rows.push_back(r);
      }

      const std::size_t bl = std::min(bs, nl);
      batch.x_l = Tensor(Shape{bl, in_dim});
      batch.y_l.resize(bl);
      for (std::size_t r = 0; r < bl; ++r) {
        const std::size_t src = perm_l[(it * bs + r) % nl];
        batch.y_l[r] = dl.labels[src];
        for (std::size_t j = 0; j < in_dim; ++j) batch.x_l.at(r, j) = dl.x.at(src, j);
      }

      const bool want_diff = !cfg.no_diff && cfg.gamma_diff > 0.0;
      if (want_diff) {
        batch.diff_x = detail::stack_rows(batch.x_l, batch.x_u);
        const Tensor prompts_l =
            detail::prompts_for(cfg, b.protos.matrix, batch.y_l, nullptr, nullptr);
        const Tensor prompts_u =
            detail::prompts_for(cfg, b.protos.matrix, batch.u_hard, &cache.soft, &u_ids);
        batch.diff_prompts = detail::stack_rows(prompts_l, prompts_u);
        RngStream t_rng(cfg.seed, "diff-t", e64, it);
        RngStream eps_rng(cfg.seed, "diff-eps", e64, it);
        batch.ts = sample_steps(bl + bu, b.sched, t_rng);
        batch.eps = sample_noise(bl + bu, mcfg.feature_dim, eps_rng);
      }

      AdvBatch adv;
      bool use_adv = !cfg.no_adv && cfg.gamma_adv > 0.0;
      if (use_adv) {
        std::vector<std::size_t> real_rows;
        for (std::size_t r = 0; r < bu; ++r) {
          if (!cfg.adv_real_confident_only || in_q[u_ids[r]]) real_rows.push_back(r);
        }
        if (real_rows.size() < 2) {
          use_adv = false;  // batchnorm needs at least two rows per side
        } else {
          try {
            Tensor x_real(Shape{real_rows.size(), in_dim});
            std::vector<int> real_hard(real_rows.size());
            for (std::size_t r = 0; r < real_rows.size(); ++r) {
              real_hard[r] = batch.u_hard[real_rows[r]];
              for (std::size_t j = 0; j < in_dim; ++j) {
                x_real.at(r, j) = batch.x_u.at(real_rows[r], j);
              }
            }
            RngStream class_rng(cfg.seed, "fake-class", e64, it);
            RngStream noise_rng(cfg.seed, "fake-noise", e64, it);
            adv = make_adv_batch(b.enc, x_real, real_hard, b.protos.matrix, k, class_rng,
                                 noise_rng);
            if (cfg.no_class_condition) {
              adv.real_onehot = onehot_rows(std::vector<int>(adv.size(), 0), k);
              adv.fake_onehot = onehot_rows(std::vector<int>(adv.size(), 0), k);
            }
            if (cfg.prompt_mode != "prototype" || cfg.no_class_condition) {
              adv.fake_prompts = detail::prompts_for(cfg, b.protos.matrix, adv.fake_classes,
                                                     nullptr, nullptr);
            }
            const Tensor fake = generate_fake_features(b.den, b.sched, adv, cfg.t_adv);

            Tape dt;
            Var dv = adversarial_value(dt, b.disc, adv, fake, true, true);
            detail::ensure_finite_loss(dv.value()[0], "L_adv_D", epoch, it);
            dt.backward(dv);
            std::vector<Tensor> dgrads;
            dgrads.reserve(disc_refs.size());
            for (const auto& [name, p] : disc_refs) {
              Tensor g = dt.grad(dt.leaf_for(p));
              for (double& v : g.data()) v = -v;  // ascend the value
              dgrads.push_back(std::move(g));
            }
            clip_global_norm(dgrads, cfg.grad_clip);
            sgd_update(disc_refs, dgrads, disc_state, lr * cfg.disc_lr_scale, cfg.momentum,
                       cfg.weight_decay, &disc_decay_mask);

            m.adv_d += dv.value()[0];
            const DiscAccuracy acc = discriminator_accuracy(b.disc, adv, fake);
            m.disc_real_acc += acc.real_acc;
            m.disc_fake_acc += acc.fake_acc;
            ++adv_iters;
            batch.adv = &adv;
          } catch (const NumericError& e) {
            detail::rethrow_with_context(e, "discriminator update", epoch,
                                         static_cast<long long>(it));
          }
        }
      }

      try {
        Tape t;
        const JointParts parts = joint_loss(t, cfg, b, batch);
        detail::ensure_finite_loss(parts.ce_l, "L_ce_l", epoch, it);
        detail::ensure_finite_loss(parts.ce_u, "L_ce_u", epoch, it);
        detail::ensure_finite_loss(parts.diff, "L_diff", epoch, it);
        detail::ensure_finite_loss(parts.adv_g, "L_adv_G", epoch, it);
        detail::ensure_finite_loss(parts.total.value()[0], "L_tr", epoch, it);
        t.backward(parts.total);
        std::vector<Tensor> grads;
        grads.reserve(main_refs.size());
        for (const auto& [name, p] : main_refs) grads.push_back(t.grad(t.leaf_for(p)));
        clip_global_norm(grads, cfg.grad_clip);
        sgd_update(main_refs, grads, main_state, lr, cfg.momentum, cfg.weight_decay);

        m.ce_l += parts.ce_l;
        m.ce_u += parts.ce_u;
        m.diff += parts.diff;
        m.adv_g += parts.adv_g;
      } catch (const NumericError& e) {
        detail::rethrow_with_context(e, "joint objective", epoch, static_cast<long long>(it));
      }
    }

    const auto denom = static_cast<double>(iters);
    m.ce_l /= denom;
    m.ce_u /= denom;
    m.diff /= denom;
    m.adv_g /= denom;
    if (adv_iters > 0) {
      m.adv_d /= static_cast<double>(adv_iters);
      m.disc_real_acc /= static_cast<double>(adv_iters);
      m.disc_fake_acc /= static_cast<double>(adv_iters);
    }

    try {
      const EvalReport report =
          evaluate(dtest, b.enc, b.cls, split.seen_classes, EvalProtocol::seen_fixed);
      m.seen_acc = report.seen_acc;
      m.unseen_acc = report.unseen_acc;
      m.all_acc = report.all_acc;
    } catch (const NumericError& e) {
      detail::rethrow_with_context(e, "evaluation", epoch, -1);
    }

    result.history.push_back(m);
    if (hooks && hooks->on_epoch) hooks->on_epoch(epoch, b, m);
  }
  return result;
}

}  // namespace pdfd
