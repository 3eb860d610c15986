// Command-line front end: train / eval / sample / gradcheck / selftest / ablate.
// Exit codes: 0 ok, 2 usage/config/data error, 3 numerical abort.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "pdfd/trainer.hpp"

namespace fs = std::filesystem;

namespace {

struct LoadedConfig {
  pdfd::TrainConfig cfg;
  pdfd::ModelConfig mcfg;
  pdfd::DataConfig dcfg;
};

LoadedConfig read_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw pdfd::DataError("cannot open config file " + path);
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw pdfd::FormatError(path + ": " + e.what());
  }
  LoadedConfig out;
  pdfd::parse_train_config(doc, out.cfg, out.mcfg, out.dcfg);
  return out;
}

// Comma- or plus-separated ablation flags, mirroring the metrics columns they zero.
void apply_ablation(pdfd::TrainConfig& cfg, const std::string& list) {
  std::size_t start = 0;
  while (start <= list.size()) {
    const std::size_t end = list.find_first_of(",+", start);
    const std::string tok =
        list.substr(start, end == std::string::npos ? std::string::npos : end - start);
    if (tok == "no_ce_l") cfg.no_ce_l = true;
    else if (tok == "no_ce_u") cfg.no_ce_u = true;
    else if (tok == "no_diff") cfg.no_diff = true;
    else if (tok == "no_adv") cfg.no_adv = true;
    else if (tok == "no_class_condition") cfg.no_class_condition = true;
    else if (tok == "naive_selection") cfg.naive_selection = true;
    else if (!tok.empty()) throw pdfd::ConfigError("unknown ablation flag: " + tok);
    if (end == std::string::npos) break;
    start = end + 1;
  }
}

void write_text_file(const fs::path& path, const std::string& body) {
  std::ofstream out(path);
  if (!out) throw pdfd::DataError("cannot open " + path.string() + " for writing");
  out << body;
  if (!out) throw pdfd::DataError("write failed for " + path.string());
}

void write_run_outputs(const fs::path& dir, const pdfd::TrainResult& res) {
  write_text_file(dir / "metrics.csv", pdfd::metrics_csv_string(res.history));
  std::ostringstream tele;
  pdfd::write_telemetry_header(tele);
  for (std::size_t e = 0; e < res.pseudo_history.size(); ++e) {
    pdfd::append_telemetry(tele, static_cast<int>(e), res.pseudo_history[e]);
  }
  write_text_file(dir / "telemetry.csv", tele.str());
  std::ostringstream sel;
  sel << "epoch,novel_selection_accuracy\n";
  for (std::size_t e = 0; e < res.novel_selection_accuracy.size(); ++e) {
    sel << e << ',' << pdfd::detail::format_double(res.novel_selection_accuracy[e]) << '\n';
  }
  write_text_file(dir / "selection.csv", sel.str());
}

pdfd::TrainResult run_training(const LoadedConfig& lc, const pdfd::Dataset& ds,
                               const pdfd::OwsslSplit& split, const fs::path& out_dir) {
  fs::create_directories(out_dir);
  write_text_file(out_dir / "resolved_config.json",
                  pdfd::resolved_config_json(lc.cfg, lc.mcfg, lc.dcfg).dump(2) + "\n");

  pdfd::TrainHooks hooks;
  hooks.on_epoch = [&](int epoch, const pdfd::ModelBundle& b, const pdfd::EpochMetrics&) {
    if (lc.cfg.checkpoint_every > 0 && (epoch + 1) % lc.cfg.checkpoint_every == 0) {
      pdfd::ModelBundle copy = b;
      pdfd::save_bundle((out_dir / ("checkpoint_epoch_" + std::to_string(epoch) + ".bin"))
                            .string(),
                        copy, {{"epoch", epoch}, {"seen_classes", split.seen_classes}});
    }
  };
  pdfd::TrainResult res = pdfd::train(lc.cfg, lc.mcfg, ds, split, &hooks);
  write_run_outputs(out_dir, res);
  pdfd::save_bundle((out_dir / "checkpoint.bin").string(), res.bundle,
                    {{"epoch", lc.cfg.epochs - 1}, {"seen_classes", split.seen_classes}});
  return res;
}

int cmd_train(const std::string& config_path, const std::string& out_dir,
              const std::string& ablation, std::optional<std::uint64_t> seed) {
  LoadedConfig lc = read_config(config_path);
  if (!ablation.empty()) apply_ablation(lc.cfg, ablation);
  if (seed) lc.cfg.seed = *seed;
  lc.cfg.validate();

  const pdfd::Dataset ds = pdfd::build_dataset(lc.dcfg);
  const pdfd::OwsslSplit split = pdfd::build_split(ds, lc.dcfg);
  const pdfd::TrainResult res = run_training(lc, ds, split, out_dir);
  pdfd::save_features(pdfd::subset(ds, split.test_ids),
                      (fs::path(out_dir) / "test_set.bin").string());

  if (!res.history.empty()) {
    const pdfd::EpochMetrics& m = res.history.back();
    std::cout << "trained " << lc.cfg.epochs << " epochs: seen_acc=" << m.seen_acc
              << " unseen_acc=" << m.unseen_acc << " all_acc=" << m.all_acc << '\n';
  }
  std::cout << "outputs written to " << out_dir << '\n';
  return 0;
}

int cmd_eval(const std::string& ckpt, const std::string& data_path,
             const std::string& protocol_name, const std::string& out_dir) {
  nlohmann::json meta;
  pdfd::ModelBundle b = pdfd::load_bundle(ckpt, &meta);
  const pdfd::Dataset ds = pdfd::load_features(data_path);
  if (ds.input_dim != b.cfg.input_dim || ds.num_classes != b.cfg.num_classes) {
    throw pdfd::ConfigError(
        "dimension mismatch: checkpoint expects input_dim=" +
        std::to_string(b.cfg.input_dim) + ", num_classes=" + std::to_string(b.cfg.num_classes) +
        "; data has input_dim=" + std::to_string(ds.input_dim) +
        ", num_classes=" + std::to_string(ds.num_classes));
  }
  if (!meta.contains("seen_classes")) {
    throw pdfd::FormatError(ckpt + ": checkpoint meta is missing seen class ids");
  }
  const auto seen = meta.at("seen_classes").get<std::vector<int>>();

  pdfd::EvalProtocol protocol;
  if (protocol_name == "seen_fixed") protocol = pdfd::EvalProtocol::seen_fixed;
  else if (protocol_name == "all_matched") protocol = pdfd::EvalProtocol::all_matched;
  else throw pdfd::ConfigError("protocol must be seen_fixed or all_matched");

  const pdfd::EvalReport report = pdfd::evaluate(ds, b.enc, b.cls, seen, protocol);
  std::cout << pdfd::report_text(report);
  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    write_text_file(fs::path(out_dir) / "report.json", pdfd::report_json(report).dump(2) + "\n");
    write_text_file(fs::path(out_dir) / "report.txt", pdfd::report_text(report));
  }
  return 0;
}

int cmd_sample(const std::string& ckpt, int class_id, int n, const std::string& out_path,
               std::uint64_t seed) {
  if (n < 0) throw pdfd::ConfigError("sample count must be >= 0");
  pdfd::ModelBundle b = pdfd::load_bundle(ckpt);
  const int k = static_cast<int>(b.cfg.num_classes);
  if (class_id < 0 || class_id >= k) {
    throw pdfd::ConfigError("class id " + std::to_string(class_id) + " out of range [0, " +
                            std::to_string(k) + ")");
  }
  if (!b.protos.valid[static_cast<std::size_t>(class_id)]) {
    throw pdfd::ConfigError("prototype for class " + std::to_string(class_id) +
                            " is not initialized");
  }
  const std::vector<int> classes(static_cast<std::size_t>(n), class_id);
  if (n == 0) {
    pdfd::save_generated_csv(out_path, classes, pdfd::Tensor(pdfd::Shape{0, b.cfg.feature_dim}));
    return 0;
  }
  const pdfd::Tensor prompts = pdfd::prompt_rows(b.protos.matrix, classes);
  pdfd::RngStream rng(seed, "sample-noise");
  const pdfd::Tensor eps = pdfd::sample_noise(classes.size(), b.cfg.feature_dim, rng);
  const pdfd::Tensor z0 = pdfd::reverse_generate(eps, prompts, b.sched, b.den);
  pdfd::save_generated_csv(out_path, classes, z0);
  std::cout << "wrote " << n << " rows for class " << class_id << " to " << out_path << '\n';
  return 0;
}

// ---- gradcheck / selftest ----------------------------------------------------

struct CheckResult {
  std::string name;
  bool pass = false;
  std::string detail;
};

pdfd::Tensor random_tensor(const pdfd::Shape& shape, pdfd::RngStream& rng, double lo = -1.0,
                           double hi = 1.0) {
  pdfd::Tensor t(shape);
  for (double& v : t.data()) v = lo + (hi - lo) * rng.next_double();
  return t;
}

std::vector<CheckResult> run_gradcheck() {
  using pdfd::Tape;
  using pdfd::Tensor;
  using pdfd::Var;
  std::vector<CheckResult> results;
  pdfd::RngStream rng(7, "gradcheck");
  const double eps = 1e-5;
  const double primitive_tol = 1e-5;

  const auto scalar_check = [&](const std::string& name, const pdfd::Shape& shape,
                                const pdfd::ScalarFn& fn, double lo = -1.0, double hi = 1.0) {
    const Tensor point = random_tensor(shape, rng, lo, hi);
    const double err = pdfd::grad_check(fn, point, eps);
    results.push_back({"primitive " + name, err < primitive_tol,
                       "max rel err " + pdfd::detail::format_double(err)});
  };

  scalar_check("add", {2, 3}, [](Tape& t, Var x) {
    return t.sum(t.add(x, t.scale(x, 0.5)));
  });
  scalar_check("sub_mul", {2, 3}, [](Tape& t, Var x) {
    return t.sum(t.mul(t.sub(x, t.scale(x, 0.25)), x));
  });
  scalar_check("matmul", {3, 3}, [](Tape& t, Var x) {
    return t.sum(t.matmul(x, x));
  });
  scalar_check("relu", {2, 4}, [](Tape& t, Var x) {
    return t.sum(t.relu(x));
  });
  scalar_check("exp", {2, 3}, [](Tape& t, Var x) { return t.sum(t.exp(x)); });
  scalar_check("log", {2, 3}, [](Tape& t, Var x) { return t.sum(t.log(x)); }, 0.5, 2.0);
  scalar_check("sqrt", {2, 3}, [](Tape& t, Var x) { return t.sum(t.sqrt(x)); }, 0.5, 2.0);
  scalar_check("square", {2, 3}, [](Tape& t, Var x) { return t.sum(t.square(x)); });
  scalar_check("mean_axis", {3, 4}, [](Tape& t, Var x) {
    return t.sum(t.square(t.mean(x, 0)));
  });
  scalar_check("softmax_rows", {3, 4}, [](Tape& t, Var x) {
    return t.sum(t.mul(t.softmax_rows(x), x));
  });
  scalar_check("concat_slice", {2, 4}, [](Tape& t, Var x) {
    Var joined = t.concat({x, t.scale(x, 2.0)}, 1);
    return t.sum(t.square(t.slice(joined, 1, 2, 6)));
  });
  scalar_check("broadcast", {1, 4}, [](Tape& t, Var x) {
    return t.sum(t.square(t.broadcast_to(x, pdfd::Shape{3, 4})));
  });
  scalar_check("batchnorm", {4, 3}, [](Tape& t, Var x) {
    Var gamma = t.constant(pdfd::Tensor(pdfd::Shape{3}, {1.1, 0.9, 1.3}));
    Var beta = t.constant(pdfd::Tensor(pdfd::Shape{3}, {0.1, -0.2, 0.3}));
    return t.sum(t.square(t.batchnorm(x, gamma, beta)));
  });

  // Composite objective over every trainable tensor.
  {
    pdfd::ModelConfig mcfg;
    mcfg.input_dim = 3;
    mcfg.feature_dim = 3;
    mcfg.num_classes = 3;
    mcfg.enc_hidden = 4;
    mcfg.enc_layers = 1;
    mcfg.den_hidden = 6;
    mcfg.disc_hidden = 4;
    pdfd::ModelBundle b = pdfd::ModelBundle::init(mcfg, 4, 11);
    pdfd::RngStream drng(11, "gradcheck-data");
    for (double& v : b.protos.matrix.data()) v = drng.next_gaussian();
    std::fill(b.protos.valid.begin(), b.protos.valid.end(), 1);

    pdfd::TrainConfig cfg;
    cfg.T = 4;
    cfg.t_adv = 2;
    cfg.gamma_u = 0.5;
    cfg.gamma_diff = 1.25;
    cfg.gamma_adv = 0.75;

    pdfd::JointBatch batch;
    batch.x_l = random_tensor(pdfd::Shape{4, 3}, drng);
    batch.y_l = {0, 1, 2, 1};
    batch.x_u = random_tensor(pdfd::Shape{5, 3}, drng);
    batch.u_hard = {2, 0, 1, 2, 0};
    batch.q_rows = {0, 2, 4};
    batch.diff_x = random_tensor(pdfd::Shape{6, 3}, drng);
    batch.diff_prompts = random_tensor(pdfd::Shape{6, 3}, drng);
    pdfd::RngStream trng(11, "gradcheck-t");
    batch.ts = pdfd::sample_steps(6, b.sched, trng);
    batch.eps = pdfd::sample_noise(6, 3, trng);
    pdfd::RngStream crng(11, "gradcheck-c");
    pdfd::RngStream nrng(11, "gradcheck-n");
    pdfd::AdvBatch adv = pdfd::make_adv_batch(b.enc, batch.x_u, batch.u_hard, b.protos.matrix,
                                              mcfg.num_classes, crng, nrng);
    batch.adv = &adv;

    pdfd::ParamRefs params = b.main_params();
    b.disc.collect(params);
    const pdfd::ParamCheckResult r = pdfd::param_grad_check(
        [&](pdfd::Tape& t) { return pdfd::joint_loss(t, cfg, b, batch).total; }, params, 1e-5);
    results.push_back({"joint objective", r.max_rel_err < 1e-4,
                       "max rel err " + pdfd::detail::format_double(r.max_rel_err) +
                           " (worst: " + r.worst_param + ")"});
  }
  return results;
}

std::vector<CheckResult> run_selftest() {
  std::vector<CheckResult> results = run_gradcheck();

  // Forward-diffusion marginals against the closed form.
  {
    const pdfd::NoiseSchedule sched = pdfd::build_schedule(50);
    const std::size_t dim = 4, draws = 20000;
    pdfd::Tensor z0(pdfd::Shape{1, dim});
    for (std::size_t j = 0; j < dim; ++j) z0.at(0, j) = 0.3 * static_cast<double>(j) - 0.5;
    bool ok = true;
    std::string detail;
    for (const int t : {1, 25, 50}) {
      pdfd::RngStream rng(21, "selftest-marginal", static_cast<std::uint64_t>(t));
      const double ab = sched.alpha_bar[static_cast<std::size_t>(t)];
      std::vector<double> sum(dim, 0.0), sum_sq(dim, 0.0);
      for (std::size_t s = 0; s < draws; ++s) {
        const pdfd::Tensor eps = pdfd::sample_noise(1, dim, rng);
        const pdfd::Tensor zt = pdfd::forward_diffuse(z0, t, eps, sched);
        for (std::size_t j = 0; j < dim; ++j) {
          sum[j] += zt.at(0, j);
          sum_sq[j] += zt.at(0, j) * zt.at(0, j);
        }
      }
      const double var_expect = 1.0 - ab;
      for (std::size_t j = 0; j < dim; ++j) {
        const double mean = sum[j] / static_cast<double>(draws);
        const double var = sum_sq[j] / static_cast<double>(draws) - mean * mean;
        const double mean_expect = std::sqrt(ab) * z0.at(0, j);
        const double se_mean = std::sqrt(var_expect / static_cast<double>(draws));
        const double se_var = var_expect * std::sqrt(2.0 / static_cast<double>(draws));
        if (std::abs(mean - mean_expect) > 4.0 * se_mean ||
            std::abs(var - var_expect) > 4.0 * se_var) {
          ok = false;
          detail = "t=" + std::to_string(t) + " coordinate " + std::to_string(j) +
                   " off by more than 4 standard errors";
        }
      }
    }
    results.push_back({"forward marginals", ok, ok ? "t in {1,25,50} within 4 SE" : detail});
  }

  // Confidence selection against brute-force enumeration.
  {
    bool ok = true;
    std::string detail;
    const std::size_t n = 60, k = 5;
    pdfd::RngStream rng(33, "selftest-selection");
    pdfd::Tensor soft(pdfd::Shape{n, k});
    for (std::size_t i = 0; i < n; ++i) {
      double total = 0.0;
      std::vector<double> raw(k);
      for (std::size_t c = 0; c < k; ++c) {
        raw[c] = -std::log(1.0 - rng.next_double() + 1e-12);
        total += raw[c];
      }
      for (std::size_t c = 0; c < k; ++c) soft.at(i, c) = raw[c] / total;
    }
    const pdfd::PseudoLabelCache cache = pdfd::cache_from_soft(soft);
    for (const double tau : {0.3, 0.5, 0.7, 0.95}) {
      const pdfd::SelectionResult sel = pdfd::select_confident(cache, tau);
      std::vector<std::vector<std::size_t>> expect(k);
      for (std::size_t i = 0; i < n; ++i) {
        if (cache.confidence[i] > tau) {
          expect[static_cast<std::size_t>(cache.hard[i])].push_back(i);
        }
      }
      std::size_t nm = n;
      for (auto& ids : expect) {
        std::sort(ids.begin(), ids.end(), [&](std::size_t a, std::size_t bb) {
          if (cache.confidence[a] != cache.confidence[bb]) {
            return cache.confidence[a] > cache.confidence[bb];
          }
          return a < bb;
        });
        nm = std::min(nm, ids.size());
      }
      std::vector<std::size_t> selected;
      if (nm > 0) {
        for (const auto& ids : expect) selected.insert(selected.end(), ids.begin(), ids.begin() + nm);
      }
      if (sel.n_min != nm || sel.confident != expect || sel.selected != selected) {
        ok = false;
        detail = "tau=" + pdfd::detail::format_double(tau);
      }
    }
    results.push_back({"confidence selection", ok, ok ? "matches enumeration" : detail});
  }

  // Hungarian assignment against exhaustive permutation search.
  {
    bool ok = true;
    std::string detail;
    pdfd::RngStream rng(44, "selftest-hungarian");
    for (std::size_t size = 2; size <= 6 && ok; ++size) {
      for (int trial = 0; trial < 40 && ok; ++trial) {
        const pdfd::Tensor cost = random_tensor(pdfd::Shape{size, size}, rng, 0.0, 1.0);
        const double got_cost = pdfd::hungarian_match(cost).total_cost;
        std::vector<int> perm(size);
        std::iota(perm.begin(), perm.end(), 0);
        double best = 1e300;
        do {
          double c = 0.0;
          for (std::size_t i = 0; i < size; ++i) {
            c += cost.at(i, static_cast<std::size_t>(perm[i]));
          }
          best = std::min(best, c);
        } while (std::next_permutation(perm.begin(), perm.end()));
        if (std::abs(got_cost - best) > 1e-9) {
          ok = false;
          detail = "size " + std::to_string(size) + " trial " + std::to_string(trial);
        }
      }
    }
    results.push_back({"hungarian assignment", ok, ok ? "matches brute force" : detail});
  }

  // Checkpoint and feature-file round trips.
  {
    bool ok = true;
    std::string detail;
    const fs::path dir = fs::temp_directory_path() / "pdfd_selftest";
    fs::create_directories(dir);
    pdfd::ModelConfig mcfg;
    mcfg.input_dim = 3;
    mcfg.feature_dim = 3;
    mcfg.num_classes = 3;
    mcfg.enc_hidden = 4;
    mcfg.enc_layers = 1;
    mcfg.den_hidden = 6;
    mcfg.disc_hidden = 4;
    pdfd::ModelBundle b = pdfd::ModelBundle::init(mcfg, 4, 5);
    pdfd::save_bundle((dir / "ckpt.bin").string(), b, {{"seen_classes", std::vector<int>{0}}});
    pdfd::ModelBundle back = pdfd::load_bundle((dir / "ckpt.bin").string());
    pdfd::ParamRefs a = b.checkpoint_tensors(), c = back.checkpoint_tensors();
    for (std::size_t i = 0; i < a.size() && ok; ++i) {
      if (!pdfd::approx_equal(*a[i].second, *c[i].second, 0.0)) {
        ok = false;
        detail = "checkpoint tensor " + a[i].first;
      }
    }
    const pdfd::MixtureSpec spec = pdfd::make_toy_mixture_spec(3, 3, 4, 1.0, 5);
    const pdfd::Dataset ds = pdfd::generate_gaussian_mixture(spec);
    pdfd::save_features(ds, (dir / "f.csv").string());
    pdfd::save_features(ds, (dir / "f.bin").string());
    const pdfd::Dataset from_csv = pdfd::load_features((dir / "f.csv").string());
    const pdfd::Dataset from_bin = pdfd::load_features((dir / "f.bin").string());
    if (ok && (!pdfd::approx_equal(from_csv.x, ds.x, 0.0) ||
               !pdfd::approx_equal(from_bin.x, ds.x, 0.0) ||
               from_csv.labels != ds.labels || from_bin.labels != ds.labels)) {
      ok = false;
      detail = "feature file round trip";
    }
    results.push_back({"serialization round trip", ok, ok ? "bit exact" : detail});
  }
  return results;
}

int report_checks(const std::vector<CheckResult>& results, const char* label) {
  bool all_pass = true;
  for (const CheckResult& r : results) {
    std::cout << label << ' ' << r.name << ": " << (r.pass ? "PASS" : "FAIL") << " ("
              << r.detail << ")\n";
    all_pass = all_pass && r.pass;
  }
  std::cout << label << (all_pass ? ": all checks passed\n" : ": FAILURES above\n");
  return all_pass ? 0 : 1;
}

int cmd_ablate(const std::string& config_path, const std::string& out_dir,
               const std::string& seeds_arg) {
  LoadedConfig base = read_config(config_path);
  std::vector<std::uint64_t> seeds;
  if (seeds_arg.empty()) {
    seeds.push_back(base.cfg.seed);
  } else {
    std::size_t start = 0;
    while (start <= seeds_arg.size()) {
      const std::size_t end = seeds_arg.find(',', start);
      const std::string tok =
          seeds_arg.substr(start, end == std::string::npos ? std::string::npos : end - start);
      if (!tok.empty()) seeds.push_back(std::stoull(tok));
      if (end == std::string::npos) break;
      start = end + 1;
    }
    if (seeds.empty()) throw pdfd::ConfigError("no seeds given");
  }

  const std::vector<std::pair<std::string, std::string>> variants = {
      {"full", ""},
      {"no_ce_l", "no_ce_l"},
      {"no_ce_u", "no_ce_u"},
      {"no_diff", "no_diff"},
      {"no_adv", "no_adv"},
      {"no_diff+no_adv", "no_diff,no_adv"},
      {"no_class_condition", "no_class_condition"},
  };

  const pdfd::Dataset ds = pdfd::build_dataset(base.dcfg);
  const pdfd::OwsslSplit split = pdfd::build_split(ds, base.dcfg);
  fs::create_directories(out_dir);

  std::ostringstream summary;
  summary << "variant,seed,seen_acc,unseen_acc,all_acc\n";
  nlohmann::json summary_json = nlohmann::json::array();
  for (const auto& [name, flags] : variants) {
    std::string dir_name = name;
    std::replace(dir_name.begin(), dir_name.end(), '+', '_');
    double mean_all = 0.0, mean_seen = 0.0, mean_unseen = 0.0;
    for (const std::uint64_t seed : seeds) {
      LoadedConfig lc = base;
      if (!flags.empty()) apply_ablation(lc.cfg, flags);
      lc.cfg.seed = seed;
      const fs::path run_dir = fs::path(out_dir) / dir_name / ("seed" + std::to_string(seed));
      const pdfd::TrainResult res = run_training(lc, ds, split, run_dir);
      const pdfd::EpochMetrics& m = res.history.back();
      summary << name << ',' << seed << ',' << pdfd::detail::format_double(m.seen_acc) << ','
              << pdfd::detail::format_double(m.unseen_acc) << ','
              << pdfd::detail::format_double(m.all_acc) << '\n';
      summary_json.push_back({{"variant", name},
                              {"seed", seed},
                              {"seen_acc", m.seen_acc},
                              {"unseen_acc", m.unseen_acc},
                              {"all_acc", m.all_acc}});
      mean_all += m.all_acc;
      mean_seen += m.seen_acc;
      mean_unseen += m.unseen_acc;
      std::cout << name << " seed " << seed << ": all_acc=" << m.all_acc << '\n';
    }
    const auto denom = static_cast<double>(seeds.size());
    summary << name << ",mean," << pdfd::detail::format_double(mean_seen / denom) << ','
            << pdfd::detail::format_double(mean_unseen / denom) << ','
            << pdfd::detail::format_double(mean_all / denom) << '\n';
  }
  write_text_file(fs::path(out_dir) / "summary.csv", summary.str());
  write_text_file(fs::path(out_dir) / "summary.json", summary_json.dump(2) + "\n");
  std::cout << "ablation summary written to " << out_dir << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Prompt-conditioned feature diffusion for open-world SSL"};
  app.require_subcommand(1);

  std::string config_path, out_dir, ablation, data_path, ckpt;
  std::string protocol = "seen_fixed", seeds_arg;
  std::optional<std::uint64_t> seed_override;
  int class_id = 0, sample_n = 0;
  std::uint64_t sample_seed = 1;

  CLI::App* train = app.add_subcommand("train", "train a model from a config file");
  train->add_option("--config", config_path, "config JSON path")->required();
  train->add_option("--out", out_dir, "output directory")->required();
  train->add_option("--ablation", ablation, "comma-separated flags, e.g. no_diff,no_adv");
  train->add_option("--seed", seed_override, "override the config seed");

  CLI::App* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on a feature file");
  eval_cmd->add_option("--checkpoint", ckpt, "checkpoint path")->required();
  eval_cmd->add_option("--data", data_path, "feature file (csv or binary)")->required();
  eval_cmd->add_option("--protocol", protocol, "seen_fixed | all_matched");
  eval_cmd->add_option("--out", out_dir, "directory for report.json / report.txt");

  CLI::App* sample = app.add_subcommand("sample", "generate features for one class");
  sample->add_option("--checkpoint", ckpt, "checkpoint path")->required();
  sample->add_option("--class", class_id, "class id to condition on")->required();
  sample->add_option("--n", sample_n, "number of rows")->required();
  sample->add_option("--out", out_dir, "output CSV path")->required();
  sample->add_option("--seed", sample_seed, "noise seed");

  CLI::App* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient checks");
  CLI::App* selftest = app.add_subcommand("selftest", "run the full invariant suite");

  CLI::App* ablate = app.add_subcommand("ablate", "train the standard variant grid");
  ablate->add_option("--config", config_path, "config JSON path")->required();
  ablate->add_option("--out", out_dir, "output directory")->required();
  ablate->add_option("--seeds", seeds_arg, "comma-separated seeds (default: config seed)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (app.got_subcommand(train)) return cmd_train(config_path, out_dir, ablation, seed_override);
    if (app.got_subcommand(eval_cmd)) return cmd_eval(ckpt, data_path, protocol, out_dir);
    if (app.got_subcommand(sample)) return cmd_sample(ckpt, class_id, sample_n, out_dir, sample_seed);
    if (app.got_subcommand(gradcheck)) return report_checks(run_gradcheck(), "gradcheck");
    if (app.got_subcommand(selftest)) return report_checks(run_selftest(), "selftest");
    if (app.got_subcommand(ablate)) return cmd_ablate(config_path, out_dir, seeds_arg);
  } catch (const pdfd::NumericError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 3;
  } catch (const pdfd::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
