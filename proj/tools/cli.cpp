#include "moa/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <atomic>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <thread>

#include <nlohmann/json.hpp>

#include "moa/checkpoint.hpp"
#include "moa/diagnostics.hpp"
#include "moa/errors.hpp"
#include "moa/rng.hpp"
#include "moa/run_config.hpp"
#include "moa/trainer.hpp"

namespace moa {

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

namespace {

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write '" + path.string() + "'");
  out << text;
  if (!out) throw Error("failed writing '" + path.string() + "'");
}

ojson config_json(const RunConfig& c) {
  ojson j = ojson::object();
  for (const auto& [k, v] : c.to_pairs()) j[k] = v;
  return j;
}

std::vector<std::uint64_t> parse_seed_list(const std::string& text) {
  std::vector<std::uint64_t> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stoull(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw ArgumentError("--seeds: '" + item + "' is not a seed");
    }
  }
  if (out.empty()) throw ArgumentError("--seeds: empty list");
  return out;
}

SplitPlan split_for(const RunConfig& c, std::span<const Sample> data) {
  return make_splits(data, c.target_domain, derive_seed(c.seed, "split"));
}

ojson train_one(const RunConfig& c) {
  const fs::path dir = c.out_dir;
  fs::create_directories(dir);
  const std::vector<Sample> data = generate_dataset(c.dataset_spec());
  const SplitPlan split = split_for(c, data);
  ViTModel model(c.vit_config(), c.seed, c.freeze_policy);
  TrainResult result = train_loop(model, c.train_config(), data, split);

  save_checkpoint(dir / "checkpoint.moa", c, result.best);
  write_text(dir / "record.csv", result.record.to_csv());

  const auto target = select(data, split.target);
  const double best_target = evaluate(model, result.best, target);
  const EvalPoint& last = result.record.points.back();
  ojson m;
  m["config"] = config_json(c);
  m["total_scalars"] = model.params().total_scalars();
  m["trainable_scalars"] = model.params().trainable_scalars();
  m["best_step"] = result.best_step;
  m["best_src_val_acc"] = result.best_src_val_acc;
  m["best_target_acc"] = best_target;
  m["final"] = {{"step", last.step},
                {"loss_ce", last.loss_ce},
                {"loss_aux", last.loss_aux},
                {"domain_loss", last.domain_loss},
                {"src_val_acc", last.src_val_acc},
                {"target_acc", last.target_acc},
                {"alloc_std", last.alloc_std},
                {"alloc_fractions", last.alloc_fractions}};
  m["files"] = {{"checkpoint", "checkpoint.moa"}, {"record", "record.csv"}};
  write_text(dir / "manifest.json", m.dump(2) + "\n");
  return m;
}

int cmd_train(const std::string& config_path, const std::string& seeds_text, std::size_t jobs,
              std::ostream& out) {
  const RunConfig base = RunConfig::from_file(config_path);
  if (seeds_text.empty()) {
    ojson m = train_one(base);
    out << ojson{{"out_dir", base.out_dir},
                 {"best_step", m["best_step"]},
                 {"best_src_val_acc", m["best_src_val_acc"]},
                 {"best_target_acc", m["best_target_acc"]}}
               .dump()
        << "\n";
    return kExitOk;
  }
  const auto seeds = parse_seed_list(seeds_text);
  std::vector<RunConfig> runs;
  for (auto s : seeds) {
    RunConfig c = base;
    c.seed = s;
    c.out_dir = (fs::path(base.out_dir) / ("seed_" + std::to_string(s))).string();
    runs.push_back(c);
  }
  std::vector<ojson> results(runs.size());
  std::vector<std::exception_ptr> errors(runs.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < runs.size(); i = next++) {
      try {
        results[i] = train_one(runs[i]);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < std::clamp<std::size_t>(jobs, 1, runs.size()); ++w) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  ojson summary = ojson::array();
  for (std::size_t i = 0; i < runs.size(); ++i) {
    summary.push_back({{"seed", runs[i].seed},
                       {"out_dir", runs[i].out_dir},
                       {"best_step", results[i]["best_step"]},
                       {"best_src_val_acc", results[i]["best_src_val_acc"]},
                       {"best_target_acc", results[i]["best_target_acc"]}});
  }
  out << summary.dump() << "\n";
  return kExitOk;
}

RunConfig eval_config(const RunConfig& stored, std::size_t samples_per_cell) {
  RunConfig c = stored;
  if (samples_per_cell > 0) c.samples_per_cell = samples_per_cell;
  return c;
}

using Predictor = std::function<std::vector<std::size_t>(std::span<const Sample* const>)>;

ojson accuracy_report(const RunConfig& c, const Predictor& predict_fn) {
  const std::vector<Sample> data = generate_dataset(c.dataset_spec());
  ojson per_domain = ojson::array();
  double source_sum = 0.0;
  double target_acc = 0.0;
  for (std::size_t d = 0; d < c.domains; ++d) {
    std::vector<const Sample*> samples;
    for (const auto& s : data)
      if (s.domain == d) samples.push_back(&s);
    const double acc = accuracy(predict_fn(samples), samples);
    per_domain.push_back(acc);
    if (d == c.target_domain) target_acc = acc;
    else source_sum += acc;
  }
  ojson j;
  j["domain_acc"] = per_domain;
  j["target_domain"] = c.target_domain;
  j["target_acc"] = target_acc;
  j["source_mean_acc"] = source_sum / static_cast<double>(c.domains - 1);
  return j;
}

int cmd_eval(const std::string& path, std::size_t samples_per_cell, std::ostream& out) {
  const Checkpoint ck = load_checkpoint(path);
  const ViTModel model = restore_model(ck);
  const RunConfig c = eval_config(ck.config, samples_per_cell);
  ojson report = accuracy_report(c, [&](std::span<const Sample* const> s) {
    return predict(model, model.params(), s).labels;
  });
  out << report.dump() << "\n";
  return kExitOk;
}

int cmd_ensemble(const std::vector<std::string>& paths, std::size_t samples_per_cell,
                 std::ostream& out) {
  std::vector<ViTModel> models;
  models.reserve(paths.size());
  RunConfig first;
  for (std::size_t i = 0; i < paths.size(); ++i) {
    const Checkpoint ck = load_checkpoint(paths[i]);
    if (i == 0) first = ck.config;
    models.push_back(restore_model(ck));
  }
  std::vector<const ViTModel*> ptrs;
  for (const auto& m : models) ptrs.push_back(&m);
  const RunConfig c = eval_config(first, samples_per_cell);
  ojson report = accuracy_report(
      c, [&](std::span<const Sample* const> s) { return ensemble_predictions(ptrs, s); });
  out << report.dump() << "\n";
  return kExitOk;
}

struct DiagnosticArgs {
  std::string checkpoint;
  std::string out_dir;
  std::string split = "target";
  std::string scope = "trainable";
  std::size_t max_samples = 0;
  std::uint64_t seed = 0;
  bool seed_set = false;
};

std::vector<const Sample*> diagnostic_samples(const RunConfig& c, const std::vector<Sample>& data,
                                              const DiagnosticArgs& a) {
  const SplitPlan split = split_for(c, data);
  std::vector<const Sample*> out;
  if (a.split == "target") {
    out = select(data, split.target);
  } else if (a.split == "source_val" || a.split == "source_train") {
    const auto& groups = a.split == "source_val" ? split.val : split.train;
    for (const auto& g : groups)
      for (std::size_t i : g) out.push_back(&data[i]);
  } else {
    throw ArgumentError("--split must be target, source_val or source_train");
  }
  if (a.max_samples > 0 && out.size() > a.max_samples) out.resize(a.max_samples);
  if (out.empty()) throw ArgumentError("diagnostic split has no samples");
  return out;
}

ParamSelection diagnostic_selection(const ParamStore& store, const std::string& scope) {
  if (scope == "trainable") {
    ParamSelection s = ParamSelection::trainable(store);
    if (s.size() == 0) throw ArgumentError("checkpoint has no trainable parameters; use --scope all");
    return s;
  }
  if (scope == "all") return ParamSelection::all(store);
  throw ArgumentError("--scope must be trainable or all");
}

int cmd_landscape(const DiagnosticArgs& a, std::size_t grid_n, double range, std::size_t jobs,
                  bool filter_norm, std::ostream& out) {
  const auto coords = grid_coordinates(grid_n, range);
  const Checkpoint ck = load_checkpoint(a.checkpoint);
  ViTModel model = restore_model(ck);
  const std::vector<Sample> data = generate_dataset(ck.config.dataset_spec());
  const auto samples = diagnostic_samples(ck.config, data, a);
  const ParamSelection sel = diagnostic_selection(model.params(), a.scope);
  const Directions dirs =
      random_directions(model.params(), sel, a.seed_set ? a.seed : ck.config.seed, filter_norm);
  const ScalarFn loss = model_loss_fn(model, samples);
  const LandscapeGrid grid = loss_landscape(loss, model.params(), sel, dirs, coords, coords, jobs);
  fs::create_directories(a.out_dir);
  const fs::path file = fs::path(a.out_dir) / "landscape.csv";
  write_text(file, grid.to_csv());
  out << ojson{{"file", file.string()}, {"cells", grid.loss.size()}, {"scalars", sel.size()}}.dump()
      << "\n";
  return kExitOk;
}

int cmd_hessian(const DiagnosticArgs& a, const PowerIterationOptions& opt, std::ostream& out) {
  const Checkpoint ck = load_checkpoint(a.checkpoint);
  ViTModel model = restore_model(ck);
  const std::vector<Sample> data = generate_dataset(ck.config.dataset_spec());
  const auto samples = diagnostic_samples(ck.config, data, a);
  const ParamSelection sel = diagnostic_selection(model.params(), a.scope);
  PowerIterationOptions o = opt;
  o.seed = a.seed_set ? a.seed : ck.config.seed;
  const GradientFn grad = model_gradient_fn(model, samples, sel);
  const EigenSpectrum spec = top_eigenvalues(grad, model.params(), sel, o);
  fs::create_directories(a.out_dir);
  const fs::path file = fs::path(a.out_dir) / "hessian.json";
  write_text(file, spec.to_json() + "\n");
  out << ojson{{"file", file.string()}, {"eigenvalues", spec.eigenvalues}}.dump() << "\n";
  return kExitOk;
}

int cmd_routemap(const std::string& path, const std::string& out_dir, std::size_t layer,
                 std::optional<std::size_t> sample, std::ostream& out) {
  const Checkpoint ck = load_checkpoint(path);
  const ViTModel model = restore_model(ck);
  const std::vector<Sample> data = generate_dataset(ck.config.dataset_spec());
  std::size_t idx = 0;
  if (sample) {
    idx = *sample;
  } else {
    while (idx < data.size() && data[idx].domain != ck.config.target_domain) ++idx;
  }
  if (idx >= data.size()) throw ArgumentError("--sample " + std::to_string(idx) + " is out of range");
  const RoutingMap map = routing_map(model, model.params(), data[idx].image, layer);
  fs::create_directories(out_dir);
  const fs::path file = fs::path(out_dir) / "routemap.json";
  write_text(file, map.to_json() + "\n");
  out << ojson{{"file", file.string()}, {"sample", idx}, {"layer", layer}}.dump() << "\n";
  return kExitOk;
}

struct CountArgs {
  std::string preset = "toy";
  std::string config;
  std::vector<std::pair<std::string, std::string>> overrides;
};

int cmd_paramcount(const CountArgs& a, std::ostream& out) {
  std::vector<std::pair<std::string, std::string>> pairs;
  if (!a.config.empty()) {
    pairs = RunConfig::from_file(a.config).to_pairs();
  } else if (a.preset == "vitb16-shapes") {
    pairs = {{"image_size", "224"}, {"patch_size", "16"}, {"d_model", "768"},
             {"heads", "12"},       {"depth", "12"},      {"mlp_ratio", "4"}};
  } else if (a.preset != "toy") {
    throw ArgumentError("unknown preset '" + a.preset + "' (toy or vitb16-shapes)");
  }
  for (const auto& [k, v] : a.overrides) {
    auto it = std::find_if(pairs.begin(), pairs.end(), [&](const auto& p) { return p.first == k; });
    if (it != pairs.end()) it->second = v;
    else pairs.emplace_back(k, v);
  }
  const bool ranks_given = std::any_of(pairs.begin(), pairs.end(),
                                       [](const auto& p) { return p.first == "ranks"; });
  if (ranks_given) {
    // An explicit rank list decides the expert count.
    std::erase_if(pairs, [](const auto& p) { return p.first == "experts"; });
  }
  const RunConfig c = RunConfig::from_pairs(pairs);
  const std::vector<ParamDecl> layout = describe_vit(c.vit_config());

  std::size_t trainable_adapter = 0;
  const auto mask = trainable_mask(layout, c.freeze_policy);
  for (const auto& d : layout) {
    if ((d.role == ParamRole::Adapter || d.role == ParamRole::Router) && mask.contains(d.name)) {
      trainable_adapter += d.scalars();
    }
  }
  ojson policies = ojson::object();
  for (auto p : {FreezePolicy::FullFineTune, FreezePolicy::LinearProbe, FreezePolicy::BiasMSA,
                 FreezePolicy::BiasMSAMLP, FreezePolicy::AttentionOnly, FreezePolicy::AdapterOnly,
                 FreezePolicy::FrozenAll}) {
    policies[std::string(to_string(p))] = count_trainable(layout, p);
  }
  ojson j;
  j["preset"] = a.config.empty() ? a.preset : "config";
  j["adapter_mode"] = to_string(c.adapter_mode);
  j["adapter_kind"] = to_string(c.adapter_kind);
  j["ranks"] = c.ranks;
  j["policy"] = to_string(c.freeze_policy);
  j["total"] = count_total(layout);
  j["trainable"] = count_trainable(layout, c.freeze_policy);
  j["adapter_scalars"] = count_adapter_scalars(layout);
  j["trainable_adapter"] = trainable_adapter;
  j["policies"] = policies;
  out << j.dump(2) << "\n";
  return kExitOk;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Mixture-of-adapters vision transformer toolkit", "moa"};
  app.require_subcommand(1);

  std::string config_path, seeds_text;
  std::size_t jobs = 1;
  auto* train = app.add_subcommand("train", "Train from a key=value config");
  train->add_option("config", config_path, "Config file")->required();
  train->add_option("--seeds", seeds_text, "Comma-separated seeds; one run per seed");
  train->add_option("--jobs", jobs, "Parallel runs or landscape workers");

  std::string checkpoint;
  std::size_t samples_per_cell = 0;
  auto* eval = app.add_subcommand("eval", "Per-domain accuracy of one checkpoint");
  eval->add_option("checkpoint", checkpoint)->required();
  eval->add_option("--samples-per-cell", samples_per_cell, "Override the dataset size");

  std::vector<std::string> checkpoints;
  auto* ens = app.add_subcommand("ensemble", "Probability-averaging ensemble accuracy");
  ens->add_option("checkpoints", checkpoints)->required()->expected(1, -1);
  ens->add_option("--samples-per-cell", samples_per_cell, "Override the dataset size");

  DiagnosticArgs diag;
  auto add_diag = [&](CLI::App* sub) {
    sub->add_option("checkpoint", diag.checkpoint)->required();
    sub->add_option("--out", diag.out_dir, "Output directory")->required();
    sub->add_option("--split", diag.split, "target, source_val or source_train");
    sub->add_option("--scope", diag.scope, "trainable or all");
    sub->add_option("--max-samples", diag.max_samples, "Cap on evaluated samples (0 = all)");
    sub->add_option("--seed", diag.seed, "Direction / start-vector seed")
        ->each([&](const std::string&) { diag.seed_set = true; });
  };
  std::size_t grid_n = 25;
  double range = 1.0;
  bool no_filter_norm = false;
  auto* land = app.add_subcommand("landscape", "2-D loss landscape slice");
  add_diag(land);
  land->add_option("--grid-n", grid_n, "Odd number of points per axis");
  land->add_option("--range", range, "Half-width of the grid");
  land->add_option("--jobs", jobs, "Worker threads");
  land->add_flag("--no-filter-norm", no_filter_norm, "Use raw Gaussian directions");

  PowerIterationOptions power;
  auto* hess = app.add_subcommand("hessian", "Top Hessian eigenvalues by power iteration");
  add_diag(hess);
  hess->add_option("--k", power.k, "Number of eigenvalues");
  hess->add_option("--max-iters", power.max_iters, "Iterations per eigenpair");
  hess->add_option("--tol", power.rel_tol, "Relative Rayleigh-quotient tolerance");

  std::string route_out;
  std::size_t layer = 0;
  std::optional<std::size_t> sample;
  auto* route = app.add_subcommand("routemap", "Top-1 expert per patch for one image");
  route->add_option("checkpoint", checkpoint)->required();
  route->add_option("--out", route_out, "Output directory")->required();
  route->add_option("--layer", layer, "Block index hosting a MoA layer")->required();
  route->add_option("--sample", sample, "Dataset index (default: first target sample)");

  CountArgs count;
  auto* pc = app.add_subcommand("paramcount", "Total and trainable parameter counts");
  pc->add_option("preset", count.preset, "toy or vitb16-shapes");
  pc->add_option("--config", count.config, "Count a config file instead of a preset");
  for (const char* key : {"freeze_policy", "adapter_mode", "adapter_kind", "ranks", "experts",
                          "kron_terms", "share_slow", "top_k", "router", "router_dim",
                          "moa_every", "moa_last2", "classes"}) {
    std::string flag = std::string("--") + key;
    std::replace(flag.begin(), flag.end(), '_', '-');
    pc->add_option_function<std::string>(
        flag, [&count, k = std::string(key)](const std::string& v) { count.overrides.emplace_back(k, v); },
        std::string("Override ") + key);
  }
  pc->add_option_function<std::string>(
      "--policy", [&count](const std::string& v) { count.overrides.emplace_back("freeze_policy", v); },
      "Freeze policy");

  std::vector<std::string> argv_text{"moa"};
  argv_text.insert(argv_text.end(), args.begin(), args.end());
  std::vector<char*> argv;
  for (auto& s : argv_text) argv.push_back(s.data());

  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*train) return cmd_train(config_path, seeds_text, jobs, out);
    if (*eval) return cmd_eval(checkpoint, samples_per_cell, out);
    if (*ens) return cmd_ensemble(checkpoints, samples_per_cell, out);
    if (*land) return cmd_landscape(diag, grid_n, range, jobs, !no_filter_norm, out);
    if (*hess) return cmd_hessian(diag, power, out);
    if (*route) return cmd_routemap(checkpoint, route_out, layer, sample, out);
    if (*pc) return cmd_paramcount(count, out);
  } catch (const ConfigError& e) {
    err << "config error: key '" << e.key() << "': " << e.what() << "\n";
    return kExitUsage;
  } catch (const CheckpointError& e) {
    err << "checkpoint error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const ArgumentError& e) {
    err << "usage error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitFailure;
  }
  return kExitUsage;
}

}  // namespace moa
