#include "moa/run_config.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include "moa/errors.hpp"

namespace moa {

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::size_t to_size(const std::string& key, const std::string& v) {
  std::size_t out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size() || v.empty()) {
    throw ConfigError(key, "expected a non-negative integer, got '" + v + "'");
  }
  return out;
}

std::uint64_t to_u64(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size() || v.empty()) {
    throw ConfigError(key, "expected a non-negative integer, got '" + v + "'");
  }
  return out;
}

double to_real(const std::string& key, const std::string& v) {
  double out = 0.0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size() || v.empty() || !std::isfinite(out)) {
    throw ConfigError(key, "expected a finite real number, got '" + v + "'");
  }
  return out;
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError(key, "expected true or false, got '" + v + "'");
}

std::vector<std::size_t> to_list(const std::string& key, const std::string& v) {
  std::vector<std::size_t> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(to_size(key, trim(item)));
  if (out.empty()) throw ConfigError(key, "expected a comma-separated list");
  return out;
}

std::string real_text(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

template <typename F>
auto as(const std::string& key, F&& parse) -> decltype(parse()) {
  try {
    return parse();
  } catch (const ConfigError&) {
    throw;
  } catch (const Error& e) {
    throw ConfigError(key, e.what());
  }
}

}  // namespace

const std::vector<std::string>& RunConfig::keys() {
  static const std::vector<std::string> k{
      "seed",        "domains",     "classes",   "samples_per_cell", "image_size",
      "target_domain", "patch_size", "d_model",  "heads",            "depth",
      "mlp_ratio",   "freeze_policy", "adapter_mode", "adapter_kind", "ranks",
      "experts",     "kron_terms",  "share_slow", "top_k",           "router",
      "router_dim",  "moa_every",   "moa_last2", "aux_scale",        "lr",
      "steps",       "eval_interval", "batch_per_domain", "out_dir"};
  return k;
}

RunConfig RunConfig::from_pairs(const std::vector<std::pair<std::string, std::string>>& pairs) {
  RunConfig c;
  std::set<std::string> seen;
  bool ranks_set = false, experts_set = false;
  for (const auto& [key, v] : pairs) {
    if (!seen.insert(key).second) throw ConfigError(key, "repeated key");
    if (key == "seed") c.seed = to_u64(key, v);
    else if (key == "domains") c.domains = to_size(key, v);
    else if (key == "classes") c.classes = to_size(key, v);
    else if (key == "samples_per_cell") c.samples_per_cell = to_size(key, v);
    else if (key == "image_size") c.image_size = to_size(key, v);
    else if (key == "target_domain") c.target_domain = to_size(key, v);
    else if (key == "patch_size") c.patch_size = to_size(key, v);
    else if (key == "d_model") c.d_model = to_size(key, v);
    else if (key == "heads") c.heads = to_size(key, v);
    else if (key == "depth") c.depth = to_size(key, v);
    else if (key == "mlp_ratio") c.mlp_ratio = to_size(key, v);
    else if (key == "freeze_policy") c.freeze_policy = as(key, [&] { return parse_freeze_policy(v); });
    else if (key == "adapter_mode") c.adapter_mode = as(key, [&] { return parse_adapter_mode(v); });
    else if (key == "adapter_kind") c.adapter_kind = as(key, [&] { return parse_adapter_kind(v); });
    else if (key == "ranks") { c.ranks = to_list(key, v); ranks_set = true; }
    else if (key == "experts") { c.experts = to_size(key, v); experts_set = true; }
    else if (key == "kron_terms") c.kron_terms = to_size(key, v);
    else if (key == "share_slow") c.share_slow = to_bool(key, v);
    else if (key == "top_k") c.top_k = to_size(key, v);
    else if (key == "router") c.router = as(key, [&] { return parse_router_kind(v); });
    else if (key == "router_dim") c.router_dim = to_size(key, v);
    else if (key == "moa_every") c.moa_every = to_size(key, v);
    else if (key == "moa_last2") c.moa_last2 = to_bool(key, v);
    else if (key == "aux_scale") c.aux_scale = to_real(key, v);
    else if (key == "lr") c.lr = to_real(key, v);
    else if (key == "steps") c.steps = to_size(key, v);
    else if (key == "eval_interval") c.eval_interval = to_size(key, v);
    else if (key == "batch_per_domain") c.batch_per_domain = to_size(key, v);
    else if (key == "out_dir") c.out_dir = v;
    else throw ConfigError(key, "unknown key");
  }
  // Without an explicit rank list, `experts` picks ranks 1, 2, 4, ...
  if (experts_set && !ranks_set) {
    if (c.experts == 0) throw ConfigError("experts", "must be positive");
    c.ranks.clear();
    for (std::size_t i = 0; i < c.experts; ++i) c.ranks.push_back(std::size_t{1} << std::min<std::size_t>(i, 30));
  } else if (ranks_set && !experts_set) {
    c.experts = c.ranks.size();
  }
  c.validate();
  return c;
}

RunConfig RunConfig::parse(std::string_view text) {
  std::vector<std::pair<std::string, std::string>> pairs;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const auto end = text.find('\n', pos);
    std::string_view line = text.substr(pos, end == std::string_view::npos ? text.size() - pos : end - pos);
    pos = end == std::string_view::npos ? text.size() + 1 : end + 1;
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    const std::string body = trim(line);
    if (body.empty()) continue;
    const auto eq = body.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(body, "line " + std::to_string(line_no) + " is not key=value");
    }
    std::string key = trim(std::string_view(body).substr(0, eq));
    if (key.empty()) throw ConfigError("", "line " + std::to_string(line_no) + " has an empty key");
    pairs.emplace_back(std::move(key), trim(std::string_view(body).substr(eq + 1)));
  }
  return from_pairs(pairs);
}

RunConfig RunConfig::from_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("config", "cannot read config file '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

std::vector<std::pair<std::string, std::string>> RunConfig::to_pairs() const {
  std::string ranks_text;
  for (std::size_t i = 0; i < ranks.size(); ++i) {
    if (i) ranks_text += ",";
    ranks_text += std::to_string(ranks[i]);
  }
  auto b = [](bool v) { return std::string(v ? "true" : "false"); };
  return {
      {"seed", std::to_string(seed)},
      {"domains", std::to_string(domains)},
      {"classes", std::to_string(classes)},
      {"samples_per_cell", std::to_string(samples_per_cell)},
      {"image_size", std::to_string(image_size)},
      {"target_domain", std::to_string(target_domain)},
      {"patch_size", std::to_string(patch_size)},
      {"d_model", std::to_string(d_model)},
      {"heads", std::to_string(heads)},
      {"depth", std::to_string(depth)},
      {"mlp_ratio", std::to_string(mlp_ratio)},
      {"freeze_policy", std::string(to_string(freeze_policy))},
      {"adapter_mode", std::string(to_string(adapter_mode))},
      {"adapter_kind", std::string(to_string(adapter_kind))},
      {"ranks", ranks_text},
      {"experts", std::to_string(experts)},
      {"kron_terms", std::to_string(kron_terms)},
      {"share_slow", b(share_slow)},
      {"top_k", std::to_string(top_k)},
      {"router", std::string(to_string(router))},
      {"router_dim", std::to_string(router_dim)},
      {"moa_every", std::to_string(moa_every)},
      {"moa_last2", b(moa_last2)},
      {"aux_scale", real_text(aux_scale)},
      {"lr", real_text(lr)},
      {"steps", std::to_string(steps)},
      {"eval_interval", std::to_string(eval_interval)},
      {"batch_per_domain", std::to_string(batch_per_domain)},
      {"out_dir", out_dir},
  };
}

std::string RunConfig::serialize() const {
  std::string out;
  for (const auto& [k, v] : to_pairs()) out += k + "=" + v + "\n";
  return out;
}

void RunConfig::validate() const {
  if (domains < 2) throw ConfigError("domains", "need at least two domains");
  if (classes < 2) throw ConfigError("classes", "need at least two classes");
  if (samples_per_cell < 1) throw ConfigError("samples_per_cell", "must be positive");
  if (target_domain >= domains) {
    throw ConfigError("target_domain", "must be below domains=" + std::to_string(domains));
  }
  if (ranks.empty()) throw ConfigError("ranks", "must not be empty");
  for (std::size_t r : ranks)
    if (r == 0) throw ConfigError("ranks", "ranks must be positive");
  if (experts != ranks.size()) {
    throw ConfigError("experts", "experts=" + std::to_string(experts) + " but ranks lists " +
                                     std::to_string(ranks.size()) + " entries");
  }
  if (adapter_mode == AdapterMode::Mixture && (top_k < 1 || top_k > experts)) {
    throw ConfigError("top_k", "must lie in [1, experts]");
  }
  if (!(aux_scale >= 0.0)) throw ConfigError("aux_scale", "must be non-negative");
  if (!(lr >= 0.0)) throw ConfigError("lr", "must be non-negative");
  if (eval_interval < 1) throw ConfigError("eval_interval", "must be positive");
  if (batch_per_domain < 1) throw ConfigError("batch_per_domain", "must be positive");
  if (moa_every < 1) throw ConfigError("moa_every", "must be positive");
  if (out_dir.empty()) throw ConfigError("out_dir", "must not be empty");
  if (patch_size == 0 || image_size % patch_size != 0) {
    throw ConfigError("patch_size", "image_size must be a multiple of patch_size");
  }
  if (heads == 0 || d_model % heads != 0) throw ConfigError("heads", "must divide d_model");
  try {
    describe_vit(vit_config());
  } catch (const ConfigError&) {
    throw;
  } catch (const Error& e) {
    throw ConfigError("model", e.what());
  }
}

ViTConfig RunConfig::vit_config() const {
  ViTConfig c;
  c.image_size = image_size;
  c.patch_size = patch_size;
  c.channels = 3;
  c.d_model = d_model;
  c.heads = heads;
  c.depth = depth;
  c.mlp_ratio = mlp_ratio;
  c.num_classes = classes;
  c.plan.mode = adapter_mode;
  c.plan.kind = adapter_kind;
  c.plan.ranks = ranks;
  c.plan.kron_terms = kron_terms;
  c.plan.share_slow = share_slow;
  c.plan.router = router;
  c.plan.top_k = top_k;
  c.plan.router_dim = router_dim;
  c.plan.moa_every = moa_every;
  c.plan.moa_last2 = moa_last2;
  return c;
}

DatasetSpec RunConfig::dataset_spec() const {
  DatasetSpec s;
  s.seed = kDatasetSeed;
  s.domains = domains;
  s.classes = classes;
  s.per_cell = samples_per_cell;
  s.image_size = image_size;
  return s;
}

TrainConfig RunConfig::train_config() const {
  TrainConfig t;
  t.learning_rate = lr;
  t.batch_per_domain = batch_per_domain;
  t.steps = steps;
  t.eval_interval = eval_interval;
  t.seed = seed;
  t.policy = freeze_policy;
  t.aux_scale = aux_scale;
  return t;
}

}  // namespace moa
