#include "moa/domains.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <fstream>

#include <nlohmann/json.hpp>

#include "moa/errors.hpp"
#include "moa/rng.hpp"

namespace moa {

namespace {
constexpr double kPi = 3.14159265358979323846;

constexpr std::array<std::array<std::size_t, 3>, 6> kPerms{{
    {0, 1, 2}, {2, 0, 1}, {1, 2, 0}, {0, 2, 1}, {2, 1, 0}, {1, 0, 2}}};

// Glyph shape intensity in [0, 1] at rotated, centred coordinates (u, v).
double shape_mask(std::size_t shape, double u, double v, double stroke) {
  const double w = 0.09 * stroke;
  const double r = std::sqrt(u * u + v * v);
  switch (shape) {
    case 0:  // ring
      return std::exp(-std::pow((r - 0.55) / w, 2.0));
    case 1: {  // plus
      const double bar = std::min(std::abs(u), std::abs(v));
      return r < 0.75 ? std::exp(-std::pow(bar / w, 2.0)) : 0.0;
    }
    case 2:  // blob
      return std::exp(-(r * r) / (0.18 * stroke));
    case 3: {  // square outline
      const double edge = std::max(std::abs(u), std::abs(v));
      return std::exp(-std::pow((edge - 0.5) / w, 2.0));
    }
    default: {  // diagonal cross
      const double a = std::abs(u - v) * M_SQRT1_2, b = std::abs(u + v) * M_SQRT1_2;
      return r < 0.8 ? std::exp(-std::pow(std::min(a, b) / w, 2.0)) : 0.0;
    }
  }
}
}  // namespace

DomainSpec domain_spec(std::size_t id) {
  static constexpr double kRotation[] = {0.0, 12.0, -12.0, 24.0, -24.0, 36.0};
  static constexpr double kNoise[] = {0.0, 0.15, 0.3, 0.45};
  static constexpr double kFreq[] = {3.0, 7.0, 11.0, 15.0};
  static constexpr double kStroke[] = {1.0, 1.6, 0.7, 2.2};
  DomainSpec s;
  s.domain_id = id;
  s.rotation_deg = kRotation[id % 6];
  s.rotation_band = 5.0;
  const auto& perm = kPerms[id % kPerms.size()];
  std::copy(perm.begin(), perm.end(), s.channel_perm);
  s.noise_scale = kNoise[id % 4];
  s.noise_freq = kFreq[(id / 2 + id) % 4];
  s.stroke = kStroke[(id * 3) % 4];
  return s;
}

Image render_sample(const DatasetSpec& spec, std::size_t domain, std::size_t label,
                    std::size_t index) {
  const DomainSpec dom = domain_spec(domain);
  const std::uint64_t key = (static_cast<std::uint64_t>(domain) << 42) ^
                            (static_cast<std::uint64_t>(label) << 21) ^ index;
  Rng rng(derive_seed(derive_seed(spec.seed, "sample"), key));

  const double angle =
      (dom.rotation_deg + rng.uniform(-dom.rotation_band, dom.rotation_band)) * kPi / 180.0;
  const double cx = rng.uniform(-0.12, 0.12), cy = rng.uniform(-0.12, 0.12);
  const double scale = rng.uniform(0.85, 1.15);
  const double phase = rng.uniform(0.0, 2.0 * kPi);
  const double noise_phase = rng.uniform(0.0, 2.0 * kPi);
  const double noise_dir = rng.uniform(0.0, kPi);
  const double orientation = static_cast<double>(label) * kPi / static_cast<double>(spec.classes);
  const double grating_freq = 3.0 + static_cast<double>(label % 3);
  const std::size_t shape = label % 5;

  const std::array<double, 3> glyph_rgb{0.95, 0.55, 0.15};
  const std::array<double, 3> bg_rgb{0.1, 0.2, 0.35};
  std::array<double, 3> glyph{}, bg{};
  for (std::size_t c = 0; c < 3; ++c) {
    glyph[c] = glyph_rgb[dom.channel_perm[c]];
    bg[c] = bg_rgb[dom.channel_perm[c]];
  }

  const std::size_t n = spec.image_size;
  Image img(n, n, 3);
  const double ca = std::cos(angle), sa = std::sin(angle);
  for (std::size_t y = 0; y < n; ++y) {
    for (std::size_t x = 0; x < n; ++x) {
      const double px = (2.0 * (static_cast<double>(x) + 0.5) / static_cast<double>(n) - 1.0);
      const double py = (2.0 * (static_cast<double>(y) + 0.5) / static_cast<double>(n) - 1.0);
      const double dx = (px - cx) / scale, dy = (py - cy) / scale;
      const double u = ca * dx + sa * dy, v = -sa * dx + ca * dy;
      const double r2 = u * u + v * v;

      const double along = u * std::cos(orientation) + v * std::sin(orientation);
      const double grating =
          0.5 * (1.0 + std::sin(2.0 * kPi * grating_freq * along + phase)) * std::exp(-r2 / 0.6);
      const double fg = std::clamp(0.65 * shape_mask(shape, u, v, dom.stroke) + 0.35 * grating,
                                   0.0, 1.0);
      const double texture =
          dom.noise_scale *
          std::sin(dom.noise_freq * (px * std::cos(noise_dir) + py * std::sin(noise_dir)) * kPi +
                   noise_phase) *
          std::cos(dom.noise_freq * 0.5 * (px - py) * kPi);
      for (std::size_t c = 0; c < 3; ++c) {
        const double value = bg[c] * (1.0 - fg) + glyph[c] * fg + texture + rng.normal(0.02);
        img.at(y, x, c) = std::clamp(value, 0.0, 1.0);
      }
    }
  }
  return img;
}

std::vector<Sample> generate_dataset(const DatasetSpec& spec) {
  if (spec.domains < 2 || spec.classes < 2 || spec.per_cell < 1) {
    throw ArgumentError("generate_dataset: need at least 2 domains, 2 classes and 1 sample per cell");
  }
  if (spec.image_size < 4) throw ArgumentError("generate_dataset: image_size too small");
  std::vector<Sample> out;
  out.reserve(spec.domains * spec.classes * spec.per_cell);
  for (std::size_t d = 0; d < spec.domains; ++d)
    for (std::size_t c = 0; c < spec.classes; ++c)
      for (std::size_t i = 0; i < spec.per_cell; ++i)
        out.push_back(Sample{render_sample(spec, d, c, i), c, d});
  return out;
}

SplitPlan make_splits(std::span<const Sample> dataset, std::size_t target_domain,
                      std::uint64_t seed) {
  std::size_t max_domain = 0;
  bool found = false;
  for (const auto& s : dataset) {
    max_domain = std::max(max_domain, s.domain);
    found = found || s.domain == target_domain;
  }
  if (!found) {
    throw ArgumentError("make_splits: target domain " + std::to_string(target_domain) +
                        " does not occur in the dataset");
  }
  SplitPlan plan;
  plan.target_domain = target_domain;
  std::vector<std::vector<std::size_t>> by_domain(max_domain + 1);
  for (std::size_t i = 0; i < dataset.size(); ++i) by_domain[dataset[i].domain].push_back(i);
  plan.target = by_domain[target_domain];
  for (std::size_t d = 0; d <= max_domain; ++d) {
    if (d == target_domain || by_domain[d].empty()) continue;
    auto idx = by_domain[d];
    Rng rng(derive_seed(derive_seed(seed, "split"), d));
    rng.shuffle(idx);
    const std::size_t n_val = idx.size() / 5;
    const std::size_t n_train = idx.size() - n_val;
    plan.source_domains.push_back(d);
    plan.train.emplace_back(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_train));
    plan.val.emplace_back(idx.begin() + static_cast<std::ptrdiff_t>(n_train), idx.end());
  }
  return plan;
}

void dump_dataset(std::span<const Sample> dataset, const DatasetSpec& spec,
                  const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::ofstream images(dir / "images.bin", std::ios::binary);
  std::ofstream labels(dir / "labels.bin", std::ios::binary);
  std::ofstream domains(dir / "domains.bin", std::ios::binary);
  auto put_u32 = [](std::ofstream& os, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) os.put(static_cast<char>((v >> (8 * i)) & 0xff));
  };
  for (const auto& s : dataset) {
    for (double p : s.image.pixels) {
      std::uint64_t bits;
      std::memcpy(&bits, &p, sizeof bits);
      for (int i = 0; i < 8; ++i) images.put(static_cast<char>((bits >> (8 * i)) & 0xff));
    }
    put_u32(labels, static_cast<std::uint32_t>(s.label));
    put_u32(domains, static_cast<std::uint32_t>(s.domain));
  }
  nlohmann::json manifest;
  manifest["seed"] = spec.seed;
  manifest["samples"] = dataset.size();
  manifest["image_shape"] = {spec.image_size, spec.image_size, 3};
  manifest["classes"] = spec.classes;
  manifest["per_cell"] = spec.per_cell;
  manifest["files"] = {{"images", "images.bin"}, {"labels", "labels.bin"}, {"domains", "domains.bin"}};
  for (std::size_t d = 0; d < spec.domains; ++d) {
    const DomainSpec ds = domain_spec(d);
    manifest["domains"].push_back({{"id", d},
                                   {"rotation_deg", ds.rotation_deg},
                                   {"rotation_band", ds.rotation_band},
                                   {"channel_perm", {ds.channel_perm[0], ds.channel_perm[1], ds.channel_perm[2]}},
                                   {"noise_scale", ds.noise_scale},
                                   {"noise_freq", ds.noise_freq},
                                   {"stroke", ds.stroke}});
  }
  std::ofstream(dir / "manifest.json") << manifest.dump(2) << "\n";
}

}  // namespace moa
