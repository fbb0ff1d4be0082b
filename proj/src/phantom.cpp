#include "capsct/phantom.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <numeric>
#include <random>

#include "capsct/error.hpp"
#include "capsct/rng.hpp"

namespace capsct {

void PhantomConfig::validate() const {
  if (patients_per_class == 0) throw ConfigError("patients_per_class must be positive");
  if (side < 32) throw ConfigError("phantom side must be at least 32");
  if (min_slices == 0 || slices_per_patient < min_slices)
    throw ConfigError("slices_per_patient must be at least " + std::to_string(min_slices));
  if (!(blob_radius_min > 0.0 && blob_radius_min <= blob_radius_max && blob_radius_max <= 0.12))
    throw ConfigError("blob radius range must satisfy 0 < min <= max <= 0.12");
  if (blob_radius_min * static_cast<double>(side) < 1.5)
    throw ConfigError("side " + std::to_string(side) + " too small for blob radius " +
                      std::to_string(blob_radius_min));
  if (!(blob_intensity_min > 0.0 && blob_intensity_min <= blob_intensity_max))
    throw ConfigError("blob intensity range must satisfy 0 < min <= max");
  if (!(noise_sd >= 0.0)) throw ConfigError("noise_sd must be non-negative");
  if (!(clinical_strength >= 0.0 && clinical_strength <= 1.0))
    throw ConfigError("clinical_strength must lie in [0, 1]");
  if (!(subtle_fraction >= 0.0 && subtle_fraction <= 1.0))
    throw ConfigError("subtle_fraction must lie in [0, 1]");
  if (!(subtle_scale > 0.0 && subtle_scale <= 1.0))
    throw ConfigError("subtle_scale must lie in (0, 1]");
}

namespace {

constexpr double kBody = 0.55;
constexpr double kLung = 0.12;
constexpr double kVessel = 0.2;

// Per-class clinical parameters in the order covid, cap, normal.
struct ClinicalProfile {
  std::array<double, 3> male{0.586, 0.58, 0.393};
  std::array<double, 3> age{49.53, 57.78, 40.18};
  std::array<double, 3> weight{80.75, 67.38, 75.91};
  std::array<double, 3> cough{0.317, 0.53, 0.3393};
  std::array<double, 3> fever{0.144, 0.36, 0.09};
  std::array<double, 3> dyspnea{0.269, 0.18, 0.45};
  std::array<double, 3> chest_pain{0.07, 0.0, 0.107};
  std::array<double, 3> fatigue{0.105, 0.0, 0.017};
};

// Moves the class value away from (or, at strength 0, onto) the class mean.
double separated(const std::array<double, 3>& v, std::size_t c, double strength) {
  const double avg = (v[0] + v[1] + v[2]) / 3.0;
  return avg + 3.0 * strength * (v[c] - avg);
}

ClinicalFeatures sample_clinical(std::size_t c, double strength, Rng& rng) {
  static const ClinicalProfile p;
  auto prob = [&](const std::array<double, 3>& v) {
    return std::clamp(separated(v, c, strength), 0.02, 0.98);
  };
  auto flip = [&](const std::array<double, 3>& v) {
    return std::bernoulli_distribution(prob(v))(rng);
  };
  ClinicalFeatures f;
  f.sex = flip(p.male) ? Sex::kMale : Sex::kFemale;
  f.age = std::round(std::clamp(std::normal_distribution<double>(separated(p.age, c, strength), 12.0)(rng), 14.0, 95.0));
  f.weight = std::round(std::clamp(std::normal_distribution<double>(separated(p.weight, c, strength), 12.0)(rng), 35.0, 150.0));
  f.cough = flip(p.cough);
  f.fever = flip(p.fever);
  f.dyspnea = flip(p.dyspnea);
  f.chest_pain = flip(p.chest_pain);
  f.fatigue = flip(p.fatigue);
  return f;
}

struct Ellipse {
  double cx, cy, ax, ay;
  double level(double x, double y) const {
    const double dx = (x - cx) / ax, dy = (y - cy) / ay;
    return dx * dx + dy * dy;
  }
};

struct Lesion {
  std::size_t lung;  // 0 left, 1 right
  double u, v;       // position relative to the lung centre, in semi-axes
  double radius;     // pixels
  double amplitude;
  long z_lo, z_hi;   // inclusive slice range
  bool dense;
};

struct Anatomy {
  double ax, ay, shift_x, shift_y;
};

std::array<Ellipse, 2> lungs_at(const Anatomy& a, std::size_t slice, std::size_t count,
                                double side) {
  const double z = (static_cast<double>(slice) + 0.5) / static_cast<double>(count);
  const double f = 0.7 + 0.3 * std::sin(std::numbers::pi * z);
  const double cy = (0.5 + a.shift_y) * side;
  return {Ellipse{(0.32 + a.shift_x) * side, cy, a.ax * f * side, a.ay * f * side},
          Ellipse{(0.68 + a.shift_x) * side, cy, a.ax * f * side, a.ay * f * side}};
}

// Radius of a lesion on a given slice (0 when absent).
double lesion_radius(const Lesion& l, long s) {
  if (s < l.z_lo || s > l.z_hi) return 0.0;
  const double len = static_cast<double>(l.z_hi - l.z_lo + 1);
  const double t = (static_cast<double>(s - l.z_lo) + 0.5) / len;
  if (l.dense) return l.radius * (0.75 + 0.25 * std::sin(std::numbers::pi * t));
  const double d = 2.0 * t - 1.0;
  return l.radius * std::sqrt(std::max(0.0, 1.0 - d * d));
}

double lesion_profile(const Lesion& l, double d, double r) {
  if (d >= r) return 0.0;
  if (l.dense) return l.amplitude * std::clamp((1.0 - d / r) / 0.3, 0.0, 1.0);
  const double q = 1.0 - (d / r) * (d / r);
  return l.amplitude * q * q;
}

}  // namespace

Phantom generate_phantom(const PhantomConfig& cfg) {
  cfg.validate();
  const std::size_t total = 3 * cfg.patients_per_class;
  std::vector<std::size_t> classes(total);
  for (std::size_t i = 0; i < total; ++i) classes[i] = i / cfg.patients_per_class;
  {
    Rng order = make_rng(cfg.seed, "phantom/order");
    std::shuffle(classes.begin(), classes.end(), order);
  }
  const double side = static_cast<double>(cfg.side);
  const std::size_t n = cfg.slices_per_patient;
  const std::size_t px = cfg.side * cfg.side;

  Phantom out;
  for (std::size_t p = 0; p < total; ++p) {
    Rng rng = make_rng(cfg.seed, "phantom/patient/" + std::to_string(p));
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };

    PatientRecord r;
    char id[32];
    std::snprintf(id, sizeof id, "p%04zu", p);
    r.id = id;
    r.label = static_cast<Label>(classes[p]);
    r.side = cfg.side;
    r.clinical = sample_clinical(classes[p], cfg.clinical_strength, rng);

    const Anatomy anatomy{uniform(0.13, 0.15), uniform(0.28, 0.31), uniform(-0.01, 0.01),
                          uniform(-0.01, 0.01)};
    std::vector<Lesion> lesions;
    if (r.label == Label::kCovid) {
      const bool subtle = unit(rng) < cfg.subtle_fraction;
      const int blobs = std::uniform_int_distribution<int>(2, 5)(rng);
      if (!subtle) r.severity = blobs - 1;
      for (int b = 0; b < blobs; ++b) {
        Lesion l;
        l.lung = unit(rng) < 0.5 ? 0 : 1;
        const double theta = uniform(0.0, 2.0 * std::numbers::pi);
        const double rho = uniform(0.6, 0.8);
        l.u = rho * std::cos(theta);
        l.v = rho * std::sin(theta);
        l.radius = uniform(cfg.blob_radius_min, cfg.blob_radius_max) * side;
        l.amplitude = uniform(cfg.blob_intensity_min, cfg.blob_intensity_max) *
                      (subtle ? cfg.subtle_scale : 1.0);
        const long half = std::uniform_int_distribution<long>(2, 4)(rng);
        const long centre = std::uniform_int_distribution<long>(
            std::min<long>(2, static_cast<long>(n) - 1),
            std::max<long>(static_cast<long>(n) - 3, 0))(rng);
        l.z_lo = std::max<long>(0, centre - half);
        l.z_hi = std::min<long>(static_cast<long>(n) - 1, centre + half);
        l.dense = false;
        lesions.push_back(l);
      }
    } else if (r.label == Label::kCap) {
      Lesion l;
      l.lung = unit(rng) < 0.5 ? 0 : 1;
      l.u = uniform(-0.3, 0.3);
      l.v = uniform(0.45, 0.6);
      l.radius = uniform(0.10, 0.14) * side;
      l.amplitude = uniform(0.5, 0.7);
      const long len = std::min<long>(static_cast<long>(n),
                                      std::uniform_int_distribution<long>(6, 12)(rng));
      l.z_lo = std::uniform_int_distribution<long>(0, static_cast<long>(n) - len)(rng);
      l.z_hi = l.z_lo + len - 1;
      l.dense = true;
      lesions.push_back(l);
    }

    std::normal_distribution<double> noise(0.0, cfg.noise_sd);
    const Ellipse body{0.5 * side, 0.5 * side, 0.45 * side, 0.38 * side};
    std::vector<bool> infected(n, false);
    std::vector<std::vector<std::uint8_t>> lesion_maps(n);
    for (std::size_t s = 0; s < n; ++s) {
      const auto lung = lungs_at(anatomy, s, n, side);
      std::vector<double> img(px);
      std::vector<std::uint8_t> mask(px, 0);
      for (std::size_t y = 0; y < cfg.side; ++y)
        for (std::size_t x = 0; x < cfg.side; ++x) {
          const double fx = static_cast<double>(x) + 0.5, fy = static_cast<double>(y) + 0.5;
          const bool in_lung = lung[0].level(fx, fy) <= 1.0 || lung[1].level(fx, fy) <= 1.0;
          mask[y * cfg.side + x] = in_lung ? 1 : 0;
          img[y * cfg.side + x] = in_lung ? kLung : (body.level(fx, fy) <= 1.0 ? kBody : 0.0);
        }
      // vessels: single bright dots inside the lungs
      for (int v = 0; v < 6; ++v) {
        const auto& e = lung[v % 2];
        const double theta = uniform(0.0, 2.0 * std::numbers::pi), rho = std::sqrt(unit(rng)) * 0.85;
        const auto x = static_cast<std::size_t>(e.cx + rho * e.ax * std::cos(theta));
        const auto y = static_cast<std::size_t>(e.cy + rho * e.ay * std::sin(theta));
        if (x < cfg.side && y < cfg.side && mask[y * cfg.side + x]) img[y * cfg.side + x] += kVessel;
      }
      std::vector<std::uint8_t> lesion(px, 0);
      bool any = false;
      for (const auto& l : lesions) {
        const double rad = lesion_radius(l, static_cast<long>(s));
        if (rad <= 0.0) continue;
        const auto& e = lung[l.lung];
        const double lx = e.cx + l.u * e.ax, ly = e.cy + l.v * e.ay;
        for (std::size_t y = 0; y < cfg.side; ++y)
          for (std::size_t x = 0; x < cfg.side; ++x) {
            const std::size_t i = y * cfg.side + x;
            if (!mask[i]) continue;
            const double d = std::hypot(static_cast<double>(x) + 0.5 - lx,
                                        static_cast<double>(y) + 0.5 - ly);
            if (d >= rad) continue;
            img[i] += lesion_profile(l, d, rad);
            lesion[i] = 1;
            any = true;
          }
      }
      for (auto& v : img) v = static_cast<float>(v + noise(rng));
      if (any) {
        infected[s] = true;
        lesion_maps[s] = std::move(lesion);
      }
      r.slices.push_back(std::move(img));
      r.masks.push_back(std::move(mask));
    }
    if (r.label != Label::kNormal && std::none_of(infected.begin(), infected.end(), [](bool b) { return b; }))
      throw ConfigError("phantom lesion for patient " + r.id + " fell outside the lungs");
    r.infected = std::move(infected);
    r.validate();
    out.dataset.push_back(std::move(r));
    out.lesions.push_back(std::move(lesion_maps));
  }
  return out;
}

}  // namespace capsct
