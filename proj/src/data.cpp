#include "capsct/data.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include <json.hpp>

#include "binary_io.hpp"
#include "capsct/error.hpp"

namespace capsct {

namespace fs = std::filesystem;
using nlohmann::json;

std::string_view label_name(Label label) {
  switch (label) {
    case Label::kCovid: return "covid";
    case Label::kCap: return "cap";
    case Label::kNormal: return "normal";
  }
  throw DataError("invalid label value");
}

Label parse_label(std::string_view name) {
  if (name == "covid") return Label::kCovid;
  if (name == "cap") return Label::kCap;
  if (name == "normal") return Label::kNormal;
  throw DataError("invalid label '" + std::string(name) + "'");
}

void ClinicalFeatures::validate() const {
  if (!(age >= 0.0 && age <= 130.0))
    throw DataError("age " + std::to_string(age) + " outside [0, 130]");
  if (!(weight > 0.0 && weight <= 400.0))
    throw DataError("weight " + std::to_string(weight) + " outside (0, 400]");
}

void PatientRecord::validate() const {
  const std::string who = "patient '" + id + "': ";
  if (id.empty() || id.find_first_of("/\\") != std::string::npos || id == "." || id == "..")
    throw DataError(who + "invalid id");
  if (side == 0) throw DataError(who + "side must be positive");
  if (slices.size() != masks.size())
    throw DataError(who + std::to_string(slices.size()) + " slices but " +
                    std::to_string(masks.size()) + " masks");
  const std::size_t n = side * side;
  for (std::size_t s = 0; s < slices.size(); ++s) {
    if (slices[s].size() != n || masks[s].size() != n)
      throw DataError(who + "slice " + std::to_string(s) + " is not " + std::to_string(side) +
                      "x" + std::to_string(side));
    for (double v : slices[s])
      if (!std::isfinite(v)) throw DataError(who + "non-finite value in slice " + std::to_string(s));
    for (auto m : masks[s])
      if (m > 1) throw DataError(who + "non-binary mask " + std::to_string(s));
  }
  if (infected && infected->size() != slices.size())
    throw DataError(who + "infected flags do not match slice count");
  if (severity) {
    if (label != Label::kCovid) throw DataError(who + "severity given for a non-covid patient");
    if (*severity < 1 || *severity > 4) throw DataError(who + "severity outside 1..4");
  }
  try {
    clinical.validate();
  } catch (const DataError& e) {
    throw DataError(who + e.what());
  }
}

namespace {

json clinical_to_json(const ClinicalFeatures& c) {
  return json{{"sex", c.sex == Sex::kMale ? "male" : "female"},
              {"age", c.age},
              {"weight", c.weight},
              {"cough", c.cough},
              {"fever", c.fever},
              {"dyspnea", c.dyspnea},
              {"chest_pain", c.chest_pain},
              {"fatigue", c.fatigue}};
}

ClinicalFeatures clinical_from_json(const json& j) {
  static const std::set<std::string> known{"sex",   "age",     "weight",     "cough",
                                           "fever", "dyspnea", "chest_pain", "fatigue"};
  for (const auto& [key, _] : j.items())
    if (!known.contains(key)) throw DataError("unknown clinical field '" + key + "'");
  ClinicalFeatures c;
  const std::string sex = j.at("sex").get<std::string>();
  if (sex == "male")
    c.sex = Sex::kMale;
  else if (sex == "female")
    c.sex = Sex::kFemale;
  else
    throw DataError("invalid sex '" + sex + "'");
  c.age = j.at("age").get<double>();
  c.weight = j.at("weight").get<double>();
  c.cough = j.at("cough").get<bool>();
  c.fever = j.at("fever").get<bool>();
  c.dyspnea = j.at("dyspnea").get<bool>();
  c.chest_pain = j.at("chest_pain").get<bool>();
  c.fatigue = j.at("fatigue").get<bool>();
  return c;
}

std::string slice_file(std::size_t n) { return "slice_" + std::to_string(n) + ".raw"; }
std::string mask_file(std::size_t n) { return "mask_" + std::to_string(n) + ".raw"; }

PatientRecord load_patient(const fs::path& root, const std::string& id) {
  const fs::path dir = root / id;
  json meta;
  try {
    meta = json::parse(detail::read_file(dir / "meta.json"));
  } catch (const json::exception& e) {
    throw DataError((dir / "meta.json").string() + ": " + e.what());
  }
  PatientRecord r;
  r.id = id;
  try {
    r.label = parse_label(meta.at("label").get<std::string>());
    if (meta.contains("severity")) r.severity = meta.at("severity").get<int>();
    r.clinical = clinical_from_json(meta.at("clinical"));
    r.side = meta.at("side").get<std::size_t>();
    const auto count = meta.at("slice_count").get<std::size_t>();
    if (meta.contains("infected")) r.infected = meta.at("infected").get<std::vector<bool>>();
    const std::size_t n = r.side * r.side;
    for (std::size_t s = 0; s < count; ++s) {
      const auto sp = dir / slice_file(s), mp = dir / mask_file(s);
      if (!fs::exists(mp))
        throw DataError("patient '" + id + "': slice/mask count mismatch, missing " + mp.string());
      const std::string raw = detail::read_file(sp);
      const std::string mraw = detail::read_file(mp);
      if (raw.size() != n * 4) throw DataError(sp.string() + ": expected " + std::to_string(n * 4) + " bytes");
      if (mraw.size() != n) throw DataError(mp.string() + ": expected " + std::to_string(n) + " bytes");
      std::vector<double> pixels(n);
      const auto* p = reinterpret_cast<const unsigned char*>(raw.data());
      for (std::size_t i = 0; i < n; ++i) pixels[i] = detail::get_le<float>(p + 4 * i);
      r.slices.push_back(std::move(pixels));
      r.masks.emplace_back(mraw.begin(), mraw.end());
    }
    if (fs::exists(dir / mask_file(count)) || fs::exists(dir / slice_file(count)))
      throw DataError("patient '" + id + "': slice/mask count mismatch, extra files beyond " +
                      std::to_string(count));
  } catch (const json::exception& e) {
    throw DataError((dir / "meta.json").string() + ": " + e.what());
  }
  r.validate();
  return r;
}

}  // namespace

void write_dataset(const fs::path& root, const Dataset& dataset) {
  std::error_code ec;
  fs::create_directories(root, ec);
  if (ec) throw IoError("cannot create " + root.string() + ": " + ec.message());
  std::vector<std::string> ids;
  for (const auto& r : dataset) {
    r.validate();
    ids.push_back(r.id);
  }
  std::sort(ids.begin(), ids.end());
  if (std::adjacent_find(ids.begin(), ids.end()) != ids.end())
    throw DataError("duplicate patient id");
  for (const auto& r : dataset) {
    const fs::path dir = root / r.id;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
    json meta{{"label", label_name(r.label)},
              {"clinical", clinical_to_json(r.clinical)},
              {"side", r.side},
              {"slice_count", r.slice_count()}};
    if (r.severity) meta["severity"] = *r.severity;
    if (r.infected) meta["infected"] = *r.infected;
    detail::write_file(dir / "meta.json", meta.dump() + "\n");
    for (std::size_t s = 0; s < r.slice_count(); ++s) {
      std::string raw;
      raw.reserve(r.slices[s].size() * 4);
      for (double v : r.slices[s]) detail::put_le(raw, static_cast<float>(v));
      detail::write_file(dir / slice_file(s), raw);
      detail::write_file(dir / mask_file(s),
                         std::string_view(reinterpret_cast<const char*>(r.masks[s].data()),
                                          r.masks[s].size()));
    }
  }
  detail::write_file(root / "manifest.json", json{{"patients", ids}}.dump() + "\n");
}

Dataset load_dataset(const fs::path& root) {
  std::vector<std::string> ids;
  try {
    const json manifest = json::parse(detail::read_file(root / "manifest.json"));
    ids = manifest.at("patients").get<std::vector<std::string>>();
  } catch (const json::exception& e) {
    throw DataError((root / "manifest.json").string() + ": " + e.what());
  }
  std::sort(ids.begin(), ids.end());
  if (std::adjacent_find(ids.begin(), ids.end()) != ids.end())
    throw DataError((root / "manifest.json").string() + ": duplicate patient id");
  Dataset out;
  out.reserve(ids.size());
  for (const auto& id : ids) out.push_back(load_patient(root, id));
  return out;
}

namespace {

// Overlap of source cell s with target cell t, in units of 1/(side·target)
// of the full extent, divided by the target-cell width.
std::vector<std::vector<std::pair<std::size_t, double>>> overlap_weights(std::size_t side,
                                                                         std::size_t target) {
  std::vector<std::vector<std::pair<std::size_t, double>>> w(target);
  for (std::size_t t = 0; t < target; ++t) {
    const std::size_t lo = t * side, hi = (t + 1) * side;
    for (std::size_t s = lo / target; s < side && s * target < hi; ++s) {
      const std::size_t a = std::max(lo, s * target), b = std::min(hi, (s + 1) * target);
      if (b > a) w[t].emplace_back(s, static_cast<double>(b - a) / static_cast<double>(side));
    }
  }
  return w;
}

}  // namespace

std::vector<double> area_resample(std::span<const double> grid, std::size_t side,
                                  std::size_t target) {
  if (side == 0 || target == 0) throw ConfigError("resample extents must be positive");
  if (grid.size() != side * side)
    throw DimensionError("grid of " + std::to_string(grid.size()) + " values is not " +
                         std::to_string(side) + "x" + std::to_string(side));
  if (side == target) return {grid.begin(), grid.end()};
  const auto w = overlap_weights(side, target);
  std::vector<double> rows(target * side, 0.0);  // resample along y
  for (std::size_t t = 0; t < target; ++t)
    for (auto [s, ws] : w[t])
      for (std::size_t x = 0; x < side; ++x) rows[t * side + x] += ws * grid[s * side + x];
  std::vector<double> out(target * target, 0.0);
  for (std::size_t y = 0; y < target; ++y)
    for (std::size_t t = 0; t < target; ++t) {
      double acc = 0.0;
      for (auto [s, ws] : w[t]) acc += ws * rows[y * side + s];
      out[y * target + t] = acc;
    }
  return out;
}

PreprocessedSlice preprocess_slice(std::span<const double> slice,
                                   std::span<const std::uint8_t> mask, std::size_t side,
                                   std::size_t target) {
  if (slice.size() != side * side || mask.size() != side * side)
    throw DimensionError("slice and mask must both be " + std::to_string(side) + "x" +
                         std::to_string(side));
  std::vector<double> masked(slice.size()), coverage(mask.size());
  for (std::size_t i = 0; i < slice.size(); ++i) {
    if (mask[i] > 1) throw DataError("non-binary mask value " + std::to_string(mask[i]));
    masked[i] = mask[i] ? slice[i] : 0.0;
    coverage[i] = mask[i];
  }
  PreprocessedSlice out;
  out.side = target;
  out.pixels = area_resample(masked, side, target);
  const auto cov = area_resample(coverage, side, target);
  out.mask.resize(cov.size());
  double lo = INFINITY, hi = -INFINITY;
  for (std::size_t i = 0; i < cov.size(); ++i) {
    out.mask[i] = cov[i] >= 0.5 ? 1 : 0;
    if (out.mask[i]) {
      lo = std::min(lo, out.pixels[i]);
      hi = std::max(hi, out.pixels[i]);
    }
  }
  const double range = hi - lo;
  for (std::size_t i = 0; i < cov.size(); ++i)
    out.pixels[i] = (out.mask[i] && range > 0.0) ? (out.pixels[i] - lo) / range : 0.0;
  return out;
}

}  // namespace capsct
