#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace capsct {

enum class Label { kCovid = 0, kCap = 1, kNormal = 2 };
inline constexpr std::size_t kClassCount = 3;

std::string_view label_name(Label label);
// Accepts "covid", "cap", "normal"; anything else is a DataError.
Label parse_label(std::string_view name);

enum class Sex { kMale, kFemale };

struct ClinicalFeatures {
  Sex sex = Sex::kMale;
  double age = 0.0;     // years, [0, 130]
  double weight = 1.0;  // kg, (0, 400]
  bool cough = false;
  bool fever = false;
  bool dyspnea = false;
  bool chest_pain = false;
  bool fatigue = false;

  void validate() const;
  bool operator==(const ClinicalFeatures&) const = default;
};

// One CT volume: `slices` and `masks` are square side×side grids in
// row-major order. Slice values are stored as 32-bit reals on disk, so in
// memory they are kept at float precision.
struct PatientRecord {
  std::string id;
  Label label = Label::kNormal;
  std::optional<int> severity;  // 1..4, covid only
  ClinicalFeatures clinical;
  std::size_t side = 0;
  std::vector<std::vector<double>> slices;
  std::vector<std::vector<std::uint8_t>> masks;
  std::optional<std::vector<bool>> infected;  // per-slice flags

  std::size_t slice_count() const { return slices.size(); }
  void validate() const;
  bool operator==(const PatientRecord&) const = default;
};

using Dataset = std::vector<PatientRecord>;

// Directory layout: manifest.json with the patient ids, and per patient
// <id>/meta.json, <id>/slice_<n>.raw (f32 LE), <id>/mask_<n>.raw (u8).
void write_dataset(const std::filesystem::path& root, const Dataset& dataset);
// Loads and validates every record; patients are ordered by id.
Dataset load_dataset(const std::filesystem::path& root);

struct PreprocessedSlice {
  std::size_t side = 0;
  std::vector<double> pixels;
  std::vector<std::uint8_t> mask;  // resampled lung mask
};

// Zeroes pixels outside the mask, area-averages to target×target, keeps the
// target pixels whose mask coverage is at least one half and rescales them
// linearly to [0, 1] using their min/max (a constant region maps to 0).
PreprocessedSlice preprocess_slice(std::span<const double> slice,
                                   std::span<const std::uint8_t> mask, std::size_t side,
                                   std::size_t target);

// Area-average resampling of a side×side grid to target×target.
std::vector<double> area_resample(std::span<const double> grid, std::size_t side,
                                  std::size_t target);

}  // namespace capsct
