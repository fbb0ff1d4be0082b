#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "capsct/data.hpp"

namespace capsct {

// Synthetic CT volumes: two elliptical lung fields inside a body outline.
// Covid patients carry 2-5 soft peripheral ground-glass blobs, cap patients
// one dense lower-zone consolidation over a contiguous run of slices.
struct PhantomConfig {
  std::size_t patients_per_class = 30;
  std::size_t slices_per_patient = 24;
  std::size_t side = 64;
  std::uint64_t seed = 1;
  double blob_intensity_min = 0.25;  // added attenuation of a covid blob
  double blob_intensity_max = 0.40;
  double blob_radius_min = 0.05;  // fraction of the side
  double blob_radius_max = 0.08;
  double noise_sd = 0.02;
  // In [0, 1]; 0 makes the clinical features independent of the label.
  double clinical_strength = 0.8;
  // Share of covid patients whose blobs are faint (no severity score).
  double subtle_fraction = 0.15;
  double subtle_scale = 0.15;
  std::size_t min_slices = 10;

  void validate() const;
};

struct Phantom {
  Dataset dataset;
  // lesions[p][s] is the binary lesion map of slice s of patient p, empty
  // for slices without findings.
  std::vector<std::vector<std::vector<std::uint8_t>>> lesions;
};

Phantom generate_phantom(const PhantomConfig& config);

}  // namespace capsct
