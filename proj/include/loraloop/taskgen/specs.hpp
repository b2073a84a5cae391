#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace loraloop::taskgen {

inline constexpr std::size_t kImageSide = 16;
inline constexpr std::size_t kPixels = kImageSide * kImageSide;

enum class Family { stripes, dots, checker, rings, gradient };

inline constexpr std::size_t kFamilyCount = 5;
inline constexpr int kFrequencies = 4;  // f1..f4
inline constexpr int kVariants = 3;     // p0..p2

const char* family_name(Family f);

/// One procedural class. `frequency` and `variant` are the fine-grained
/// discriminators inside a family.
struct ClassSpec {
  std::string name;
  Family family = Family::stripes;
  int frequency = 1;
  int variant = 0;
  double base_intensity = 0.5;
};

ClassSpec make_class(Family family, int frequency, int variant);

/// Deterministic image-domain transform applied after rendering.
struct DomainSpec {
  double contrast = 1.0;  // scales deviation from mid-gray
  double gamma = 1.0;
  bool invert = false;
  double noise = 0.0;  // additive Gaussian std
  std::vector<double> rotations_deg{0.0};
  double occlusion = 0.0;  // probability of a mid-gray square patch

  [[nodiscard]] bool is_identity() const;
};

}  // namespace loraloop::taskgen
