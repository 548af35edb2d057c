#pragma once

#include <array>
#include <optional>
#include <string>
#include <string_view>

#include "gaitworks/image.hpp"

namespace gaitworks {

inline constexpr int kNumClasses = 5;
inline constexpr int kEnergySize = 224;

/// Class indices follow the fixed output order of the classifier.
enum class GaitClass { diplegic = 0, hemiplegic = 1, neuropathic = 2, normal = 3, parkinsonian = 4 };

inline constexpr std::array<std::string_view, kNumClasses> kClassNames = {"diplegic", "hemiplegic", "neuropathic",
                                                                           "normal", "parkinsonian"};

std::string_view class_name(GaitClass c);
std::optional<GaitClass> parse_class(std::string_view name);

enum class EnergyKind : unsigned char { gei = 0, sei = 1 };

std::string_view kind_name(EnergyKind k);
std::optional<EnergyKind> parse_kind(std::string_view name);

struct SequenceMeta {
  int subject = 0;
  GaitClass gait_class = GaitClass::normal;
  int severity = 0;  // 0 = not applicable, 1 or 2 otherwise
  std::string direction = "ltr";
  int sequence = 0;
  int repeat_of = 0;  // subject id this recording repeats; 0 for an original subject
};

/// 224x224 grid in [0,1] fed to the classifier.
struct EnergyImage {
  GrayImage pixels;
  EnergyKind kind = EnergyKind::gei;
  std::string provenance = "cycle";
  SequenceMeta meta;
};

}  // namespace gaitworks
