#include "gaitworks/gait_types.hpp"

namespace gaitworks {

std::string_view class_name(GaitClass c) { return kClassNames.at(static_cast<std::size_t>(c)); }

std::optional<GaitClass> parse_class(std::string_view name) {
  for (std::size_t i = 0; i < kClassNames.size(); ++i)
    if (kClassNames[i] == name) return static_cast<GaitClass>(i);
  return std::nullopt;
}

std::string_view kind_name(EnergyKind k) { return k == EnergyKind::gei ? "gei" : "sei"; }

std::optional<EnergyKind> parse_kind(std::string_view name) {
  if (name == "gei" || name == "GEI") return EnergyKind::gei;
  if (name == "sei" || name == "SEI") return EnergyKind::sei;
  return std::nullopt;
}

}  // namespace gaitworks
