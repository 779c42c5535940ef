#include "adapterlab/positions.hpp"

#include "adapterlab/errors.hpp"

namespace adapterlab {

namespace {

constexpr std::array<PositionId, 1> kSaIn = {PositionId::SA_in};
constexpr std::array<PositionId, 2> kCaIn = {PositionId::SA_out, PositionId::CA_in};
constexpr std::array<PositionId, 1> kCaC = {PositionId::CA_c};
constexpr std::array<PositionId, 2> kFfnIn = {PositionId::CA_out, PositionId::FFN_in};
constexpr std::array<PositionId, 2> kTransOut = {PositionId::FFN_out, PositionId::Trans_out};
constexpr std::array<PositionId, 1> kResIn = {PositionId::Res_in};
constexpr std::array<PositionId, 1> kResOut = {PositionId::Res_out};

}  // namespace

std::string_view to_string(PositionId pos) {
  switch (pos) {
    case PositionId::SA_in: return "SA_in";
    case PositionId::SA_out: return "SA_out";
    case PositionId::CA_in: return "CA_in";
    case PositionId::CA_c: return "CA_c";
    case PositionId::CA_out: return "CA_out";
    case PositionId::FFN_in: return "FFN_in";
    case PositionId::FFN_out: return "FFN_out";
    case PositionId::Trans_out: return "Trans_out";
    case PositionId::Res_in: return "Res_in";
    case PositionId::Res_out: return "Res_out";
  }
  return "?";
}

std::string_view to_string(BlockKind kind) {
  return kind == BlockKind::transformer ? "transformer" : "residual";
}

std::string to_string(OutputClass cls) {
  const auto m = members(cls);
  const PositionId site = canonical_site(cls);
  std::string out(to_string(site));
  for (auto p : m) {
    if (p == site) continue;
    out += '/';
    out += to_string(p);
  }
  return out;
}

PositionId parse_position(std::string_view name) {
  for (auto p : kAllPositions) {
    if (to_string(p) == name) return p;
  }
  throw ConfigError("unknown activation position '" + std::string(name) + "'");
}

OutputClass parse_output_class(std::string_view name) {
  const auto slash = name.find('/');
  if (slash == std::string_view::npos) return class_of(parse_position(name));
  const OutputClass a = class_of(parse_position(name.substr(0, slash)));
  const OutputClass b = class_of(parse_position(name.substr(slash + 1)));
  if (a != b || name.substr(0, slash) == name.substr(slash + 1)) {
    throw ConfigError("'" + std::string(name) + "' is not an output equivalence class");
  }
  return a;
}

BlockKind kind_of(PositionId pos) {
  return (pos == PositionId::Res_in || pos == PositionId::Res_out) ? BlockKind::residual
                                                                    : BlockKind::transformer;
}

BlockKind kind_of(OutputClass cls) { return kind_of(canonical_site(cls)); }

int stage_of(PositionId pos) {
  switch (pos) {
    case PositionId::SA_in: return 0;
    case PositionId::SA_out:
    case PositionId::CA_in:
    case PositionId::CA_c: return 1;
    case PositionId::CA_out:
    case PositionId::FFN_in: return 2;
    case PositionId::FFN_out:
    case PositionId::Trans_out: return 3;
    case PositionId::Res_in: return 0;
    case PositionId::Res_out: return 1;
  }
  return 0;
}

int stage_of(OutputClass cls) { return stage_of(canonical_site(cls)); }

OutputClass class_of(PositionId pos) {
  switch (pos) {
    case PositionId::SA_in: return OutputClass::SA_in;
    case PositionId::SA_out:
    case PositionId::CA_in: return OutputClass::CA_in;
    case PositionId::CA_c: return OutputClass::CA_c;
    case PositionId::CA_out:
    case PositionId::FFN_in: return OutputClass::FFN_in;
    case PositionId::FFN_out:
    case PositionId::Trans_out: return OutputClass::Trans_out;
    case PositionId::Res_in: return OutputClass::Res_in;
    case PositionId::Res_out: return OutputClass::Res_out;
  }
  return OutputClass::SA_in;
}

std::span<const PositionId> members(OutputClass cls) {
  switch (cls) {
    case OutputClass::SA_in: return kSaIn;
    case OutputClass::CA_in: return kCaIn;
    case OutputClass::CA_c: return kCaC;
    case OutputClass::FFN_in: return kFfnIn;
    case OutputClass::Trans_out: return kTransOut;
    case OutputClass::Res_in: return kResIn;
    case OutputClass::Res_out: return kResOut;
  }
  return kSaIn;
}

PositionId canonical_site(OutputClass cls) {
  const auto m = members(cls);
  PositionId best = m.front();
  for (auto p : m) {
    if (tap_order(p) > tap_order(best)) best = p;
  }
  return best;
}

int tap_order(PositionId pos) {
  switch (pos) {
    case PositionId::SA_in: return 0;
    case PositionId::SA_out: return 1;
    case PositionId::CA_in: return 2;
    case PositionId::CA_c: return 3;
    case PositionId::CA_out: return 4;
    case PositionId::FFN_in: return 5;
    case PositionId::FFN_out: return 6;
    case PositionId::Trans_out: return 7;
    case PositionId::Res_in: return 0;
    case PositionId::Res_out: return 1;
  }
  return 0;
}

int read_order(PositionId pos) { return pos == PositionId::CA_c ? -1 : tap_order(pos); }

}  // namespace adapterlab
