#pragma once

#include <array>
#include <cstddef>
#include <span>
#include <string>
#include <string_view>

namespace adapterlab {

/// Activation positions of one basic block, named after the neighbouring layer.
/// The *_out positions are sub-layer outputs before the residual addition.
enum class PositionId {
  SA_in,
  SA_out,
  CA_in,
  CA_c,
  CA_out,
  FFN_in,
  FFN_out,
  Trans_out,
  Res_in,
  Res_out,
};

inline constexpr std::array<PositionId, 10> kAllPositions = {
    PositionId::SA_in,  PositionId::SA_out,  PositionId::CA_in,     PositionId::CA_c,
    PositionId::CA_out, PositionId::FFN_in,  PositionId::FFN_out,   PositionId::Trans_out,
    PositionId::Res_in, PositionId::Res_out,
};

enum class BlockKind { transformer, residual };

/// Write targets after merging positions that differ only by where a residual
/// addition is applied.
enum class OutputClass {
  SA_in,
  CA_in,    // {SA_out, CA_in}
  CA_c,
  FFN_in,   // {CA_out, FFN_in}
  Trans_out,  // {FFN_out, Trans_out}
  Res_in,
  Res_out,
};

inline constexpr std::array<OutputClass, 7> kAllOutputClasses = {
    OutputClass::SA_in,  OutputClass::CA_in,  OutputClass::CA_c,   OutputClass::FFN_in,
    OutputClass::Trans_out, OutputClass::Res_in, OutputClass::Res_out,
};

std::string_view to_string(PositionId pos);
std::string_view to_string(BlockKind kind);
/// "CA_in/SA_out" style for merged classes (written site first).
std::string to_string(OutputClass cls);

/// Throws ConfigError on unknown names.
PositionId parse_position(std::string_view name);
/// Accepts a single member name ("CA_out") or a slash pair in either order.
OutputClass parse_output_class(std::string_view name);

BlockKind kind_of(PositionId pos);
BlockKind kind_of(OutputClass cls);

/// Partial-order key: SA_in=0, SA_out=CA_in=CA_c=1, CA_out=FFN_in=2,
/// FFN_out=Trans_out=3; Res_in=0, Res_out=1.
int stage_of(PositionId pos);
int stage_of(OutputClass cls);

OutputClass class_of(PositionId pos);
std::span<const PositionId> members(OutputClass cls);
/// The physical site the adapter bank writes to: the member tapped last.
PositionId canonical_site(OutputClass cls);

/// Order in which taps fire inside a block. CA_c is tapped right before
/// cross-attention, but its value is available from block entry, so reads of
/// CA_c are served at read_order -1.
int tap_order(PositionId pos);
int read_order(PositionId pos);

/// True when the activation at `pos` is the condition sequence (m x d_c)
/// rather than the image token sequence.
inline bool is_condition_site(PositionId pos) { return pos == PositionId::CA_c; }

}  // namespace adapterlab
