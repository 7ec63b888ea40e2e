#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

namespace p2cad {

// ---------------------------------------------------------------- language
//
// A model is an ordered command sequence:  ((SOL curve+)+ EXT)+ EOS  with
// curve in {LINE, ARC, CIRCLE}. Every command carries 16 parameter slots;
// each slot holds a class in 0..256 where 0 means "unused" and 1..256 are
// 256 uniform quantization bins over the slot's real range.

enum class CommandType : std::uint8_t {
    Sol = 0,
    Line = 1,
    Arc = 2,
    Circle = 3,
    Ext = 4,
    Eos = 5,
};

inline constexpr int kSeqLen = 60;        // fixed sequence length after padding
inline constexpr int kNumParams = 16;     // parameter slots per command
inline constexpr int kNumCommands = 6;    // command vocabulary size
inline constexpr int kParamClasses = 257; // unused + 256 bins

// parameter slot layout
enum ParamSlot : int {
    kParamX = 0,       // curve end point / circle center x
    kParamY = 1,       // curve end point / circle center y
    kParamAlpha = 2,   // arc sweep angle
    kParamCcw = 3,     // arc direction flag
    kParamRadius = 4,  // circle radius
    kParamTheta = 5,   // sketch plane orientation
    kParamPhi = 6,
    kParamGamma = 7,
    kParamPlaneX = 8,  // sketch plane origin
    kParamPlaneY = 9,
    kParamPlaneZ = 10,
    kParamScale = 11,  // sketch scale
    kParamExtent1 = 12, // signed extrude distances along the plane normal
    kParamExtent2 = 13,
    kParamBoolOp = 14, // 0 new, 1 union, 2 cut, 3 intersect
    kParamExtentKind = 15,
};

struct ParamRange {
    double lo, hi;
};

ParamRange param_range(int slot);
const char* param_name(int slot);               // JSON key for a slot
const char* command_name(CommandType t);        // JSON name ("SOL", "Line", ...)
bool slot_used(CommandType t, int slot);        // arity mask
const std::vector<int>& used_slots(CommandType t);

struct CadCommand {
    CommandType type = CommandType::Eos;
    std::array<std::uint16_t, kNumParams> params{}; // classes, 0 = unused

    static CadCommand of(CommandType t) { return CadCommand{t, {}}; }
    bool operator==(const CadCommand&) const = default;
};

struct CadSequence {
    std::vector<CadCommand> commands; // includes the final EOS

    std::size_t size() const { return commands.size(); }
    bool operator==(const CadSequence&) const = default;
};

struct TokenRow {
    std::uint16_t cmd = static_cast<std::uint16_t>(CommandType::Eos);
    std::array<std::uint16_t, kNumParams> params{};

    bool operator==(const TokenRow&) const = default;
};

// fixed 60 x (1+16) integer encoding; short sequences are right-padded
// with EOS rows whose params are all zero
struct TokenMatrix {
    std::array<TokenRow, kSeqLen> rows{};

    bool operator==(const TokenMatrix&) const = default;
};

// ------------------------------------------------------------ quantization

// value -> class in 1..256: 1 + clamp(round((v-lo)/(hi-lo)*255), 0, 255)
int quantize_param(double value, double lo, double hi);
// class in 1..256 -> bin left edge: lo + (class-1)/255*(hi-lo)
double dequantize_param(int cls, double lo, double hi);

int quantize_slot(int slot, double value);
double dequantize_slot(int slot, int cls);

// --------------------------------------------------------- (de)serialization

// JSON document format:
//   {"version":1,"commands":[{"type":"Line","params":{"x":0.5,"y":-0.5}},...]}
// EOS is implicit at the end of the command list.
CadSequence parse_sequence(const std::string& json_text);
std::string serialize_sequence(const CadSequence& seq);

TokenMatrix to_token_matrix(const CadSequence& seq);
CadSequence from_token_matrix(const TokenMatrix& m);

// ------------------------------------------------------------------ syntax

enum class Violation {
    NoExtrude,
    EmptyLoop,
    BadOrder,
    BadArity,
    NoEos,
};

const char* violation_name(Violation v);

struct ValidityReport {
    bool ok = true;
    std::vector<Violation> violations;
    int first_bad_index = -1;

    bool has(Violation v) const;
};

ValidityReport validate_syntax(const TokenMatrix& m);

// ------------------------------------------------------- binary container
//
// "P2CD": magic, u32 model count, then per model 60x17 u16 values
// (cmd, p0..p15) row-major, little-endian.

void save_tokens(const std::string& path, const std::vector<TokenMatrix>& models);
std::vector<TokenMatrix> load_tokens(const std::string& path);

} // namespace p2cad
