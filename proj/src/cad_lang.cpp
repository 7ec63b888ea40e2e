#include "p2cad/cad_lang.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <optional>

#include <nlohmann/json.hpp>

#include "p2cad/error.hpp"

namespace p2cad {

namespace {

constexpr double kPi = 3.14159265358979323846;

const ParamRange kRanges[kNumParams] = {
    {-1.0, 1.0},       // x
    {-1.0, 1.0},       // y
    {0.0, 2.0 * kPi},  // alpha
    {0.0, 1.0},        // f (ccw flag)
    {-1.0, 1.0},       // r
    {-kPi, kPi},       // theta
    {-kPi, kPi},       // phi
    {-kPi, kPi},       // gamma
    {-1.0, 1.0},       // px
    {-1.0, 1.0},       // py
    {-1.0, 1.0},       // pz
    {0.0, 2.0},        // s
    {-1.0, 1.0},       // e1
    {-1.0, 1.0},       // e2
    {0.0, 3.0},        // b
    {0.0, 2.0},        // u
};

const char* kParamNames[kNumParams] = {
    "x", "y", "alpha", "f", "r", "theta", "phi", "gamma",
    "px", "py", "pz", "s", "e1", "e2", "b", "u",
};

const std::vector<int> kUsedSlots[kNumCommands] = {
    /* SOL    */ {},
    /* Line   */ {kParamX, kParamY},
    /* Arc    */ {kParamX, kParamY, kParamAlpha, kParamCcw},
    /* Circle */ {kParamX, kParamY, kParamRadius},
    /* Ext    */ {kParamTheta, kParamPhi, kParamGamma, kParamPlaneX, kParamPlaneY,
                  kParamPlaneZ, kParamScale, kParamExtent1, kParamExtent2,
                  kParamBoolOp, kParamExtentKind},
    /* EOS    */ {},
};

const char* kCommandNames[kNumCommands] = {"SOL", "Line", "Arc", "Circle", "Ext", "EOS"};

bool is_curve(int code) {
    return code == static_cast<int>(CommandType::Line) ||
           code == static_cast<int>(CommandType::Arc) ||
           code == static_cast<int>(CommandType::Circle);
}

struct GrammarHit {
    Violation what;
    int index;
};

// Walks command codes against ((SOL curve+)+ EXT)+ EOS. `codes` must either
// end with the terminal EOS or represent a truncated sequence (no EOS seen).
std::optional<GrammarHit> walk_grammar(const std::vector<int>& codes) {
    enum { ExpectSol, NeedCurve, InCurves } state = ExpectSol;
    int groups = 0;
    for (std::size_t i = 0; i < codes.size(); ++i) {
        const int c = codes[i];
        const int idx = static_cast<int>(i);
        if (c == static_cast<int>(CommandType::Eos)) {
            if (state == NeedCurve) return GrammarHit{Violation::EmptyLoop, idx};
            if (state == InCurves || groups == 0) return GrammarHit{Violation::NoExtrude, idx};
            return std::nullopt; // accepted
        }
        if (c == static_cast<int>(CommandType::Sol)) {
            if (state == NeedCurve) return GrammarHit{Violation::EmptyLoop, idx};
            state = NeedCurve;
        } else if (is_curve(c)) {
            if (state == ExpectSol) return GrammarHit{Violation::BadOrder, idx};
            state = InCurves;
        } else if (c == static_cast<int>(CommandType::Ext)) {
            if (state == ExpectSol) return GrammarHit{Violation::BadOrder, idx};
            if (state == NeedCurve) return GrammarHit{Violation::EmptyLoop, idx};
            state = ExpectSol;
            ++groups;
        } else {
            return GrammarHit{Violation::BadOrder, idx};
        }
    }
    // ran out of commands without the terminal EOS
    return GrammarHit{Violation::NoEos, static_cast<int>(codes.size())};
}

} // namespace

ParamRange param_range(int slot) {
    if (slot < 0 || slot >= kNumParams) fail("BadClass", "parameter slot out of range");
    return kRanges[slot];
}

const char* param_name(int slot) { return kParamNames[slot]; }

const char* command_name(CommandType t) { return kCommandNames[static_cast<int>(t)]; }

const std::vector<int>& used_slots(CommandType t) { return kUsedSlots[static_cast<int>(t)]; }

bool slot_used(CommandType t, int slot) {
    const auto& u = kUsedSlots[static_cast<int>(t)];
    return std::find(u.begin(), u.end(), slot) != u.end();
}

// ------------------------------------------------------------ quantization

int quantize_param(double value, double lo, double hi) {
    if (!std::isfinite(value)) fail("NonFiniteParam", "cannot quantize a non-finite value");
    if (!(lo < hi)) fail("BadRange", "quantization range requires lo < hi");
    const double t = (value - lo) / (hi - lo) * 255.0;
    const long k = std::lround(t);
    return 1 + static_cast<int>(std::clamp(k, 0L, 255L));
}

double dequantize_param(int cls, double lo, double hi) {
    if (cls == 0) fail("UnusedParam", "class 0 marks an unused parameter");
    if (cls < 1 || cls > 256) fail("BadClass", "parameter class " + std::to_string(cls) + " out of 1..256");
    if (!(lo < hi)) fail("BadRange", "quantization range requires lo < hi");
    return lo + static_cast<double>(cls - 1) / 255.0 * (hi - lo);
}

int quantize_slot(int slot, double value) {
    const ParamRange r = param_range(slot);
    return quantize_param(value, r.lo, r.hi);
}

double dequantize_slot(int slot, int cls) {
    const ParamRange r = param_range(slot);
    return dequantize_param(cls, r.lo, r.hi);
}

// ------------------------------------------------------------------ JSON

CadSequence parse_sequence(const std::string& json_text) {
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(json_text);
    } catch (const nlohmann::json::exception& e) {
        fail("ParseError", e.what());
    }
    if (!doc.is_object() || !doc.contains("version") || !doc.contains("commands"))
        fail("ParseError", "expected top-level object with version and commands");
    if (doc["version"] != 1) fail("ParseError", "unsupported version");
    if (!doc["commands"].is_array()) fail("ParseError", "commands must be an array");

    CadSequence seq;
    for (const auto& jc : doc["commands"]) {
        if (!jc.is_object() || !jc.contains("type"))
            fail("ParseError", "command entries need a type");
        const std::string tname = jc["type"].get<std::string>();
        int code = -1;
        for (int t = 0; t < kNumCommands; ++t) {
            if (tname == kCommandNames[t]) code = t;
        }
        if (code < 0 || code == static_cast<int>(CommandType::Eos))
            fail("UnknownCommand", "unknown command type \"" + tname + "\"");
        CadCommand cmd = CadCommand::of(static_cast<CommandType>(code));
        const auto& used = used_slots(cmd.type);
        nlohmann::json jp = jc.value("params", nlohmann::json::object());
        if (!jp.is_object()) fail("ParseError", "params must be an object");
        for (const auto& [key, val] : jp.items()) {
            int slot = -1;
            for (int s = 0; s < kNumParams; ++s)
                if (key == kParamNames[s]) slot = s;
            if (slot < 0)
                fail("ArityError", "unknown parameter \"" + key + "\" on " + tname);
            if (!slot_used(cmd.type, slot))
                fail("ArityError", "parameter \"" + key + "\" not accepted by " + tname);
            if (!val.is_number()) fail("ParseError", "parameter \"" + key + "\" must be a number");
            cmd.params[static_cast<std::size_t>(slot)] =
                static_cast<std::uint16_t>(quantize_slot(slot, val.get<double>()));
        }
        for (int s : used) {
            if (cmd.params[static_cast<std::size_t>(s)] == 0)
                fail("ArityError", std::string("missing parameter \"") + kParamNames[s] + "\" on " + tname);
        }
        seq.commands.push_back(cmd);
    }
    seq.commands.push_back(CadCommand::of(CommandType::Eos));
    if (seq.size() > static_cast<std::size_t>(kSeqLen))
        fail("SequenceTooLong", "sequence has " + std::to_string(seq.size()) + " commands, limit is 60");

    std::vector<int> codes;
    codes.reserve(seq.size());
    for (const CadCommand& c : seq.commands) codes.push_back(static_cast<int>(c.type));
    if (auto hit = walk_grammar(codes))
        fail("GrammarError", std::string(violation_name(hit->what)) + " at index " + std::to_string(hit->index));
    return seq;
}

std::string serialize_sequence(const CadSequence& seq) {
    if (seq.size() > static_cast<std::size_t>(kSeqLen))
        fail("InvalidSequence", "sequence longer than 60 commands");
    // structural checks; grammar is validate_syntax's job
    for (std::size_t i = 0; i < seq.size(); ++i) {
        const CadCommand& c = seq.commands[i];
        if (c.type == CommandType::Eos && i + 1 != seq.size())
            fail("InvalidSequence", "command follows EOS at index " + std::to_string(i));
        for (int s = 0; s < kNumParams; ++s) {
            const int cls = c.params[static_cast<std::size_t>(s)];
            if (cls > 256) fail("InvalidSequence", "parameter class out of range");
            const bool used = slot_used(c.type, s);
            if (!used && cls != 0)
                fail("InvalidSequence", std::string("unused slot \"") + kParamNames[s] + "\" set on " +
                                            command_name(c.type));
            if (used && cls == 0)
                fail("InvalidSequence", std::string("used slot \"") + kParamNames[s] + "\" is class 0 on " +
                                            command_name(c.type));
        }
    }
    nlohmann::ordered_json doc;
    doc["version"] = 1;
    doc["commands"] = nlohmann::ordered_json::array();
    for (const CadCommand& c : seq.commands) {
        if (c.type == CommandType::Eos) continue; // implicit
        nlohmann::ordered_json jc;
        jc["type"] = command_name(c.type);
        nlohmann::ordered_json jp = nlohmann::ordered_json::object();
        for (int s : used_slots(c.type))
            jp[kParamNames[s]] = dequantize_slot(s, c.params[static_cast<std::size_t>(s)]);
        jc["params"] = jp;
        doc["commands"].push_back(jc);
    }
    return doc.dump(2) + "\n";
}

// ----------------------------------------------------------------- tokens

TokenMatrix to_token_matrix(const CadSequence& seq) {
    if (seq.size() > static_cast<std::size_t>(kSeqLen))
        fail("SequenceTooLong", "sequence has " + std::to_string(seq.size()) + " commands, limit is 60");
    TokenMatrix m;
    for (std::size_t i = 0; i < seq.size(); ++i) {
        m.rows[i].cmd = static_cast<std::uint16_t>(seq.commands[i].type);
        m.rows[i].params = seq.commands[i].params;
    }
    // remaining rows default to EOS with zero params
    return m;
}

CadSequence from_token_matrix(const TokenMatrix& m) {
    int eos_at = -1;
    for (int i = 0; i < kSeqLen; ++i) {
        const TokenRow& r = m.rows[static_cast<std::size_t>(i)];
        if (r.cmd >= kNumCommands)
            fail("MalformedTokens", "command code " + std::to_string(r.cmd) + " at row " + std::to_string(i));
        const auto t = static_cast<CommandType>(r.cmd);
        for (int s = 0; s < kNumParams; ++s) {
            const int cls = r.params[static_cast<std::size_t>(s)];
            if (cls > 256) fail("MalformedTokens", "parameter class out of range at row " + std::to_string(i));
            if (!slot_used(t, s) && cls != 0)
                fail("MalformedTokens", "unused slot set at row " + std::to_string(i));
        }
        if (eos_at < 0 && t == CommandType::Eos) {
            eos_at = i;
        } else if (eos_at >= 0 && r != TokenRow{}) {
            fail("MalformedTokens", "non-padding row " + std::to_string(i) + " after EOS");
        }
    }
    CadSequence seq;
    const int n = eos_at < 0 ? kSeqLen : eos_at;
    for (int i = 0; i < n; ++i) {
        CadCommand c;
        c.type = static_cast<CommandType>(m.rows[static_cast<std::size_t>(i)].cmd);
        c.params = m.rows[static_cast<std::size_t>(i)].params;
        seq.commands.push_back(c);
    }
    seq.commands.push_back(CadCommand::of(CommandType::Eos));
    return seq;
}

// ----------------------------------------------------------------- syntax

const char* violation_name(Violation v) {
    switch (v) {
        case Violation::NoExtrude: return "NoExtrude";
        case Violation::EmptyLoop: return "EmptyLoop";
        case Violation::BadOrder: return "BadOrder";
        case Violation::BadArity: return "BadArity";
        case Violation::NoEos: return "NoEos";
    }
    return "?";
}

bool ValidityReport::has(Violation v) const {
    return std::find(violations.begin(), violations.end(), v) != violations.end();
}

ValidityReport validate_syntax(const TokenMatrix& m) {
    ValidityReport rep;
    auto flag = [&rep](Violation v, int idx) {
        if (!rep.has(v)) rep.violations.push_back(v);
        rep.ok = false;
        if (rep.first_bad_index < 0 || idx < rep.first_bad_index) rep.first_bad_index = idx;
    };

    // arity over every row: a set class in an unused slot (or an
    // out-of-range class anywhere) is a syntax violation; class 0 in a
    // used slot is tolerated here and surfaces later as a semantic error
    for (int i = 0; i < kSeqLen; ++i) {
        const TokenRow& r = m.rows[static_cast<std::size_t>(i)];
        if (r.cmd >= kNumCommands) {
            flag(Violation::BadOrder, i);
            continue;
        }
        const auto t = static_cast<CommandType>(r.cmd);
        for (int s = 0; s < kNumParams; ++s) {
            const int cls = r.params[static_cast<std::size_t>(s)];
            if (cls > 256 || (!slot_used(t, s) && cls != 0)) flag(Violation::BadArity, i);
        }
    }

    // grammar over the rows up to and including the first EOS
    int eos_at = -1;
    for (int i = 0; i < kSeqLen && eos_at < 0; ++i)
        if (m.rows[static_cast<std::size_t>(i)].cmd == static_cast<std::uint16_t>(CommandType::Eos)) eos_at = i;

    std::vector<int> codes;
    const int upto = eos_at < 0 ? kSeqLen : eos_at + 1;
    for (int i = 0; i < upto; ++i) codes.push_back(m.rows[static_cast<std::size_t>(i)].cmd);
    if (auto hit = walk_grammar(codes)) flag(hit->what, hit->index);
    if (eos_at < 0) flag(Violation::NoEos, kSeqLen);

    // everything after the first EOS must be EOS padding
    if (eos_at >= 0) {
        for (int i = eos_at + 1; i < kSeqLen; ++i)
            if (m.rows[static_cast<std::size_t>(i)].cmd != static_cast<std::uint16_t>(CommandType::Eos))
                flag(Violation::BadOrder, i);
    }
    return rep;
}

// ------------------------------------------------------- binary container

void save_tokens(const std::string& path, const std::vector<TokenMatrix>& models) {
    std::ofstream os(path, std::ios::binary);
    if (!os) fail("IoError", "cannot open " + path + " for writing");
    os.write("P2CD", 4);
    const std::uint32_t count = static_cast<std::uint32_t>(models.size());
    os.write(reinterpret_cast<const char*>(&count), 4);
    for (const TokenMatrix& m : models) {
        for (const TokenRow& r : m.rows) {
            os.write(reinterpret_cast<const char*>(&r.cmd), 2);
            os.write(reinterpret_cast<const char*>(r.params.data()), 2 * kNumParams);
        }
    }
    if (!os) fail("IoError", "write failed for " + path);
}

std::vector<TokenMatrix> load_tokens(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) fail("IoError", "cannot open " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "P2CD", 4) != 0) fail("IoError", path + " is not a P2CD container");
    std::uint32_t count = 0;
    is.read(reinterpret_cast<char*>(&count), 4);
    std::vector<TokenMatrix> models(count);
    for (TokenMatrix& m : models) {
        for (TokenRow& r : m.rows) {
            is.read(reinterpret_cast<char*>(&r.cmd), 2);
            is.read(reinterpret_cast<char*>(r.params.data()), 2 * kNumParams);
        }
    }
    if (!is) fail("IoError", "truncated token container " + path);
    return models;
}

} // namespace p2cad
