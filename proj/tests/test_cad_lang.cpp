#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <functional>
#include <regex>
#include <string>

#include "p2cad/cad_lang.hpp"
#include "p2cad/error.hpp"
#include "p2cad/rng.hpp"

using namespace p2cad;

namespace {

std::string code_of(const std::function<void()>& fn) {
    try {
        fn();
    } catch (const Error& e) {
        return e.code();
    }
    return "";
}

const char* kSquareDoc = R"({
  "version": 1,
  "commands": [
    {"type": "SOL", "params": {}},
    {"type": "Line", "params": {"x": 0.5, "y": -0.5}},
    {"type": "Line", "params": {"x": 0.5, "y": 0.5}},
    {"type": "Line", "params": {"x": -0.5, "y": 0.5}},
    {"type": "Line", "params": {"x": -0.5, "y": -0.5}},
    {"type": "Ext", "params": {"theta": 0, "phi": 0, "gamma": 0, "px": 0, "py": 0, "pz": 0,
                               "s": 1.0, "e1": 0.5, "e2": -0.5, "b": 0, "u": 2}}
  ]
})";

// grammar-valid sequence with random classes in every used slot; never
// executed, so parameters are unconstrained beyond the class range
CadSequence random_valid_sequence(Rng& rng) {
    CadSequence seq;
    const int groups = rng.range(1, 3);
    for (int gi = 0; gi < groups; ++gi) {
        const int loops = rng.range(1, 2);
        for (int li = 0; li < loops; ++li) {
            seq.commands.push_back(CadCommand::of(CommandType::Sol));
            const int curves = rng.range(1, 5);
            for (int ci = 0; ci < curves; ++ci) {
                const int pick = rng.range(0, 2);
                const CommandType t = pick == 0   ? CommandType::Line
                                      : pick == 1 ? CommandType::Arc
                                                  : CommandType::Circle;
                CadCommand c = CadCommand::of(t);
                for (int s : used_slots(t))
                    c.params[static_cast<std::size_t>(s)] =
                        static_cast<std::uint16_t>(rng.range(1, 256));
                seq.commands.push_back(c);
            }
        }
        CadCommand ext = CadCommand::of(CommandType::Ext);
        for (int s : used_slots(CommandType::Ext))
            ext.params[static_cast<std::size_t>(s)] = static_cast<std::uint16_t>(rng.range(1, 256));
        seq.commands.push_back(ext);
    }
    seq.commands.push_back(CadCommand::of(CommandType::Eos));
    return seq;
}

// independent grammar oracle: regex over the command codes before the
// first EOS, then a pure padding check
bool oracle_grammar_ok(const TokenMatrix& m) {
    static const std::regex grammar("^((0[123]+)+4)+$");
    int eos = -1;
    for (int i = 0; i < kSeqLen && eos < 0; ++i)
        if (m.rows[static_cast<std::size_t>(i)].cmd == 5) eos = i;
    if (eos < 0) return false;
    std::string body;
    for (int i = 0; i < eos; ++i) {
        if (m.rows[static_cast<std::size_t>(i)].cmd > 5) return false;
        body += static_cast<char>('0' + m.rows[static_cast<std::size_t>(i)].cmd);
    }
    for (int i = eos + 1; i < kSeqLen; ++i)
        if (m.rows[static_cast<std::size_t>(i)].cmd != 5) return false;
    return std::regex_match(body, grammar);
}

} // namespace

TEST_CASE("quantize formula and bounds") {
    CHECK(quantize_param(-1.0, -1.0, 1.0) == 1);
    CHECK(quantize_param(1.0, -1.0, 1.0) == 256);
    CHECK(quantize_param(0.0, -1.0, 1.0) == 129); // round(0.5*255)=128, +1
    CHECK(quantize_param(-7.0, -1.0, 1.0) == 1);  // clamped
    CHECK(quantize_param(9.0, -1.0, 1.0) == 256);
    CHECK(code_of([] { quantize_param(std::nan(""), 0.0, 1.0); }) == "NonFiniteParam");
    CHECK(code_of([] { quantize_param(0.5, 1.0, 1.0); }) == "BadRange");
}

TEST_CASE("dequantize formula and bounds") {
    CHECK(dequantize_param(1, -1.0, 1.0) == -1.0);
    CHECK(dequantize_param(256, -1.0, 1.0) == 1.0);
    CHECK(code_of([] { dequantize_param(0, -1.0, 1.0); }) == "UnusedParam");
    CHECK(code_of([] { dequantize_param(257, -1.0, 1.0); }) == "BadClass");
}

TEST_CASE("quantization round-trips") {
    Rng rng(21);
    SUBCASE("value -> class -> value stays within one bin") {
        for (int i = 0; i < 1000; ++i) {
            const double lo = rng.uniform(-3.0, 0.0), hi = lo + rng.uniform(0.5, 4.0);
            const double v = rng.uniform(lo, hi);
            const double back = dequantize_param(quantize_param(v, lo, hi), lo, hi);
            CHECK(std::abs(back - v) <= (hi - lo) / 255.0);
        }
    }
    SUBCASE("class -> value -> class is exact") {
        for (int cls = 1; cls <= 256; ++cls) {
            const double v = dequantize_param(cls, -1.0, 1.0);
            CHECK(quantize_param(v, -1.0, 1.0) == cls);
        }
    }
}

TEST_CASE("parse of the square fixture") {
    const CadSequence seq = parse_sequence(kSquareDoc);
    REQUIRE(seq.size() == 7); // SOL + 4 lines + EXT + implicit EOS
    CHECK(seq.commands[0].type == CommandType::Sol);
    CHECK(seq.commands[1].type == CommandType::Line);
    CHECK(seq.commands[5].type == CommandType::Ext);
    CHECK(seq.commands[6].type == CommandType::Eos);
    // unused slots stay class 0
    CHECK(seq.commands[1].params[kParamRadius] == 0);
    CHECK(seq.commands[1].params[kParamX] == quantize_slot(kParamX, 0.5));
}

TEST_CASE("parse error cases") {
    CHECK(code_of([] { parse_sequence("{not json"); }) == "ParseError");
    CHECK(code_of([] { parse_sequence(R"({"version":2,"commands":[]})"); }) == "ParseError");
    CHECK(code_of([] {
              parse_sequence(R"({"version":1,"commands":[{"type":"Wedge","params":{}}]})");
          }) == "UnknownCommand");
    CHECK(code_of([] {
              parse_sequence(R"({"version":1,"commands":[{"type":"Line","params":{"x":0.1}}]})");
          }) == "ArityError"); // missing y
    CHECK(code_of([] {
              parse_sequence(
                  R"({"version":1,"commands":[{"type":"Line","params":{"x":0.1,"y":0.2,"r":0.3}}]})");
          }) == "ArityError"); // r not accepted by Line
    SUBCASE("line before any SOL reports index 0") {
        try {
            parse_sequence(
                R"({"version":1,"commands":[{"type":"Line","params":{"x":0.1,"y":0.2}}]})");
            CHECK(false);
        } catch (const Error& e) {
            CHECK(e.code() == "GrammarError");
            CHECK(std::string(e.what()).find("index 0") != std::string::npos);
        }
    }
}

TEST_CASE("serialize") {
    SUBCASE("EOS-only sequence gives an empty command list") {
        CadSequence seq;
        seq.commands.push_back(CadCommand::of(CommandType::Eos));
        const std::string doc = serialize_sequence(seq);
        CHECK(doc.find("\"commands\": []") != std::string::npos);
    }
    SUBCASE("serializing twice is byte identical") {
        const CadSequence seq = parse_sequence(kSquareDoc);
        CHECK(serialize_sequence(seq) == serialize_sequence(seq));
    }
    SUBCASE("command after EOS is invalid") {
        CadSequence seq;
        seq.commands.push_back(CadCommand::of(CommandType::Eos));
        seq.commands.push_back(CadCommand::of(CommandType::Sol));
        CHECK(code_of([&] { serialize_sequence(seq); }) == "InvalidSequence");
    }
}

TEST_CASE("parse(serialize(seq)) is the identity on valid sequences") {
    Rng rng(22);
    for (int i = 0; i < 1000; ++i) {
        const CadSequence seq = random_valid_sequence(rng);
        const CadSequence back = parse_sequence(serialize_sequence(seq));
        CHECK(back == seq);
    }
}

TEST_CASE("token matrix round-trips") {
    SUBCASE("square fixture pads with 53 identical EOS rows") {
        const CadSequence seq = parse_sequence(kSquareDoc);
        const TokenMatrix m = to_token_matrix(seq);
        for (int i = 7; i < kSeqLen; ++i) {
            CHECK(m.rows[static_cast<std::size_t>(i)].cmd == 5);
            CHECK(m.rows[static_cast<std::size_t>(i)] == m.rows[7]);
        }
        CHECK(from_token_matrix(m) == seq);
    }
    SUBCASE("EOS-only sequence gives an all-EOS matrix") {
        CadSequence seq;
        seq.commands.push_back(CadCommand::of(CommandType::Eos));
        const TokenMatrix m = to_token_matrix(seq);
        for (const TokenRow& r : m.rows) CHECK(r.cmd == 5);
    }
    SUBCASE("from(to(seq)) over random valid sequences") {
        Rng rng(23);
        for (int i = 0; i < 500; ++i) {
            const CadSequence seq = random_valid_sequence(rng);
            CHECK(from_token_matrix(to_token_matrix(seq)) == seq);
        }
    }
    SUBCASE("too-long sequences are rejected") {
        CadSequence seq;
        for (int i = 0; i < 61; ++i) seq.commands.push_back(CadCommand::of(CommandType::Sol));
        CHECK(code_of([&] { to_token_matrix(seq); }) == "SequenceTooLong");
    }
    SUBCASE("malformed rows are rejected") {
        TokenMatrix m;       // all EOS
        m.rows[0].params[3] = 7; // EOS takes no params
        CHECK(code_of([&] { from_token_matrix(m); }) == "MalformedTokens");
    }
}

TEST_CASE("validate_syntax basics") {
    SUBCASE("square fixture is ok") {
        const TokenMatrix m = to_token_matrix(parse_sequence(kSquareDoc));
        CHECK(validate_syntax(m).ok);
    }
    SUBCASE("SOL then EXT flags EmptyLoop") {
        TokenMatrix m;
        m.rows[0].cmd = 0;
        m.rows[1].cmd = 4;
        const ValidityReport rep = validate_syntax(m);
        CHECK_FALSE(rep.ok);
        CHECK(rep.has(Violation::EmptyLoop));
    }
    SUBCASE("all-EOS matrix lacks an extrusion") {
        const ValidityReport rep = validate_syntax(TokenMatrix{});
        CHECK_FALSE(rep.ok);
        CHECK(rep.has(Violation::NoExtrude));
    }
    SUBCASE("nonzero param in an unused slot flags BadArity") {
        TokenMatrix m = to_token_matrix(parse_sequence(kSquareDoc));
        m.rows[1].params[kParamRadius] = 9;
        const ValidityReport rep = validate_syntax(m);
        CHECK_FALSE(rep.ok);
        CHECK(rep.has(Violation::BadArity));
    }
    SUBCASE("no EOS in 60 rows flags NoEos") {
        TokenMatrix m;
        for (int i = 0; i < kSeqLen; ++i) m.rows[static_cast<std::size_t>(i)].cmd = 0;
        const ValidityReport rep = validate_syntax(m);
        CHECK_FALSE(rep.ok);
        CHECK(rep.has(Violation::NoEos));
    }
}

TEST_CASE("validate_syntax agrees with the regex oracle on all codes of length <= 8") {
    // exhaustive enumeration over the 6-symbol alphabet, params zeroed
    TokenMatrix m;
    long checked = 0, valid = 0;
    for (int len = 0; len <= 8; ++len) {
        std::vector<int> codes(static_cast<std::size_t>(len), 0);
        while (true) {
            for (int i = 0; i < kSeqLen; ++i)
                m.rows[static_cast<std::size_t>(i)].cmd =
                    i < len ? static_cast<std::uint16_t>(codes[static_cast<std::size_t>(i)]) : 5;
            const bool got = validate_syntax(m).ok;
            const bool want = oracle_grammar_ok(m);
            if (got != want) {
                CAPTURE(len);
                CAPTURE(checked);
                REQUIRE(got == want);
            }
            ++checked;
            if (got) ++valid;
            int pos = len - 1;
            while (pos >= 0 && codes[static_cast<std::size_t>(pos)] == 5) {
                codes[static_cast<std::size_t>(pos)] = 0;
                --pos;
            }
            if (pos < 0) break;
            ++codes[static_cast<std::size_t>(pos)];
        }
    }
    CHECK(checked == 2015539); // sum of 6^l for l = 0..8
    CHECK(valid > 0);
}

TEST_CASE("token container round-trip") {
    Rng rng(24);
    std::vector<TokenMatrix> models;
    for (int i = 0; i < 5; ++i) models.push_back(to_token_matrix(random_valid_sequence(rng)));
    const std::string path =
        (std::filesystem::temp_directory_path() / "p2cad_tokens_test.p2cd").string();
    save_tokens(path, models);
    const std::vector<TokenMatrix> loaded = load_tokens(path);
    REQUIRE(loaded.size() == models.size());
    for (std::size_t i = 0; i < models.size(); ++i) CHECK(loaded[i] == models[i]);
    std::filesystem::remove(path);
}
