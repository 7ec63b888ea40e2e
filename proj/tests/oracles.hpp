#pragma once

// Independent reference implementations used by the unit and acceptance
// suites. Everything here deliberately avoids the library's internal
// helpers: membership is winding-number based, chamfer is the quadratic
// loop, the grammar is a regex, and the loss is a scalar loop.

#include <cmath>
#include <cstdint>
#include <regex>
#include <string>
#include <vector>

#include "p2cad/cad_lang.hpp"
#include "p2cad/geometry.hpp"
#include "p2cad/network.hpp"
#include "p2cad/rng.hpp"

namespace p2cad::oracles {

// ---- grammar: ((SOL curve+)+ EXT)+ EOS, then pure EOS padding ----

inline bool grammar_ok(const TokenMatrix& m) {
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

// ---- chamfer: quadratic double loop ----

inline double chamfer(const PointCloud& a, const PointCloud& b) {
    auto side = [](const PointCloud& s, const PointCloud& t) {
        double sum = 0.0;
        for (const Vec3& p : s.points) {
            double best = 1e300;
            for (const Vec3& q : t.points) {
                const double dx = p.x - q.x, dy = p.y - q.y, dz = p.z - q.z;
                best = std::min(best, dx * dx + dy * dy + dz * dz);
            }
            sum += std::sqrt(best);
        }
        return sum / static_cast<double>(s.points.size());
    };
    return side(a, b) + side(b, a);
}

// ---- loss: scalar loop over the prediction's stored distributions ----

struct LossValues {
    double cmd = 0.0, param = 0.0, total = 0.0;
};

inline LossValues loss(const Prediction& pred, const TokenMatrix& target, double beta) {
    LossValues v;
    const std::int64_t n = pred.cmd.dim(0);
    const std::int64_t np = pred.param.dim(1), q = pred.param.dim(2);
    for (std::int64_t i = 0; i < n; ++i) {
        v.cmd -= std::log(pred.cmd.at(i, target.rows[static_cast<std::size_t>(i)].cmd));
        for (std::int64_t j = 0; j < np; ++j) {
            const int cls = target.rows[static_cast<std::size_t>(i)].params[static_cast<std::size_t>(j)];
            v.param -= std::log(pred.param.at((i * np + j) * q + cls));
        }
    }
    v.total = v.cmd + beta * v.param;
    return v;
}

// ---- membership: winding-number test in independently rebuilt frames ----

using Mat3 = std::array<std::array<double, 3>, 3>;

inline Mat3 mat_mul(const Mat3& a, const Mat3& b) {
    Mat3 r{};
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j)
            for (int k = 0; k < 3; ++k) r[i][j] += a[i][k] * b[k][j];
    return r;
}

inline Mat3 rot_x(double t) {
    return {{{1, 0, 0}, {0, std::cos(t), -std::sin(t)}, {0, std::sin(t), std::cos(t)}}};
}
inline Mat3 rot_y(double t) {
    return {{{std::cos(t), 0, std::sin(t)}, {0, 1, 0}, {-std::sin(t), 0, std::cos(t)}}};
}
inline Mat3 rot_z(double t) {
    return {{{std::cos(t), -std::sin(t), 0}, {std::sin(t), std::cos(t), 0}, {0, 0, 1}}};
}

inline bool winding_inside(const Loop& loop, double u, double v) {
    int winding = 0;
    for (std::size_t i = 0; i + 1 < loop.pts.size(); ++i) {
        const Vec2& a = loop.pts[i];
        const Vec2& b = loop.pts[i + 1];
        if (a.y <= v) {
            if (b.y > v && (b.x - a.x) * (v - a.y) - (u - a.x) * (b.y - a.y) > 0) ++winding;
        } else {
            if (b.y <= v && (b.x - a.x) * (v - a.y) - (u - a.x) * (b.y - a.y) < 0) --winding;
        }
    }
    return winding != 0;
}

// fixtures keep one loop per profile, where winding and even-odd agree
inline bool contains(const Solid& solid, const CadSequence& seq, const Vec3& q) {
    std::vector<const CadCommand*> exts;
    for (const CadCommand& c : seq.commands)
        if (c.type == CommandType::Ext) exts.push_back(&c);

    bool inside = false;
    for (std::size_t bi = 0; bi < solid.bodies.size(); ++bi) {
        const Body& body = solid.bodies[bi];
        const CadCommand& e = *exts[bi];
        auto val = [&](int slot) {
            return dequantize_slot(slot, e.params[static_cast<std::size_t>(slot)]);
        };
        const Mat3 rot =
            mat_mul(rot_z(val(kParamGamma)), mat_mul(rot_y(val(kParamPhi)), rot_x(val(kParamTheta))));
        const double dx = q.x - val(kParamPlaneX);
        const double dy = q.y - val(kParamPlaneY);
        const double dz = q.z - val(kParamPlaneZ);
        const double s = val(kParamScale);
        const double u = (rot[0][0] * dx + rot[1][0] * dy + rot[2][0] * dz) / s;
        const double v = (rot[0][1] * dx + rot[1][1] * dy + rot[2][1] * dz) / s;
        const double w = rot[0][2] * dx + rot[1][2] * dy + rot[2][2] * dz;
        bool b = w >= body.extent_lo && w <= body.extent_hi;
        if (b) {
            bool in2d = false;
            for (const Loop& loop : body.profile.loops)
                if (winding_inside(loop, u, v)) in2d = !in2d;
            b = in2d;
        }
        const long bop = std::lround(val(kParamBoolOp));
        if (bi == 0 || bop <= 1) inside = inside || b;
        else if (bop == 2) inside = inside && !b;
        else inside = inside && b;
    }
    return inside;
}

// agreement between production contains() and a 64^3 voxelization built
// from the oracle membership; random probes snap to their voxel center so
// both sides judge the same location
inline double voxel_agreement(const CadSequence& seq, int probes, std::uint64_t seed) {
    const Solid solid = execute(seq);
    double lo[3] = {1e300, 1e300, 1e300}, hi[3] = {-1e300, -1e300, -1e300};
    for (const Body& b : solid.bodies) {
        for (const Loop& loop : b.profile.loops) {
            for (const Vec2& p : loop.pts) {
                for (const double w : {b.extent_lo, b.extent_hi}) {
                    const PlaneFrame& f = b.profile.frame;
                    const double su = f.scale * p.x, sv = f.scale * p.y;
                    const double xyz[3] = {
                        f.origin.x + f.rot[0][0] * su + f.rot[0][1] * sv + f.rot[0][2] * w,
                        f.origin.y + f.rot[1][0] * su + f.rot[1][1] * sv + f.rot[1][2] * w,
                        f.origin.z + f.rot[2][0] * su + f.rot[2][1] * sv + f.rot[2][2] * w};
                    for (int a = 0; a < 3; ++a) {
                        lo[a] = std::min(lo[a], xyz[a]);
                        hi[a] = std::max(hi[a], xyz[a]);
                    }
                }
            }
        }
    }
    for (int a = 0; a < 3; ++a) {
        const double pad = 0.05 * (hi[a] - lo[a]) + 1e-6;
        lo[a] -= pad;
        hi[a] += pad;
    }
    constexpr int n = 64;
    std::vector<std::uint8_t> grid(static_cast<std::size_t>(n) * n * n);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j)
            for (int k = 0; k < n; ++k) {
                const Vec3 c{lo[0] + (i + 0.5) / n * (hi[0] - lo[0]),
                             lo[1] + (j + 0.5) / n * (hi[1] - lo[1]),
                             lo[2] + (k + 0.5) / n * (hi[2] - lo[2])};
                grid[static_cast<std::size_t>((i * n + j) * n + k)] = contains(solid, seq, c);
            }
    Rng rng(seed);
    long agree = 0;
    for (int p = 0; p < probes; ++p) {
        const Vec3 q{rng.uniform(lo[0], hi[0]), rng.uniform(lo[1], hi[1]), rng.uniform(lo[2], hi[2])};
        const int i = std::min(n - 1, static_cast<int>((q.x - lo[0]) / (hi[0] - lo[0]) * n));
        const int j = std::min(n - 1, static_cast<int>((q.y - lo[1]) / (hi[1] - lo[1]) * n));
        const int k = std::min(n - 1, static_cast<int>((q.z - lo[2]) / (hi[2] - lo[2]) * n));
        const Vec3 center{lo[0] + (i + 0.5) / n * (hi[0] - lo[0]),
                          lo[1] + (j + 0.5) / n * (hi[1] - lo[1]),
                          lo[2] + (k + 0.5) / n * (hi[2] - lo[2])};
        if (p2cad::contains(solid, center) ==
            static_cast<bool>(grid[static_cast<std::size_t>((i * n + j) * n + k)]))
            ++agree;
    }
    return static_cast<double>(agree) / probes;
}

// ---- shared fixture builders ----

inline CadCommand quantized(CommandType t, std::initializer_list<std::pair<int, double>> vals) {
    CadCommand c = CadCommand::of(t);
    for (const auto& [slot, value] : vals)
        c.params[static_cast<std::size_t>(slot)] = static_cast<std::uint16_t>(quantize_slot(slot, value));
    return c;
}

inline CadCommand quantized_ext(double theta, double phi, double gamma, double px, double py,
                                double pz, double s, double e1, double e2, double bop) {
    return quantized(CommandType::Ext, {{kParamTheta, theta},
                                        {kParamPhi, phi},
                                        {kParamGamma, gamma},
                                        {kParamPlaneX, px},
                                        {kParamPlaneY, py},
                                        {kParamPlaneZ, pz},
                                        {kParamScale, s},
                                        {kParamExtent1, e1},
                                        {kParamExtent2, e2},
                                        {kParamBoolOp, bop},
                                        {kParamExtentKind, 2.0}});
}

inline void push_square(CadSequence& seq, double half, double cx = 0.0, double cy = 0.0) {
    seq.commands.push_back(CadCommand::of(CommandType::Sol));
    seq.commands.push_back(quantized(CommandType::Line, {{kParamX, cx + half}, {kParamY, cy - half}}));
    seq.commands.push_back(quantized(CommandType::Line, {{kParamX, cx + half}, {kParamY, cy + half}}));
    seq.commands.push_back(quantized(CommandType::Line, {{kParamX, cx - half}, {kParamY, cy + half}}));
    seq.commands.push_back(quantized(CommandType::Line, {{kParamX, cx - half}, {kParamY, cy - half}}));
}

inline CadSequence cube_sequence() {
    CadSequence seq;
    push_square(seq, 0.5);
    seq.commands.push_back(quantized_ext(0, 0, 0, 0, 0, 0, 1.0, 0.5, -0.5, 0.0));
    seq.commands.push_back(CadCommand::of(CommandType::Eos));
    return seq;
}

// grammar-valid sequence with random classes in every used slot
inline CadSequence random_valid_sequence(Rng& rng) {
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

} // namespace p2cad::oracles
