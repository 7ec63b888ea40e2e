#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "p2cad/cad_lang.hpp"

namespace p2cad {

struct Vec2 {
    double x = 0.0, y = 0.0;
};

struct Vec3 {
    double x = 0.0, y = 0.0, z = 0.0;
};

// closed polyline; front() == back()
struct Loop {
    std::vector<Vec2> pts;
};

// world = origin + R * (scale*u, scale*v, w); the sketch lives at w = 0
struct PlaneFrame {
    Vec3 origin;
    std::array<std::array<double, 3>, 3> rot{{{1, 0, 0}, {0, 1, 0}, {0, 0, 1}}};
    double scale = 1.0;
};

struct Profile {
    std::vector<Loop> loops; // even-odd rule decides the interior
    PlaneFrame frame;
};

enum class BoolOp : int { New = 0, Union = 1, Cut = 2, Intersect = 3 };

struct Body {
    Profile profile;
    double extent_lo = 0.0, extent_hi = 0.0; // along the plane normal, world units
    BoolOp op = BoolOp::New;
};

struct Solid {
    std::vector<Body> bodies;
};

struct PointCloud {
    std::vector<Vec3> points;

    std::size_t size() const { return points.size(); }
};

// column-major composition Rz(gamma) * Ry(phi) * Rx(theta)
std::array<std::array<double, 3>, 3> rotation_from_euler(double theta, double phi, double gamma);

// even-odd membership of (u,v) against a set of closed loops
bool point_in_loops(const std::vector<Loop>& loops, double u, double v);

// Executes a syntactically valid sequence into a solid. Arcs and circles
// are discretized at 64 segments per full turn. Throws DegenerateLoop,
// ZeroExtent or EmptySolid when the sequence is semantically broken.
Solid execute(const CadSequence& seq);

bool contains(const Solid& solid, const Vec3& q);

// Area-weighted uniform sampling of the composed boundary. Candidate points
// come from every body's side walls and caps; a candidate survives only if
// it separates inside from outside (probes at +/- 1e-6 along the face
// normal), which drops faces swallowed by later boolean bodies and keeps
// cut cavity walls.
PointCloud sample_surface(const Solid& solid, int count, std::uint64_t seed);

// Translate the bounding-box center to the origin and scale by 2/longest
// axis; the box then fits [-1,1]^3 with the longest half-extent exactly 1.
PointCloud normalize(const PointCloud& pc);

// Eq-style symmetric average nearest-neighbor distance (plain L2, not
// squared). Production path uses a kd-tree; tests compare against the
// quadratic loop.
double chamfer_distance(const PointCloud& a, const PointCloud& b);

// syntax ok AND execute succeeds AND the surface can be sampled
bool is_valid_model(const TokenMatrix& m);

// ------------------------------------------------------------------ files
// text: one "x y z" per line; binary "P2PC": magic, u32 count, f32 LE triples

void save_cloud_text(const std::string& path, const PointCloud& pc);
void save_cloud_binary(const std::string& path, const PointCloud& pc);
PointCloud load_cloud(const std::string& path); // sniffs the magic

} // namespace p2cad
