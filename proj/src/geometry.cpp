#include "p2cad/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

#include "p2cad/error.hpp"
#include "p2cad/rng.hpp"

namespace p2cad {

namespace {

constexpr double kTwoPi = 6.283185307179586476925286766559;
constexpr int kSegmentsPerTurn = 64;
constexpr double kMinLoopArea = 1e-9;
constexpr double kMinScale = 1e-6;
constexpr double kMinExtent = 1e-9;
constexpr double kProbeEps = 1e-6;

Vec2 sub(const Vec2& a, const Vec2& b) { return {a.x - b.x, a.y - b.y}; }
double norm2d(const Vec2& v) { return std::hypot(v.x, v.y); }

double shoelace(const Loop& loop) {
    double acc = 0.0;
    for (std::size_t i = 0; i + 1 < loop.pts.size(); ++i) {
        const Vec2& a = loop.pts[i];
        const Vec2& b = loop.pts[i + 1];
        acc += a.x * b.y - b.x * a.y;
    }
    return 0.5 * acc;
}

bool point_in_single_loop(const Loop& loop, double u, double v) {
    bool inside = false;
    for (std::size_t i = 0; i + 1 < loop.pts.size(); ++i) {
        const Vec2& a = loop.pts[i];
        const Vec2& b = loop.pts[i + 1];
        if ((a.y > v) != (b.y > v)) {
            const double t = (v - a.y) / (b.y - a.y);
            if (u < a.x + t * (b.x - a.x)) inside = !inside;
        }
    }
    return inside;
}

Vec3 to_world(const PlaneFrame& f, double u, double v, double w) {
    const double su = f.scale * u, sv = f.scale * v;
    return {f.origin.x + f.rot[0][0] * su + f.rot[0][1] * sv + f.rot[0][2] * w,
            f.origin.y + f.rot[1][0] * su + f.rot[1][1] * sv + f.rot[1][2] * w,
            f.origin.z + f.rot[2][0] * su + f.rot[2][1] * sv + f.rot[2][2] * w};
}

// sketch-frame coordinates (u, v, w) of a world point; u,v in sketch units
Vec3 to_local(const PlaneFrame& f, const Vec3& q) {
    const double dx = q.x - f.origin.x, dy = q.y - f.origin.y, dz = q.z - f.origin.z;
    const double lu = f.rot[0][0] * dx + f.rot[1][0] * dy + f.rot[2][0] * dz;
    const double lv = f.rot[0][1] * dx + f.rot[1][1] * dy + f.rot[2][1] * dz;
    const double lw = f.rot[0][2] * dx + f.rot[1][2] * dy + f.rot[2][2] * dz;
    return {lu / f.scale, lv / f.scale, lw};
}

Vec3 rotate(const PlaneFrame& f, double u, double v, double w) {
    return {f.rot[0][0] * u + f.rot[0][1] * v + f.rot[0][2] * w,
            f.rot[1][0] * u + f.rot[1][1] * v + f.rot[1][2] * w,
            f.rot[2][0] * u + f.rot[2][1] * v + f.rot[2][2] * w};
}

bool in_body(const Body& body, const Vec3& q) {
    const Vec3 local = to_local(body.profile.frame, q);
    if (local.z < body.extent_lo || local.z > body.extent_hi) return false;
    return point_in_loops(body.profile.loops, local.x, local.y);
}

struct Aabb {
    Vec3 lo{1e300, 1e300, 1e300};
    Vec3 hi{-1e300, -1e300, -1e300};

    void grow(const Vec3& p) {
        lo.x = std::min(lo.x, p.x); lo.y = std::min(lo.y, p.y); lo.z = std::min(lo.z, p.z);
        hi.x = std::max(hi.x, p.x); hi.y = std::max(hi.y, p.y); hi.z = std::max(hi.z, p.z);
    }
};

Aabb body_aabb(const Body& b) {
    Aabb box;
    for (const Loop& loop : b.profile.loops)
        for (const Vec2& p : loop.pts) {
            box.grow(to_world(b.profile.frame, p.x, p.y, b.extent_lo));
            box.grow(to_world(b.profile.frame, p.x, p.y, b.extent_hi));
        }
    return box;
}

// ------------------------------------------------------- sequence -> solid

struct ParamReader {
    const CadCommand& cmd;
    double operator()(int slot) const {
        return dequantize_slot(slot, cmd.params[static_cast<std::size_t>(slot)]);
    }
};

void append_arc(std::vector<Vec2>& pts, const Vec2& from, const Vec2& to, double alpha, bool ccw) {
    const double chord = norm2d(sub(to, from));
    if (chord < 1e-9) fail("DegenerateLoop", "arc endpoints coincide");
    const double half = 0.5 * alpha;
    if (std::sin(half) < 1e-6) fail("DegenerateLoop", "arc sweep too close to 0 or a full turn");
    const double radius = chord / (2.0 * std::sin(half));
    const double mid_x = 0.5 * (from.x + to.x), mid_y = 0.5 * (from.y + to.y);
    const double ux = (to.x - from.x) / chord, uy = (to.y - from.y) / chord;
    // left normal of the chord; center offset flips with the direction flag
    const double nx = -uy, ny = ux;
    const double d = (0.5 * chord) / std::tan(half);
    const double sgn = ccw ? 1.0 : -1.0;
    const double cx = mid_x + sgn * nx * d, cy = mid_y + sgn * ny * d;
    const double a0 = std::atan2(from.y - cy, from.x - cx);
    const double sweep = sgn * alpha;
    const int nseg = std::max(2, static_cast<int>(std::ceil(kSegmentsPerTurn * alpha / kTwoPi)));
    for (int s = 1; s < nseg; ++s) {
        const double a = a0 + sweep * static_cast<double>(s) / static_cast<double>(nseg);
        pts.push_back({cx + radius * std::cos(a), cy + radius * std::sin(a)});
    }
    pts.push_back(to);
}

Loop circle_loop(double cx, double cy, double r) {
    if (r < 1e-9) fail("DegenerateLoop", "circle radius must be positive");
    Loop loop;
    loop.pts.reserve(kSegmentsPerTurn + 1);
    for (int s = 0; s < kSegmentsPerTurn; ++s) {
        const double a = kTwoPi * static_cast<double>(s) / kSegmentsPerTurn;
        loop.pts.push_back({cx + r * std::cos(a), cy + r * std::sin(a)});
    }
    loop.pts.push_back(loop.pts.front());
    return loop;
}

// chain of LINE/ARC commands closes back onto its last endpoint
Loop chain_loop(const std::vector<CadCommand>& chain) {
    const ParamReader last{chain.back()};
    const Vec2 start{last(kParamX), last(kParamY)};
    Loop loop;
    loop.pts.push_back(start);
    Vec2 cur = start;
    for (const CadCommand& c : chain) {
        const ParamReader p{c};
        const Vec2 end{p(kParamX), p(kParamY)};
        if (c.type == CommandType::Line) {
            loop.pts.push_back(end);
        } else {
            append_arc(loop.pts, cur, end, p(kParamAlpha), p(kParamCcw) >= 0.5);
        }
        cur = end;
    }
    // count distinct vertices; the closure point repeats the first
    int distinct = 0;
    for (std::size_t i = 0; i + 1 < loop.pts.size(); ++i) {
        const Vec2 d = sub(loop.pts[i + 1], loop.pts[i]);
        if (norm2d(d) > 1e-12) ++distinct;
    }
    if (distinct < 3) fail("DegenerateLoop", "loop has fewer than 3 distinct vertices");
    if (std::abs(shoelace(loop)) < kMinLoopArea) fail("DegenerateLoop", "loop encloses no area");
    return loop;
}

} // namespace

std::array<std::array<double, 3>, 3> rotation_from_euler(double theta, double phi, double gamma) {
    const double ct = std::cos(theta), st = std::sin(theta);
    const double cp = std::cos(phi), sp = std::sin(phi);
    const double cg = std::cos(gamma), sg = std::sin(gamma);
    // Rz(gamma) * Ry(phi) * Rx(theta)
    return {{{cg * cp, cg * sp * st - sg * ct, cg * sp * ct + sg * st},
             {sg * cp, sg * sp * st + cg * ct, sg * sp * ct - cg * st},
             {-sp, cp * st, cp * ct}}};
}

bool point_in_loops(const std::vector<Loop>& loops, double u, double v) {
    bool inside = false;
    for (const Loop& loop : loops)
        if (point_in_single_loop(loop, u, v)) inside = !inside;
    return inside;
}

Solid execute(const CadSequence& seq) {
    Solid solid;
    std::vector<Loop> loops;
    std::vector<CadCommand> chain;
    std::vector<Loop> circles;

    auto flush_loop = [&]() {
        if (!chain.empty()) {
            loops.push_back(chain_loop(chain));
            chain.clear();
        }
        for (Loop& c : circles) loops.push_back(std::move(c));
        circles.clear();
    };

    for (const CadCommand& cmd : seq.commands) {
        switch (cmd.type) {
            case CommandType::Sol:
                flush_loop();
                break;
            case CommandType::Line:
            case CommandType::Arc:
                chain.push_back(cmd);
                break;
            case CommandType::Circle: {
                const ParamReader p{cmd};
                circles.push_back(circle_loop(p(kParamX), p(kParamY), p(kParamRadius)));
                break;
            }
            case CommandType::Ext: {
                flush_loop();
                const ParamReader p{cmd};
                Body body;
                body.profile.loops = std::move(loops);
                loops.clear();
                if (body.profile.loops.empty()) fail("DegenerateLoop", "extrusion without a sketch loop");
                body.profile.frame.origin = {p(kParamPlaneX), p(kParamPlaneY), p(kParamPlaneZ)};
                body.profile.frame.rot = rotation_from_euler(p(kParamTheta), p(kParamPhi), p(kParamGamma));
                body.profile.frame.scale = p(kParamScale);
                if (body.profile.frame.scale < kMinScale) fail("DegenerateLoop", "sketch scale is zero");
                const double e1 = p(kParamExtent1), e2 = p(kParamExtent2);
                body.extent_lo = std::min(e1, e2);
                body.extent_hi = std::max(e1, e2);
                if (body.extent_hi - body.extent_lo < kMinExtent) fail("ZeroExtent", "extrusion has zero height");
                const long bop = std::clamp(std::lround(p(kParamBoolOp)), 0L, 3L);
                body.op = solid.bodies.empty() ? BoolOp::New : static_cast<BoolOp>(bop);
                solid.bodies.push_back(std::move(body));
                break;
            }
            case CommandType::Eos:
                break;
        }
    }
    if (solid.bodies.empty()) fail("DegenerateLoop", "sequence produced no bodies");

    // subtractive ops can leave nothing behind; probe before accepting
    bool subtractive = false;
    for (const Body& b : solid.bodies)
        if (b.op == BoolOp::Cut || b.op == BoolOp::Intersect) subtractive = true;
    if (subtractive) {
        Aabb box;
        for (const Body& b : solid.bodies) {
            const Aabb bb = body_aabb(b);
            box.grow(bb.lo);
            box.grow(bb.hi);
        }
        Rng rng(0x9e3779b97f4a7c15ULL);
        bool hit = false;
        for (int i = 0; i < 4096 && !hit; ++i) {
            const Vec3 q{rng.uniform(box.lo.x, box.hi.x), rng.uniform(box.lo.y, box.hi.y),
                         rng.uniform(box.lo.z, box.hi.z)};
            hit = contains(solid, q);
        }
        if (!hit) fail("EmptySolid", "boolean composition left an empty solid");
    }
    return solid;
}

bool contains(const Solid& solid, const Vec3& q) {
    bool inside = false;
    for (const Body& body : solid.bodies) {
        const bool b = in_body(body, q);
        switch (body.op) {
            case BoolOp::New:
            case BoolOp::Union: inside = inside || b; break;
            case BoolOp::Cut: inside = inside && !b; break;
            case BoolOp::Intersect: inside = inside && b; break;
        }
    }
    return inside;
}

// ---------------------------------------------------------------- sampling

namespace {

struct Face {
    int body;
    enum Kind { Wall, CapTop, CapBottom } kind;
    Vec2 a, b;   // wall edge in sketch coords
    double area; // world units
};

double profile_area(const std::vector<Loop>& loops) {
    // even-odd area: loops nested an odd number of times count negative;
    // exact for non-crossing loops, approximate if boundaries overlap
    double total = 0.0;
    for (std::size_t i = 0; i < loops.size(); ++i) {
        int depth = 0;
        const Vec2 rep = loops[i].pts.front();
        for (std::size_t j = 0; j < loops.size(); ++j)
            if (j != i && point_in_single_loop(loops[j], rep.x, rep.y)) ++depth;
        const double a = std::abs(shoelace(loops[i]));
        total += (depth % 2 == 0) ? a : -a;
    }
    return std::max(total, 0.0);
}

Aabb loops_bbox2d(const std::vector<Loop>& loops) {
    Aabb box;
    for (const Loop& loop : loops)
        for (const Vec2& p : loop.pts) box.grow({p.x, p.y, 0.0});
    return box;
}

} // namespace

PointCloud sample_surface(const Solid& solid, int count, std::uint64_t seed) {
    if (solid.bodies.empty()) fail("EmptySolid", "nothing to sample");
    if (count <= 0) fail("EmptySolid", "sample count must be positive");

    std::vector<Face> faces;
    for (std::size_t bi = 0; bi < solid.bodies.size(); ++bi) {
        const Body& body = solid.bodies[bi];
        const double height = body.extent_hi - body.extent_lo;
        for (const Loop& loop : body.profile.loops) {
            for (std::size_t i = 0; i + 1 < loop.pts.size(); ++i) {
                const double len = norm2d(sub(loop.pts[i + 1], loop.pts[i]));
                if (len < 1e-12) continue;
                faces.push_back({static_cast<int>(bi), Face::Wall, loop.pts[i], loop.pts[i + 1],
                                 len * body.profile.frame.scale * height});
            }
        }
        const double cap = profile_area(body.profile.loops) * body.profile.frame.scale * body.profile.frame.scale;
        if (cap > 0.0) {
            faces.push_back({static_cast<int>(bi), Face::CapTop, {}, {}, cap});
            faces.push_back({static_cast<int>(bi), Face::CapBottom, {}, {}, cap});
        }
    }
    std::vector<double> cumulative(faces.size());
    double total = 0.0;
    for (std::size_t i = 0; i < faces.size(); ++i) {
        total += faces[i].area;
        cumulative[i] = total;
    }
    if (total <= 0.0) fail("EmptySolid", "solid has no boundary area");

    PointCloud out;
    out.points.reserve(static_cast<std::size_t>(count));
    Rng rng(seed);
    long attempts = 0;
    const long budget = std::max(200000L, 2000L * count);
    while (static_cast<int>(out.points.size()) < count) {
        if (++attempts > budget) fail("EmptySolid", "surface sampling failed to converge");
        const double pick = rng.uniform() * total;
        const std::size_t fi = static_cast<std::size_t>(
            std::lower_bound(cumulative.begin(), cumulative.end(), pick) - cumulative.begin());
        const Face& face = faces[std::min(fi, faces.size() - 1)];
        const Body& body = solid.bodies[static_cast<std::size_t>(face.body)];
        const PlaneFrame& frame = body.profile.frame;

        Vec3 pos, normal;
        if (face.kind == Face::Wall) {
            const double t = rng.uniform();
            const double h = rng.uniform(body.extent_lo, body.extent_hi);
            const double u = face.a.x + (face.b.x - face.a.x) * t;
            const double v = face.a.y + (face.b.y - face.a.y) * t;
            pos = to_world(frame, u, v, h);
            const Vec2 e = sub(face.b, face.a);
            const double len = norm2d(e);
            normal = rotate(frame, e.y / len, -e.x / len, 0.0);
        } else {
            const Aabb box = loops_bbox2d(body.profile.loops);
            bool found = false;
            double u = 0.0, v = 0.0;
            for (int tries = 0; tries < 10000 && !found; ++tries) {
                u = rng.uniform(box.lo.x, box.hi.x);
                v = rng.uniform(box.lo.y, box.hi.y);
                found = point_in_loops(body.profile.loops, u, v);
            }
            if (!found) continue;
            const double w = face.kind == Face::CapTop ? body.extent_hi : body.extent_lo;
            pos = to_world(frame, u, v, w);
            const double sign = face.kind == Face::CapTop ? 1.0 : -1.0;
            normal = rotate(frame, 0.0, 0.0, sign);
        }

        const Vec3 outer{pos.x + kProbeEps * normal.x, pos.y + kProbeEps * normal.y, pos.z + kProbeEps * normal.z};
        const Vec3 inner{pos.x - kProbeEps * normal.x, pos.y - kProbeEps * normal.y, pos.z - kProbeEps * normal.z};
        if (contains(solid, outer) != contains(solid, inner)) out.points.push_back(pos);
    }
    return out;
}

// --------------------------------------------------------------- normalize

PointCloud normalize(const PointCloud& pc) {
    if (pc.points.empty()) fail("EmptyCloud", "cannot normalize an empty cloud");
    Aabb box;
    for (const Vec3& p : pc.points) box.grow(p);
    const double rx = box.hi.x - box.lo.x;
    const double ry = box.hi.y - box.lo.y;
    const double rz = box.hi.z - box.lo.z;
    const double longest = std::max({rx, ry, rz});
    if (longest <= 0.0) fail("DegenerateCloud", "all points coincide");
    PointCloud out;
    out.points.reserve(pc.points.size());
    // (2*(x-min) - range) / longest hits -1 and +1 exactly at the extremes
    for (const Vec3& p : pc.points)
        out.points.push_back({(2.0 * (p.x - box.lo.x) - rx) / longest,
                              (2.0 * (p.y - box.lo.y) - ry) / longest,
                              (2.0 * (p.z - box.lo.z) - rz) / longest});
    return out;
}

// ----------------------------------------------------------------- chamfer

namespace {

class KdTree {
public:
    explicit KdTree(const std::vector<Vec3>& pts) : pts_(pts) {
        idx_.resize(pts.size());
        std::iota(idx_.begin(), idx_.end(), 0);
        if (!pts.empty()) root_ = build(0, static_cast<int>(pts.size()));
    }

    double nearest_sq(const Vec3& q) const {
        double best = std::numeric_limits<double>::infinity();
        search(root_, q, best);
        return best;
    }

private:
    static constexpr int kLeaf = 8;

    struct Node {
        int begin, end;
        int axis = -1;
        double split = 0.0;
        int left = -1, right = -1;
    };

    static double coord(const Vec3& p, int axis) {
        return axis == 0 ? p.x : (axis == 1 ? p.y : p.z);
    }

    int build(int begin, int end) {
        Node node;
        node.begin = begin;
        node.end = end;
        if (end - begin > kLeaf) {
            Vec3 lo{1e300, 1e300, 1e300}, hi{-1e300, -1e300, -1e300};
            for (int i = begin; i < end; ++i) {
                const Vec3& p = pts_[static_cast<std::size_t>(idx_[static_cast<std::size_t>(i)])];
                lo = {std::min(lo.x, p.x), std::min(lo.y, p.y), std::min(lo.z, p.z)};
                hi = {std::max(hi.x, p.x), std::max(hi.y, p.y), std::max(hi.z, p.z)};
            }
            const double ex = hi.x - lo.x, ey = hi.y - lo.y, ez = hi.z - lo.z;
            node.axis = ex >= ey && ex >= ez ? 0 : (ey >= ez ? 1 : 2);
            const int mid = (begin + end) / 2;
            std::nth_element(idx_.begin() + begin, idx_.begin() + mid, idx_.begin() + end,
                             [&](int a, int b) {
                                 return coord(pts_[static_cast<std::size_t>(a)], node.axis) <
                                        coord(pts_[static_cast<std::size_t>(b)], node.axis);
                             });
            node.split = coord(pts_[static_cast<std::size_t>(idx_[static_cast<std::size_t>(mid)])], node.axis);
            const int self = static_cast<int>(nodes_.size());
            nodes_.push_back(node);
            const int l = build(begin, mid);
            const int r = build(mid, end);
            nodes_[static_cast<std::size_t>(self)].left = l;
            nodes_[static_cast<std::size_t>(self)].right = r;
            return self;
        }
        nodes_.push_back(node);
        return static_cast<int>(nodes_.size()) - 1;
    }

    void search(int ni, const Vec3& q, double& best) const {
        const Node& node = nodes_[static_cast<std::size_t>(ni)];
        if (node.axis < 0) {
            for (int i = node.begin; i < node.end; ++i) {
                const Vec3& p = pts_[static_cast<std::size_t>(idx_[static_cast<std::size_t>(i)])];
                const double dx = q.x - p.x, dy = q.y - p.y, dz = q.z - p.z;
                best = std::min(best, dx * dx + dy * dy + dz * dz);
            }
            return;
        }
        const double d = coord(q, node.axis) - node.split;
        const int near = d < 0.0 ? node.left : node.right;
        const int far = d < 0.0 ? node.right : node.left;
        search(near, q, best);
        if (d * d < best) search(far, q, best);
    }

    const std::vector<Vec3>& pts_;
    std::vector<int> idx_;
    std::vector<Node> nodes_;
    int root_ = 0;
};

} // namespace

double chamfer_distance(const PointCloud& a, const PointCloud& b) {
    if (a.points.empty() || b.points.empty()) fail("EmptyCloud", "chamfer distance needs non-empty clouds");
    const KdTree ta(a.points), tb(b.points);
    double sum_ab = 0.0;
    for (const Vec3& p : a.points) sum_ab += std::sqrt(tb.nearest_sq(p));
    double sum_ba = 0.0;
    for (const Vec3& p : b.points) sum_ba += std::sqrt(ta.nearest_sq(p));
    return sum_ab / static_cast<double>(a.points.size()) + sum_ba / static_cast<double>(b.points.size());
}

bool is_valid_model(const TokenMatrix& m) {
    if (!validate_syntax(m).ok) return false;
    try {
        const Solid solid = execute(from_token_matrix(m));
        sample_surface(solid, 128, derive_seed(0x5eed5a11d, 0));
    } catch (const Error&) {
        return false;
    }
    return true;
}

// ------------------------------------------------------------------ files

void save_cloud_text(const std::string& path, const PointCloud& pc) {
    std::ofstream os(path);
    if (!os) fail("IoError", "cannot open " + path + " for writing");
    char line[128];
    for (const Vec3& p : pc.points) {
        std::snprintf(line, sizeof(line), "%.17g %.17g %.17g\n", p.x, p.y, p.z);
        os << line;
    }
    if (!os) fail("IoError", "write failed for " + path);
}

void save_cloud_binary(const std::string& path, const PointCloud& pc) {
    std::ofstream os(path, std::ios::binary);
    if (!os) fail("IoError", "cannot open " + path + " for writing");
    os.write("P2PC", 4);
    const std::uint32_t count = static_cast<std::uint32_t>(pc.points.size());
    os.write(reinterpret_cast<const char*>(&count), 4);
    for (const Vec3& p : pc.points) {
        const float xyz[3] = {static_cast<float>(p.x), static_cast<float>(p.y), static_cast<float>(p.z)};
        os.write(reinterpret_cast<const char*>(xyz), sizeof(xyz));
    }
    if (!os) fail("IoError", "write failed for " + path);
}

PointCloud load_cloud(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) fail("IoError", "cannot open " + path);
    char magic[4] = {0, 0, 0, 0};
    is.read(magic, 4);
    PointCloud pc;
    if (is && std::memcmp(magic, "P2PC", 4) == 0) {
        std::uint32_t count = 0;
        is.read(reinterpret_cast<char*>(&count), 4);
        pc.points.resize(count);
        for (Vec3& p : pc.points) {
            float xyz[3];
            is.read(reinterpret_cast<char*>(xyz), sizeof(xyz));
            p = {xyz[0], xyz[1], xyz[2]};
        }
        if (!is) fail("IoError", "truncated cloud " + path);
        return pc;
    }
    is.clear();
    is.seekg(0);
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        Vec3 p;
        if (!(ls >> p.x >> p.y >> p.z)) fail("IoError", "bad point line in " + path);
        pc.points.push_back(p);
    }
    return pc;
}

} // namespace p2cad
