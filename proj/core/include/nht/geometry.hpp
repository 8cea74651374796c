#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>

namespace nht {

/// Points live in at most kMaxDim coordinates; the active dimension is carried
/// by the owning grid or measure. Unused coordinates stay zero.
inline constexpr int kMaxDim = 3;

using Pt = std::array<double, kMaxDim>;
using CubeIdx = std::array<std::int64_t, kMaxDim>;

inline Pt pt(double x) { return {x, 0.0, 0.0}; }
inline Pt pt(double x, double y) { return {x, y, 0.0}; }
inline Pt pt(double x, double y, double z) { return {x, y, z}; }

/// Axis-aligned box, interpreted as the half-open product of [lo_i, hi_i).
/// All grid-derived boxes have exactly representable dyadic corners, so box
/// arithmetic below is exact in binary64.
struct Box {
    Pt lo{};
    Pt hi{};
    int dim = 1;

    double side(int axis = 0) const { return hi[axis] - lo[axis]; }

    bool contains(const Pt& p) const {
        for (int j = 0; j < dim; ++j)
            if (!(lo[j] <= p[j] && p[j] < hi[j])) return false;
        return true;
    }

    /// Whether `other` is contained in this box (as closed sets; exact for
    /// aligned dyadic corners).
    bool contains_box(const Box& other) const {
        for (int j = 0; j < dim; ++j)
            if (other.lo[j] < lo[j] || other.hi[j] > hi[j]) return false;
        return true;
    }

    Pt center() const {
        Pt c{};
        for (int j = 0; j < dim; ++j) c[j] = 0.5 * (lo[j] + hi[j]);
        return c;
    }

    /// Concentric rescaling by `factor` (e.g. (1+u)Q, 5H).
    Box scaled(double factor) const {
        Box b;
        b.dim = dim;
        for (int j = 0; j < dim; ++j) {
            double c = 0.5 * (lo[j] + hi[j]);
            double h = 0.5 * (hi[j] - lo[j]) * factor;
            b.lo[j] = c - h;
            b.hi[j] = c + h;
        }
        return b;
    }
};

/// Euclidean distance between points.
double dist(const Pt& a, const Pt& b, int dim);

/// Distance from a point to a box (0 if inside; closed-set convention).
double dist(const Pt& p, const Box& b);

/// Set distance between two boxes (closures).
double dist(const Box& a, const Box& b);

/// Distance from a point to the boundary of a box. Points inside see the
/// nearest face; points outside see the box itself.
double boundary_dist(const Pt& p, const Box& b);

class ShiftedDyadicGrid;

/// A cube of a shifted dyadic grid: generation g has side 2^{N+1-g}, and the
/// index tuple locates the cube inside its generation (each component in
/// [0, 2^g)). Cubes are half-open boxes, so the 2^n children partition the
/// parent exactly.
struct Cube {
    const ShiftedDyadicGrid* grid = nullptr;
    int gen = 0;
    CubeIdx idx{};

    Box box() const;
    double side() const;
    Pt center() const { return box().center(); }
    Cube parent() const;
    Cube child(int k) const;  // k in [0, 2^dim)
    int child_count() const;
    bool operator==(const Cube& o) const {
        return grid == o.grid && gen == o.gen && idx == o.idx;
    }
};

/// Randomly translated dyadic lattice Q*(w) = w + [-2^N, 2^N)^n, truncated to
/// `depth` generations below the root.
class ShiftedDyadicGrid {
public:
    /// Throws std::out_of_range if the shift leaves [-2^{N-1}, 2^{N-1}]^n and
    /// std::invalid_argument on a non-positive depth.
    static ShiftedDyadicGrid build(const Pt& shift, int root_scale, int depth, int dim);

    const Pt& shift() const { return shift_; }
    int root_scale() const { return root_scale_; }
    int depth() const { return depth_; }
    int dim() const { return dim_; }

    /// Side length of generation `gen` cubes: 2^{N+1-gen}. Exact power of two.
    double side(int gen) const;

    Box root_box() const;
    Cube root() const { return Cube{this, 0, CubeIdx{}}; }
    Cube cube(int gen, const CubeIdx& idx) const;

    /// The unique generation-`gen` cube containing p, or nullopt if p is
    /// outside the root box.
    std::optional<Cube> locate(const Pt& p, int gen) const;

    /// Number of cubes per axis at a generation (2^gen).
    std::int64_t cells_per_axis(int gen) const { return std::int64_t(1) << gen; }

private:
    Pt shift_{};
    int root_scale_ = 0;
    int depth_ = 1;
    int dim_ = 1;
};

/// Goodness parameters: gamma in (0, 1/2) and the scale-separation integer r.
/// When derived from a kernel, gamma = alpha / (2m + 2 alpha).
struct GoodBadParams {
    double gamma = 0.25;
    int r = 3;

    static GoodBadParams from_kernel(double alpha, double m, int r);
};

/// d(Q, sk S) where sk S is the union of the boundaries of S's children
/// (computed from corner coordinates; exact up to the final sqrt).
double skeleton_distance(const Cube& q, const Cube& s);
double skeleton_distance(const Box& q, const Box& s);

/// Distance from box Q to the union of all child-skeletons of generation-`gen`
/// cubes of `grid` (the gen+1 face lattice restricted to the root box).
double generation_skeleton_distance(const ShiftedDyadicGrid& grid, int gen, const Box& q);

/// True iff Q is good with respect to every cube S of `other` with side
/// length >= a_scale: d(Q, sk S) > l(Q)^gamma l(S)^{1-gamma} for all such S.
/// Equality counts as bad. Vacuously good when no such S exists.
bool is_good(const Cube& q, const ShiftedDyadicGrid& other, double a_scale,
             const GoodBadParams& p);
bool is_good(const Box& q, const ShiftedDyadicGrid& other, double a_scale,
             const GoodBadParams& p);

/// Smallest k in [p.r, k_max] such that Q is good with respect to all cubes of
/// `other` of side >= 2^k l(Q); nullopt if none.
std::optional<int> alpha_generation(const Cube& q, const ShiftedDyadicGrid& other,
                                    const GoodBadParams& p, int k_max);

/// D(Q, R) = l(Q) + l(R) + d(Q, R).
double long_distance(const Cube& q, const Cube& r);
double long_distance(const Box& q, const Box& r);

/// Membership predicate for the boundary collar of one grid generation:
/// union over generation-`gen` cubes g of {x : d(x, boundary g) < sigma l(g)}.
class CollarRegion {
public:
    CollarRegion(const ShiftedDyadicGrid* grid, int gen, double sigma);
    bool contains(const Pt& p) const;
    double width() const { return sigma_ * side_; }

private:
    const ShiftedDyadicGrid* grid_;
    int gen_;
    double sigma_;
    double side_;
};

CollarRegion boundary_collar(const ShiftedDyadicGrid& grid, int gen, double sigma);

/// An (untruncated) shifted lattice of a single scale, used for the auxiliary
/// grid D* of the theta-surgery. Cells are half-open boxes of side `cell`.
struct ShiftedLattice {
    Pt shift{};
    double cell = 1.0;
    int dim = 1;

    CubeIdx cell_of(const Pt& p) const;
    Box cell_box(const CubeIdx& idx) const;
    /// d(x, boundary of the cell containing x).
    double own_boundary_dist(const Pt& p) const;
};

}  // namespace nht
