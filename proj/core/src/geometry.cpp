#include "nht/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace nht {

double dist(const Pt& a, const Pt& b, int dim) {
    double s = 0.0;
    for (int j = 0; j < dim; ++j) {
        double d = a[j] - b[j];
        s += d * d;
    }
    return std::sqrt(s);
}

namespace {

/// Distance between the intervals [alo, ahi] and [blo, bhi]; 0 on overlap.
double interval_dist(double alo, double ahi, double blo, double bhi) {
    if (ahi < blo) return blo - ahi;
    if (bhi < alo) return alo - bhi;
    return 0.0;
}

/// Distance from the interval [lo, hi] to the value c.
double interval_to_value(double lo, double hi, double c) {
    if (c < lo) return lo - c;
    if (c > hi) return hi - c;
    return 0.0;
}

}  // namespace

double dist(const Pt& p, const Box& b) {
    double s = 0.0;
    for (int j = 0; j < b.dim; ++j) {
        double d = interval_to_value(b.lo[j], b.hi[j], p[j]);
        s += d * d;
    }
    return std::sqrt(s);
}

double dist(const Box& a, const Box& b) {
    double s = 0.0;
    for (int j = 0; j < a.dim; ++j) {
        double d = interval_dist(a.lo[j], a.hi[j], b.lo[j], b.hi[j]);
        s += d * d;
    }
    return std::sqrt(s);
}

double boundary_dist(const Pt& p, const Box& b) {
    bool inside = true;
    for (int j = 0; j < b.dim; ++j)
        if (p[j] < b.lo[j] || p[j] > b.hi[j]) inside = false;
    if (!inside) return dist(p, b);
    double m = std::numeric_limits<double>::infinity();
    for (int j = 0; j < b.dim; ++j)
        m = std::min({m, p[j] - b.lo[j], b.hi[j] - p[j]});
    return m;
}

ShiftedDyadicGrid ShiftedDyadicGrid::build(const Pt& shift, int root_scale, int depth,
                                           int dim) {
    if (dim < 1 || dim > kMaxDim) throw std::invalid_argument("grid dimension out of range");
    if (depth < 1) throw std::invalid_argument("grid depth must be >= 1");
    double half = std::ldexp(1.0, root_scale - 1);  // 2^{N-1}
    for (int j = 0; j < dim; ++j) {
        if (!(shift[j] >= -half && shift[j] <= half))
            throw std::out_of_range("grid shift outside [-2^{N-1}, 2^{N-1}]^n");
    }
    ShiftedDyadicGrid g;
    g.shift_ = shift;
    g.root_scale_ = root_scale;
    g.depth_ = depth;
    g.dim_ = dim;
    return g;
}

double ShiftedDyadicGrid::side(int gen) const { return std::ldexp(1.0, root_scale_ + 1 - gen); }

Box ShiftedDyadicGrid::root_box() const {
    Box b;
    b.dim = dim_;
    double h = std::ldexp(1.0, root_scale_);
    for (int j = 0; j < dim_; ++j) {
        b.lo[j] = shift_[j] - h;
        b.hi[j] = shift_[j] + h;
    }
    return b;
}

Cube ShiftedDyadicGrid::cube(int gen, const CubeIdx& idx) const {
    if (gen < 0 || gen > depth_) throw std::out_of_range("generation outside grid depth");
    std::int64_t cells = cells_per_axis(gen);
    for (int j = 0; j < dim_; ++j)
        if (idx[j] < 0 || idx[j] >= cells) throw std::out_of_range("cube index outside generation");
    return Cube{this, gen, idx};
}

std::optional<Cube> ShiftedDyadicGrid::locate(const Pt& p, int gen) const {
    Box rb = root_box();
    double s = side(gen);
    CubeIdx idx{};
    std::int64_t cells = cells_per_axis(gen);
    for (int j = 0; j < dim_; ++j) {
        if (!(p[j] >= rb.lo[j] && p[j] < rb.hi[j])) return std::nullopt;
        auto k = static_cast<std::int64_t>(std::floor((p[j] - rb.lo[j]) / s));
        k = std::clamp<std::int64_t>(k, 0, cells - 1);
        idx[j] = k;
    }
    return Cube{this, gen, idx};
}

Box Cube::box() const {
    Box rb = grid->root_box();
    double s = grid->side(gen);
    Box b;
    b.dim = grid->dim();
    for (int j = 0; j < b.dim; ++j) {
        b.lo[j] = rb.lo[j] + static_cast<double>(idx[j]) * s;
        b.hi[j] = b.lo[j] + s;
    }
    return b;
}

double Cube::side() const { return grid->side(gen); }

Cube Cube::parent() const {
    if (gen == 0) throw std::logic_error("root cube has no parent");
    CubeIdx p{};
    for (int j = 0; j < grid->dim(); ++j) p[j] = idx[j] >> 1;
    return Cube{grid, gen - 1, p};
}

int Cube::child_count() const { return 1 << grid->dim(); }

Cube Cube::child(int k) const {
    if (gen >= grid->depth()) throw std::logic_error("cube at finest generation has no children");
    CubeIdx c{};
    for (int j = 0; j < grid->dim(); ++j) c[j] = 2 * idx[j] + ((k >> j) & 1);
    return Cube{grid, gen + 1, c};
}

GoodBadParams GoodBadParams::from_kernel(double alpha, double m, int r) {
    if (!(alpha > 0.0) || !(m > 0.0)) throw std::invalid_argument("alpha, m must be positive");
    GoodBadParams p;
    p.gamma = alpha / (2.0 * m + 2.0 * alpha);
    p.r = r;
    if (!(p.gamma > 0.0 && p.gamma < 0.5))
        throw std::invalid_argument("gamma = alpha/(2m+2alpha) outside (0, 1/2)");
    return p;
}

namespace {

/// Distance from box q to the union of axis-aligned faces {x_j = c} cut to the
/// root box, where c ranges over lattice values offset + k*spacing clamped to
/// [offset, offset + extent]. Used for both per-cube skeletons and whole
/// generations.
double faces_distance(const Box& q, const Box& domain, double spacing, int dim) {
    double best = std::numeric_limits<double>::infinity();
    for (int j = 0; j < dim; ++j) {
        // Cross-axis clearance to the domain slab is shared by every face
        // normal to axis j.
        double cross = 0.0;
        for (int l = 0; l < dim; ++l) {
            if (l == j) continue;
            double d = interval_dist(q.lo[l], q.hi[l], domain.lo[l], domain.hi[l]);
            cross += d * d;
        }
        // Nearest lattice plane along axis j, clamped into the domain range.
        double lines_lo = domain.lo[j];
        double lines_hi = domain.hi[j];
        double a;
        if (q.hi[j] < lines_lo) {
            a = lines_lo - q.hi[j];
        } else if (q.lo[j] > lines_hi) {
            a = q.lo[j] - lines_hi;
        } else {
            // The interval [max(q.lo, lines_lo), min(q.hi, lines_hi)] is
            // nonempty; find the nearest plane to it.
            double wlo = std::max(q.lo[j], lines_lo);
            double whi = std::min(q.hi[j], lines_hi);
            double klo = std::ceil((wlo - lines_lo) / spacing);
            double khi = std::floor((whi - lines_lo) / spacing);
            if (klo <= khi) {
                a = 0.0;  // a plane crosses the box
            } else {
                // Nearest planes on either side, clamped to the domain.
                double c1 = lines_lo + std::max(0.0, khi) * spacing;
                double c2 = lines_lo + klo * spacing;
                a = std::numeric_limits<double>::infinity();
                if (c1 >= lines_lo && c1 <= lines_hi)
                    a = std::min(a, interval_to_value(q.lo[j], q.hi[j], c1));
                if (c2 >= lines_lo && c2 <= lines_hi)
                    a = std::min(a, interval_to_value(q.lo[j], q.hi[j], c2));
            }
        }
        best = std::min(best, std::sqrt(a * a + cross));
    }
    return best;
}

}  // namespace

double skeleton_distance(const Box& q, const Box& s) {
    // sk S = child boundaries = the two outer faces plus the bisecting face
    // per axis, each cut to the closure of S.
    return faces_distance(q, s, 0.5 * s.side(), s.dim);
}

double skeleton_distance(const Cube& q, const Cube& s) {
    return skeleton_distance(q.box(), s.box());
}

double generation_skeleton_distance(const ShiftedDyadicGrid& grid, int gen, const Box& q) {
    return faces_distance(q, grid.root_box(), 0.5 * grid.side(gen), grid.dim());
}

bool is_good(const Box& q, const ShiftedDyadicGrid& other, double a_scale,
             const GoodBadParams& p) {
    double lq = q.side();
    for (int gen = 0; gen <= other.depth(); ++gen) {
        double ls = other.side(gen);
        if (ls < a_scale) break;
        double threshold = std::pow(lq, p.gamma) * std::pow(ls, 1.0 - p.gamma);
        if (generation_skeleton_distance(other, gen, q) <= threshold) return false;
    }
    return true;
}

bool is_good(const Cube& q, const ShiftedDyadicGrid& other, double a_scale,
             const GoodBadParams& p) {
    return is_good(q.box(), other, a_scale, p);
}

std::optional<int> alpha_generation(const Cube& q, const ShiftedDyadicGrid& other,
                                    const GoodBadParams& p, int k_max) {
    if (k_max < p.r) throw std::invalid_argument("k_max must be >= r");
    double lq = q.side();
    for (int k = p.r; k <= k_max; ++k) {
        if (is_good(q, other, std::ldexp(lq, k), p)) return k;
    }
    return std::nullopt;
}

double long_distance(const Box& q, const Box& r) { return q.side() + r.side() + dist(q, r); }

double long_distance(const Cube& q, const Cube& r) { return long_distance(q.box(), r.box()); }

CollarRegion::CollarRegion(const ShiftedDyadicGrid* grid, int gen, double sigma)
    : grid_(grid), gen_(gen), sigma_(sigma), side_(grid->side(gen)) {
    if (!(sigma > 0.0 && sigma < 0.5)) throw std::invalid_argument("collar sigma outside (0, 1/2)");
    if (gen < 0) throw std::invalid_argument("collar generation negative");
}

bool CollarRegion::contains(const Pt& p) const {
    Box q;
    q.dim = grid_->dim();
    for (int j = 0; j < q.dim; ++j) q.lo[j] = q.hi[j] = p[j];
    // Cell faces of one generation = lattice planes of spacing side(gen).
    double d = faces_distance(q, grid_->root_box(), side_, grid_->dim());
    return d < sigma_ * side_;
}

CollarRegion boundary_collar(const ShiftedDyadicGrid& grid, int gen, double sigma) {
    return CollarRegion(&grid, gen, sigma);
}

CubeIdx ShiftedLattice::cell_of(const Pt& p) const {
    CubeIdx idx{};
    for (int j = 0; j < dim; ++j)
        idx[j] = static_cast<std::int64_t>(std::floor((p[j] - shift[j]) / cell));
    return idx;
}

Box ShiftedLattice::cell_box(const CubeIdx& idx) const {
    Box b;
    b.dim = dim;
    for (int j = 0; j < dim; ++j) {
        b.lo[j] = shift[j] + static_cast<double>(idx[j]) * cell;
        b.hi[j] = b.lo[j] + cell;
    }
    return b;
}

double ShiftedLattice::own_boundary_dist(const Pt& p) const {
    return boundary_dist(p, cell_box(cell_of(p)));
}

}  // namespace nht
