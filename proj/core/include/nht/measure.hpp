#pragma once

#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "nht/geometry.hpp"

namespace nht {

/// Functions are represented by their values at the atoms of a measure,
/// aligned index-by-index.
using AtomFn = std::vector<double>;

/// A finite atomic measure in R^n with an asserted polynomial growth exponent
/// m. All integrals are finite weighted sums over the atoms.
struct DiscreteMeasure {
    int dim = 1;
    double growth_m = 1.0;
    double r_min = 0.0;  // smallest scale at which growth is asserted
    std::vector<Pt> atoms;
    std::vector<double> weight;

    std::size_t size() const { return atoms.size(); }
    double total_mass() const;

    /// Validates: positive weights, pairwise distinct atoms, positive mass.
    void validate() const;

    double mass_in(const Box& b) const;
    double mass_where(const std::function<bool(const Pt&)>& pred) const;
};

struct EmptyCubeError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Integral of f over a box.
double integral(const DiscreteMeasure& mu, const AtomFn& f, const Box& q);

/// <f>_Q = mu(Q)^{-1} int_Q f dmu. Throws EmptyCubeError on mu(Q) = 0.
double average(const DiscreteMeasure& mu, const AtomFn& f, const Box& q);

/// Weighted inner product <f, g>_mu over all atoms.
double inner(const DiscreteMeasure& mu, const AtomFn& f, const AtomFn& g);

/// L^p(mu) norm, p in [1, inf).
double lp_norm(const DiscreteMeasure& mu, const AtomFn& h, double p);

/// Weak L^p quasinorm: sup over the finite set of levels v = |h(atom)| of
/// v * mu({|h| >= v})^{1/p} (the sup over lambda < v of lambda mu(|h|>lambda)).
double weak_lp_quasinorm(const DiscreteMeasure& mu, const AtomFn& h, double p);

struct GrowthReport {
    double c_mu = 0.0;       // sup mu(B(x,r)) / r^m over tested atoms and radii
    Pt worst_center{};
    double worst_radius = 0.0;
    int radii_tested = 0;
};

/// Scans closed balls centred at atoms with radii on the dyadic ladder
/// r_min * 2^k up to the diameter; returns the growth certificate.
GrowthReport verify_growth(const DiscreteMeasure& mu);

/// Centred maximal function: at each atom the sup over the finite radius set
/// {|x - y| : y atom} union {r_min} of the closed-ball average of |h|.
AtomFn centred_maximal(const DiscreteMeasure& mu, const AtomFn& h);

/// Centred maximal values at selected atoms only (same definition).
std::vector<double> centred_maximal_at(const DiscreteMeasure& mu, const AtomFn& h,
                                       std::span<const int> centres);

struct MaximalNormReport {
    double norm = 1.0;
    int probes = 0;
};

/// Empirical L^2(mu) -> L^2(mu) norm of the centred maximal operator over a
/// deterministic probe set: per-atom indicators (largest weights first, up to
/// a cap), the constant function, positive indicator combinations, and seeded
/// random nonnegative functions.
MaximalNormReport maximal_op_norm(const DiscreteMeasure& mu, int random_probes = 32,
                                  std::uint64_t seed = 0);

class GridIndex;

/// Dyadic maximal function over the cubes of one grid.
AtomFn dyadic_maximal(const DiscreteMeasure& mu, const AtomFn& h, const GridIndex& gx);

/// The tree of positive-mass cubes of one grid over one measure. Atoms are
/// permuted into dyadic order so that every cube's atoms form a contiguous
/// range; cube sums then cost the range length. Zero-mass cubes never appear.
class GridIndex {
public:
    struct Node {
        int gen = 0;
        CubeIdx idx{};
        int parent = -1;
        int first_child = -1;  // children are consecutive
        int n_children = 0;
        int lo = 0, hi = 0;  // atom slots [lo, hi) in perm order
        double mass = 0.0;
    };

    GridIndex(const ShiftedDyadicGrid& grid, const DiscreteMeasure& mu);

    const ShiftedDyadicGrid& grid() const { return *grid_; }
    const DiscreteMeasure& measure() const { return *mu_; }

    int node_count() const { return static_cast<int>(nodes_.size()); }
    const Node& node(int id) const { return nodes_[id]; }
    int root() const { return 0; }
    Cube cube(int id) const { return Cube{grid_, nodes_[id].gen, nodes_[id].idx}; }
    Box box(int id) const { return cube(id).box(); }
    double mass(int id) const { return nodes_[id].mass; }
    double side(int id) const { return grid_->side(nodes_[id].gen); }

    /// Atom index (into the measure) at permuted slot s.
    int atom_at(int slot) const { return perm_[slot]; }
    std::span<const int> atoms_of(int id) const {
        return {perm_.data() + nodes_[id].lo, static_cast<std::size_t>(nodes_[id].hi - nodes_[id].lo)};
    }

    /// Node of a cube if it carries mass.
    std::optional<int> find(int gen, const CubeIdx& idx) const;
    std::optional<int> find(const Cube& c) const;

    /// Deepest node containing the atom (by measure index).
    int leaf_of_atom(int atom) const { return leaf_of_atom_[atom]; }
    /// Node chain helper: node at `gen` containing the atom, or -1.
    int node_of_atom_at_gen(int atom, int gen) const;

    /// Node id range [first, last) of one generation; nodes within it are in
    /// dyadic path order.
    std::pair<int, int> gen_span(int gen) const;

    /// Atoms of the measure outside the root box (excluded from the tree).
    const std::vector<int>& outside_atoms() const { return outside_; }

    /// True when every finest-generation node holds a single atom, i.e. the
    /// truncated grid fully separates the atoms.
    bool separates_atoms() const { return separates_; }

    double avg(const AtomFn& f, int id) const;
    double sum(const AtomFn& f, int id) const;           // int_Q f dmu
    double l2sq(const AtomFn& f, int id) const;          // int_Q |f|^2 dmu
    double abs_avg(const AtomFn& f, int id) const;       // <|f|>_Q

private:
    const ShiftedDyadicGrid* grid_;
    const DiscreteMeasure* mu_;
    std::vector<Node> nodes_;
    std::vector<int> perm_;
    std::vector<int> gen_begin_;  // node span per generation (size depth+2)
    std::vector<int> leaf_of_atom_;
    std::vector<int> outside_;
    bool separates_ = true;
};

/// Measure generators used by the scenario layer and tests.
DiscreteMeasure uniform_measure(const Box& support, int n_atoms, double m, std::uint64_t seed,
                                bool random_weights = false);
DiscreteMeasure lattice_measure(const Box& support, int per_axis, double m,
                                std::uint64_t seed, bool jitter_weights = true);
DiscreteMeasure cantor_measure(int level, double ratio, int dim, double m);
DiscreteMeasure point_mixture_measure(const Box& support, int n_uniform, int n_heavy,
                                      double heavy_mass, double m, std::uint64_t seed);

/// Structured-text (JSON) measure file: {"dimension": n, "m": m,
/// "atoms": [[[coords...], weight], ...]}.
DiscreteMeasure load_measure(const std::string& path);
void save_measure(const DiscreteMeasure& mu, const std::string& path);

}  // namespace nht
