#pragma once

#include <map>
#include <string>
#include <vector>

#include "nht/czo.hpp"
#include "nht/measure.hpp"

namespace nht {

enum class OpSide { T, Tstar };

struct FamilyStrategy {
    enum class Kind { Indicator, Perturbed, Custom };
    Kind kind = Kind::Indicator;
    double eta = 0.0;        // perturbation amplitude, must be <= 1/2
    std::uint64_t seed = 0;  // sign seed for the perturbed strategy
    std::string file;        // custom per-cube records

    static FamilyStrategy indicator() { return {}; }
    static FamilyStrategy perturbed(double eta, std::uint64_t seed);
    static FamilyStrategy custom(std::string file);
};

/// Accretive test functions b_Q, one per positive-mass cube of a grid,
/// normalised to <b_Q>_Q = 1 and supported in Q. Values are stored on each
/// cube's contiguous atom range.
class TestFunctionFamily {
public:
    static TestFunctionFamily make(FamilyStrategy strategy, OpSide side, const GridIndex& gx);

    OpSide side() const { return side_; }
    const GridIndex& index() const { return *gx_; }
    const FamilyStrategy& strategy() const { return recipe_; }

    /// Value of b_{node} at the atom occupying permuted slot `slot` (which
    /// must lie inside the node's range).
    double value_at_slot(int node, int slot) const { return vals_[node][slot - lo_[node]]; }

    /// b_{node} materialised over all atoms (zero outside the cube).
    AtomFn as_atomfn(int node) const;

    /// <b_{fn_node}>_{sub} for a positive-mass subcube of fn_node.
    double avg_on(int fn_node, int sub_node) const;
    /// int_{sub} |b_{fn_node}|^2 dmu.
    double l2sq_on(int fn_node, int sub_node) const;
    double l2sq(int fn_node) const { return l2sq_on(fn_node, fn_node); }

    /// Test function for an arbitrary box (used by the sigma-surgery, where
    /// the cube is not a grid cube): same strategy, same normalisation.
    /// Custom families fall back to the indicator here.
    AtomFn make_for_box(const Box& b) const;

    /// Same, supported on an explicit atom set.
    AtomFn make_for_atoms(const std::vector<int>& atoms) const;

    /// max over stored cubes of ||M_mu b_Q||_2 / ||b_Q||_2, evaluated lazily
    /// on the listed nodes only.
    double maximal_ratio_on(const std::vector<int>& nodes) const;

private:
    OpSide side_ = OpSide::T;
    const GridIndex* gx_ = nullptr;
    FamilyStrategy recipe_;
    std::vector<std::vector<double>> vals_;  // per node, per in-range slot
    std::vector<int> lo_;                    // cached node range starts
};

struct FamilyConstants {
    double A = 1.0;  // max_Q (sum of stored ||b_Q||^2) / mu(Q)
    double B = 0.0;  // max_Q (sum of stored ||1_Q T b_Q||^2) / mu(Q)
};

/// The constants of the testing hypotheses, computed (not assumed) from the
/// stored families. When both families live on the same grid the per-cube
/// contributions add, matching the two-sided definition; across distinct
/// grids the maximum is over each family's own cubes.
FamilyConstants family_constants(const TestFunctionFamily* fam_t,
                                 const TestFunctionFamily* fam_tstar,
                                 const DiscretizedOperator& op);

}  // namespace nht
