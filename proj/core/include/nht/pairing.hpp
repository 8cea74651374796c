#pragma once

#include <map>
#include <memory>
#include <string>

#include "nht/martingale.hpp"
#include "nht/rng.hpp"

namespace nht {

/// Uniform shift in [-2^{N-1}, 2^{N-1}]^n snapped to a dyadic lattice of
/// 2^{N-27} so grid-corner arithmetic stays exact in binary64.
Pt random_dyadic_shift(Rng& rng, int root_scale, int dim);

/// All tunable parameters of the pairing decomposition. gamma is tied to the
/// kernel via gamma = alpha/(2m + 2 alpha); j(theta) is pinned by the dyadic
/// bracketing 2^{-21} theta <= 2^{j} < 2^{-20} theta.
struct Params {
    double lambda = 8.0;  // root enlargement in mu(lambda Q0)
    int beta = 4;         // stopping-generation cutoff
    double gamma = 0.25;
    double alpha = 1.0;  // kernel smoothness exponent
    double m = 1.0;      // measure growth exponent
    int r = 3;
    double theta = 0x1p-8;
    double sigma = 0x1p-12;
    double u = 0.125;    // collar width for the root-pairing estimate
    int root_scale = 3;  // N with 2^{N-3} <= l(Q0) < 2^{N-2}
    int depth = 7;
    int trials = 32;
    int prob_trials = 256;
    int surgery_sample = 48;  // diagonal pairings surveyed per trial

    /// N from the side of Q0.
    static int derive_root_scale(double q0_side);
    int j_theta() const;
    GoodBadParams good_bad() const { return GoodBadParams{gamma, r}; }
    /// Checks gamma against the kernel and the bracketing invariants.
    void validate(double kernel_alpha, double kernel_m) const;
};

/// One trial's fixed data: grids, index, families, trees and expansions for
/// both sides, plus the operator.
struct PairScene {
    const DiscreteMeasure* mu = nullptr;
    const DiscretizedOperator* op = nullptr;
    const GridIndex* gx_t = nullptr;      // D^T over Q*(w)
    const GridIndex* gx_s = nullptr;      // D^{T*} over R*(w')
    const StoppingTree* tree_t = nullptr;
    const StoppingTree* tree_s = nullptr;
    const MartingaleDecomposition* dec_f = nullptr;
    const MartingaleDecomposition* dec_g = nullptr;
    const ShiftedDyadicGrid* dstar_grid = nullptr;  // auxiliary grid of the theta-surgery
    Params prm;
    double op_norm_value = 0.0;  // ||T|| measured once per instance
    Box q0;                      // the fixed cube Q0

    double mu_lambda_q0() const;
};

/// Ordered pair buckets. The f-side cube comes first in every pair; nested_q
/// holds the half where Q is deep inside R, nested_r the mirrored half.
struct PairBuckets {
    std::vector<std::pair<int, int>> separated;
    std::vector<std::pair<int, int>> nested_q;
    std::vector<std::pair<int, int>> nested_r;
    std::vector<std::pair<int, int>> diagonal;

    std::size_t total() const {
        return separated.size() + nested_q.size() + nested_r.size() + diagonal.size();
    }
};

/// Trichotomy over all pairs of positive-mass cubes with children and
/// beta(Q), beta(R) < beta.
PairBuckets split_pairs(const PairScene& scene);

/// Precomputed operator images of the expansion pieces: row q holds
/// T(Delta_Q f) (or T*(Delta_R g) for the adjoint side) over all atoms.
struct PieceImages {
    std::vector<AtomFn> img;  // indexed by node id; empty when no piece
};
PieceImages apply_to_pieces(const DiscretizedOperator& op, const MartingaleDecomposition& dec,
                            bool adjoint);

struct SeparatedResult {
    double value = 0.0;        // exact sum over separated pairs
    double bound = 0.0;        // sum A_QR ||Delta_Q f|| ||Delta_R g||
    double worst_pair_c = 0.0; // max |<T Delta_Q f, Delta_R g>| / (A_QR ||.|| ||.||)
    int pairs = 0;
};
SeparatedResult separated_sum(const PairScene& scene, const PairBuckets& buckets,
                              const PieceImages& images_t);

struct SchurResult {
    double a_norm = 0.0;  // operator norm of {A_QR} over separated pairs
    double b_norm = 0.0;  // operator norm of {B_QR} over nested child pairs
    int a_rows = 0, a_cols = 0, b_rows = 0, b_cols = 0;
    bool subsampled = false;
};
SchurResult schur_norm(const PairScene& scene, const PairBuckets& buckets, int dense_limit = 4096);

/// Monte Carlo estimate over the independent shift of the probability that Q
/// is bad with respect to some cube of side >= 2^k l(Q).
struct BadProbability {
    double estimate = 0.0;
    double half_width = 0.0;  // 1.96 sqrt(p(1-p)/trials)
    int trials = 0;
};
BadProbability bad_probability_mc(const Cube& q, int k, const Params& prm, int trials,
                                  std::uint64_t seed);

/// Collar-mass statistic: E_w mu((1+u)Q* \ Q*) / mu(lambda Q0) over random
/// shifts, for a ladder of u values.
struct CollarMass {
    std::vector<double> u_values;
    std::vector<double> estimate;
    std::vector<double> half_width;
};
CollarMass collar_mass_mc(const DiscreteMeasure& mu, const Box& q0, const Params& prm,
                          int trials, std::uint64_t seed);

/// The nested analysis of one orientation half.
struct NestedResult {
    double value = 0.0;       // exact nested-bucket sum for this half
    double bad_value = 0.0;   // exact S_bad
    double good_value = 0.0;  // exact S_good
    double bad_bound = 0.0;   // ||T|| sum_k CS(pair set at gap k)
    double para_value = 0.0;  // paraproduct part of S_good (pair-driven)
    double para_value_telescoped = 0.0;  // Q-driven collapsed form
    double nonpara_value = 0.0;          // S_good minus paraproduct
    double nonpara_bound = 0.0;          // sum of B_QR-type majorants
    double lemma42_worst = 0.0;          // max pairwise Lemma 4.2 ratio
    double lemma43_worst = 0.0;          // max pairwise Lemma 4.3 ratio
    double para_bound = 0.0;             // sum_F ||sum eps Delta f|| ||1_F T* b_F||
    double eps_coeff_worst = 0.0;        // max |eps_Q(F)|
    int good_pairs = 0, bad_pairs = 0, missing_h = 0;
    int child_check_failures = 0;  // good pair without the guaranteed child
};
NestedResult nested_sum(const PairScene& scene, const std::vector<std::pair<int, int>>& pairs,
                        bool f_side_small, const PieceImages& images_small);

/// Partition of one child cube against the other: boundary part, separated
/// part and the per-cell remainder (grouped by the D* cell containing each
/// atom).
struct ThetaSurgery {
    std::vector<std::uint8_t> part;  // per atom: 0 outside the cube, 1 sep, 2 boundary, 3 delta
    std::map<CubeIdx, std::vector<int>> cells;  // delta atoms grouped by D* cell
    int boundary_containment_failures = 0;      // atoms of Q_{i,dd} outside Q_{i,bad}
};
ThetaSurgery theta_surgery(const PairScene& scene, const Box& own, const Box& other,
                           double cell_side, bool own_is_f_side);

/// Cells whose delta chunks are nonempty on both sides; the chunks are then
/// equal atom sets and 5L sits inside the intersection (verified).
struct MatchedCells {
    std::vector<CubeIdx> keys;
    int chunk_mismatches = 0;
    int five_l_failures = 0;
};
MatchedCells match_cells(const ThetaSurgery& a, const ThetaSurgery& b, const PairScene& scene,
                         const Box& qi, const Box& rj, double cell_side);

struct SigmaSurgery {
    double t_full = 0.0;       // <T(1_H u), 1_H v>
    double t_global = 0.0;     // <T u, 1_H v>
    double t_far = 0.0;        // <T(1_{R^n\5H} u), 1_H v>
    double t_mid = 0.0;        // <T(1_{5H\(1+s)H} u), 1_H v>
    double t_ring = 0.0;       // <T(1_{(1+s)H\H} u), 1_H v>
    double resum_residual = 0.0;
    double lemma55_ratio = 0.0;   // max_x |Phi - <b_H/mu(H), Phi>| / M_mu u
    double pivot_terms[4] = {0};  // <b_H, T u>, mid, ring, <b_H, T(1_H u)>
    bool skipped = false;         // mu(H) = 0
};
SigmaSurgery sigma_surgery(const PairScene& scene, const Box& h_box,
                           const std::vector<int>& h_atoms, const AtomFn& u, const AtomFn& v,
                           const AtomFn& maximal_u, bool u_on_f_side);

struct DiagonalResult {
    double value = 0.0;  // exact diagonal-bucket sum (both halves)
    int pairs = 0;
    int max_neighbors = 0;  // max over R of #{Q : Q ~ R}
    double nine_sum_total = 0.0;         // sum over the nine branch combinations
    double nine_sums[3][3] = {{0.0}};    // S for each (A-branch, B-branch)
    double prereq_f[3] = {0.0};          // (5.1) sums / mu(lambda Q0) per branch
    double prereq_g[3] = {0.0};          // (5.2) sums / mu(lambda Q0) per branch
    double bad_term = 0.0;    // sum A ||1_{Qi,bad} u|| ||1_{Rj} v|| B (+ mirrored)
    double ring_term = 0.0;   // sum A ||1_{sigma-collar} 1_{Qi} u|| ||1_{Rj} v|| B
    // Sampled surgery statistics.
    int sampled = 0;
    int partition_failures = 0;
    int containment_failures = 0;
    int five_l_failures = 0;
    int matched_cells = 0;
    int max_matched_per_pairing = 0;
    double theta_resum_residual = 0.0;  // max over sampled pairings
    double sigma_resum_residual = 0.0;
    double sep_constant = 0.0;      // max C(theta): |sep terms| / ||1_Qi u|| ||1_Rj v||
    double mid_constant = 0.0;      // max C(sigma) from the mid annulus terms
    double lemma55_ceiling = 0.0;
    int skipped_h = 0;
};
DiagonalResult diagonal_sum(const PairScene& scene,
                            const std::vector<std::pair<int, int>>& pairs,
                            const PieceImages& images_t, std::uint64_t sample_seed);

struct BetaTail {
    double tail_f = 0.0;        // sum_{beta(Q) >= beta} <T Delta_Q f, g>
    double tail_mixed = 0.0;    // <T(sum_{<beta} Delta f), sum_{>=beta} Delta g>
    double tail_g_root = 0.0;   // <g>_{R*} <T(sum_{>=beta} Delta f), b_{R*}>
    double bound_f = 0.0;       // ||T|| mu(Q0)^{1/2} sum_{j>=beta} (sum_F mu(F))^{1/2}
    double bound_mixed = 0.0;
    double bound_g_root = 0.0;
    double resid_f = 0.0;       // <f>_{Q*} <T b_{Q*}, g>
    double resid_g = 0.0;       // <g>_{R*} <f, 1_{R*} T* b_{R*}>
    double resid_cross = 0.0;   // <f>_{Q*} <g>_{R*} <T b_{Q*}, b_{R*}>
    double resid_f_bound = 0.0; // testing bound ||1_{Q*} T b_{Q*}|| ||g||
    double resid_g_bound = 0.0;
    // Three-term estimate of <T b_{Q*}, b_{R*}>.
    double cross_inner = 0.0, cross_collar = 0.0, cross_far = 0.0;  // exact split
    double cross_bound_inner = 0.0, cross_bound_collar = 0.0, cross_bound_far = 0.0;
    double truncation_f = 0.0;  // <T rho_f, g> for the depth-truncation residual
    double truncation_g = 0.0;  // <T(sum_{<beta} Delta f), rho_g>
    double truncation_cross = 0.0;  // -<g>_{R*} <T rho_f, b_{R*}>
};
BetaTail beta_tail(const PairScene& scene);

struct Piece {
    std::string name;
    double value = 0.0;
    double bound = 0.0;
    bool bound_carries_opnorm = false;
};

struct TrialReport {
    std::uint64_t trial = 0;
    double pair_total = 0.0;  // <T f, g> exact
    double mu_lambda_q0 = 0.0;
    double resummation_residual = 0.0;  // relative to sum |pieces|
    bool depth_capped = false;
    std::vector<Piece> pieces;
    std::map<std::string, double> stats;
    std::vector<std::string> failures;

    double c_part() const;       // sum of bounds without ||T|| factors, /mu(lambda Q0)
    double t_coefficient() const;  // sum of ||T||-carrying bounds, /(||T|| mu(lambda Q0))
};

/// Everything one trial owns: grids, indices, families, calibrated trees and
/// expansions, wired into a PairScene.
struct TrialContext {
    std::unique_ptr<ShiftedDyadicGrid> grid_t, grid_s, grid_d;
    std::unique_ptr<GridIndex> gx_t, gx_s;
    std::unique_ptr<TestFunctionFamily> fam_t, fam_s;
    FamilyConstants constants;
    std::unique_ptr<CalibratedStopping> calib_t, calib_s;
    std::unique_ptr<MartingaleDecomposition> dec_f, dec_g;
    PairScene scene;
};

/// Draws (w, w', D*-shift) from the trial's RNG stream and assembles the
/// whole per-trial state. `op_norm_value` and `maximal_norm_probe` are
/// instance-level constants computed once by the caller.
TrialContext make_trial_context(const DiscreteMeasure& mu, const DiscretizedOperator& op,
                                const AtomFn& f, const AtomFn& g, const FamilyStrategy& family,
                                const Params& prm, const Box& q0, double op_norm_value,
                                double maximal_norm_probe, std::uint64_t seed,
                                std::uint64_t trial_id);

/// Runs the whole decomposition for one draw of (w, w', D*-shift).
TrialReport full_trial(const DiscreteMeasure& mu, const DiscretizedOperator& op,
                       const AtomFn& f, const AtomFn& g, const FamilyStrategy& family,
                       const Params& prm, const Box& q0, double op_norm_value,
                       double maximal_norm_probe, std::uint64_t seed, std::uint64_t trial_id);

}  // namespace nht
