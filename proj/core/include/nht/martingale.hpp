#pragma once

#include <optional>

#include "nht/stopping.hpp"

namespace nht {

/// A function supported on one cube, stored over the cube's contiguous
/// atom-slot range.
struct DeltaPiece {
    int node = -1;
    std::vector<double> vals;  // aligned with [node.lo, node.hi)

    bool empty() const { return vals.empty(); }
};

/// Twisted martingale difference Delta_Q f over the node's slot range.
/// Children at the finest generation do not exist, so pieces at the finest
/// generation are empty.
DeltaPiece twisted_delta_piece(const StoppingTree& tree, const AtomFn& f, int node);
AtomFn twisted_delta(const StoppingTree& tree, const AtomFn& f, int node);

/// The full expansion f = sum_Q Delta_Q f + <f>_{Q*} b_{Q*}.
class MartingaleDecomposition {
public:
    MartingaleDecomposition(const StoppingTree& tree, AtomFn f);

    const StoppingTree& tree() const { return *tree_; }
    const AtomFn& input() const { return f_; }

    /// Piece values for a node (empty when Delta_Q f vanishes identically).
    const std::vector<double>& piece(int node) const { return pieces_[node]; }
    bool has_piece(int node) const { return !pieces_[node].empty(); }
    AtomFn piece_fn(int node) const;

    double root_coefficient() const { return coef_root_; }
    const AtomFn& residual_term() const { return residual_; }

    /// int |Delta_Q f|^2 dmu for one node.
    double piece_l2sq(int node) const;

    /// Max-norm of f - sum_Q Delta_Q f - <f>_{Q*} b_{Q*} over the atoms.
    double reconstruction_residual() const { return recon_residual_; }

    AtomFn reconstruct() const;

private:
    const StoppingTree* tree_;
    AtomFn f_;
    std::vector<std::vector<double>> pieces_;
    double coef_root_ = 0.0;
    AtomFn residual_;
    double recon_residual_ = 0.0;
};

MartingaleDecomposition expand(const StoppingTree& tree, const AtomFn& f);

/// sum_Q ||Delta_Q f||^2 / mu(Q*); the square-function ratio of inputs with
/// |f| <= 1.
double square_function_ratio(const MartingaleDecomposition& dec);

/// Half-twisted difference D_Q h (children in H removed, scalar coefficients
/// only); requires ancestor(Q) = F.
DeltaPiece half_twisted_piece(const StoppingTree& tree, int f_node, const AtomFn& h, int node);
AtomFn half_twisted(const StoppingTree& tree, int f_node, const AtomFn& h, int node);

/// Transform coefficients for sums over {Q : Q^a = F}; |eps_Q| <= 1.
struct TransformSpec {
    std::vector<double> eps;  // indexed by node id; missing/short = 0
    std::optional<Box> restrict_to;

    double at(int node) const {
        return node < static_cast<int>(eps.size()) ? eps[node] : 0.0;
    }
    void validate() const;

    static TransformSpec all_ones(int n_nodes);
    static TransformSpec random_signs(int n_nodes, std::uint64_t seed);
};

/// ||sum_{Q^a=F (, Q subset S)} eps_Q Delta_Q h||^2 / ||h||^2 (ratio 0 for
/// h = 0). With a restriction box, the denominator is mu(S cap F) instead,
/// which is the form the remark about arbitrary subsets gives for |h| <= 1.
double transform_norm(const StoppingTree& tree, int f_node, const TransformSpec& spec,
                      const AtomFn& h);

/// Greedy adversarial signs: processes cubes coarse-to-fine choosing the sign
/// that maximises the running L^2 norm of the partial transform sum.
TransformSpec greedy_adversarial_signs(const StoppingTree& tree, int f_node, const AtomFn& h);

/// A sum of elementary operators, each constant on the children of its cube.
/// consts[node] is aligned with the node's positive-mass children (in child
/// order); an empty vector means no operator at that cube.
struct ElementaryPieces {
    const GridIndex* gx = nullptr;
    std::vector<std::vector<double>> consts;

    /// Pointwise evaluation of the full (untruncated) sum at every atom.
    AtomFn total() const;
    /// sup over atoms of |A_Q .| / M^D at that atom, over all pieces.
    double domination_constant(const AtomFn& dyadic_maximal_fn) const;
    ElementaryPieces scaled(double factor) const;
};

/// Half-twisted pieces eps_Q D_Q h over {Q : Q^a = F}.
ElementaryPieces half_twisted_pieces(const StoppingTree& tree, int f_node,
                                     const TransformSpec& spec, const AtomFn& h);

/// Classical difference pieces eps_Q sum_{Q'} (<h>_{Q'} - <h>_Q) 1_{Q'}; when
/// `remove_stopping_children` is set, children in H_F are dropped and Q ranges
/// over {Q^a = F} of the tree, otherwise over every positive-mass cube.
ElementaryPieces classical_pieces(const GridIndex& gx, const TransformSpec& spec,
                                  const AtomFn& h, const StoppingTree* tree = nullptr,
                                  int f_node = -1, bool remove_stopping_children = false);

/// A_# h = sup over truncation levels (the finite ladder of side lengths) of
/// |A_eps h|; restricted to cubes inside `scope` when scope >= 0.
AtomFn maximal_truncation(const ElementaryPieces& pieces, int scope = -1);

struct SawyerReport {
    double testing_ratio = 0.0;    // max_Q int_Q A_#^Q h dmu / (||h 1_Q||_p mu(Q)^{1/p'})
    double weak_type_ratio = 0.0;  // max ||A_# h||_{p,inf} / ||h||_p
    int probes = 0;
    int cubes = 0;
};

/// Exhibits the testing => weak-type implication on one instance: both sides
/// are measured for a family builder over a probe battery.
SawyerReport sawyer_testing_check(
    const GridIndex& gx, const std::function<ElementaryPieces(const AtomFn&)>& family,
    double p, const std::vector<AtomFn>& probes);

struct JNResult {
    bool hypothesis_ok = true;
    int failing_node = -1;                  // a P with mu({Phi_P > 1}) > mu(P)/2
    std::vector<std::vector<int>> levels;   // R_j collections (node ids)
    std::vector<double> level_mass;         // mu(S_j)
    std::vector<double> tail_mass;          // mu({Phi_{P0} > t}) at t = 1,3,5,7
    double p0_mass = 0.0;
};

/// Iterative John-Nirenberg decomposition of Phi_{P0} for pieces with
/// ||phi_Q||_inf <= 1. Verifies the level-1 hypothesis at every cube first.
JNResult jn_decompose(const ElementaryPieces& phis, int p0);

/// sup_R sum_{Q subset R} alpha_Q / mu(R) for nonnegative cube weights.
double carleson_sequence_ratio(const GridIndex& gx, const std::vector<double>& alphas);

/// The Carleson weights from the proof of the twisted transform bound:
/// alpha_Q = sum_{Q' in ch(Q) cap H} int_{Q'} |b_F|^2 dmu when Q^a = F.
std::vector<double> half_twisted_carleson_weights(const StoppingTree& tree, int f_node);

/// max over probes of || sup_eps |sum eps_Q Delta^c_Q h| ||_p / ||h||_p for
/// classical differences, with or without the stopping children removed.
double classical_truncation_norm(const GridIndex& gx, const TransformSpec& spec, double p,
                                 const std::vector<AtomFn>& probes,
                                 const StoppingTree* tree = nullptr, int f_node = -1,
                                 bool remove_stopping_children = false);

/// || sup_eps |sum_{Q^a=F, Q subset P} eps_Q D_Q 1| ||_p^p / mu(P).
double dq1_testing(const StoppingTree& tree, int f_node, const TransformSpec& spec, int p_node,
                   double p);

/// || sup_eps |sum_{Q^a=F} eps_Q D_Q h| ||_p / ||h||_p.
double dq_maximal_norm(const StoppingTree& tree, int f_node, const TransformSpec& spec,
                       const AtomFn& h, double p);

}  // namespace nht
