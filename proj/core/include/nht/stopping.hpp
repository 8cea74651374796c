#pragma once

#include <vector>

#include "nht/testfns.hpp"

namespace nht {

/// Constants entering the stopping conditions: averages below 1/2, maximal
/// averages above 16 A^2 Mnorm^2, testing averages above 16 A B.
struct StoppingThresholds {
    double A = 1.0;
    double B = 0.0;
    double Mnorm = 1.0;
};

enum class StopTrigger : std::uint8_t { None = 0, Root = 1, Avg = 2, Maximal = 3, Testing = 4 };

/// The stopping-time construction over one grid/family pair. Generation j
/// holds the cubes F^j (F^0 = {root}); every positive-mass cube knows its
/// minimal stopping ancestor and its beta index.
class StoppingTree {
public:
    const GridIndex& index() const { return *gx_; }
    const TestFunctionFamily& family() const { return *fam_; }
    const StoppingThresholds& thresholds() const { return thr_; }

    double tau() const { return 1.0 - 1.0 / (8.0 * thr_.A); }

    bool is_stopping(int node) const { return trigger_[node] != StopTrigger::None; }
    StopTrigger trigger(int node) const { return trigger_[node]; }

    /// Minimal stopping cube containing the node.
    int ancestor(int node) const { return ancestor_[node]; }
    /// beta(Q): the stopping generation of ancestor(Q).
    int beta(int node) const { return beta_[node]; }

    int generation_count() const { return static_cast<int>(gens_.size()); }
    const std::vector<int>& generation(int j) const { return gens_[j]; }

    /// Next-generation stopping cubes strictly inside a stopping cube (the
    /// collection H_F); empty for non-stopping nodes.
    const std::vector<int>& stop_children(int node) const;

    /// Stopping generation index of a stopping node.
    int stop_generation(int node) const { return stop_gen_[node]; }

    /// True when the truncated grid failed to separate atoms, so expansions
    /// cannot reconstruct exactly; acceptance batteries discard such runs.
    bool depth_capped() const { return depth_capped_; }
    /// Stopping cubes created at the finest generation (the paper's recursion
    /// would continue below them).
    int stopping_at_finest() const { return stopping_at_finest_; }

    /// Mass-decay check of the generations: max over stopping F of
    /// sum_{S in next generation, S inside F} mu(S) / mu(F).
    double check_decay() const;

    /// Carleson check: sup over positive-mass Q of
    /// sum_{stopping F inside Q} mu(F) / mu(Q).
    double check_carleson() const;

    friend StoppingTree build_stopping(const GridIndex&, const TestFunctionFamily&,
                                       const DiscretizedOperator&, const StoppingThresholds&);

private:
    const GridIndex* gx_ = nullptr;
    const TestFunctionFamily* fam_ = nullptr;
    StoppingThresholds thr_;
    std::vector<StopTrigger> trigger_;
    std::vector<int> ancestor_;
    std::vector<int> beta_;
    std::vector<int> stop_gen_;
    std::vector<std::vector<int>> gens_;
    std::vector<std::vector<int>> stop_children_;  // parallel to stopping order
    std::vector<int> stop_slot_;                   // node -> slot in stop_children_
    bool depth_capped_ = false;
    int stopping_at_finest_ = 0;
};

/// Runs the stopping recursion: from each stopping cube F, the maximal
/// strictly-smaller cubes where one of the three conditions holds against b_F
/// become the next generation. The family side selects T or T* images.
StoppingTree build_stopping(const GridIndex& gx, const TestFunctionFamily& fam,
                            const DiscretizedOperator& op, const StoppingThresholds& thr);

/// Computes thresholds whose stopping tree provably satisfies the decay and
/// Carleson bounds: starts from the probe-based maximal norm and raises Mnorm
/// until ||M_mu b_F|| <= Mnorm ||b_F|| holds for every stopping cube actually
/// used (rebuilding when needed; the loop is monotone and terminates).
struct CalibratedStopping {
    StoppingTree tree;
    StoppingThresholds thresholds;
    int rebuilds = 0;
};
CalibratedStopping build_stopping_calibrated(const GridIndex& gx, const TestFunctionFamily& fam,
                                             const DiscretizedOperator& op, double A, double B,
                                             double m_probe_norm);

}  // namespace nht
