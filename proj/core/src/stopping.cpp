#include "nht/stopping.hpp"

#include <cmath>
#include <deque>

namespace nht {

namespace {

struct FScan {
    // Prefix sums over the stopping cube's slot range for O(1) subcube
    // averages of b_F, |M_mu b_F|^2 and |T b_F|^2.
    int lo = 0;
    std::vector<double> pb, pm2, pt2;

    double avg_b(const GridIndex::Node& nd, int lo_slot) const {
        return (pb[nd.hi - lo_slot] - pb[nd.lo - lo_slot]) / nd.mass;
    }
    double avg_m2(const GridIndex::Node& nd, int lo_slot) const {
        return (pm2[nd.hi - lo_slot] - pm2[nd.lo - lo_slot]) / nd.mass;
    }
    double avg_t2(const GridIndex::Node& nd, int lo_slot) const {
        return (pt2[nd.hi - lo_slot] - pt2[nd.lo - lo_slot]) / nd.mass;
    }
};

}  // namespace

const std::vector<int>& StoppingTree::stop_children(int node) const {
    static const std::vector<int> empty;
    int slot = stop_slot_[node];
    return slot >= 0 ? stop_children_[slot] : empty;
}

StoppingTree build_stopping(const GridIndex& gx, const TestFunctionFamily& fam,
                            const DiscretizedOperator& op, const StoppingThresholds& thr) {
    StoppingTree tree;
    tree.gx_ = &gx;
    tree.fam_ = &fam;
    tree.thr_ = thr;
    const int n_nodes = gx.node_count();
    tree.trigger_.assign(n_nodes, StopTrigger::None);
    tree.ancestor_.assign(n_nodes, -1);
    tree.beta_.assign(n_nodes, 0);
    tree.stop_gen_.assign(n_nodes, -1);
    tree.stop_slot_.assign(n_nodes, -1);
    tree.depth_capped_ = !gx.separates_atoms();
    if (n_nodes == 0) return tree;

    const auto& mu = gx.measure();
    const auto& K = op.kernel_matrix();
    const bool adjoint = fam.side() == OpSide::Tstar;
    const double thr_m2 = 16.0 * thr.A * thr.A * thr.Mnorm * thr.Mnorm;
    const double thr_t2 = 16.0 * thr.A * thr.B;
    const int depth = gx.grid().depth();

    tree.trigger_[gx.root()] = StopTrigger::Root;
    tree.stop_gen_[gx.root()] = 0;
    tree.gens_.push_back({gx.root()});

    std::deque<std::pair<int, int>> queue;  // (stopping node, stopping generation)
    queue.emplace_back(gx.root(), 0);

    while (!queue.empty()) {
        auto [fnode, fgen] = queue.front();
        queue.pop_front();
        const auto& fnd = gx.node(fnode);
        tree.stop_slot_[fnode] = static_cast<int>(tree.stop_children_.size());
        tree.stop_children_.emplace_back();
        auto& hlist = tree.stop_children_.back();
        if (fnd.gen == depth) {
            ++tree.stopping_at_finest_;
            continue;
        }

        // Images of b_F needed by the conditions, restricted to F's atoms.
        AtomFn b = fam.as_atomfn(fnode);
        std::vector<int> centres(fnd.hi - fnd.lo);
        for (int s = fnd.lo; s < fnd.hi; ++s) centres[s - fnd.lo] = gx.atom_at(s);
        std::vector<double> mvals = centred_maximal_at(mu, b, centres);
        // (T b_F) or (T* b_F) at F's atoms; b is supported in F.
        std::vector<double> tvals(centres.size(), 0.0);
        for (std::size_t ci = 0; ci < centres.size(); ++ci) {
            int i = centres[ci];
            double acc = 0.0;
            for (int sj = fnd.lo; sj < fnd.hi; ++sj) {
                int j = gx.atom_at(sj);
                acc += (adjoint ? K(j, i) : K(i, j)) * mu.weight[j] * b[j];
            }
            tvals[ci] = acc;
        }
        FScan scan;
        scan.lo = fnd.lo;
        auto sz = centres.size() + 1;
        scan.pb.assign(sz, 0.0);
        scan.pm2.assign(sz, 0.0);
        scan.pt2.assign(sz, 0.0);
        for (std::size_t ci = 0; ci < centres.size(); ++ci) {
            double w = mu.weight[centres[ci]];
            scan.pb[ci + 1] = scan.pb[ci] + b[centres[ci]] * w;
            scan.pm2[ci + 1] = scan.pm2[ci] + mvals[ci] * mvals[ci] * w;
            scan.pt2[ci + 1] = scan.pt2[ci] + tvals[ci] * tvals[ci] * w;
        }

        // Top-down maximality scan: descend until a condition fires.
        std::vector<int> stack;
        const auto& root_nd = gx.node(fnode);
        for (int k = 0; k < root_nd.n_children; ++k) stack.push_back(root_nd.first_child + k);
        while (!stack.empty()) {
            int q = stack.back();
            stack.pop_back();
            const auto& nd = gx.node(q);
            StopTrigger trig = StopTrigger::None;
            if (std::abs(scan.avg_b(nd, fnd.lo)) < 0.5)
                trig = StopTrigger::Avg;
            else if (scan.avg_m2(nd, fnd.lo) > thr_m2)
                trig = StopTrigger::Maximal;
            else if (scan.avg_t2(nd, fnd.lo) > thr_t2)
                trig = StopTrigger::Testing;
            if (trig != StopTrigger::None) {
                tree.trigger_[q] = trig;
                tree.stop_gen_[q] = fgen + 1;
                hlist.push_back(q);
                if (static_cast<int>(tree.gens_.size()) <= fgen + 1) tree.gens_.resize(fgen + 2);
                tree.gens_[fgen + 1].push_back(q);
                queue.emplace_back(q, fgen + 1);
                continue;
            }
            for (int k = 0; k < nd.n_children; ++k) stack.push_back(nd.first_child + k);
        }
    }

    // Ancestor map and beta indices (parents precede children in node order).
    for (int id = 0; id < n_nodes; ++id) {
        if (tree.trigger_[id] != StopTrigger::None) {
            tree.ancestor_[id] = id;
        } else {
            tree.ancestor_[id] = tree.ancestor_[gx.node(id).parent];
        }
        tree.beta_[id] = tree.stop_gen_[tree.ancestor_[id]];
    }
    return tree;
}

double StoppingTree::check_decay() const {
    double worst = 0.0;
    for (std::size_t j = 0; j + 1 < gens_.size(); ++j) {
        for (int f : gens_[j]) {
            const auto& kids = stop_children(f);
            if (kids.empty()) continue;
            double s = 0.0;
            for (int k : kids) s += gx_->mass(k);
            worst = std::max(worst, s / gx_->mass(f));
        }
    }
    return worst;
}

double StoppingTree::check_carleson() const {
    // Subtree stopping mass per node, bottom-up (children have larger ids).
    std::vector<double> sub(gx_->node_count(), 0.0);
    double worst = 0.0;
    for (int id = gx_->node_count() - 1; id >= 0; --id) {
        const auto& nd = gx_->node(id);
        double s = is_stopping(id) ? gx_->mass(id) : 0.0;
        for (int k = 0; k < nd.n_children; ++k) s += sub[nd.first_child + k];
        sub[id] = s;
        worst = std::max(worst, s / nd.mass);
    }
    return worst;
}

CalibratedStopping build_stopping_calibrated(const GridIndex& gx, const TestFunctionFamily& fam,
                                             const DiscretizedOperator& op, double A, double B,
                                             double m_probe_norm) {
    StoppingThresholds thr{A, B, std::max(1.0, m_probe_norm)};
    CalibratedStopping out{build_stopping(gx, fam, op, thr), thr, 0};
    for (int round = 0; round < 8; ++round) {
        // The decay lemma needs ||M_mu b_F|| <= Mnorm ||b_F|| for the test
        // functions the tree actually used; raise Mnorm and rebuild if the
        // probe norm fell short.
        std::vector<int> used;
        for (int j = 0; j < out.tree.generation_count(); ++j)
            for (int f : out.tree.generation(j)) used.push_back(f);
        double need = fam.maximal_ratio_on(used);
        if (need <= out.thresholds.Mnorm) break;
        out.thresholds.Mnorm = need;
        out.tree = build_stopping(gx, fam, op, out.thresholds);
        ++out.rebuilds;
    }
    return out;
}

}  // namespace nht
