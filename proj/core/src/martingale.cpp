#include "nht/martingale.hpp"

#include <cassert>
#include <cmath>
#include <limits>

#include "nht/rng.hpp"

namespace nht {

namespace {

/// <b_{Q^a}>_Q with the construction's lower bound asserted: off stopping
/// cubes the stopping conditions guarantee |<b>| >= 1/2, so a violation here
/// is a bug signal, not a branch to guard.
double twist_avg(const StoppingTree& tree, int node) {
    double v = tree.family().avg_on(tree.ancestor(node), node);
    assert(tree.is_stopping(node) || std::abs(v) >= 0.5);
    return v;
}

}  // namespace

DeltaPiece twisted_delta_piece(const StoppingTree& tree, const AtomFn& f, int node) {
    const GridIndex& gx = tree.index();
    const auto& nd = gx.node(node);
    DeltaPiece out;
    out.node = node;
    if (nd.n_children == 0) return out;
    out.vals.assign(static_cast<std::size_t>(nd.hi - nd.lo), 0.0);
    const auto& fam = tree.family();
    double s0 = gx.avg(f, node) / twist_avg(tree, node);
    int anc0 = tree.ancestor(node);
    for (int k = 0; k < nd.n_children; ++k) {
        int c = nd.first_child + k;
        const auto& cnd = gx.node(c);
        double s1 = gx.avg(f, c) / twist_avg(tree, c);
        int anc1 = tree.ancestor(c);
        for (int s = cnd.lo; s < cnd.hi; ++s)
            out.vals[s - nd.lo] =
                s1 * fam.value_at_slot(anc1, s) - s0 * fam.value_at_slot(anc0, s);
    }
    return out;
}

AtomFn twisted_delta(const StoppingTree& tree, const AtomFn& f, int node) {
    DeltaPiece p = twisted_delta_piece(tree, f, node);
    const GridIndex& gx = tree.index();
    AtomFn out(gx.measure().size(), 0.0);
    const auto& nd = gx.node(node);
    for (std::size_t k = 0; k < p.vals.size(); ++k) out[gx.atom_at(nd.lo + static_cast<int>(k))] = p.vals[k];
    return out;
}

MartingaleDecomposition::MartingaleDecomposition(const StoppingTree& tree, AtomFn f)
    : tree_(&tree), f_(std::move(f)) {
    const GridIndex& gx = tree.index();
    const auto& mu = gx.measure();
    pieces_.resize(gx.node_count());
    for (int id = 0; id < gx.node_count(); ++id)
        pieces_[id] = twisted_delta_piece(tree, f_, id).vals;
    coef_root_ = gx.avg(f_, gx.root());
    residual_.assign(mu.size(), 0.0);
    const auto& fam = tree.family();
    const auto& rootnd = gx.node(gx.root());
    for (int s = rootnd.lo; s < rootnd.hi; ++s)
        residual_[gx.atom_at(s)] = coef_root_ * fam.value_at_slot(gx.root(), s);
    AtomFn rec = reconstruct();
    double worst = 0.0;
    for (std::size_t a = 0; a < mu.size(); ++a) worst = std::max(worst, std::abs(rec[a] - f_[a]));
    recon_residual_ = worst;
}

AtomFn MartingaleDecomposition::piece_fn(int node) const {
    const GridIndex& gx = tree_->index();
    AtomFn out(gx.measure().size(), 0.0);
    const auto& nd = gx.node(node);
    for (std::size_t k = 0; k < pieces_[node].size(); ++k)
        out[gx.atom_at(nd.lo + static_cast<int>(k))] = pieces_[node][k];
    return out;
}

double MartingaleDecomposition::piece_l2sq(int node) const {
    const GridIndex& gx = tree_->index();
    const auto& mu = gx.measure();
    const auto& nd = gx.node(node);
    double s = 0.0;
    for (std::size_t k = 0; k < pieces_[node].size(); ++k) {
        double v = pieces_[node][k];
        s += v * v * mu.weight[gx.atom_at(nd.lo + static_cast<int>(k))];
    }
    return s;
}

AtomFn MartingaleDecomposition::reconstruct() const {
    const GridIndex& gx = tree_->index();
    AtomFn out = residual_;
    for (int id = 0; id < gx.node_count(); ++id) {
        if (pieces_[id].empty()) continue;
        const auto& nd = gx.node(id);
        for (std::size_t k = 0; k < pieces_[id].size(); ++k)
            out[gx.atom_at(nd.lo + static_cast<int>(k))] += pieces_[id][k];
    }
    return out;
}

MartingaleDecomposition expand(const StoppingTree& tree, const AtomFn& f) {
    return MartingaleDecomposition(tree, f);
}

double square_function_ratio(const MartingaleDecomposition& dec) {
    const GridIndex& gx = dec.tree().index();
    double s = 0.0;
    for (int id = 0; id < gx.node_count(); ++id) s += dec.piece_l2sq(id);
    return s / gx.mass(gx.root());
}

DeltaPiece half_twisted_piece(const StoppingTree& tree, int f_node, const AtomFn& h, int node) {
    const GridIndex& gx = tree.index();
    const auto& nd = gx.node(node);
    DeltaPiece out;
    out.node = node;
    if (nd.n_children == 0) return out;
    if (tree.ancestor(node) != f_node)
        throw std::invalid_argument("half_twisted requires ancestor(Q) = F");
    out.vals.assign(static_cast<std::size_t>(nd.hi - nd.lo), 0.0);
    const auto& fam = tree.family();
    double s0 = gx.avg(h, node) / fam.avg_on(f_node, node);
    for (int k = 0; k < nd.n_children; ++k) {
        int c = nd.first_child + k;
        if (tree.is_stopping(c)) continue;  // ch(Q) \ H
        const auto& cnd = gx.node(c);
        double s1 = gx.avg(h, c) / fam.avg_on(f_node, c);
        double v = s1 - s0;
        for (int s = cnd.lo; s < cnd.hi; ++s) out.vals[s - nd.lo] = v;
    }
    return out;
}

AtomFn half_twisted(const StoppingTree& tree, int f_node, const AtomFn& h, int node) {
    DeltaPiece p = half_twisted_piece(tree, f_node, h, node);
    const GridIndex& gx = tree.index();
    AtomFn out(gx.measure().size(), 0.0);
    const auto& nd = gx.node(node);
    for (std::size_t k = 0; k < p.vals.size(); ++k)
        out[gx.atom_at(nd.lo + static_cast<int>(k))] = p.vals[k];
    return out;
}

void TransformSpec::validate() const {
    for (double e : eps)
        if (!(std::abs(e) <= 1.0)) throw std::invalid_argument("|eps_Q| <= 1 required");
}

TransformSpec TransformSpec::all_ones(int n_nodes) {
    TransformSpec s;
    s.eps.assign(n_nodes, 1.0);
    return s;
}

TransformSpec TransformSpec::random_signs(int n_nodes, std::uint64_t seed) {
    TransformSpec s;
    s.eps.resize(n_nodes);
    Rng rng = Rng(seed).fork("transform-signs");
    for (auto& e : s.eps) e = rng.sign();
    return s;
}

namespace {

/// Nodes participating in a transform sum: ancestor = F, optional geometric
/// restriction, and only cubes with children contribute pieces.
bool transform_member(const StoppingTree& tree, int f_node, const TransformSpec& spec, int node) {
    if (tree.ancestor(node) != f_node) return false;
    if (spec.restrict_to && !spec.restrict_to->contains_box(tree.index().box(node))) return false;
    return true;
}

}  // namespace

double transform_norm(const StoppingTree& tree, int f_node, const TransformSpec& spec,
                      const AtomFn& h) {
    spec.validate();
    const GridIndex& gx = tree.index();
    const auto& mu = gx.measure();
    AtomFn acc(mu.size(), 0.0);
    for (int id = 0; id < gx.node_count(); ++id) {
        if (!transform_member(tree, f_node, spec, id)) continue;
        double e = spec.at(id);
        if (e == 0.0) continue;
        DeltaPiece p = twisted_delta_piece(tree, h, id);
        const auto& nd = gx.node(id);
        for (std::size_t k = 0; k < p.vals.size(); ++k)
            acc[gx.atom_at(nd.lo + static_cast<int>(k))] += e * p.vals[k];
    }
    double num = 0.0;
    for (std::size_t a = 0; a < mu.size(); ++a) num += acc[a] * acc[a] * mu.weight[a];
    if (spec.restrict_to) {
        Box s = *spec.restrict_to;
        Box f = gx.box(f_node);
        Box cap;
        cap.dim = s.dim;
        for (int j = 0; j < s.dim; ++j) {
            cap.lo[j] = std::max(s.lo[j], f.lo[j]);
            cap.hi[j] = std::min(s.hi[j], f.hi[j]);
            if (cap.lo[j] >= cap.hi[j]) return 0.0;
        }
        double denom = mu.mass_in(cap);
        return denom > 0.0 ? num / denom : 0.0;
    }
    double denom = 0.0;
    for (std::size_t a = 0; a < mu.size(); ++a) denom += h[a] * h[a] * mu.weight[a];
    return denom > 0.0 ? num / denom : 0.0;
}

TransformSpec greedy_adversarial_signs(const StoppingTree& tree, int f_node, const AtomFn& h) {
    const GridIndex& gx = tree.index();
    const auto& mu = gx.measure();
    TransformSpec spec;
    spec.eps.assign(gx.node_count(), 0.0);
    AtomFn acc(mu.size(), 0.0);
    for (int id = 0; id < gx.node_count(); ++id) {
        if (tree.ancestor(id) != f_node) continue;
        DeltaPiece p = twisted_delta_piece(tree, h, id);
        if (p.empty()) continue;
        const auto& nd = gx.node(id);
        double dot = 0.0;
        for (std::size_t k = 0; k < p.vals.size(); ++k) {
            int a = gx.atom_at(nd.lo + static_cast<int>(k));
            dot += acc[a] * p.vals[k] * mu.weight[a];
        }
        double e = dot >= 0.0 ? 1.0 : -1.0;
        spec.eps[id] = e;
        for (std::size_t k = 0; k < p.vals.size(); ++k)
            acc[gx.atom_at(nd.lo + static_cast<int>(k))] += e * p.vals[k];
    }
    return spec;
}

AtomFn ElementaryPieces::total() const {
    const auto& mu = gx->measure();
    AtomFn out(mu.size(), 0.0);
    for (int id = 0; id < gx->node_count(); ++id) {
        if (consts[id].empty()) continue;
        const auto& nd = gx->node(id);
        for (int k = 0; k < nd.n_children; ++k) {
            const auto& cnd = gx->node(nd.first_child + k);
            for (int s = cnd.lo; s < cnd.hi; ++s) out[gx->atom_at(s)] += consts[id][k];
        }
    }
    return out;
}

double ElementaryPieces::domination_constant(const AtomFn& dyadic_maximal_fn) const {
    double worst = 0.0;
    for (int id = 0; id < gx->node_count(); ++id) {
        if (consts[id].empty()) continue;
        const auto& nd = gx->node(id);
        for (int k = 0; k < nd.n_children; ++k) {
            const auto& cnd = gx->node(nd.first_child + k);
            for (int s = cnd.lo; s < cnd.hi; ++s) {
                double md = dyadic_maximal_fn[gx->atom_at(s)];
                double v = std::abs(consts[id][k]);
                if (v == 0.0) continue;
                worst = std::max(worst, md > 0.0 ? v / md : std::numeric_limits<double>::infinity());
            }
        }
    }
    return worst;
}

ElementaryPieces ElementaryPieces::scaled(double factor) const {
    ElementaryPieces out{gx, consts};
    for (auto& c : out.consts)
        for (auto& v : c) v *= factor;
    return out;
}

ElementaryPieces half_twisted_pieces(const StoppingTree& tree, int f_node,
                                     const TransformSpec& spec, const AtomFn& h) {
    spec.validate();
    const GridIndex& gx = tree.index();
    ElementaryPieces out;
    out.gx = &gx;
    out.consts.resize(gx.node_count());
    const auto& fam = tree.family();
    for (int id = 0; id < gx.node_count(); ++id) {
        if (!transform_member(tree, f_node, spec, id)) continue;
        double e = spec.at(id);
        if (e == 0.0) continue;
        const auto& nd = gx.node(id);
        if (nd.n_children == 0) continue;
        std::vector<double> c(nd.n_children, 0.0);
        double s0 = gx.avg(h, id) / fam.avg_on(f_node, id);
        bool any = false;
        for (int k = 0; k < nd.n_children; ++k) {
            int cn = nd.first_child + k;
            if (tree.is_stopping(cn)) continue;
            double s1 = gx.avg(h, cn) / fam.avg_on(f_node, cn);
            c[k] = e * (s1 - s0);
            any = true;
        }
        if (any) out.consts[id] = std::move(c);
    }
    return out;
}

ElementaryPieces classical_pieces(const GridIndex& gx, const TransformSpec& spec,
                                  const AtomFn& h, const StoppingTree* tree, int f_node,
                                  bool remove_stopping_children) {
    spec.validate();
    ElementaryPieces out;
    out.gx = &gx;
    out.consts.resize(gx.node_count());
    for (int id = 0; id < gx.node_count(); ++id) {
        if (tree && f_node >= 0 && tree->ancestor(id) != f_node) continue;
        double e = spec.at(id);
        if (e == 0.0) continue;
        const auto& nd = gx.node(id);
        if (nd.n_children == 0) continue;
        std::vector<double> c(nd.n_children, 0.0);
        double a0 = gx.avg(h, id);
        bool any = false;
        for (int k = 0; k < nd.n_children; ++k) {
            int cn = nd.first_child + k;
            if (remove_stopping_children && tree && tree->is_stopping(cn)) continue;
            c[k] = e * (gx.avg(h, cn) - a0);
            any = true;
        }
        if (any) out.consts[id] = std::move(c);
    }
    return out;
}

AtomFn maximal_truncation(const ElementaryPieces& pieces, int scope) {
    const GridIndex& gx = *pieces.gx;
    const auto& mu = gx.measure();
    AtomFn cur(mu.size(), 0.0), best(mu.size(), 0.0);
    int depth = gx.grid().depth();
    // Scope restriction: cubes inside `scope` are exactly the nodes at or
    // below its generation whose slot range nests inside its range.
    int lo = 0, hi = static_cast<int>(mu.size()), scope_gen = 0;
    if (scope >= 0) {
        lo = gx.node(scope).lo;
        hi = gx.node(scope).hi;
        scope_gen = gx.node(scope).gen;
    }
    for (int g = scope_gen; g <= depth; ++g) {
        auto [nlo, nhi] = gx.gen_span(g);
        bool touched = false;
        for (int id = nlo; id < nhi; ++id) {
            if (pieces.consts[id].empty()) continue;
            const auto& nd = gx.node(id);
            if (scope >= 0 && !(nd.lo >= lo && nd.hi <= hi)) continue;
            for (int k = 0; k < nd.n_children; ++k) {
                double v = pieces.consts[id][k];
                if (v == 0.0) continue;
                const auto& cnd = gx.node(nd.first_child + k);
                for (int s = cnd.lo; s < cnd.hi; ++s) cur[gx.atom_at(s)] += v;
                touched = true;
            }
        }
        if (!touched) continue;
        // One truncation level per generation: all cubes of a generation share
        // their side length, so the sup over eps is the max over these
        // partial sums (plus the empty sum, which is already in `best`).
        for (int s = lo; s < hi; ++s) {
            int a = gx.atom_at(s);
            best[a] = std::max(best[a], std::abs(cur[a]));
        }
    }
    return best;
}

SawyerReport sawyer_testing_check(
    const GridIndex& gx, const std::function<ElementaryPieces(const AtomFn&)>& family,
    double p, const std::vector<AtomFn>& probes) {
    if (!(p > 1.0)) throw std::invalid_argument("sawyer check requires p in (1, inf)");
    const auto& mu = gx.measure();
    SawyerReport rep;
    rep.probes = static_cast<int>(probes.size());
    rep.cubes = gx.node_count();
    double pprime = p / (p - 1.0);
    for (const auto& h : probes) {
        ElementaryPieces pieces = family(h);
        // Weak-type side.
        AtomFn sharp = maximal_truncation(pieces);
        double hnorm = lp_norm(mu, h, p);
        if (hnorm > 0.0)
            rep.weak_type_ratio =
                std::max(rep.weak_type_ratio, weak_lp_quasinorm(mu, sharp, p) / hnorm);
        // Testing side, cube by cube.
        for (int q = 0; q < gx.node_count(); ++q) {
            const auto& nd = gx.node(q);
            AtomFn local = maximal_truncation(pieces, q);
            double integral_q = 0.0;
            double hq = 0.0;
            for (int s = nd.lo; s < nd.hi; ++s) {
                int a = gx.atom_at(s);
                integral_q += local[a] * mu.weight[a];
                hq += std::pow(std::abs(h[a]), p) * mu.weight[a];
            }
            double denom = std::pow(hq, 1.0 / p) * std::pow(nd.mass, 1.0 / pprime);
            if (denom > 0.0) rep.testing_ratio = std::max(rep.testing_ratio, integral_q / denom);
        }
    }
    return rep;
}

JNResult jn_decompose(const ElementaryPieces& phis, int p0) {
    const GridIndex& gx = *phis.gx;
    const auto& mu = gx.measure();
    for (int id = 0; id < gx.node_count(); ++id)
        for (double c : phis.consts[id])
            if (!(std::abs(c) <= 1.0 + 1e-12))
                throw std::invalid_argument("jn_decompose requires ||phi_Q||_inf <= 1");
    JNResult res;
    res.p0_mass = gx.mass(p0);

    // Level-1 hypothesis at every cube.
    for (int pn = 0; pn < gx.node_count(); ++pn) {
        AtomFn phi = maximal_truncation(phis, pn);
        const auto& nd = gx.node(pn);
        double bad = 0.0;
        for (int s = nd.lo; s < nd.hi; ++s) {
            int a = gx.atom_at(s);
            if (phi[a] > 1.0) bad += mu.weight[a];
        }
        if (bad > 0.5 * nd.mass) {
            res.hypothesis_ok = false;
            res.failing_node = pn;
            return res;
        }
    }

    // Iterative maximal collections. partial[node] carries
    // sum_{R subsetneq Q subseteq scope} phi_Q evaluated on node R.
    std::vector<double> partial(gx.node_count(), 0.0);
    std::vector<int> current = {p0};
    while (!current.empty() && static_cast<int>(res.levels.size()) <= gx.grid().depth()) {
        std::vector<int> next_level;
        // Top-down walk of each scope; partial[c] carries the chain sum
        // sum_{c subsetneq Q subseteq scope} phi_Q restricted to c.
        for (int scope : current) {
            std::vector<int> stack = {scope};
            partial[scope] = 0.0;
            while (!stack.empty()) {
                int q = stack.back();
                stack.pop_back();
                const auto& nd = gx.node(q);
                bool has_piece = !phis.consts[q].empty();
                for (int k = 0; k < nd.n_children; ++k) {
                    int c = nd.first_child + k;
                    double add = has_piece ? phis.consts[q][k] : 0.0;
                    partial[c] = partial[q] + add;
                    if (std::abs(partial[c]) > 1.0) {
                        next_level.push_back(c);
                    } else {
                        stack.push_back(c);
                    }
                }
            }
        }
        if (next_level.empty()) break;
        res.levels.push_back(next_level);
        double mass = 0.0;
        for (int r : next_level) mass += gx.mass(r);
        res.level_mass.push_back(mass);
        current = res.levels.back();
    }

    // Exponential tail of Phi_{P0}.
    AtomFn phi0 = maximal_truncation(phis, p0);
    const auto& nd0 = gx.node(p0);
    for (double t : {1.0, 3.0, 5.0, 7.0}) {
        double mass = 0.0;
        for (int s = nd0.lo; s < nd0.hi; ++s) {
            int a = gx.atom_at(s);
            if (phi0[a] > t) mass += mu.weight[a];
        }
        res.tail_mass.push_back(mass);
    }
    return res;
}

double carleson_sequence_ratio(const GridIndex& gx, const std::vector<double>& alphas) {
    for (double a : alphas)
        if (!(a >= 0.0)) throw std::invalid_argument("carleson weights must be nonnegative");
    std::vector<double> sub(gx.node_count(), 0.0);
    double worst = 0.0;
    for (int id = gx.node_count() - 1; id >= 0; --id) {
        const auto& nd = gx.node(id);
        double s = id < static_cast<int>(alphas.size()) ? alphas[id] : 0.0;
        for (int k = 0; k < nd.n_children; ++k) s += sub[nd.first_child + k];
        sub[id] = s;
        worst = std::max(worst, s / nd.mass);
    }
    return worst;
}

std::vector<double> half_twisted_carleson_weights(const StoppingTree& tree, int f_node) {
    const GridIndex& gx = tree.index();
    std::vector<double> alpha(gx.node_count(), 0.0);
    const auto& fam = tree.family();
    for (int id = 0; id < gx.node_count(); ++id) {
        if (tree.ancestor(id) != f_node) continue;
        const auto& nd = gx.node(id);
        double s = 0.0;
        for (int k = 0; k < nd.n_children; ++k) {
            int c = nd.first_child + k;
            if (!tree.is_stopping(c)) continue;
            s += fam.l2sq_on(f_node, c);
        }
        alpha[id] = s;
    }
    return alpha;
}

double classical_truncation_norm(const GridIndex& gx, const TransformSpec& spec, double p,
                                 const std::vector<AtomFn>& probes, const StoppingTree* tree,
                                 int f_node, bool remove_stopping_children) {
    const auto& mu = gx.measure();
    double worst = 0.0;
    for (const auto& h : probes) {
        double denom = lp_norm(mu, h, p);
        if (!(denom > 0.0)) continue;
        ElementaryPieces pieces =
            classical_pieces(gx, spec, h, tree, f_node, remove_stopping_children);
        worst = std::max(worst, lp_norm(mu, maximal_truncation(pieces), p) / denom);
    }
    return worst;
}

double dq1_testing(const StoppingTree& tree, int f_node, const TransformSpec& spec, int p_node,
                   double p) {
    const GridIndex& gx = tree.index();
    const auto& mu = gx.measure();
    AtomFn ones(mu.size(), 1.0);
    TransformSpec restricted = spec;
    restricted.restrict_to = gx.box(p_node);
    ElementaryPieces pieces = half_twisted_pieces(tree, f_node, restricted, ones);
    AtomFn sharp = maximal_truncation(pieces);
    double num = std::pow(lp_norm(mu, sharp, p), p);
    return num / gx.mass(p_node);
}

double dq_maximal_norm(const StoppingTree& tree, int f_node, const TransformSpec& spec,
                       const AtomFn& h, double p) {
    const GridIndex& gx = tree.index();
    const auto& mu = gx.measure();
    double denom = lp_norm(mu, h, p);
    if (!(denom > 0.0)) return 0.0;
    ElementaryPieces pieces = half_twisted_pieces(tree, f_node, spec, h);
    return lp_norm(mu, maximal_truncation(pieces), p) / denom;
}

}  // namespace nht
