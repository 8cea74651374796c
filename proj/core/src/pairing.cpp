#include "nht/pairing.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include <Eigen/SVD>

namespace nht {

Pt random_dyadic_shift(Rng& rng, int root_scale, int dim) {
    Pt w{};
    double step = std::ldexp(1.0, root_scale - 27);
    for (int j = 0; j < dim; ++j) {
        auto k = static_cast<double>(rng.next_below((std::uint64_t(1) << 27) + 1));
        w[j] = k * step - std::ldexp(1.0, root_scale - 1);
    }
    return w;
}

int Params::derive_root_scale(double q0_side) {
    int n = static_cast<int>(std::floor(std::log2(q0_side))) + 3;
    while (!(std::ldexp(1.0, n - 3) <= q0_side)) --n;
    while (!(q0_side < std::ldexp(1.0, n - 2))) ++n;
    return n;
}

int Params::j_theta() const {
    int j = static_cast<int>(std::ceil(std::log2(theta))) - 21;
    while (!(std::ldexp(1.0, j) >= std::ldexp(theta, -21))) ++j;
    while (!(std::ldexp(1.0, j - 1) < std::ldexp(theta, -21))) --j;
    return j;
}

void Params::validate(double kernel_alpha, double kernel_m) const {
    double expect = kernel_alpha / (2.0 * kernel_m + 2.0 * kernel_alpha);
    if (std::abs(gamma - expect) > 1e-12 * std::max(1.0, std::abs(expect)))
        throw std::invalid_argument("gamma must equal alpha/(2m+2alpha)");
    if (!(theta > 0.0 && theta < 0x1p-4)) throw std::invalid_argument("theta outside (0, 2^-4)");
    if (!(sigma > 0.0 && sigma < 0.5)) throw std::invalid_argument("sigma outside (0, 1/2)");
    if (!(u > 0.0)) throw std::invalid_argument("u must be positive");
    if (beta < 1 || r < 1 || depth < 1) throw std::invalid_argument("beta, r, depth must be >= 1");
    double jt = std::ldexp(1.0, j_theta());
    if (!(std::ldexp(theta, -21) <= jt && jt < std::ldexp(theta, -20)))
        throw std::invalid_argument("j(theta) bracketing failed");
}

double PairScene::mu_lambda_q0() const { return mu->mass_in(q0.scaled(prm.lambda)); }

namespace {

/// Distance from box A to the boundary of box B.
double box_to_boundary(const Box& a, const Box& b) {
    bool inside = true;
    for (int j = 0; j < a.dim; ++j)
        if (a.lo[j] < b.lo[j] || a.hi[j] > b.hi[j]) inside = false;
    if (inside) {
        double m = std::numeric_limits<double>::infinity();
        for (int j = 0; j < a.dim; ++j)
            m = std::min({m, a.lo[j] - b.lo[j], b.hi[j] - a.hi[j]});
        return m;
    }
    // Either separated from B or straddling its boundary.
    return dist(a, b);
}

/// Depth of a contained box inside a larger one: inf over y outside B of
/// |x - y| for x in A.
double containment_depth(const Box& a, const Box& b) {
    double m = std::numeric_limits<double>::infinity();
    for (int j = 0; j < a.dim; ++j)
        m = std::min({m, a.lo[j] - b.lo[j], b.hi[j] - a.hi[j]});
    return m;
}

struct SideCache {
    const GridIndex* gx = nullptr;
    const StoppingTree* tree = nullptr;
    const MartingaleDecomposition* dec = nullptr;
    std::vector<double> avg_h, bavg, piece_sq;

    /// V'-coefficient <h>_P / <b_{P^a}>_P.
    double coeff(int node) const { return avg_h[node] / bavg[node]; }
};

SideCache make_side_cache(const StoppingTree& tree, const MartingaleDecomposition& dec) {
    SideCache c;
    c.gx = &tree.index();
    c.tree = &tree;
    c.dec = &dec;
    int n = c.gx->node_count();
    c.avg_h.resize(n);
    c.bavg.resize(n);
    c.piece_sq.resize(n);
    const auto& fam = tree.family();
    for (int id = 0; id < n; ++id) {
        c.avg_h[id] = c.gx->avg(dec.input(), id);
        c.bavg[id] = fam.avg_on(tree.ancestor(id), id);
        c.piece_sq[id] = dec.piece_l2sq(id);
    }
    return c;
}

/// <full, piece over node range>_mu.
double dot_piece(const GridIndex& gx, const AtomFn& full, const std::vector<double>& piece,
                 int node) {
    if (piece.empty()) return 0.0;
    const auto& nd = gx.node(node);
    const auto& mu = gx.measure();
    double s = 0.0;
    for (int slot = nd.lo; slot < nd.hi; ++slot) {
        int a = gx.atom_at(slot);
        s += full[a] * piece[slot - nd.lo] * mu.weight[a];
    }
    return s;
}

/// <full, b_{fn}>_mu over the test function's range, optionally skipping the
/// slot range of an excluded subcube.
double dot_family(const GridIndex& gx, const AtomFn& full, const TestFunctionFamily& fam,
                  int fn_node, int exclude_node = -1) {
    const auto& nd = gx.node(fn_node);
    const auto& mu = gx.measure();
    int xlo = -1, xhi = -1;
    if (exclude_node >= 0) {
        xlo = gx.node(exclude_node).lo;
        xhi = gx.node(exclude_node).hi;
    }
    double s = 0.0;
    for (int slot = nd.lo; slot < nd.hi; ++slot) {
        if (slot == xlo && xhi > xlo) {
            slot = xhi - 1;
            continue;
        }
        int a = gx.atom_at(slot);
        s += full[a] * fam.value_at_slot(fn_node, slot) * mu.weight[a];
    }
    return s;
}

/// Pairs eligible for the expansion buckets: positive-mass cubes with
/// children and beta below the cutoff.
std::vector<int> bucket_nodes(const GridIndex& gx, const StoppingTree& tree, int beta_cut) {
    std::vector<int> out;
    for (int id = 0; id < gx.node_count(); ++id)
        if (gx.node(id).n_children > 0 && tree.beta(id) < beta_cut) out.push_back(id);
    return out;
}

/// Partial kernel application: sum_{y in in_atoms} K(x, y) w_y u(y) for every
/// x in out_atoms.
void kernel_block(const DiscretizedOperator& op, const AtomFn& u, std::span<const int> in_atoms,
                  std::span<const int> out_atoms, std::vector<double>& out) {
    const auto& K = op.kernel_matrix();
    const auto& mu = op.measure();
    out.assign(out_atoms.size(), 0.0);
    for (std::size_t xi = 0; xi < out_atoms.size(); ++xi) {
        int x = out_atoms[xi];
        double acc = 0.0;
        for (int y : in_atoms) acc += K(x, y) * mu.weight[y] * u[y];
        out[xi] = acc;
    }
}

/// <T(1_{in} u), 1_{out} v>_mu through the kernel matrix.
double pair_block(const DiscretizedOperator& op, const AtomFn& u, std::span<const int> in_atoms,
                  const AtomFn& v, std::span<const int> out_atoms) {
    const auto& mu = op.measure();
    std::vector<double> w;
    kernel_block(op, u, in_atoms, out_atoms, w);
    double s = 0.0;
    for (std::size_t xi = 0; xi < out_atoms.size(); ++xi) {
        int x = out_atoms[xi];
        s += w[xi] * v[x] * mu.weight[x];
    }
    return s;
}

/// ||1_F (T or T*) b_F||^2 for a family cube (the testing image norm).
double testing_norm_sq(const TestFunctionFamily& fam, const DiscretizedOperator& op, int node) {
    const auto& gx = fam.index();
    const auto& mu = gx.measure();
    const auto& K = op.kernel_matrix();
    const auto& nd = gx.node(node);
    bool adjoint = fam.side() == OpSide::Tstar;
    double total = 0.0;
    for (int si = nd.lo; si < nd.hi; ++si) {
        int i = gx.atom_at(si);
        double acc = 0.0;
        for (int sj = nd.lo; sj < nd.hi; ++sj) {
            int j = gx.atom_at(sj);
            acc += (adjoint ? K(j, i) : K(i, j)) * mu.weight[j] * fam.value_at_slot(node, sj);
        }
        total += acc * acc * mu.weight[i];
    }
    return total;
}

std::vector<int> node_atoms(const GridIndex& gx, int node) {
    auto sp = gx.atoms_of(node);
    return {sp.begin(), sp.end()};
}

}  // namespace

PairBuckets split_pairs(const PairScene& scene) {
    PairBuckets b;
    const auto& prm = scene.prm;
    std::vector<int> tn = bucket_nodes(*scene.gx_t, *scene.tree_t, prm.beta);
    std::vector<int> sn = bucket_nodes(*scene.gx_s, *scene.tree_s, prm.beta);
    for (int q : tn) {
        Box qb = scene.gx_t->box(q);
        double lq = qb.side();
        for (int rr : sn) {
            Box rb = scene.gx_s->box(rr);
            double lr = rb.side();
            double d = dist(qb, rb);
            double lo = std::min(lq, lr), hi = std::max(lq, lr);
            double threshold = std::pow(lo, prm.gamma) * std::pow(hi, 1.0 - prm.gamma);
            if (d > threshold) {
                b.separated.emplace_back(q, rr);
            } else if (lq < lr && std::ldexp(lq, prm.r) <= lr) {
                b.nested_q.emplace_back(q, rr);
            } else if (lr <= lq && std::ldexp(lr, prm.r) <= lq) {
                b.nested_r.emplace_back(q, rr);
            } else {
                b.diagonal.emplace_back(q, rr);
            }
        }
    }
    return b;
}

PieceImages apply_to_pieces(const DiscretizedOperator& op, const MartingaleDecomposition& dec,
                            bool adjoint) {
    const GridIndex& gx = dec.tree().index();
    const auto& mu = op.measure();
    const auto& K = op.kernel_matrix();
    PieceImages out;
    out.img.resize(gx.node_count());
    for (int id = 0; id < gx.node_count(); ++id) {
        const auto& piece = dec.piece(id);
        if (piece.empty()) continue;
        const auto& nd = gx.node(id);
        AtomFn img(mu.size(), 0.0);
        for (std::size_t x = 0; x < mu.size(); ++x) {
            double acc = 0.0;
            for (int slot = nd.lo; slot < nd.hi; ++slot) {
                int y = gx.atom_at(slot);
                acc += (adjoint ? K(y, static_cast<Eigen::Index>(x))
                                : K(static_cast<Eigen::Index>(x), y)) *
                       mu.weight[y] * piece[slot - nd.lo];
            }
            img[x] = acc;
        }
        out.img[id] = std::move(img);
    }
    return out;
}

SeparatedResult separated_sum(const PairScene& scene, const PairBuckets& buckets,
                              const PieceImages& images_t) {
    SeparatedResult res;
    const auto& prm = scene.prm;
    double alpha = prm.alpha, m = prm.m;
    SideCache cf = make_side_cache(*scene.tree_t, *scene.dec_f);
    SideCache cg = make_side_cache(*scene.tree_s, *scene.dec_g);
    for (auto [q, rr] : buckets.separated) {
        if (images_t.img[q].empty()) continue;
        double val = dot_piece(*scene.gx_s, images_t.img[q], scene.dec_g->piece(rr), rr);
        res.value += val;
        Box qb = scene.gx_t->box(q), rb = scene.gx_s->box(rr);
        double dqr = long_distance(qb, rb);
        double aqr = std::pow(qb.side(), 0.5 * alpha) * std::pow(rb.side(), 0.5 * alpha) *
                     std::sqrt(scene.gx_t->mass(q) * scene.gx_s->mass(rr)) /
                     std::pow(dqr, m + alpha);
        double norms = std::sqrt(cf.piece_sq[q] * cg.piece_sq[rr]);
        res.bound += aqr * norms;
        if (aqr * norms > 0.0)
            res.worst_pair_c = std::max(res.worst_pair_c, std::abs(val) / (aqr * norms));
        ++res.pairs;
    }
    return res;
}

SchurResult schur_norm(const PairScene& scene, const PairBuckets& buckets, int dense_limit) {
    SchurResult res;
    const auto& prm = scene.prm;
    double alpha = prm.alpha, m = prm.m;

    auto svd_norm = [&](const std::vector<std::tuple<int, int, double>>& entries, int& rows_out,
                        int& cols_out) {
        if (entries.empty()) return 0.0;
        std::set<int> rows, cols;
        for (auto& [q, rr, v] : entries) {
            rows.insert(q);
            cols.insert(rr);
        }
        std::map<int, int> rmap, cmap;
        int ri = 0, ci = 0;
        for (int q : rows) rmap[q] = ri++;
        for (int rr : cols) cmap[rr] = ci++;
        rows_out = ri;
        cols_out = ci;
        if (ri > dense_limit || ci > dense_limit) {
            res.subsampled = true;
            return -1.0;
        }
        Eigen::MatrixXd mat = Eigen::MatrixXd::Zero(ri, ci);
        for (auto& [q, rr, v] : entries) mat(rmap[q], cmap[rr]) = v;
        Eigen::BDCSVD<Eigen::MatrixXd> svd(mat);
        return svd.singularValues().size() ? svd.singularValues()[0] : 0.0;
    };

    std::vector<std::tuple<int, int, double>> a_entries;
    for (auto [q, rr] : buckets.separated) {
        Box qb = scene.gx_t->box(q), rb = scene.gx_s->box(rr);
        double aqr = std::pow(qb.side(), 0.5 * alpha) * std::pow(rb.side(), 0.5 * alpha) *
                     std::sqrt(scene.gx_t->mass(q) * scene.gx_s->mass(rr)) /
                     std::pow(long_distance(qb, rb), m + alpha);
        a_entries.emplace_back(q, rr, aqr);
    }
    res.a_norm = svd_norm(a_entries, res.a_rows, res.a_cols);

    // Nested child-pair matrix of good pairs; both halves enter through the
    // max of the two norms.
    auto nested_entries = [&](const std::vector<std::pair<int, int>>& pairs, bool f_small) {
        std::vector<std::tuple<int, int, double>> entries;
        const GridIndex* gs = f_small ? scene.gx_t : scene.gx_s;
        const GridIndex* gb = f_small ? scene.gx_s : scene.gx_t;
        for (auto [pf, pg] : pairs) {
            int qs = f_small ? pf : pg;
            int qb_node = f_small ? pg : pf;
            if (!is_good(gs->cube(qs), gb->grid(), gb->side(qb_node), prm.good_bad())) continue;
            Box qsb = gs->box(qs);
            const auto& bn = gb->node(qb_node);
            int rq = -1;
            for (int k = 0; k < bn.n_children; ++k) {
                int c = bn.first_child + k;
                if (gb->box(c).contains_box(qsb)) {
                    rq = c;
                    break;
                }
            }
            if (rq < 0) continue;
            double bqr = std::pow(qsb.side() / gb->side(bn.gen), 0.5 * alpha) *
                         std::sqrt(gs->mass(qs) / gb->mass(rq));
            entries.emplace_back(qs, qb_node, bqr);
        }
        return entries;
    };
    int r1 = 0, c1 = 0, r2 = 0, c2 = 0;
    double n1 = svd_norm(nested_entries(buckets.nested_q, true), r1, c1);
    double n2 = svd_norm(nested_entries(buckets.nested_r, false), r2, c2);
    res.b_norm = std::max(n1, n2);
    res.b_rows = std::max(r1, r2);
    res.b_cols = std::max(c1, c2);
    return res;
}

BadProbability bad_probability_mc(const Cube& q, int k, const Params& prm, int trials,
                                  std::uint64_t seed) {
    if (trials < 1) throw std::invalid_argument("trials must be >= 1");
    BadProbability out;
    out.trials = trials;
    Rng rng = Rng(seed).fork("bad-probability");
    int dim = q.grid->dim();
    int bad = 0;
    double a_scale = std::ldexp(q.side(), k);
    for (int t = 0; t < trials; ++t) {
        Rng tr = rng.fork(static_cast<std::uint64_t>(t));
        Pt w = random_dyadic_shift(tr, prm.root_scale, dim);
        auto grid = ShiftedDyadicGrid::build(w, prm.root_scale, prm.depth, dim);
        if (!is_good(q, grid, a_scale, prm.good_bad())) ++bad;
    }
    double p = static_cast<double>(bad) / trials;
    out.estimate = p;
    out.half_width = 1.96 * std::sqrt(std::max(0.0, p * (1.0 - p)) / trials);
    return out;
}

CollarMass collar_mass_mc(const DiscreteMeasure& mu, const Box& q0, const Params& prm,
                          int trials, std::uint64_t seed) {
    CollarMass out;
    double norm = mu.mass_in(q0.scaled(prm.lambda));
    Rng rng = Rng(seed).fork("collar-mass");
    for (double uu = prm.u; uu > prm.u / 64.0; uu *= 0.5) out.u_values.push_back(uu);
    out.estimate.assign(out.u_values.size(), 0.0);
    out.half_width.assign(out.u_values.size(), 0.0);
    std::vector<double> sum(out.u_values.size(), 0.0), sumsq(out.u_values.size(), 0.0);
    for (int t = 0; t < trials; ++t) {
        Rng tr = rng.fork(static_cast<std::uint64_t>(t));
        Pt w = random_dyadic_shift(tr, prm.root_scale, mu.dim);
        auto grid = ShiftedDyadicGrid::build(w, prm.root_scale, 1, mu.dim);
        Box qstar = grid.root_box();
        for (std::size_t i = 0; i < out.u_values.size(); ++i) {
            Box outer = qstar.scaled(1.0 + out.u_values[i]);
            double mass = 0.0;
            for (std::size_t a = 0; a < mu.size(); ++a)
                if (outer.contains(mu.atoms[a]) && !qstar.contains(mu.atoms[a]))
                    mass += mu.weight[a];
            double v = mass / norm;
            sum[i] += v;
            sumsq[i] += v * v;
        }
    }
    for (std::size_t i = 0; i < out.u_values.size(); ++i) {
        double mean = sum[i] / trials;
        double var = std::max(0.0, sumsq[i] / trials - mean * mean);
        out.estimate[i] = mean;
        out.half_width[i] = 1.96 * std::sqrt(var / trials);
    }
    return out;
}

NestedResult nested_sum(const PairScene& scene, const std::vector<std::pair<int, int>>& pairs,
                        bool f_side_small, const PieceImages& images_small) {
    NestedResult res;
    const auto& prm = scene.prm;
    double alpha = prm.alpha;
    const GridIndex* gs = f_side_small ? scene.gx_t : scene.gx_s;
    const GridIndex* gb = f_side_small ? scene.gx_s : scene.gx_t;
    const StoppingTree* ts = f_side_small ? scene.tree_t : scene.tree_s;
    const StoppingTree* tb = f_side_small ? scene.tree_s : scene.tree_t;
    const MartingaleDecomposition* dsd = f_side_small ? scene.dec_f : scene.dec_g;
    const MartingaleDecomposition* dbd = f_side_small ? scene.dec_g : scene.dec_f;
    SideCache cs = make_side_cache(*ts, *dsd);
    SideCache cb = make_side_cache(*tb, *dbd);
    const TestFunctionFamily& famb = tb->family();
    const DiscretizedOperator& op = *scene.op;

    // Bad-part accumulators keyed by the generation gap k.
    std::map<int, std::pair<double, double>> bad_k;

    std::map<int, AtomFn> para_sum;  // stopping node of the big tree -> sum eps Delta
    double para_tail_coeff = cb.coeff(gb->root());
    AtomFn para_sum_root(gs->measure().size(), 0.0);

    for (auto [pf, pg] : pairs) {
        int qs = f_side_small ? pf : pg;
        int qb = f_side_small ? pg : pf;
        const AtomFn& img = images_small.img[qs];
        double val = img.empty() ? 0.0 : dot_piece(*gb, img, dbd->piece(qb), qb);
        res.value += val;
        Cube qcube = gs->cube(qs);
        bool good = is_good(qcube, gb->grid(), gb->side(gb->node(qb).gen), prm.good_bad());
        if (!good) {
            ++res.bad_pairs;
            res.bad_value += val;
            int k = std::max(0, gs->node(qs).gen - gb->node(qb).gen);
            auto& acc = bad_k[k];
            acc.first += cs.piece_sq[qs];
            acc.second += cb.piece_sq[qb];
            continue;
        }
        ++res.good_pairs;
        res.good_value += val;

        // The guaranteed child R_Q containing Q.
        Box qsb = gs->box(qs);
        const auto& bn = gb->node(qb);
        int rq = -1;
        for (int k = 0; k < bn.n_children; ++k) {
            int c = bn.first_child + k;
            if (gb->box(c).contains_box(qsb)) {
                rq = c;
                break;
            }
        }
        if (rq < 0) {
            ++res.child_check_failures;
            continue;
        }
        double threshold =
            std::pow(qsb.side(), prm.gamma) * std::pow(gb->side(bn.gen), 1.0 - prm.gamma);
        if (!(containment_depth(qsb, gb->box(rq)) > threshold)) ++res.child_check_failures;
        if (img.empty()) continue;

        double norm_s = std::sqrt(cs.piece_sq[qs]);
        double norm_b = std::sqrt(cb.piece_sq[qb]);
        double bqr = std::pow(qsb.side() / gb->side(bn.gen), 0.5 * alpha) *
                     std::sqrt(gs->mass(qs) / gb->mass(rq));
        double lemma42 = std::pow(qsb.side() / gb->side(bn.gen), 0.5 * alpha) *
                         std::sqrt(gs->mass(qs)) * norm_s;

        // <T Delta_Q f, 1_{R \ R_Q} Delta_R g>: the Lemma 4.3 piece.
        double piece_a = 0.0;
        {
            const auto& piece = dbd->piece(qb);
            const auto& rnd = gb->node(rq);
            const auto& mu = gb->measure();
            for (int slot = bn.lo; slot < bn.hi; ++slot) {
                if (slot == rnd.lo && rnd.hi > rnd.lo) {
                    slot = rnd.hi - 1;
                    continue;
                }
                int a = gb->atom_at(slot);
                piece_a += img[a] * piece[slot - bn.lo] * mu.weight[a];
            }
        }
        res.nonpara_value += piece_a;
        double bound_a = bqr * norm_s * norm_b;
        res.nonpara_bound += bound_a;
        if (bound_a > 0.0)
            res.lemma43_worst = std::max(res.lemma43_worst, std::abs(piece_a) / bound_a);

        // Paraproduct pair piece <T Delta_Q f, V'_{R_Q} - V'_R> plus the
        // correction <T Delta_Q f, (V'_R - V'_{R_Q}) 1_{R_Q^c}>.
        int anc_rq = tb->ancestor(rq);
        int anc_qb = tb->ancestor(qb);
        double c_rq = cb.coeff(rq), c_qb = cb.coeff(qb);
        double para_pair =
            c_rq * dot_family(*gb, img, famb, anc_rq) - c_qb * dot_family(*gb, img, famb, anc_qb);
        res.para_value += para_pair;

        double corr = c_qb * dot_family(*gb, img, famb, anc_qb, rq);
        if (!tb->is_stopping(rq)) corr -= c_rq * dot_family(*gb, img, famb, anc_rq, rq);
        res.nonpara_value += corr;
        double coeff_mag = tb->is_stopping(rq) ? std::abs(c_qb) : std::abs(c_rq - c_qb);
        res.nonpara_bound += coeff_mag * lemma42;
        if (coeff_mag * lemma42 > 0.0)
            res.lemma42_worst = std::max(res.lemma42_worst, std::abs(corr) / (coeff_mag * lemma42));
    }

    double opn = scene.op_norm_value;
    for (auto& [k, acc] : bad_k) res.bad_bound += std::sqrt(acc.first) * std::sqrt(acc.second);
    res.bad_bound *= opn;

    // Q-driven telescoped paraproduct over the good cubes.
    const Box broot = gb->grid().root_box();
    for (int qs = 0; qs < gs->node_count(); ++qs) {
        if (gs->node(qs).n_children == 0 || ts->beta(qs) >= prm.beta) continue;
        Box qsb = gs->box(qs);
        if (!broot.contains_box(qsb)) continue;
        // Beyond the root scale goodness is vacuous, so alpha always exists.
        int kvac = prm.r;
        while (std::ldexp(qsb.side(), kvac) <= gb->side(0)) ++kvac;
        auto a = alpha_generation(gs->cube(qs), gb->grid(), prm.good_bad(), kvac);
        if (!a) {
            ++res.missing_h;
            continue;
        }
        double min_side = std::ldexp(qsb.side(), *a);
        // H(Q): smallest big-grid cube containing Q with side >= 2^alpha l(Q)
        // and beta below the cutoff.
        int h_node = -1;
        for (int gen = gb->grid().depth(); gen >= 0; --gen) {
            if (gb->side(gen) < min_side) continue;
            auto cc = gb->grid().locate(qsb.center(), gen);
            if (!cc) break;
            if (!cc->box().contains_box(qsb)) continue;
            auto nid = gb->find(*cc);
            if (!nid) continue;
            if (tb->beta(*nid) >= prm.beta) continue;
            h_node = *nid;
            break;
        }
        if (h_node < 0) {
            ++res.missing_h;
            continue;
        }
        // J(Q) = the child of H(Q) containing Q.
        const auto& hn = gb->node(h_node);
        int j_node = -1;
        for (int k = 0; k < hn.n_children; ++k) {
            int c = hn.first_child + k;
            if (gb->box(c).contains_box(qsb)) {
                j_node = c;
                break;
            }
        }
        if (j_node < 0) {
            ++res.missing_h;
            continue;
        }
        const AtomFn& img = images_small.img[qs];
        if (!img.empty()) {
            double tele = cb.coeff(j_node) * dot_family(*gb, img, famb, tb->ancestor(j_node)) -
                          para_tail_coeff * dot_family(*gb, img, famb, gb->root());
            res.para_value_telescoped += tele;
        }
        // Bound assembly: bucket by the stopping ancestor of S(Q) = J(Q).
        double eps = cb.coeff(j_node);
        res.eps_coeff_worst = std::max(res.eps_coeff_worst, std::abs(eps));
        int f_stop = tb->ancestor(j_node);
        auto& acc = para_sum[f_stop];
        if (acc.empty()) acc.assign(gs->measure().size(), 0.0);
        const auto& piece = dsd->piece(qs);
        const auto& nd = gs->node(qs);
        for (std::size_t kk = 0; kk < piece.size(); ++kk) {
            int atom = gs->atom_at(nd.lo + static_cast<int>(kk));
            acc[atom] += eps * piece[kk];
            para_sum_root[atom] += para_tail_coeff * piece[kk];
        }
    }
    const auto& mu = gs->measure();
    for (auto& [f_stop, acc] : para_sum) {
        double nrm = 0.0;
        for (std::size_t a = 0; a < mu.size(); ++a) nrm += acc[a] * acc[a] * mu.weight[a];
        res.para_bound += std::sqrt(nrm) * std::sqrt(testing_norm_sq(famb, op, f_stop));
    }
    {
        double nrm = 0.0;
        for (std::size_t a = 0; a < mu.size(); ++a)
            nrm += para_sum_root[a] * para_sum_root[a] * mu.weight[a];
        res.para_bound += std::sqrt(nrm) * std::sqrt(testing_norm_sq(famb, op, gb->root()));
    }
    return res;
}

ThetaSurgery theta_surgery(const PairScene& scene, const Box& own, const Box& other,
                           double cell_side, bool own_is_f_side) {
    const auto& mu = *scene.mu;
    const auto& prm = scene.prm;
    ThetaSurgery out;
    out.part.assign(mu.size(), 0);
    ShiftedLattice lat{scene.dstar_grid->root_box().lo, cell_side, mu.dim};
    double theta = prm.theta;

    const ShiftedDyadicGrid& other_grid =
        own_is_f_side ? scene.gx_s->grid() : scene.gx_t->grid();
    double own_side = own.side();
    // (5.4) superset audit: comparable-scale collars of the other grid plus
    // the D* collar.
    auto in_bad = [&](const Pt& x) {
        for (int off = -prm.r; off <= prm.r; ++off) {
            double ls = std::ldexp(own_side, -off);
            if (ls > other_grid.side(0)) continue;
            int gen = static_cast<int>(std::lround(std::log2(other_grid.side(0) / ls)));
            if (gen < 0 || gen > other_grid.depth()) continue;
            if (CollarRegion(&other_grid, gen, theta).contains(x)) return true;
        }
        return lat.own_boundary_dist(x) < theta * cell_side;
    };

    for (std::size_t a = 0; a < mu.size(); ++a) {
        const Pt& x = mu.atoms[a];
        if (!own.contains(x)) continue;
        CubeIdx cell = lat.cell_of(x);
        Box cb = lat.cell_box(cell);
        bool boundary = box_to_boundary(cb, other) < 0.5 * theta * other.side();
        if (!boundary && other.contains(x) && lat.own_boundary_dist(x) < theta * cell_side)
            boundary = true;
        if (boundary) {
            out.part[a] = 2;
            if (!in_bad(x)) ++out.boundary_containment_failures;
            continue;
        }
        if (!other.contains(x)) {
            out.part[a] = 1;
            continue;
        }
        out.part[a] = 3;
        out.cells[cell].push_back(static_cast<int>(a));
    }
    return out;
}

MatchedCells match_cells(const ThetaSurgery& a, const ThetaSurgery& b, const PairScene& scene,
                         const Box& qi, const Box& rj, double cell_side) {
    MatchedCells out;
    ShiftedLattice lat{scene.dstar_grid->root_box().lo, cell_side, scene.mu->dim};
    for (const auto& [key, atoms_a] : a.cells) {
        auto it = b.cells.find(key);
        if (it == b.cells.end()) continue;
        out.keys.push_back(key);
        std::vector<int> sa = atoms_a, sb = it->second;
        std::sort(sa.begin(), sa.end());
        std::sort(sb.begin(), sb.end());
        if (sa != sb) ++out.chunk_mismatches;
        Box g = lat.cell_box(key);
        double shrink = 1.0 - 2.0 * scene.prm.theta;
        Box five_l = g.scaled(5.0 * shrink);
        if (!(qi.contains_box(five_l) && rj.contains_box(five_l))) ++out.five_l_failures;
    }
    return out;
}

SigmaSurgery sigma_surgery(const PairScene& scene, const Box& h_box,
                           const std::vector<int>& h_atoms, const AtomFn& u, const AtomFn& v,
                           const AtomFn& maximal_u, bool /*u_on_f_side*/) {
    SigmaSurgery out;
    const auto& mu = *scene.mu;
    const auto& op = *scene.op;
    double sigma = scene.prm.sigma;
    double h_mass = 0.0;
    for (int a : h_atoms) h_mass += mu.weight[a];
    if (!(h_mass > 0.0)) {
        out.skipped = true;
        return out;
    }
    Box five_h = h_box.scaled(5.0);
    Box ring_h = h_box.scaled(1.0 + sigma);
    std::vector<std::uint8_t> in_h(mu.size(), 0);
    for (int a : h_atoms) in_h[a] = 1;
    std::vector<int> far, mid, ring, all;
    all.reserve(mu.size());
    auto closed_contains = [&](const Box& b, const Pt& p) {
        for (int j = 0; j < b.dim; ++j)
            if (p[j] < b.lo[j] || p[j] > b.hi[j]) return false;
        return true;
    };
    for (std::size_t a = 0; a < mu.size(); ++a) {
        all.push_back(static_cast<int>(a));
        if (in_h[a]) continue;
        const Pt& x = mu.atoms[a];
        if (!closed_contains(five_h, x))
            far.push_back(static_cast<int>(a));
        else if (!closed_contains(ring_h, x))
            mid.push_back(static_cast<int>(a));
        else
            ring.push_back(static_cast<int>(a));
    }
    out.t_full = pair_block(op, u, h_atoms, v, h_atoms);
    out.t_global = pair_block(op, u, all, v, h_atoms);
    out.t_far = pair_block(op, u, far, v, h_atoms);
    out.t_mid = pair_block(op, u, mid, v, h_atoms);
    out.t_ring = pair_block(op, u, ring, v, h_atoms);
    double resum = out.t_global - out.t_far - out.t_mid - out.t_ring;
    double scale = std::max({1.0, std::abs(out.t_global), std::abs(out.t_full)});
    out.resum_residual = std::abs(resum - out.t_full) / scale;

    // Lemma 5.5: the far-field image minus its b_H average is dominated by
    // the centred maximal function of u on H.
    const TestFunctionFamily& fam_s = scene.tree_s->family();
    AtomFn b_h = fam_s.make_for_atoms(h_atoms);
    std::vector<double> phi;
    kernel_block(op, u, far, h_atoms, phi);
    double pivot = 0.0;
    for (std::size_t k = 0; k < h_atoms.size(); ++k)
        pivot += b_h[h_atoms[k]] * phi[k] * mu.weight[h_atoms[k]];
    pivot /= h_mass;
    for (std::size_t k = 0; k < h_atoms.size(); ++k) {
        double denom = maximal_u[h_atoms[k]];
        if (denom > 0.0)
            out.lemma55_ratio = std::max(out.lemma55_ratio, std::abs(phi[k] - pivot) / denom);
    }

    // Final pivot splitting of <b_H, T(1_{R^n \ 5H} u)>.
    out.pivot_terms[0] = pair_block(op, u, all, b_h, h_atoms);
    out.pivot_terms[1] = pair_block(op, u, mid, b_h, h_atoms);
    out.pivot_terms[2] = pair_block(op, u, ring, b_h, h_atoms);
    out.pivot_terms[3] = pair_block(op, u, h_atoms, b_h, h_atoms);
    return out;
}

namespace {

/// One of the three (A, u) branch choices at a child cube.
struct Branch {
    double a = 0.0;
    int u_node = -1;
};

void make_branches(const SideCache& c, int parent, int child, Branch out[3]) {
    const StoppingTree& tree = *c.tree;
    out[0] = Branch{};
    out[1] = Branch{};
    out[2] = Branch{};
    if (!tree.is_stopping(child)) {
        out[0].a = std::abs(c.coeff(child) - c.coeff(parent));
        out[0].u_node = tree.ancestor(child);
    } else {
        out[1].a = std::abs(c.coeff(child));
        out[1].u_node = child;  // ancestor(child) = child
        out[2].a = std::abs(c.coeff(parent));
        out[2].u_node = tree.ancestor(parent);
    }
}

}  // namespace

DiagonalResult diagonal_sum(const PairScene& scene,
                            const std::vector<std::pair<int, int>>& pairs,
                            const PieceImages& images_t, std::uint64_t sample_seed) {
    DiagonalResult res;
    const auto& prm = scene.prm;
    const auto& mu = *scene.mu;
    const auto& op = *scene.op;
    const GridIndex& gt = *scene.gx_t;
    const GridIndex& gsx = *scene.gx_s;
    SideCache cf = make_side_cache(*scene.tree_t, *scene.dec_f);
    SideCache cg = make_side_cache(*scene.tree_s, *scene.dec_g);
    double norm_lambda = scene.mu_lambda_q0();

    std::map<int, AtomFn> ufn_f, ufn_g, timg_f, timg_g, mfn_f, mfn_g;
    auto get_fn = [&](bool f_side, int node) -> const AtomFn& {
        auto& cache = f_side ? ufn_f : ufn_g;
        auto it = cache.find(node);
        if (it == cache.end()) {
            const auto& fam = f_side ? scene.tree_t->family() : scene.tree_s->family();
            it = cache.emplace(node, fam.as_atomfn(node)).first;
        }
        return it->second;
    };
    auto get_timg = [&](bool f_side, int node) -> const AtomFn& {
        auto& cache = f_side ? timg_f : timg_g;
        auto it = cache.find(node);
        if (it == cache.end()) {
            AtomFn img =
                f_side ? op.apply(get_fn(true, node)) : op.adjoint_apply(get_fn(false, node));
            it = cache.emplace(node, std::move(img)).first;
        }
        return it->second;
    };
    auto get_maximal = [&](bool f_side, int node) -> const AtomFn& {
        auto& cache = f_side ? mfn_f : mfn_g;
        auto it = cache.find(node);
        if (it == cache.end())
            it = cache.emplace(node, centred_maximal(mu, get_fn(f_side, node))).first;
        return it->second;
    };

    std::map<int, int> neigh;
    for (auto [pf, pg] : pairs) ++neigh[pg];
    for (auto& [pg, n] : neigh) res.max_neighbors = std::max(res.max_neighbors, n);

    // (5.1)/(5.2) prerequisite sums over the distinct cubes of each side.
    std::set<int> qset, rset;
    for (auto [pf, pg] : pairs) {
        qset.insert(pf);
        rset.insert(pg);
    }
    auto prereq = [&](bool f_side, const std::set<int>& nodes, double out_sums[3]) {
        const GridIndex& g = f_side ? gt : gsx;
        const SideCache& c = f_side ? cf : cg;
        for (int q : nodes) {
            const auto& nd = g.node(q);
            for (int k = 0; k < nd.n_children; ++k) {
                int child = nd.first_child + k;
                Branch br[3];
                make_branches(c, q, child, br);
                const auto& cnd = g.node(child);
                for (int bidx = 0; bidx < 3; ++bidx) {
                    if (!(br[bidx].a > 0.0)) continue;
                    const AtomFn& mfn = get_maximal(f_side, br[bidx].u_node);
                    const AtomFn& timg = get_timg(f_side, br[bidx].u_node);
                    double msq = 0.0, tsq = 0.0;
                    for (int s = cnd.lo; s < cnd.hi; ++s) {
                        int a = g.atom_at(s);
                        msq += mfn[a] * mfn[a] * mu.weight[a];
                        tsq += timg[a] * timg[a] * mu.weight[a];
                    }
                    out_sums[bidx] += br[bidx].a * br[bidx].a * (msq + tsq);
                }
            }
        }
        for (int bidx = 0; bidx < 3; ++bidx) out_sums[bidx] /= norm_lambda;
    };
    prereq(true, qset, res.prereq_f);
    prereq(false, rset, res.prereq_g);

    // Choose the sampled pairings.
    std::vector<std::size_t> sample_ids(pairs.size());
    for (std::size_t i = 0; i < pairs.size(); ++i) sample_ids[i] = i;
    {
        Rng rng = Rng(sample_seed).fork("surgery-sample");
        for (std::size_t i = sample_ids.size(); i > 1; --i)
            std::swap(sample_ids[i - 1], sample_ids[rng.next_below(i)]);
        if (sample_ids.size() > static_cast<std::size_t>(prm.surgery_sample))
            sample_ids.resize(static_cast<std::size_t>(prm.surgery_sample));
    }
    std::set<std::size_t> sampled(sample_ids.begin(), sample_ids.end());

    for (std::size_t pi = 0; pi < pairs.size(); ++pi) {
        auto [pf, pg] = pairs[pi];
        if (!images_t.img[pf].empty())
            res.value += dot_piece(gsx, images_t.img[pf], scene.dec_g->piece(pg), pg);
        ++res.pairs;

        const auto& fnd = gt.node(pf);
        const auto& gnd = gsx.node(pg);
        int min_child_gen = std::max(fnd.gen, gnd.gen) + 1;
        double cell_side = std::ldexp(gt.grid().side(min_child_gen), prm.j_theta());
        bool do_surgery = sampled.count(pi) > 0;
        ShiftedLattice lat{scene.dstar_grid->root_box().lo, cell_side, mu.dim};

        for (int ki = 0; ki < fnd.n_children; ++ki) {
            int ci = fnd.first_child + ki;
            const auto& cind = gt.node(ci);
            Branch bf[3];
            make_branches(cf, pf, ci, bf);
            Box qi_box = gt.box(ci);
            auto ci_atoms = node_atoms(gt, ci);

            // sigma-collar and (5.4) bad-set weighted masses per branch.
            double bad_mass_sq[3] = {0, 0, 0}, ring_mass_sq[3] = {0, 0, 0},
                   u_mass_sq[3] = {0, 0, 0};
            for (int bidx = 0; bidx < 3; ++bidx) {
                if (!(bf[bidx].a > 0.0)) continue;
                const AtomFn& u = get_fn(true, bf[bidx].u_node);
                for (int s = cind.lo; s < cind.hi; ++s) {
                    int a = gt.atom_at(s);
                    double wsq = u[a] * u[a] * mu.weight[a];
                    u_mass_sq[bidx] += wsq;
                    bool bad = lat.own_boundary_dist(mu.atoms[a]) < prm.theta * cell_side;
                    for (int off = -prm.r; off <= prm.r && !bad; ++off) {
                        int gen = cind.gen + off;
                        if (gen < 0 || gen > gsx.grid().depth()) continue;
                        bad = CollarRegion(&gsx.grid(), gen, prm.theta).contains(mu.atoms[a]);
                    }
                    if (bad) bad_mass_sq[bidx] += wsq;
                    if (lat.own_boundary_dist(mu.atoms[a]) < prm.sigma * cell_side)
                        ring_mass_sq[bidx] += wsq;
                }
            }

            for (int kj = 0; kj < gnd.n_children; ++kj) {
                int cj = gnd.first_child + kj;
                const auto& cjnd = gsx.node(cj);
                Branch bg[3];
                make_branches(cg, pg, cj, bg);
                auto cj_atoms = node_atoms(gsx, cj);
                Box rj_box = gsx.box(cj);

                // v-side collar masses (shared across u-branches).
                double v_sq[3] = {0, 0, 0}, v_bad_sq[3] = {0, 0, 0};
                for (int bj = 0; bj < 3; ++bj) {
                    if (!(bg[bj].a > 0.0)) continue;
                    const AtomFn& v = get_fn(false, bg[bj].u_node);
                    for (int s = cjnd.lo; s < cjnd.hi; ++s) {
                        int a = gsx.atom_at(s);
                        double wsq = v[a] * v[a] * mu.weight[a];
                        v_sq[bj] += wsq;
                        bool bad = lat.own_boundary_dist(mu.atoms[a]) < prm.theta * cell_side;
                        for (int off = -prm.r; off <= prm.r && !bad; ++off) {
                            int gen = cjnd.gen + off;
                            if (gen < 0 || gen > gt.grid().depth()) continue;
                            bad = CollarRegion(&gt.grid(), gen, prm.theta).contains(mu.atoms[a]);
                        }
                        if (bad) v_bad_sq[bj] += wsq;
                    }
                }

                std::map<std::pair<int, int>, double> pairing;
                for (int bi = 0; bi < 3; ++bi) {
                    if (!(bf[bi].a > 0.0)) continue;
                    for (int bj = 0; bj < 3; ++bj) {
                        if (!(bg[bj].a > 0.0)) continue;
                        auto key = std::make_pair(bf[bi].u_node, bg[bj].u_node);
                        auto it = pairing.find(key);
                        if (it == pairing.end()) {
                            double pv = pair_block(op, get_fn(true, bf[bi].u_node), ci_atoms,
                                                   get_fn(false, bg[bj].u_node), cj_atoms);
                            it = pairing.emplace(key, pv).first;
                        }
                        double pv = std::abs(it->second);
                        double ab = bf[bi].a * bg[bj].a;
                        res.nine_sums[bi][bj] += ab * pv;
                        res.bad_term += ab * (std::sqrt(bad_mass_sq[bi] * v_sq[bj]) +
                                              std::sqrt(u_mass_sq[bi] * v_bad_sq[bj]));
                        res.ring_term += ab * std::sqrt(ring_mass_sq[bi] * v_sq[bj]);
                    }
                }

                if (!do_surgery) continue;
                // Full theta/sigma surgery on this pairing, using the first
                // active branch combination (or the twist ancestors when a
                // side has no active branch).
                int bi = -1, bj = -1;
                for (int t = 0; t < 3 && bi < 0; ++t)
                    if (bf[t].a > 0.0) bi = t;
                for (int t = 0; t < 3 && bj < 0; ++t)
                    if (bg[t].a > 0.0) bj = t;
                if (bi < 0) {
                    bf[0].u_node = scene.tree_t->ancestor(ci);
                    bi = 0;
                }
                if (bj < 0) {
                    bg[0].u_node = scene.tree_s->ancestor(cj);
                    bj = 0;
                }
                const AtomFn& u = get_fn(true, bf[bi].u_node);
                const AtomFn& v = get_fn(false, bg[bj].u_node);
                ++res.sampled;

                ThetaSurgery su_q = theta_surgery(scene, qi_box, rj_box, cell_side, true);
                ThetaSurgery su_r = theta_surgery(scene, rj_box, qi_box, cell_side, false);
                res.containment_failures +=
                    su_q.boundary_containment_failures + su_r.boundary_containment_failures;
                MatchedCells mc = match_cells(su_q, su_r, scene, qi_box, rj_box, cell_side);
                res.matched_cells += static_cast<int>(mc.keys.size());
                res.max_matched_per_pairing =
                    std::max(res.max_matched_per_pairing, static_cast<int>(mc.keys.size()));
                res.five_l_failures += mc.five_l_failures;
                res.partition_failures += mc.chunk_mismatches;
                for (int s = cind.lo; s < cind.hi; ++s)
                    if (su_q.part[gt.atom_at(s)] == 0) ++res.partition_failures;
                for (int s = cjnd.lo; s < cjnd.hi; ++s)
                    if (su_r.part[gsx.atom_at(s)] == 0) ++res.partition_failures;

                auto collect = [&](const ThetaSurgery& su, const std::vector<int>& atoms,
                                   std::uint8_t label) {
                    std::vector<int> out;
                    for (int a : atoms)
                        if (su.part[a] == label) out.push_back(a);
                    return out;
                };
                std::vector<int> q_sep = collect(su_q, ci_atoms, 1);
                std::vector<int> q_bnd = collect(su_q, ci_atoms, 2);
                std::vector<int> q_del = collect(su_q, ci_atoms, 3);
                std::vector<int> r_sep = collect(su_r, cj_atoms, 1);
                std::vector<int> r_bnd = collect(su_r, cj_atoms, 2);
                std::vector<int> r_del = collect(su_r, cj_atoms, 3);
                double t_rsep = pair_block(op, u, ci_atoms, v, r_sep);
                double t_rbnd = pair_block(op, u, ci_atoms, v, r_bnd);
                double t_qsep = pair_block(op, u, q_sep, v, r_del);
                double t_qbnd = pair_block(op, u, q_bnd, v, r_del);
                double t_dd = pair_block(op, u, q_del, v, r_del);
                double full = pair_block(op, u, ci_atoms, v, cj_atoms);
                double resum = t_rsep + t_rbnd + t_qsep + t_qbnd + t_dd;
                double scale = std::max(1.0, std::abs(full));
                res.theta_resum_residual =
                    std::max(res.theta_resum_residual, std::abs(resum - full) / scale);

                double u_l2 = 0.0, v_l2 = 0.0;
                for (int a : ci_atoms) u_l2 += u[a] * u[a] * mu.weight[a];
                for (int a : cj_atoms) v_l2 += v[a] * v[a] * mu.weight[a];
                double uv = std::sqrt(u_l2 * v_l2);

                double t_match = 0.0;
                const AtomFn& max_u = get_maximal(true, bf[bi].u_node);
                for (const auto& key : mc.keys) {
                    const auto& chunk = su_q.cells.at(key);
                    Box h_box = lat.cell_box(key).scaled(1.0 - 2.0 * prm.theta);
                    SigmaSurgery ss = sigma_surgery(scene, h_box, chunk, u, v, max_u, true);
                    if (ss.skipped) {
                        ++res.skipped_h;
                        continue;
                    }
                    t_match += ss.t_full;
                    res.sigma_resum_residual =
                        std::max(res.sigma_resum_residual, ss.resum_residual);
                    res.lemma55_ceiling = std::max(res.lemma55_ceiling, ss.lemma55_ratio);
                    if (uv > 0.0)
                        res.mid_constant = std::max(res.mid_constant, std::abs(ss.t_mid) / uv);
                }
                double offdiag = t_dd - t_match;
                if (uv > 0.0)
                    res.sep_constant =
                        std::max(res.sep_constant,
                                 (std::abs(t_rsep) + std::abs(t_qsep) + std::abs(offdiag)) / uv);
            }
        }
    }
    for (int bi = 0; bi < 3; ++bi)
        for (int bj = 0; bj < 3; ++bj) res.nine_sum_total += res.nine_sums[bi][bj];
    return res;
}

BetaTail beta_tail(const PairScene& scene) {
    BetaTail out;
    const auto& mu = *scene.mu;
    const auto& op = *scene.op;
    const auto& prm = scene.prm;
    const GridIndex& gt = *scene.gx_t;
    const GridIndex& gsx = *scene.gx_s;
    const auto& f = scene.dec_f->input();
    const auto& g = scene.dec_g->input();

    auto sum_pieces = [&](const MartingaleDecomposition& dec, bool low) {
        const GridIndex& gx = dec.tree().index();
        AtomFn acc(mu.size(), 0.0);
        for (int id = 0; id < gx.node_count(); ++id) {
            const auto& piece = dec.piece(id);
            if (piece.empty()) continue;
            bool is_low = dec.tree().beta(id) < prm.beta;
            if (is_low != low) continue;
            const auto& nd = gx.node(id);
            for (std::size_t k = 0; k < piece.size(); ++k)
                acc[gx.atom_at(nd.lo + static_cast<int>(k))] += piece[k];
        }
        return acc;
    };
    AtomFn f_low = sum_pieces(*scene.dec_f, true);
    AtomFn f_high = sum_pieces(*scene.dec_f, false);
    AtomFn g_high = sum_pieces(*scene.dec_g, false);

    AtomFn rho_f = f;
    {
        AtomFn rec = scene.dec_f->reconstruct();
        for (std::size_t a = 0; a < mu.size(); ++a) rho_f[a] -= rec[a];
    }
    AtomFn rho_g = g;
    {
        AtomFn rec = scene.dec_g->reconstruct();
        for (std::size_t a = 0; a < mu.size(); ++a) rho_g[a] -= rec[a];
    }

    const TestFunctionFamily& fam_t = scene.tree_t->family();
    const TestFunctionFamily& fam_s = scene.tree_s->family();
    AtomFn b_qstar = fam_t.as_atomfn(gt.root());
    AtomFn b_rstar = fam_s.as_atomfn(gsx.root());
    double f_avg = gt.avg(f, gt.root());
    double g_avg = gsx.avg(g, gsx.root());

    AtomFn t_f_high = op.apply(f_high);
    AtomFn t_f_low = op.apply(f_low);
    AtomFn t_b_qstar = op.apply(b_qstar);
    AtomFn t_rho_f = op.apply(rho_f);

    out.tail_f = inner(mu, t_f_high, g);
    out.tail_mixed = inner(mu, t_f_low, g_high);
    out.tail_g_root = g_avg * inner(mu, t_f_high, b_rstar);
    out.resid_f = f_avg * inner(mu, t_b_qstar, g);
    out.resid_cross = f_avg * g_avg * inner(mu, t_b_qstar, b_rstar);
    out.truncation_f = inner(mu, t_rho_f, g);
    out.truncation_g = inner(mu, t_f_low, rho_g);
    out.truncation_cross = g_avg * inner(mu, t_rho_f, b_rstar);

    Box qstar_box = gt.grid().root_box();
    Box rstar_box = gsx.grid().root_box();
    {
        AtomFn tstar_b = op.adjoint_apply(b_rstar);
        AtomFn masked(mu.size(), 0.0);
        for (std::size_t a = 0; a < mu.size(); ++a)
            if (rstar_box.contains(mu.atoms[a])) masked[a] = tstar_b[a];
        out.resid_g = g_avg * inner(mu, f, masked);
        out.resid_g_bound = lp_norm(mu, masked, 2.0) * lp_norm(mu, f, 2.0);
        AtomFn masked_t(mu.size(), 0.0);
        for (std::size_t a = 0; a < mu.size(); ++a)
            if (qstar_box.contains(mu.atoms[a])) masked_t[a] = t_b_qstar[a];
        out.resid_f_bound = lp_norm(mu, masked_t, 2.0) * lp_norm(mu, g, 2.0);
    }

    auto gen_tail = [&](const StoppingTree& tree) {
        double s = 0.0;
        for (int j = prm.beta; j < tree.generation_count(); ++j) {
            double mass = 0.0;
            for (int fnode : tree.generation(j)) mass += tree.index().mass(fnode);
            s += std::sqrt(mass);
        }
        return s;
    };
    double mu_q0 = mu.mass_in(scene.q0);
    double opn = scene.op_norm_value;
    out.bound_f = opn * std::sqrt(mu_q0) * gen_tail(*scene.tree_t);
    out.bound_mixed = opn * std::sqrt(mu_q0) * gen_tail(*scene.tree_s);
    out.bound_g_root = std::abs(g_avg) * opn * std::sqrt(mu_q0) * gen_tail(*scene.tree_t);

    // Three-term split of <T b_{Q*}, b_{R*}>.
    Box collar_outer = qstar_box.scaled(1.0 + prm.u);
    AtomFn b_r_in(mu.size(), 0.0), b_r_collar(mu.size(), 0.0), b_r_far(mu.size(), 0.0);
    for (std::size_t a = 0; a < mu.size(); ++a) {
        if (qstar_box.contains(mu.atoms[a]))
            b_r_in[a] = b_rstar[a];
        else if (collar_outer.contains(mu.atoms[a]))
            b_r_collar[a] = b_rstar[a];
        else
            b_r_far[a] = b_rstar[a];
    }
    out.cross_inner = inner(mu, t_b_qstar, b_r_in);
    out.cross_collar = inner(mu, t_b_qstar, b_r_collar);
    out.cross_far = inner(mu, t_b_qstar, b_r_far);
    {
        AtomFn masked_t(mu.size(), 0.0);
        for (std::size_t a = 0; a < mu.size(); ++a)
            if (qstar_box.contains(mu.atoms[a])) masked_t[a] = t_b_qstar[a];
        out.cross_bound_inner = lp_norm(mu, masked_t, 2.0) * lp_norm(mu, b_rstar, 2.0);
    }
    out.cross_bound_collar = opn * lp_norm(mu, b_qstar, 2.0) * lp_norm(mu, b_r_collar, 2.0);
    {
        // Long-range kernel bound with the measured C(u).
        double lq = qstar_box.side(), lr = rstar_box.side();
        double scale = std::pow(lq, 0.5 * prm.m) * std::pow(lr, 0.5 * prm.m);
        double cu = 0.0;
        const auto& K = op.kernel_matrix();
        double int_far = 0.0, int_q = 0.0;
        for (std::size_t a = 0; a < mu.size(); ++a) {
            if (b_r_far[a] != 0.0) int_far += std::abs(b_r_far[a]) * mu.weight[a];
            if (qstar_box.contains(mu.atoms[a])) int_q += std::abs(b_qstar[a]) * mu.weight[a];
        }
        for (std::size_t x = 0; x < mu.size(); ++x) {
            if (b_r_far[x] == 0.0) continue;
            for (std::size_t y = 0; y < mu.size(); ++y) {
                if (!qstar_box.contains(mu.atoms[y]) || b_qstar[y] == 0.0) continue;
                cu = std::max(cu, std::abs(K(static_cast<Eigen::Index>(x),
                                             static_cast<Eigen::Index>(y))) *
                                      scale);
            }
        }
        out.cross_bound_far = (scale > 0.0 ? cu / scale : 0.0) * int_far * int_q;
    }
    return out;
}

double TrialReport::c_part() const {
    double s = 0.0;
    for (const auto& p : pieces)
        if (!p.bound_carries_opnorm) s += p.bound;
    return s / mu_lambda_q0;
}

double TrialReport::t_coefficient() const {
    double s = 0.0;
    for (const auto& p : pieces)
        if (p.bound_carries_opnorm) s += p.bound;
    return s / mu_lambda_q0;
}

TrialContext make_trial_context(const DiscreteMeasure& mu, const DiscretizedOperator& op,
                                const AtomFn& f, const AtomFn& g, const FamilyStrategy& family,
                                const Params& prm, const Box& q0, double op_norm_value,
                                double maximal_norm_probe, std::uint64_t seed,
                                std::uint64_t trial_id) {
    TrialContext ctx;
    Rng rng = Rng(seed).fork("trial").fork(trial_id);
    Rng rw = rng.fork("w");
    Rng rwp = rng.fork("w-prime");
    Rng rds = rng.fork("d-star");
    Pt w = random_dyadic_shift(rw, prm.root_scale, mu.dim);
    Pt wp = random_dyadic_shift(rwp, prm.root_scale, mu.dim);
    Pt ws = random_dyadic_shift(rds, prm.root_scale, mu.dim);

    ctx.grid_t = std::make_unique<ShiftedDyadicGrid>(
        ShiftedDyadicGrid::build(w, prm.root_scale, prm.depth, mu.dim));
    ctx.grid_s = std::make_unique<ShiftedDyadicGrid>(
        ShiftedDyadicGrid::build(wp, prm.root_scale, prm.depth, mu.dim));
    ctx.grid_d = std::make_unique<ShiftedDyadicGrid>(
        ShiftedDyadicGrid::build(ws, prm.root_scale, prm.depth - prm.j_theta() + 1, mu.dim));

    ctx.gx_t = std::make_unique<GridIndex>(*ctx.grid_t, mu);
    ctx.gx_s = std::make_unique<GridIndex>(*ctx.grid_s, mu);
    FamilyStrategy strat_t = family, strat_s = family;
    strat_s.seed = family.seed + 0x51ed;  // independent signs on the T* side
    ctx.fam_t = std::make_unique<TestFunctionFamily>(
        TestFunctionFamily::make(strat_t, OpSide::T, *ctx.gx_t));
    ctx.fam_s = std::make_unique<TestFunctionFamily>(
        TestFunctionFamily::make(strat_s, OpSide::Tstar, *ctx.gx_s));
    ctx.constants = family_constants(ctx.fam_t.get(), ctx.fam_s.get(), op);
    ctx.calib_t = std::make_unique<CalibratedStopping>(build_stopping_calibrated(
        *ctx.gx_t, *ctx.fam_t, op, ctx.constants.A, ctx.constants.B, maximal_norm_probe));
    ctx.calib_s = std::make_unique<CalibratedStopping>(build_stopping_calibrated(
        *ctx.gx_s, *ctx.fam_s, op, ctx.constants.A, ctx.constants.B, maximal_norm_probe));
    ctx.dec_f = std::make_unique<MartingaleDecomposition>(expand(ctx.calib_t->tree, f));
    ctx.dec_g = std::make_unique<MartingaleDecomposition>(expand(ctx.calib_s->tree, g));

    ctx.scene.mu = &mu;
    ctx.scene.op = &op;
    ctx.scene.gx_t = ctx.gx_t.get();
    ctx.scene.gx_s = ctx.gx_s.get();
    ctx.scene.tree_t = &ctx.calib_t->tree;
    ctx.scene.tree_s = &ctx.calib_s->tree;
    ctx.scene.dec_f = ctx.dec_f.get();
    ctx.scene.dec_g = ctx.dec_g.get();
    ctx.scene.dstar_grid = ctx.grid_d.get();
    ctx.scene.prm = prm;
    ctx.scene.op_norm_value = op_norm_value;
    ctx.scene.q0 = q0;
    return ctx;
}

TrialReport full_trial(const DiscreteMeasure& mu, const DiscretizedOperator& op,
                       const AtomFn& f, const AtomFn& g, const FamilyStrategy& family,
                       const Params& prm, const Box& q0, double op_norm_value,
                       double maximal_norm_probe, std::uint64_t seed, std::uint64_t trial_id) {
    TrialReport rep;
    rep.trial = trial_id;
    TrialContext ctx = make_trial_context(mu, op, f, g, family, prm, q0, op_norm_value,
                                          maximal_norm_probe, seed, trial_id);
    PairScene& scene = ctx.scene;
    GridIndex& gx_t = *ctx.gx_t;
    GridIndex& gx_s = *ctx.gx_s;
    const FamilyConstants& fc = ctx.constants;
    const CalibratedStopping& calib_t = *ctx.calib_t;
    const CalibratedStopping& calib_s = *ctx.calib_s;
    MartingaleDecomposition& dec_f = *ctx.dec_f;
    MartingaleDecomposition& dec_g = *ctx.dec_g;
    const ShiftedDyadicGrid& grid_t = *ctx.grid_t;
    const ShiftedDyadicGrid& grid_s = *ctx.grid_s;

    rep.mu_lambda_q0 = scene.mu_lambda_q0();
    rep.depth_capped = calib_t.tree.depth_capped() || calib_s.tree.depth_capped();
    rep.pair_total = op.pair(f, g);

    PairBuckets buckets = split_pairs(scene);
    PieceImages images_t = apply_to_pieces(op, dec_f, false);
    PieceImages images_s = apply_to_pieces(op, dec_g, true);

    SeparatedResult sep = separated_sum(scene, buckets, images_t);
    SchurResult schur = schur_norm(scene, buckets);
    NestedResult nq = nested_sum(scene, buckets.nested_q, true, images_t);
    NestedResult nr = nested_sum(scene, buckets.nested_r, false, images_s);
    DiagonalResult diag =
        diagonal_sum(scene, buckets.diagonal, images_t, seed ^ (trial_id * 0x9e37ull + 1));
    BetaTail tails = beta_tail(scene);

    auto add = [&](std::string name, double value, double bound, bool carries) {
        rep.pieces.push_back({std::move(name), value, bound, carries});
    };
    add("separated", sep.value, sep.bound, false);
    add("nested-bad-f-deep", nq.bad_value, nq.bad_bound, true);
    add("nested-nonpara-f-deep", nq.nonpara_value, nq.nonpara_bound, false);
    add("paraproduct-f-deep", nq.para_value, nq.para_bound, false);
    add("nested-bad-g-deep", nr.bad_value, nr.bad_bound, true);
    add("nested-nonpara-g-deep", nr.nonpara_value, nr.nonpara_bound, false);
    add("paraproduct-g-deep", nr.para_value, nr.para_bound, false);
    add("diagonal", diag.value, diag.nine_sum_total, false);
    add("diagonal-surgery-opnorm", 0.0, diag.bad_term + diag.ring_term, true);
    add("beta-tail-f", tails.tail_f, tails.bound_f, true);
    add("beta-tail-mixed", tails.tail_mixed, tails.bound_mixed, true);
    add("beta-tail-g-root", -tails.tail_g_root, tails.bound_g_root, true);
    add("residual-f", tails.resid_f, tails.resid_f_bound, false);
    add("residual-g", tails.resid_g, tails.resid_g_bound, false);
    double g_avg_abs = std::abs(gx_s.avg(g, gx_s.root()));
    double f_avg_abs = std::abs(gx_t.avg(f, gx_t.root()));
    add("residual-cross", -tails.resid_cross, 0.0, false);
    add("residual-cross-inner-bound", 0.0, f_avg_abs * g_avg_abs * tails.cross_bound_inner,
        false);
    add("residual-cross-collar-bound", 0.0, f_avg_abs * g_avg_abs * tails.cross_bound_collar,
        true);
    add("residual-cross-far-bound", 0.0, f_avg_abs * g_avg_abs * tails.cross_bound_far, false);
    add("truncation-f", tails.truncation_f, 0.0, false);
    add("truncation-g", tails.truncation_g, 0.0, false);
    add("truncation-cross", -tails.truncation_cross, 0.0, false);

    double piece_sum = 0.0;
    for (const auto& p : rep.pieces) piece_sum += p.value;
    double scale = std::abs(rep.pair_total);
    for (const auto& p : rep.pieces) scale = std::max(scale, std::abs(p.value));
    scale = std::max(scale, 1e-300);
    rep.resummation_residual = std::abs(piece_sum - rep.pair_total) / scale;
    if (rep.resummation_residual > 1e-8)
        rep.failures.push_back("resummation residual above 1e-8");

    rep.stats["A"] = fc.A;
    rep.stats["B"] = fc.B;
    rep.stats["Mnorm-t"] = calib_t.thresholds.Mnorm;
    rep.stats["Mnorm-s"] = calib_s.thresholds.Mnorm;
    rep.stats["op-norm"] = op_norm_value;
    rep.stats["decay-t"] = calib_t.tree.check_decay();
    rep.stats["decay-s"] = calib_s.tree.check_decay();
    rep.stats["decay-limit"] = 1.0 - 1.0 / (8.0 * fc.A);
    rep.stats["carleson-t"] = calib_t.tree.check_carleson();
    rep.stats["carleson-s"] = calib_s.tree.check_carleson();
    rep.stats["carleson-limit"] = 8.0 * fc.A;
    rep.stats["recon-f"] = dec_f.reconstruction_residual();
    rep.stats["recon-g"] = dec_g.reconstruction_residual();
    rep.stats["pairs-separated"] = static_cast<double>(buckets.separated.size());
    rep.stats["pairs-nested"] =
        static_cast<double>(buckets.nested_q.size() + buckets.nested_r.size());
    rep.stats["pairs-diagonal"] = static_cast<double>(buckets.diagonal.size());
    rep.stats["schur-a-norm"] = schur.a_norm;
    rep.stats["schur-b-norm"] = schur.b_norm;
    rep.stats["separated-worst-c"] = sep.worst_pair_c;
    rep.stats["lemma42-worst"] = std::max(nq.lemma42_worst, nr.lemma42_worst);
    rep.stats["lemma43-worst"] = std::max(nq.lemma43_worst, nr.lemma43_worst);
    rep.stats["para-pair-vs-telescoped-f"] = std::abs(nq.para_value - nq.para_value_telescoped);
    rep.stats["para-pair-vs-telescoped-g"] = std::abs(nr.para_value - nr.para_value_telescoped);
    rep.stats["eps-coeff-worst"] = std::max(nq.eps_coeff_worst, nr.eps_coeff_worst);
    rep.stats["missing-h"] = static_cast<double>(nq.missing_h + nr.missing_h);
    rep.stats["child-check-failures"] =
        static_cast<double>(nq.child_check_failures + nr.child_check_failures);
    rep.stats["diag-max-neighbors"] = static_cast<double>(diag.max_neighbors);
    rep.stats["diag-sampled"] = static_cast<double>(diag.sampled);
    rep.stats["diag-partition-failures"] = static_cast<double>(diag.partition_failures);
    rep.stats["diag-containment-failures"] = static_cast<double>(diag.containment_failures);
    rep.stats["diag-five-l-failures"] = static_cast<double>(diag.five_l_failures);
    rep.stats["diag-theta-resum"] = diag.theta_resum_residual;
    rep.stats["diag-sigma-resum"] = diag.sigma_resum_residual;
    rep.stats["diag-sep-constant"] = diag.sep_constant;
    rep.stats["diag-mid-constant"] = diag.mid_constant;
    rep.stats["diag-lemma55"] = diag.lemma55_ceiling;
    rep.stats["diag-matched-cells"] = static_cast<double>(diag.matched_cells);
    rep.stats["diag-max-matched"] = static_cast<double>(diag.max_matched_per_pairing);
    for (int bi = 0; bi < 3; ++bi) {
        rep.stats["diag-prereq-f-" + std::to_string(bi)] = diag.prereq_f[bi];
        rep.stats["diag-prereq-g-" + std::to_string(bi)] = diag.prereq_g[bi];
    }
    rep.stats["depth-capped"] = rep.depth_capped ? 1.0 : 0.0;
    rep.stats["lambda-contains-roots"] =
        (q0.scaled(prm.lambda).contains_box(grid_t.root_box()) &&
         q0.scaled(prm.lambda).contains_box(grid_s.root_box()))
            ? 1.0
            : 0.0;
    if (nq.child_check_failures + nr.child_check_failures > 0)
        rep.failures.push_back("good nested pair without the guaranteed child");
    if (diag.partition_failures > 0) rep.failures.push_back("theta surgery partition failure");
    if (diag.five_l_failures > 0) rep.failures.push_back("5L containment failure");
    if (diag.containment_failures > 0)
        rep.failures.push_back("Q_{i,boundary} escaped Q_{i,bad}");
    double tele_tol = 1e-8 * std::max(1.0, std::abs(rep.pair_total));
    if (std::max(rep.stats["para-pair-vs-telescoped-f"],
                 rep.stats["para-pair-vs-telescoped-g"]) > tele_tol)
        rep.failures.push_back("paraproduct telescoping mismatch");
    return rep;
}

}  // namespace nht
