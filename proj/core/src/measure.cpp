#include "nht/measure.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>

#include <nlohmann/json.hpp>

#include "nht/rng.hpp"

namespace nht {

double DiscreteMeasure::total_mass() const {
    return std::accumulate(weight.begin(), weight.end(), 0.0);
}

void DiscreteMeasure::validate() const {
    if (atoms.size() != weight.size()) throw std::invalid_argument("atoms/weights length mismatch");
    if (atoms.empty()) throw std::invalid_argument("measure has no atoms");
    for (double w : weight)
        if (!(w > 0.0)) throw std::invalid_argument("atom weights must be strictly positive");
    for (std::size_t i = 0; i < atoms.size(); ++i)
        for (std::size_t j = i + 1; j < atoms.size(); ++j)
            if (dist(atoms[i], atoms[j], dim) == 0.0)
                throw std::invalid_argument("atom points must be pairwise distinct");
    if (!(total_mass() > 0.0)) throw std::invalid_argument("total mass must be positive");
}

double DiscreteMeasure::mass_in(const Box& b) const {
    double s = 0.0;
    for (std::size_t i = 0; i < atoms.size(); ++i)
        if (b.contains(atoms[i])) s += weight[i];
    return s;
}

double DiscreteMeasure::mass_where(const std::function<bool(const Pt&)>& pred) const {
    double s = 0.0;
    for (std::size_t i = 0; i < atoms.size(); ++i)
        if (pred(atoms[i])) s += weight[i];
    return s;
}

double integral(const DiscreteMeasure& mu, const AtomFn& f, const Box& q) {
    double s = 0.0;
    for (std::size_t i = 0; i < mu.atoms.size(); ++i)
        if (q.contains(mu.atoms[i])) s += f[i] * mu.weight[i];
    return s;
}

double average(const DiscreteMeasure& mu, const AtomFn& f, const Box& q) {
    double m = mu.mass_in(q);
    if (!(m > 0.0)) throw EmptyCubeError("average over a cube of zero mass");
    return integral(mu, f, q) / m;
}

double inner(const DiscreteMeasure& mu, const AtomFn& f, const AtomFn& g) {
    double s = 0.0;
    for (std::size_t i = 0; i < mu.size(); ++i) s += f[i] * g[i] * mu.weight[i];
    return s;
}

double lp_norm(const DiscreteMeasure& mu, const AtomFn& h, double p) {
    if (!(p >= 1.0)) throw std::invalid_argument("p must be in [1, inf)");
    double s = 0.0;
    for (std::size_t i = 0; i < mu.size(); ++i) s += std::pow(std::abs(h[i]), p) * mu.weight[i];
    return std::pow(s, 1.0 / p);
}

double weak_lp_quasinorm(const DiscreteMeasure& mu, const AtomFn& h, double p) {
    if (!(p >= 1.0)) throw std::invalid_argument("p must be in [1, inf)");
    // Sort levels descending and accumulate mass of {|h| >= v}.
    std::vector<int> order(mu.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(),
              [&](int a, int b) { return std::abs(h[a]) > std::abs(h[b]); });
    double mass = 0.0, best = 0.0;
    for (std::size_t k = 0; k < order.size();) {
        double v = std::abs(h[order[k]]);
        if (v == 0.0) break;
        while (k < order.size() && std::abs(h[order[k]]) == v) mass += mu.weight[order[k++]];
        best = std::max(best, v * std::pow(mass, 1.0 / p));
    }
    return best;
}

GrowthReport verify_growth(const DiscreteMeasure& mu) {
    GrowthReport rep;
    const std::size_t n = mu.size();
    std::vector<std::pair<double, double>> dw(n);  // (distance, weight), sorted
    double diam = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            dw[j] = {dist(mu.atoms[i], mu.atoms[j], mu.dim), mu.weight[j]};
            diam = std::max(diam, dw[j].first);
        }
    }
    double r0 = mu.r_min > 0.0 ? mu.r_min : (diam > 0.0 ? diam / 1024.0 : 1.0);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j)
            dw[j] = {dist(mu.atoms[i], mu.atoms[j], mu.dim), mu.weight[j]};
        std::sort(dw.begin(), dw.end());
        std::vector<double> prefix(n);
        double acc = 0.0;
        for (std::size_t j = 0; j < n; ++j) prefix[j] = (acc += dw[j].second);
        for (double r = r0; r * 0.5 <= std::max(diam, r0); r *= 2.0) {
            // Closed-ball mass: atoms with distance <= r.
            auto it = std::upper_bound(dw.begin(), dw.end(), std::make_pair(r, std::numeric_limits<double>::infinity()));
            double mass = it == dw.begin() ? 0.0 : prefix[std::distance(dw.begin(), it) - 1];
            if (mass == 0.0) continue;
            double ratio = mass / std::pow(r, mu.growth_m);
            ++rep.radii_tested;
            if (ratio > rep.c_mu) {
                rep.c_mu = ratio;
                rep.worst_center = mu.atoms[i];
                rep.worst_radius = r;
            }
        }
    }
    return rep;
}

namespace {

double maximal_at_centre(const DiscreteMeasure& mu, const AtomFn& h, const Pt& centre,
                         std::vector<std::pair<double, int>>& scratch) {
    const std::size_t n = mu.size();
    scratch.resize(n);
    for (std::size_t j = 0; j < n; ++j)
        scratch[j] = {dist(centre, mu.atoms[j], mu.dim), static_cast<int>(j)};
    std::sort(scratch.begin(), scratch.end());
    double best = 0.0, mass = 0.0, num = 0.0;
    std::size_t j = 0;
    while (j < n) {
        double r = scratch[j].first;
        while (j < n && scratch[j].first == r) {
            int a = scratch[j].second;
            mass += mu.weight[a];
            num += std::abs(h[a]) * mu.weight[a];
            ++j;
        }
        best = std::max(best, num / mass);
    }
    return best;
}

}  // namespace

AtomFn centred_maximal(const DiscreteMeasure& mu, const AtomFn& h) {
    // The sup over r > 0 of closed-ball averages of |h| is attained on the
    // finite set of atom distances (the averages are step functions in r).
    AtomFn out(mu.size(), 0.0);
    std::vector<std::pair<double, int>> scratch;
    for (std::size_t i = 0; i < mu.size(); ++i)
        out[i] = maximal_at_centre(mu, h, mu.atoms[i], scratch);
    return out;
}

std::vector<double> centred_maximal_at(const DiscreteMeasure& mu, const AtomFn& h,
                                       std::span<const int> centres) {
    std::vector<double> out(centres.size(), 0.0);
    std::vector<std::pair<double, int>> scratch;
    for (std::size_t k = 0; k < centres.size(); ++k)
        out[k] = maximal_at_centre(mu, h, mu.atoms[centres[k]], scratch);
    return out;
}

MaximalNormReport maximal_op_norm(const DiscreteMeasure& mu, int random_probes,
                                  std::uint64_t seed) {
    MaximalNormReport rep;
    const std::size_t n = mu.size();
    std::vector<AtomFn> probes;
    probes.emplace_back(n, 1.0);  // constants give ratio 1 exactly
    // Indicators of the heaviest atoms.
    std::vector<int> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](int a, int b) { return mu.weight[a] > mu.weight[b]; });
    int picks = static_cast<int>(std::min<std::size_t>(n, 48));
    for (int k = 0; k < picks; ++k) {
        AtomFn e(n, 0.0);
        e[order[k]] = 1.0;
        probes.push_back(std::move(e));
    }
    // A positive combination of the picked indicators.
    AtomFn combo(n, 0.0);
    for (int k = 0; k < picks; ++k) combo[order[k]] = 1.0 / (1.0 + k);
    probes.push_back(std::move(combo));
    Rng rng = Rng(seed).fork("maximal-op-norm");
    for (int k = 0; k < random_probes; ++k) {
        AtomFn f(n);
        for (auto& v : f) v = rng.next_unit();
        probes.push_back(std::move(f));
    }
    double best = 1.0;  // constants already realise 1
    for (const auto& hfn : probes) {
        double denom = lp_norm(mu, hfn, 2.0);
        if (!(denom > 0.0)) continue;
        double val = lp_norm(mu, centred_maximal(mu, hfn), 2.0) / denom;
        best = std::max(best, val);
    }
    rep.norm = best;
    rep.probes = static_cast<int>(probes.size());
    return rep;
}

AtomFn dyadic_maximal(const DiscreteMeasure& mu, const AtomFn& h, const GridIndex& gx) {
    AtomFn out(mu.size(), 0.0);
    // Running maxima propagate down the positive-mass tree (node ids are in
    // generation-major order, so parents precede children).
    std::vector<double> running(gx.node_count(), 0.0);
    for (int id = 0; id < gx.node_count(); ++id) {
        const auto& nd = gx.node(id);
        double own = gx.abs_avg(h, id);
        running[id] = nd.parent >= 0 ? std::max(running[nd.parent], own) : own;
    }
    for (std::size_t a = 0; a < mu.size(); ++a) {
        int leaf = gx.leaf_of_atom(static_cast<int>(a));
        if (leaf >= 0) out[a] = running[leaf];
    }
    return out;
}

GridIndex::GridIndex(const ShiftedDyadicGrid& grid, const DiscreteMeasure& mu)
    : grid_(&grid), mu_(&mu) {
    const int n = static_cast<int>(mu.size());
    const int dim = grid.dim();
    const int depth = grid.depth();
    Box rb = grid.root_box();

    // Finest-generation index per atom; atoms outside the root are excluded.
    std::vector<CubeIdx> fine(n);
    std::vector<int> inside;
    inside.reserve(n);
    for (int a = 0; a < n; ++a) {
        if (!rb.contains(mu.atoms[a])) {
            outside_.push_back(a);
            continue;
        }
        auto c = grid.locate(mu.atoms[a], depth);
        fine[a] = c->idx;
        inside.push_back(a);
    }

    // Dyadic order: lexicographic in the child-key path from the root.
    auto child_key = [&](const CubeIdx& ix, int gen_from_finest) {
        int key = 0;
        for (int j = 0; j < dim; ++j) key |= static_cast<int>((ix[j] >> gen_from_finest) & 1) << j;
        return key;
    };
    std::sort(inside.begin(), inside.end(), [&](int a, int b) {
        for (int g = depth - 1; g >= 0; --g) {
            int ka = child_key(fine[a], g), kb = child_key(fine[b], g);
            if (ka != kb) return ka < kb;
        }
        return a < b;
    });
    perm_ = inside;
    leaf_of_atom_.assign(n, -1);

    // Build nodes generation by generation; each node's atoms are contiguous.
    struct Pending {
        int gen;
        CubeIdx idx;
        int parent;
        int lo, hi;
    };
    std::vector<Pending> frontier;
    gen_begin_.assign(depth + 2, 0);
    if (!perm_.empty()) {
        CubeIdx root_idx{};
        frontier.push_back({0, root_idx, -1, 0, static_cast<int>(perm_.size())});
    }
    for (int g = 0; g <= depth; ++g) {
        gen_begin_[g] = static_cast<int>(nodes_.size());
        std::vector<Pending> next;
        for (auto& pend : frontier) {
            Node nd;
            nd.gen = pend.gen;
            nd.idx = pend.idx;
            nd.parent = pend.parent;
            nd.lo = pend.lo;
            nd.hi = pend.hi;
            double mass = 0.0;
            for (int s = pend.lo; s < pend.hi; ++s) mass += mu.weight[perm_[s]];
            nd.mass = mass;
            int id = static_cast<int>(nodes_.size());
            nodes_.push_back(nd);
            if (g == depth) {
                for (int s = pend.lo; s < pend.hi; ++s) leaf_of_atom_[perm_[s]] = id;
                if (pend.hi - pend.lo > 1) separates_ = false;
                continue;
            }
            // Split the range by child key at this generation.
            int shift_bits = depth - g - 1;
            int s = pend.lo;
            while (s < pend.hi) {
                int key = child_key(fine[perm_[s]], shift_bits);
                int e = s;
                while (e < pend.hi && child_key(fine[perm_[e]], shift_bits) == key) ++e;
                CubeIdx cidx;
                for (int j = 0; j < dim; ++j)
                    cidx[j] = 2 * pend.idx[j] + ((key >> j) & 1);
                next.push_back({g + 1, cidx, id, s, e});
                s = e;
            }
        }
        // Wire child links: children of a node are consecutive in `next`.
        int base = static_cast<int>(nodes_.size());
        for (std::size_t k = 0; k < next.size(); ++k) {
            Node& parent = nodes_[next[k].parent];
            if (parent.n_children == 0) parent.first_child = base + static_cast<int>(k);
            ++parent.n_children;
        }
        frontier = std::move(next);
    }
    gen_begin_[depth + 1] = static_cast<int>(nodes_.size());
    // Interior atoms inherit the deepest node on their chain (always set at
    // generation `depth` above).
}

namespace {

/// Dyadic path order of two same-generation indices: lexicographic in the
/// per-level child keys from the root (the order GridIndex nodes are built in).
bool path_less(int gen, int dim, const CubeIdx& a, const CubeIdx& b) {
    for (int level = gen - 1; level >= 0; --level) {
        int ka = 0, kb = 0;
        for (int j = 0; j < dim; ++j) {
            ka |= static_cast<int>((a[j] >> level) & 1) << j;
            kb |= static_cast<int>((b[j] >> level) & 1) << j;
        }
        if (ka != kb) return ka < kb;
    }
    return false;
}

}  // namespace

std::optional<int> GridIndex::find(int gen, const CubeIdx& idx) const {
    if (gen < 0 || gen > grid_->depth()) return std::nullopt;
    int lo = gen_begin_[gen], hi = gen_begin_[gen + 1];
    int dim = grid_->dim();
    while (lo < hi) {
        int mid = lo + (hi - lo) / 2;
        if (nodes_[mid].idx == idx) return mid;
        if (path_less(gen, dim, nodes_[mid].idx, idx))
            lo = mid + 1;
        else
            hi = mid;
    }
    return std::nullopt;
}

std::optional<int> GridIndex::find(const Cube& c) const {
    if (c.grid != grid_) return std::nullopt;
    return find(c.gen, c.idx);
}

int GridIndex::node_of_atom_at_gen(int atom, int gen) const {
    int id = leaf_of_atom_[atom];
    while (id >= 0 && nodes_[id].gen > gen) id = nodes_[id].parent;
    return (id >= 0 && nodes_[id].gen == gen) ? id : -1;
}

std::pair<int, int> GridIndex::gen_span(int gen) const {
    if (gen < 0 || gen > grid_->depth()) return {0, 0};
    return {gen_begin_[gen], gen_begin_[gen + 1]};
}

double GridIndex::avg(const AtomFn& f, int id) const { return sum(f, id) / nodes_[id].mass; }

double GridIndex::sum(const AtomFn& f, int id) const {
    const Node& nd = nodes_[id];
    double s = 0.0;
    for (int slot = nd.lo; slot < nd.hi; ++slot) {
        int a = perm_[slot];
        s += f[a] * mu_->weight[a];
    }
    return s;
}

double GridIndex::l2sq(const AtomFn& f, int id) const {
    const Node& nd = nodes_[id];
    double s = 0.0;
    for (int slot = nd.lo; slot < nd.hi; ++slot) {
        int a = perm_[slot];
        s += f[a] * f[a] * mu_->weight[a];
    }
    return s;
}

double GridIndex::abs_avg(const AtomFn& f, int id) const {
    const Node& nd = nodes_[id];
    double s = 0.0;
    for (int slot = nd.lo; slot < nd.hi; ++slot) {
        int a = perm_[slot];
        s += std::abs(f[a]) * mu_->weight[a];
    }
    return s / nd.mass;
}

DiscreteMeasure uniform_measure(const Box& support, int n_atoms, double m, std::uint64_t seed,
                                bool random_weights) {
    Rng rng = Rng(seed).fork("uniform-measure");
    DiscreteMeasure mu;
    mu.dim = support.dim;
    mu.growth_m = m;
    mu.atoms.reserve(n_atoms);
    mu.weight.reserve(n_atoms);
    for (int i = 0; i < n_atoms; ++i) {
        Pt p{};
        for (int j = 0; j < support.dim; ++j) p[j] = rng.uniform(support.lo[j], support.hi[j]);
        mu.atoms.push_back(p);
        mu.weight.push_back(random_weights ? (0.25 + rng.next_unit()) / n_atoms : 1.0 / n_atoms);
    }
    return mu;
}

DiscreteMeasure lattice_measure(const Box& support, int per_axis, double m, std::uint64_t seed,
                                bool jitter_weights) {
    Rng rng = Rng(seed).fork("lattice-measure");
    DiscreteMeasure mu;
    mu.dim = support.dim;
    mu.growth_m = m;
    std::int64_t total = 1;
    for (int j = 0; j < support.dim; ++j) total *= per_axis;
    for (std::int64_t k = 0; k < total; ++k) {
        Pt p{};
        std::int64_t rem = k;
        for (int j = 0; j < support.dim; ++j) {
            auto i = rem % per_axis;
            rem /= per_axis;
            p[j] = support.lo[j] + (static_cast<double>(i) + 0.5) / per_axis * support.side(j);
        }
        mu.atoms.push_back(p);
        double w = 1.0 / static_cast<double>(total);
        if (jitter_weights) w *= 0.5 + rng.next_unit();
        mu.weight.push_back(w);
    }
    mu.r_min = support.side(0) / per_axis;
    return mu;
}

DiscreteMeasure cantor_measure(int level, double ratio, int dim, double m) {
    if (!(ratio > 0.0 && ratio < 0.5)) throw std::invalid_argument("cantor ratio outside (0, 1/2)");
    // 1-D construction on [-1/2, 1/2); higher dimensions take products.
    std::vector<double> xs = {-0.5};
    double len = 1.0;
    for (int l = 0; l < level; ++l) {
        std::vector<double> nxt;
        nxt.reserve(xs.size() * 2);
        for (double x : xs) {
            nxt.push_back(x);
            nxt.push_back(x + len * (1.0 - ratio));
        }
        xs = std::move(nxt);
        len *= ratio;
    }
    DiscreteMeasure mu;
    mu.dim = dim;
    mu.growth_m = m;
    std::int64_t total = 1;
    for (int j = 0; j < dim; ++j) total *= static_cast<std::int64_t>(xs.size());
    for (std::int64_t k = 0; k < total; ++k) {
        Pt p{};
        std::int64_t rem = k;
        for (int j = 0; j < dim; ++j) {
            p[j] = xs[rem % xs.size()] + 0.5 * len;  // centre of the surviving interval
            rem /= static_cast<std::int64_t>(xs.size());
        }
        mu.atoms.push_back(p);
        mu.weight.push_back(1.0 / static_cast<double>(total));
    }
    mu.r_min = len;
    return mu;
}

DiscreteMeasure point_mixture_measure(const Box& support, int n_uniform, int n_heavy,
                                      double heavy_mass, double m, std::uint64_t seed) {
    DiscreteMeasure mu = uniform_measure(support, n_uniform, m, seed);
    Rng rng = Rng(seed).fork("mixture-heavy");
    double w = heavy_mass / std::max(1, n_heavy);
    for (int i = 0; i < n_heavy; ++i) {
        Pt p{};
        for (int j = 0; j < support.dim; ++j) p[j] = rng.uniform(support.lo[j], support.hi[j]);
        mu.atoms.push_back(p);
        mu.weight.push_back(w);
    }
    return mu;
}

DiscreteMeasure load_measure(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open measure file: " + path);
    nlohmann::json j;
    in >> j;
    DiscreteMeasure mu;
    mu.dim = j.at("dimension").get<int>();
    mu.growth_m = j.at("m").get<double>();
    if (j.contains("r_min")) mu.r_min = j["r_min"].get<double>();
    for (const auto& rec : j.at("atoms")) {
        Pt p{};
        const auto& coords = rec.at(0);
        for (std::size_t k = 0; k < coords.size() && k < kMaxDim; ++k)
            p[k] = coords[k].get<double>();
        mu.atoms.push_back(p);
        mu.weight.push_back(rec.at(1).get<double>());
    }
    mu.validate();
    return mu;
}

void save_measure(const DiscreteMeasure& mu, const std::string& path) {
    nlohmann::json atoms = nlohmann::json::array();
    for (std::size_t i = 0; i < mu.size(); ++i) {
        nlohmann::json coords = nlohmann::json::array();
        for (int j = 0; j < mu.dim; ++j) coords.push_back(mu.atoms[i][j]);
        atoms.push_back({coords, mu.weight[i]});
    }
    nlohmann::json j{{"dimension", mu.dim}, {"m", mu.growth_m}, {"r_min", mu.r_min}, {"atoms", atoms}};
    std::ofstream out(path);
    out << j.dump(1) << "\n";
}

}  // namespace nht
