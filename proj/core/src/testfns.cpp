#include "nht/testfns.hpp"

#include <cmath>
#include <fstream>

#include <nlohmann/json.hpp>

#include "nht/rng.hpp"

namespace nht {

FamilyStrategy FamilyStrategy::perturbed(double eta, std::uint64_t seed) {
    FamilyStrategy s;
    s.kind = Kind::Perturbed;
    s.eta = eta;
    s.seed = seed;
    return s;
}

FamilyStrategy FamilyStrategy::custom(std::string file) {
    FamilyStrategy s;
    s.kind = Kind::Custom;
    s.file = std::move(file);
    return s;
}

namespace {

double sign_for(std::uint64_t seed, int node, int atom) {
    return Rng(seed).fork("family-signs").fork(static_cast<std::uint64_t>(node)).fork(
               static_cast<std::uint64_t>(atom))
                   .next_unit() < 0.5
               ? -1.0
               : 1.0;
}

}  // namespace

TestFunctionFamily TestFunctionFamily::make(FamilyStrategy strategy, OpSide side,
                                            const GridIndex& gx) {
    if (strategy.kind == FamilyStrategy::Kind::Perturbed && !(strategy.eta <= 0.5))
        throw std::invalid_argument("perturbed family requires eta <= 1/2");

    TestFunctionFamily fam;
    fam.side_ = side;
    fam.gx_ = &gx;
    fam.recipe_ = strategy;
    fam.vals_.resize(gx.node_count());
    fam.lo_.resize(gx.node_count());

    const auto& mu = gx.measure();

    // Custom records keyed by (generation, index tuple).
    std::map<std::pair<int, CubeIdx>, std::map<int, double>> custom;
    if (strategy.kind == FamilyStrategy::Kind::Custom) {
        std::ifstream in(strategy.file);
        if (!in) throw std::runtime_error("cannot open family file: " + strategy.file);
        nlohmann::json j;
        in >> j;
        for (const auto& rec : j.at("cubes")) {
            CubeIdx idx{};
            const auto& ia = rec.at("index");
            for (std::size_t k = 0; k < ia.size() && k < kMaxDim; ++k)
                idx[k] = ia[k].get<std::int64_t>();
            std::map<int, double> vals;
            for (const auto& pair : rec.at("values")) vals[pair.at(0).get<int>()] = pair.at(1).get<double>();
            custom[{rec.at("generation").get<int>(), idx}] = std::move(vals);
        }
    }

    for (int id = 0; id < gx.node_count(); ++id) {
        const auto& nd = gx.node(id);
        fam.lo_[id] = nd.lo;
        std::vector<double> v(static_cast<std::size_t>(nd.hi - nd.lo), 1.0);
        switch (strategy.kind) {
            case FamilyStrategy::Kind::Indicator:
                break;
            case FamilyStrategy::Kind::Perturbed:
                for (int s = nd.lo; s < nd.hi; ++s)
                    v[s - nd.lo] = 1.0 + strategy.eta * sign_for(strategy.seed, id, gx.atom_at(s));
                break;
            case FamilyStrategy::Kind::Custom: {
                auto it = custom.find({nd.gen, nd.idx});
                if (it != custom.end()) {
                    for (int s = nd.lo; s < nd.hi; ++s) {
                        auto vit = it->second.find(gx.atom_at(s));
                        v[s - nd.lo] = vit != it->second.end() ? vit->second : 0.0;
                    }
                }
                break;
            }
        }
        // Normalise to <b_Q>_Q = 1.
        double num = 0.0;
        for (int s = nd.lo; s < nd.hi; ++s) num += v[s - nd.lo] * mu.weight[gx.atom_at(s)];
        double mean = num / nd.mass;
        if (mean == 0.0)
            throw std::invalid_argument("non-accretive family: <b_Q>_Q = 0 on a stored cube");
        for (auto& x : v) x /= mean;
        fam.vals_[id] = std::move(v);
    }
    return fam;
}

AtomFn TestFunctionFamily::as_atomfn(int node) const {
    AtomFn f(gx_->measure().size(), 0.0);
    const auto& nd = gx_->node(node);
    for (int s = nd.lo; s < nd.hi; ++s) f[gx_->atom_at(s)] = vals_[node][s - nd.lo];
    return f;
}

double TestFunctionFamily::avg_on(int fn_node, int sub_node) const {
    const auto& nd = gx_->node(sub_node);
    const auto& mu = gx_->measure();
    double num = 0.0;
    for (int s = nd.lo; s < nd.hi; ++s) num += value_at_slot(fn_node, s) * mu.weight[gx_->atom_at(s)];
    return num / nd.mass;
}

double TestFunctionFamily::l2sq_on(int fn_node, int sub_node) const {
    const auto& nd = gx_->node(sub_node);
    const auto& mu = gx_->measure();
    double num = 0.0;
    for (int s = nd.lo; s < nd.hi; ++s) {
        double v = value_at_slot(fn_node, s);
        num += v * v * mu.weight[gx_->atom_at(s)];
    }
    return num;
}

AtomFn TestFunctionFamily::make_for_box(const Box& b) const {
    const auto& mu = gx_->measure();
    std::vector<int> atoms;
    for (std::size_t a = 0; a < mu.size(); ++a)
        if (b.contains(mu.atoms[a])) atoms.push_back(static_cast<int>(a));
    return make_for_atoms(atoms);
}

AtomFn TestFunctionFamily::make_for_atoms(const std::vector<int>& atoms) const {
    const auto& mu = gx_->measure();
    AtomFn f(mu.size(), 0.0);
    double num = 0.0, mass = 0.0;
    for (int a : atoms) {
        double v = 1.0;
        if (recipe_.kind == FamilyStrategy::Kind::Perturbed)
            v = 1.0 + recipe_.eta * sign_for(recipe_.seed, -1, a);
        f[a] = v;
        num += v * mu.weight[a];
        mass += mu.weight[a];
    }
    if (mass == 0.0) return f;  // callers skip zero-mass boxes
    double mean = num / mass;
    for (int a : atoms) f[a] /= mean;
    return f;
}

double TestFunctionFamily::maximal_ratio_on(const std::vector<int>& nodes) const {
    const auto& mu = gx_->measure();
    double best = 0.0;
    for (int id : nodes) {
        AtomFn b = as_atomfn(id);
        double denom = lp_norm(mu, b, 2.0);
        if (!(denom > 0.0)) continue;
        best = std::max(best, lp_norm(mu, centred_maximal(mu, b), 2.0) / denom);
    }
    return best;
}

namespace {

/// ||1_Q T b_Q||^2 with b supported in Q: local kernel sums over Q's atoms.
double testing_l2sq(const TestFunctionFamily& fam, const DiscretizedOperator& op, int node,
                    bool adjoint) {
    const auto& gx = fam.index();
    const auto& mu = gx.measure();
    const auto& K = op.kernel_matrix();
    const auto& nd = gx.node(node);
    double total = 0.0;
    for (int si = nd.lo; si < nd.hi; ++si) {
        int i = gx.atom_at(si);
        double acc = 0.0;
        for (int sj = nd.lo; sj < nd.hi; ++sj) {
            int j = gx.atom_at(sj);
            double k = adjoint ? K(j, i) : K(i, j);
            acc += k * mu.weight[j] * fam.value_at_slot(node, sj);
        }
        total += acc * acc * mu.weight[i];
    }
    return total;
}

}  // namespace

FamilyConstants family_constants(const TestFunctionFamily* fam_t,
                                 const TestFunctionFamily* fam_tstar,
                                 const DiscretizedOperator& op) {
    FamilyConstants out;
    out.A = 0.0;
    bool same_grid = fam_t && fam_tstar && &fam_t->index() == &fam_tstar->index();

    auto ratios = [&](const TestFunctionFamily& fam, bool adjoint, std::vector<double>& a,
                      std::vector<double>& b) {
        const auto& gx = fam.index();
        a.assign(gx.node_count(), 0.0);
        b.assign(gx.node_count(), 0.0);
        for (int id = 0; id < gx.node_count(); ++id) {
            double mass = gx.mass(id);
            a[id] = fam.l2sq(id) / mass;
            b[id] = testing_l2sq(fam, op, id, adjoint) / mass;
        }
    };

    std::vector<double> at, bt, as, bs;
    if (fam_t) ratios(*fam_t, /*adjoint=*/false, at, bt);
    if (fam_tstar) ratios(*fam_tstar, /*adjoint=*/true, as, bs);

    if (same_grid) {
        for (std::size_t i = 0; i < at.size(); ++i) {
            out.A = std::max(out.A, at[i] + as[i]);
            out.B = std::max(out.B, bt[i] + bs[i]);
        }
    } else {
        for (double v : at) out.A = std::max(out.A, v);
        for (double v : as) out.A = std::max(out.A, v);
        for (double v : bt) out.B = std::max(out.B, v);
        for (double v : bs) out.B = std::max(out.B, v);
    }
    if (out.A < 1.0) out.A = 1.0;  // Cauchy-Schwarz lower bound; guards rounding
    return out;
}

}  // namespace nht
