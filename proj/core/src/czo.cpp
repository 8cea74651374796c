#include "nht/czo.hpp"

#include <cmath>
#include <fstream>

#include <Eigen/SVD>

#include "nht/rng.hpp"

namespace nht {

KernelSpec cauchy_kernel() {
    KernelSpec k;
    k.name = "cauchy";
    k.dim = 1;
    k.m = 1.0;
    k.alpha = 1.0;
    k.C = 2.0;
    k.size_exponent = 1.0;
    k.antisymmetric = true;
    k.eval = [](const Pt& x, const Pt& y) { return 1.0 / (x[0] - y[0]); };
    return k;
}

KernelSpec riesz_kernel(int dim, double m) {
    KernelSpec k;
    k.name = "riesz";
    k.dim = dim;
    k.m = m;
    k.alpha = 1.0;
    k.C = 8.0;
    k.size_exponent = m;
    k.antisymmetric = true;
    k.eval = [dim, m](const Pt& x, const Pt& y) {
        double r = dist(x, y, dim);
        return (x[0] - y[0]) / std::pow(r, m + 1.0);
    };
    return k;
}

KernelSpec zero_kernel(int dim) {
    KernelSpec k;
    k.name = "zero";
    k.dim = dim;
    k.m = 1.0;
    k.alpha = 1.0;
    k.C = 1.0;
    k.size_exponent = 1.0;
    k.antisymmetric = true;
    k.eval = [](const Pt&, const Pt&) { return 0.0; };
    return k;
}

namespace {

void check_triple(StandardnessReport& rep, const KernelSpec& k, const DiscreteMeasure& mu,
                  int xi, int xpi, int yi) {
    const Pt &x = mu.atoms[xi], &xp = mu.atoms[xpi], &y = mu.atoms[yi];
    double dxy = dist(x, y, mu.dim);
    double dxxp = dist(x, xp, mu.dim);
    if (dxy == 0.0 || dxxp == 0.0) throw std::invalid_argument("kernel check at coincident points");
    double kxy = k(x, y);
    rep.size_ratio = std::max(rep.size_ratio, std::abs(kxy) * std::pow(dxy, k.size_exponent) / k.C);
    if (dxy >= 2.0 * dxxp) {
        double num = std::abs(kxy - k(xp, y)) * std::pow(dxy, k.m + k.alpha);
        rep.holder_x_ratio = std::max(rep.holder_x_ratio, num / (k.C * std::pow(dxxp, k.alpha)));
        // Same configuration read as (y, y') for the second smoothness bound:
        // |K(y, x) - K(y, x')| with |y - x| >= 2 |x - x'|.
        double numy = std::abs(k(y, x) - k(y, xp)) * std::pow(dxy, k.m + k.alpha);
        rep.holder_y_ratio = std::max(rep.holder_y_ratio, numy / (k.C * std::pow(dxxp, k.alpha)));
    }
    ++rep.samples;
}

}  // namespace

StandardnessReport verify_standard(const KernelSpec& k, const DiscreteMeasure& mu,
                                   int samples, std::uint64_t seed) {
    if (samples < 1) throw std::invalid_argument("samples must be >= 1");
    StandardnessReport rep;
    Rng rng = Rng(seed).fork("verify-standard");
    const auto n = static_cast<std::uint64_t>(mu.size());
    if (n < 3) return rep;
    int produced = 0;
    int guard = 0;
    while (produced < samples && guard < samples * 64) {
        ++guard;
        int xi = static_cast<int>(rng.next_below(n));
        int xpi = static_cast<int>(rng.next_below(n));
        int yi = static_cast<int>(rng.next_below(n));
        if (xi == xpi || xi == yi || xpi == yi) continue;
        if (dist(mu.atoms[xi], mu.atoms[yi], mu.dim) <
            2.0 * dist(mu.atoms[xi], mu.atoms[xpi], mu.dim))
            continue;
        check_triple(rep, k, mu, xi, xpi, yi);
        ++produced;
    }
    return rep;
}

StandardnessReport verify_standard_exhaustive(const KernelSpec& k, const DiscreteMeasure& mu) {
    StandardnessReport rep;
    const int n = static_cast<int>(mu.size());
    for (int xi = 0; xi < n; ++xi)
        for (int xpi = 0; xpi < n; ++xpi)
            for (int yi = 0; yi < n; ++yi) {
                if (xi == xpi || xi == yi || xpi == yi) continue;
                if (dist(mu.atoms[xi], mu.atoms[yi], mu.dim) <
                    2.0 * dist(mu.atoms[xi], mu.atoms[xpi], mu.dim))
                    continue;
                check_triple(rep, k, mu, xi, xpi, yi);
            }
    return rep;
}

DiscretizedOperator::DiscretizedOperator(const KernelSpec& k, const DiscreteMeasure& mu)
    : mu_(&mu) {
    const auto n = static_cast<Eigen::Index>(mu.size());
    K_.setZero(n, n);
    for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index j = 0; j < n; ++j) {
            if (i == j) continue;
            K_(i, j) = k(mu.atoms[i], mu.atoms[j]);
        }
}

DiscretizedOperator DiscretizedOperator::from_matrix(Eigen::MatrixXd kernel_values,
                                                     const DiscreteMeasure& mu) {
    if (kernel_values.rows() != static_cast<Eigen::Index>(mu.size()) ||
        kernel_values.cols() != kernel_values.rows())
        throw std::invalid_argument("kernel matrix shape does not match the measure");
    DiscretizedOperator op;
    op.mu_ = &mu;
    op.K_ = std::move(kernel_values);
    op.K_.diagonal().setZero();
    return op;
}

AtomFn DiscretizedOperator::apply(const AtomFn& f) const {
    const auto n = K_.rows();
    Eigen::VectorXd wf(n);
    for (Eigen::Index j = 0; j < n; ++j) wf[j] = f[j] * mu_->weight[j];
    Eigen::VectorXd r = K_ * wf;
    return AtomFn(r.data(), r.data() + n);
}

AtomFn DiscretizedOperator::adjoint_apply(const AtomFn& g) const {
    const auto n = K_.rows();
    Eigen::VectorXd wg(n);
    for (Eigen::Index i = 0; i < n; ++i) wg[i] = g[i] * mu_->weight[i];
    Eigen::VectorXd r = K_.transpose() * wg;
    return AtomFn(r.data(), r.data() + n);
}

double DiscretizedOperator::pair(const AtomFn& f, const AtomFn& g) const {
    AtomFn tf = apply(f);
    return inner(*mu_, tf, g);
}

AtomFn DiscretizedOperator::apply_masked(const AtomFn& f, const std::vector<std::uint8_t>& mask) const {
    const auto n = K_.rows();
    Eigen::VectorXd wf = Eigen::VectorXd::Zero(n);
    for (Eigen::Index j = 0; j < n; ++j)
        if (mask[j]) wf[j] = f[j] * mu_->weight[j];
    Eigen::VectorXd r = K_ * wf;
    return AtomFn(r.data(), r.data() + n);
}

namespace {

Eigen::MatrixXd weighted_matrix(const DiscretizedOperator& op) {
    const auto& mu = op.measure();
    const auto n = static_cast<Eigen::Index>(mu.size());
    Eigen::VectorXd sqw(n);
    for (Eigen::Index i = 0; i < n; ++i) sqw[i] = std::sqrt(mu.weight[i]);
    return sqw.asDiagonal() * op.kernel_matrix() * sqw.asDiagonal();
}

}  // namespace

double op_norm(const DiscretizedOperator& op, int dense_limit) {
    const auto n = static_cast<int>(op.measure().size());
    if (n > dense_limit) throw OperatorSizeError("operator exceeds dense limit");
    Eigen::MatrixXd m = weighted_matrix(op);
    Eigen::BDCSVD<Eigen::MatrixXd> svd(m);
    return svd.singularValues().size() ? svd.singularValues()[0] : 0.0;
}

double op_norm_power_iteration(const DiscretizedOperator& op, int max_iters, double tol,
                               std::uint64_t seed) {
    Eigen::MatrixXd m = weighted_matrix(op);
    const auto n = m.rows();
    if (n == 0) return 0.0;
    Rng rng = Rng(seed).fork("power-iteration");
    Eigen::VectorXd v(n);
    for (Eigen::Index i = 0; i < n; ++i) v[i] = rng.next_unit() - 0.5;
    double nv = v.norm();
    if (nv == 0.0) v.setOnes(), nv = v.norm();
    v /= nv;
    double prev = 0.0;
    for (int it = 0; it < max_iters; ++it) {
        Eigen::VectorXd w = m.transpose() * (m * v);
        double lambda = w.norm();
        if (lambda == 0.0) return 0.0;
        v = w / lambda;
        double sv = std::sqrt(lambda);
        if (std::abs(sv - prev) <= tol * std::max(1.0, sv)) return sv;
        prev = sv;
    }
    return prev;
}

Eigen::MatrixXd load_kernel_matrix(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open kernel matrix file: " + path);
    std::uint64_t n = 0;
    in.read(reinterpret_cast<char*>(&n), sizeof(n));
    Eigen::MatrixXd k(n, n);
    std::vector<double> row(n);
    for (std::uint64_t i = 0; i < n; ++i) {
        in.read(reinterpret_cast<char*>(row.data()), static_cast<std::streamsize>(n * sizeof(double)));
        for (std::uint64_t j = 0; j < n; ++j) k(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = row[j];
    }
    if (!in) throw std::runtime_error("truncated kernel matrix file: " + path);
    return k;
}

void save_kernel_matrix(const Eigen::MatrixXd& k, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    auto n = static_cast<std::uint64_t>(k.rows());
    out.write(reinterpret_cast<const char*>(&n), sizeof(n));
    std::vector<double> row(n);
    for (std::uint64_t i = 0; i < n; ++i) {
        for (std::uint64_t j = 0; j < n; ++j) row[j] = k(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
        out.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(n * sizeof(double)));
    }
}

}  // namespace nht
