#pragma once

#include <functional>
#include <string>

#include <Eigen/Dense>

#include "nht/measure.hpp"

namespace nht {

/// A Calderon-Zygmund kernel with its claimed constants. `size_exponent`
/// governs the size bound |K(x,y)| <= C / |x-y|^size_exponent and defaults to
/// the homogeneity m (the smoothness bounds always use m + alpha).
struct KernelSpec {
    std::string name = "custom";
    int dim = 1;
    double m = 1.0;
    double alpha = 1.0;
    double C = 1.0;
    double size_exponent = 1.0;
    bool antisymmetric = false;
    std::function<double(const Pt&, const Pt&)> eval;

    double operator()(const Pt& x, const Pt& y) const { return eval(x, y); }
};

/// 1-D Cauchy kernel 1/(x - y); size and smoothness constants hold with C = 2.
KernelSpec cauchy_kernel();

/// Riesz-type kernel (x - y)_1 / |x - y|^{m+1} in dimension n.
KernelSpec riesz_kernel(int dim, double m);

KernelSpec zero_kernel(int dim);

struct StandardnessReport {
    double size_ratio = 0.0;      // max |K| |x-y|^{size_exp} / C
    double holder_x_ratio = 0.0;  // max |K(x,y)-K(x',y)| |x-y|^{m+a} / (C |x-x'|^a)
    double holder_y_ratio = 0.0;
    int samples = 0;
    bool pass() const {
        return size_ratio <= 1.0 && holder_x_ratio <= 1.0 && holder_y_ratio <= 1.0;
    }
};

/// Checks the size and both Holder bounds over seeded random atom triples
/// (x, x', y) with |x - y| >= 2 |x - x'|. Throws on coincident evaluation
/// points (cannot happen for a valid measure).
StandardnessReport verify_standard(const KernelSpec& k, const DiscreteMeasure& mu,
                                   int samples, std::uint64_t seed = 1);

/// Exhaustive variant over all admissible atom triples; the test oracle for
/// verify_standard on small instances.
StandardnessReport verify_standard_exhaustive(const KernelSpec& k, const DiscreteMeasure& mu);

struct OperatorSizeError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// The discretised operator: a dense matrix with T f(x_i) = sum_j K(x_i, x_j)
/// w_j f(x_j), zero diagonal (the atom-scale truncation). The adjoint is exact
/// by construction: <Tf, g>_mu = <f, T*g>_mu.
class DiscretizedOperator {
public:
    DiscretizedOperator(const KernelSpec& k, const DiscreteMeasure& mu);
    static DiscretizedOperator from_matrix(Eigen::MatrixXd kernel_values,
                                           const DiscreteMeasure& mu);

    const DiscreteMeasure& measure() const { return *mu_; }
    /// Raw kernel values K(x_i, x_j) (zero diagonal).
    const Eigen::MatrixXd& kernel_matrix() const { return K_; }

    AtomFn apply(const AtomFn& f) const;
    AtomFn adjoint_apply(const AtomFn& g) const;
    /// <T f, g>_mu.
    double pair(const AtomFn& f, const AtomFn& g) const;

    /// Apply with the input masked to the atoms where `mask` is true.
    AtomFn apply_masked(const AtomFn& f, const std::vector<std::uint8_t>& mask) const;

private:
    DiscretizedOperator() = default;
    const DiscreteMeasure* mu_ = nullptr;
    Eigen::MatrixXd K_;
};

/// L^2(mu) -> L^2(mu) operator norm: the largest singular value of
/// W^{1/2} K W^{1/2}. Throws OperatorSizeError above `dense_limit` atoms.
double op_norm(const DiscretizedOperator& op, int dense_limit = 4096);

/// Independent power-iteration estimate of the same norm (the oracle route).
double op_norm_power_iteration(const DiscretizedOperator& op, int max_iters = 5000,
                               double tol = 1e-13, std::uint64_t seed = 2);

/// Loads a tabulated kernel matrix: binary file with a u64 atom count header
/// followed by row-major binary64 values.
Eigen::MatrixXd load_kernel_matrix(const std::string& path);
void save_kernel_matrix(const Eigen::MatrixXd& k, const std::string& path);

}  // namespace nht
