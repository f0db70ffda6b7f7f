#pragma once

#include <optional>
#include <vector>

#include "memedit/common.hpp"

namespace memedit {

/// Eigen-basis view of one solve geometry: how the key distributes over the
/// covariance spectrum, the resulting gamma/beta, and the suppression upper
/// bound for the protected (top-eigenvalue) index set.
struct SpectralReport {
    VectorXd eigenvalues;     // descending
    VectorXd key_alignment;   // squared key coordinates per eigendirection
    double gamma = 0.0;
    double beta = 0.0;
    std::vector<int> protected_set;        // indices into eigenvalues
    double suppression_upper_bound = 1.0;  // ||k||^2 / (||k||^2 + sigma_min_S^2 + ridge)
};

inline SpectralReport spectral_report(const MatrixXd& c, double ridge, const VectorXd& k,
                                      double protected_fraction = 0.25) {
    if (c.rows() != c.cols() || c.rows() != k.size())
        throw ConfigError("spectral_report: shape mismatch");
    if (max_abs_asymmetry(c) > 1e-10) throw ConfigError("spectral_report: C asymmetric");
    if (!(ridge >= 0.0)) throw ConfigError("spectral_report: ridge must be >= 0");
    if (!(protected_fraction >= 0.0 && protected_fraction <= 1.0))
        throw ConfigError("spectral_report: protected_fraction must be in [0,1]");

    Eigen::SelfAdjointEigenSolver<MatrixXd> es(c);
    if (es.info() != Eigen::Success) throw DivergenceError("spectral_report: eigensolver failed");

    const Eigen::Index d0 = c.rows();
    SpectralReport report;
    report.eigenvalues.resize(d0);
    report.key_alignment.resize(d0);
    for (Eigen::Index j = 0; j < d0; ++j) {
        // flip to descending order; clamp roundoff negatives of a PSD input
        const Eigen::Index src = d0 - 1 - j;
        report.eigenvalues[j] = std::max(es.eigenvalues()[src], 0.0);
        const double coord = es.eigenvectors().col(src).dot(k);
        report.key_alignment[j] = coord * coord;
    }

    const double scale = std::max(1.0, report.eigenvalues[0] + ridge);
    if (report.eigenvalues[d0 - 1] + ridge <= 1e-14 * scale)
        throw SingularGeometryError("spectral_report: effective geometry singular");

    report.gamma = 0.0;
    for (Eigen::Index j = 0; j < d0; ++j)
        report.gamma += report.key_alignment[j] / (report.eigenvalues[j] + ridge);
    report.beta = report.gamma / (1.0 + report.gamma);

    const Eigen::Index n_prot = static_cast<Eigen::Index>(
        std::ceil(protected_fraction * static_cast<double>(d0)));
    for (Eigen::Index j = 0; j < std::min(n_prot, d0); ++j)
        report.protected_set.push_back(static_cast<int>(j));
    if (!report.protected_set.empty()) {
        const double sigma_min_s = report.eigenvalues[report.protected_set.back()];
        const double kk = k.squaredNorm();
        report.suppression_upper_bound = kk / (kk + sigma_min_s + ridge);
    }
    return report;
}

/// ||(H + lambda I)^-1 g||: the radius of the spherical trust region whose
/// KKT multiplier is lambda. Non-increasing in lambda.
inline double trust_region_radius(const MatrixXd& h, const VectorXd& g, double lambda_up) {
    if (h.rows() != h.cols() || h.rows() != g.size())
        throw ConfigError("trust_region_radius: shape mismatch");
    MatrixXd a = h;
    a.diagonal().array() += lambda_up;
    Eigen::LLT<MatrixXd> llt(a);
    if (llt.info() != Eigen::Success)
        throw SingularGeometryError("trust_region_radius: H + lambda I not positive definite");
    return llt.solve(g).norm();
}

/// Positive-definite stand-in for a singular feasibility geometry:
/// A + eps I with eps = 1e-8 * lambda_max(A), so the conditioning of the
/// regularizer is dimensionless. Already-PD inputs pass through unchanged.
inline MatrixXd regularized_feasibility(const MatrixXd& a) {
    if (a.rows() != a.cols()) throw ConfigError("regularized_feasibility: not square");
    if (max_abs_asymmetry(a) > 1e-10) throw ConfigError("regularized_feasibility: asymmetric");
    const VectorXd ev = sym_eigenvalues_desc(a);
    if (ev[ev.size() - 1] > 0.0) return a;
    const double eps = 1e-8 * std::max(ev[0], 1.0);
    MatrixXd out = a;
    out.diagonal().array() += eps;
    return out;
}

/// sqrt(lambda_max / lambda_min): ratio between the smallest ball containing
/// the feasibility ellipsoid and the largest ball inside it.
inline double ball_ellipsoid_gap(const MatrixXd& a_eps) {
    if (a_eps.rows() != a_eps.cols()) throw ConfigError("ball_ellipsoid_gap: not square");
    if (max_abs_asymmetry(a_eps) > 1e-10) throw ConfigError("ball_ellipsoid_gap: asymmetric");
    const VectorXd ev = sym_eigenvalues_desc(a_eps);
    if (!(ev[ev.size() - 1] > 0.0)) throw ConfigError("ball_ellipsoid_gap: not positive definite");
    return std::sqrt(ev[0] / ev[ev.size() - 1]);
}

/// Two-instance witness for the shared-penalty impossibility: an easy request
/// needs lambda <= a/m to make progress m, a hard one needs
/// lambda >= b sqrt(lambda_max / tau) to stay feasible. When the intervals
/// miss each other no single penalty strength serves both.
struct TrapWitness {
    double lambda_min = 0.0, lambda_max = 0.0;
    double tau = 0.0, a = 0.0, b = 0.0, m = 0.0;
    double easy_max_lambda = 0.0;  // easy interval (0, a/m]
    double hard_min_lambda = 0.0;  // hard interval [b sqrt(lambda_max/tau), inf)
    bool feasible = false;
};

inline TrapWitness static_trap_witness(double lambda_min, double lambda_max, double tau,
                                       double a, double b, double m) {
    if (!(lambda_min > 0.0 && lambda_max > 0.0 && tau > 0.0 && a > 0.0 && b > 0.0 && m > 0.0))
        throw ConfigError("static_trap_witness: all inputs must be positive");
    if (!(lambda_max >= lambda_min))
        throw ConfigError("static_trap_witness: lambda_max must be >= lambda_min");
    TrapWitness w;
    w.lambda_min = lambda_min;
    w.lambda_max = lambda_max;
    w.tau = tau;
    w.a = a;
    w.b = b;
    w.m = m;
    w.easy_max_lambda = a / m;
    w.hard_min_lambda = b * std::sqrt(lambda_max / tau);
    w.feasible = w.hard_min_lambda <= w.easy_max_lambda;
    return w;
}

/// Grid oracle over the witness: instantiates the two displacement curves
/// u_E(lambda) = (a/lambda) e_min and u_H(lambda) = (b/lambda) e_max against
/// an explicit diagonal geometry and scans a log grid for a lambda meeting
/// both the progress and the feasibility predicate. Returns the first hit.
inline std::optional<double> trap_grid_scan(const TrapWitness& w, int n_points = 10000) {
    if (n_points < 2) throw ConfigError("trap_grid_scan: need at least 2 points");
    const Eigen::Matrix2d a_eps = Eigen::Vector2d(w.lambda_min, w.lambda_max).asDiagonal();
    const Eigen::Vector2d e_min(1.0, 0.0);
    const Eigen::Vector2d e_max(0.0, 1.0);

    const double hi = 10.0 * w.hard_min_lambda;
    const double lo = hi * 1e-8;
    for (int i = 0; i < n_points; ++i) {
        const double t = static_cast<double>(i) / static_cast<double>(n_points - 1);
        const double lambda = lo * std::pow(hi / lo, t);
        const Eigen::Vector2d u_easy = (w.a / lambda) * e_min;
        const Eigen::Vector2d u_hard = (w.b / lambda) * e_max;
        const bool progress = std::abs(e_min.dot(u_easy)) >= w.m;
        const bool feasible = u_hard.dot(a_eps * u_hard) <= w.tau;
        if (progress && feasible) return lambda;
    }
    return std::nullopt;
}

/// Progress threshold m = delta_logit / ||P_good w_target||: the displacement
/// needed along the safe subspace to raise the target logit by delta_logit.
inline double margin_to_progress(double delta_logit, const VectorXd& w_target,
                                 const MatrixXd& p_good) {
    if (p_good.rows() != p_good.cols() || p_good.rows() != w_target.size())
        throw ConfigError("margin_to_progress: shape mismatch");
    const double denom = (p_good * w_target).norm();
    if (denom <= 1e-12)
        throw SingularGeometryError("margin_to_progress: target weight annihilated by projector");
    return delta_logit / denom;
}

}  // namespace memedit
