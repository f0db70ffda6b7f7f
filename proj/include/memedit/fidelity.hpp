#pragma once

#include <functional>
#include <numeric>
#include <vector>

#include "memedit/meta.hpp"

namespace memedit {

enum class AllocationMode { uniform, concentrated };

inline AllocationPlan make_plan(const SyntheticModel& model, const VectorXd& v_star,
                                const std::vector<int>& edit_set, AllocationMode mode) {
    return mode == AllocationMode::uniform
               ? allocate_residual(model, v_star, edit_set)
               : allocate_residual_concentrated(model, v_star, edit_set);
}

inline std::vector<int> all_layers(const SyntheticModel& model) {
    std::vector<int> e(model.num_layers());
    std::iota(e.begin(), e.end(), 0);
    return e;
}

/// The composed map the hypergradient oracle differentiates: allocate the
/// target, run the full multi-layer solve, apply the updates, and score the
/// edited model. Only the solver-mediated terms (edit + locality) count; the
/// value-space regularizer does not pass through the solver.
inline double solver_meta_loss(const SyntheticModel& model, const EditRequest& request,
                               const VectorXd& v_star, const std::vector<int>& edit_set,
                               AllocationMode mode) {
    const AllocationPlan plan = make_plan(model, v_star, edit_set, mode);
    const auto results = solve_multilayer(model, plan);
    const MetaLossTerms terms =
        detail::meta_loss_over(model, overrides_of(model, deltas_of(results)), request, v_star);
    return terms.edit_loss + terms.loc_loss;
}

/// Central-difference hypergradient of solver_meta_loss; every probe runs the
/// entire multi-layer solve. This is the independent oracle the closed-form
/// proxy is checked against.
inline VectorXd true_hypergradient(const SyntheticModel& model, const EditRequest& request,
                                   const VectorXd& v_star, double fd_step,
                                   AllocationMode mode = AllocationMode::concentrated) {
    if (!(fd_step > 0.0)) throw ConfigError("true_hypergradient: fd_step must be > 0");
    const std::vector<int> edit_set = all_layers(model);
    VectorXd g(v_star.size());
    for (Eigen::Index i = 0; i < v_star.size(); ++i) {
        VectorXd vp = v_star, vm = v_star;
        vp[i] += fd_step;
        vm[i] -= fd_step;
        const double fp = solver_meta_loss(model, request, vp, edit_set, mode);
        const double fm = solver_meta_loss(model, request, vm, edit_set, mode);
        if (!std::isfinite(fp) || !std::isfinite(fm))
            throw DivergenceError("true_hypergradient: non-finite loss at probe point");
        g[i] = (fp - fm) / (2.0 * fd_step);
    }
    return g;
}

/// Closed-form proxy hypergradient: the weight-space cotangent pulled back
/// through the gate row, g = s_L M^T. Bounded by ||s_L||_F ||M||_2.
inline VectorXd proxy_hypergradient(const MatrixXd& s_last, const StructuralGate& gate) {
    if (s_last.cols() != gate.gate_row.size())
        throw ConfigError("proxy_hypergradient: shape mismatch");
    return s_last * gate.gate_row.transpose();
}

namespace detail {

// Loss as a function of v_star with every layer except `active` frozen at the
// update solved for `v_ref`; isolates one layer's hypergradient channel.
inline double frozen_except_loss(const SyntheticModel& model, const EditRequest& request,
                                 const std::map<int, MatrixXd>& frozen, int active,
                                 const VectorXd& v_star, const std::vector<int>& edit_set,
                                 AllocationMode mode) {
    const AllocationPlan plan = make_plan(model, v_star, edit_set, mode);
    std::map<int, MatrixXd> deltas = frozen;
    const LayerMemory& layer = model.layers[active];
    const VectorXd residual = plan.layer_targets.at(active) - layer.weight * layer.key;
    deltas[active] = (layer.projector ? solve_projection(layer, residual)
                                      : solve_closed_form(layer, residual))
                         .delta;
    const MetaLossTerms terms =
        memedit::detail::meta_loss_over(model, overrides_of(model, deltas), request, v_star);
    return terms.edit_loss + terms.loc_loss;
}

inline VectorXd layer_channel(const SyntheticModel& model, const EditRequest& request,
                              const std::map<int, MatrixXd>& solved, int layer, double fd_step,
                              const VectorXd& v_star, const std::vector<int>& edit_set,
                              AllocationMode mode) {
    std::map<int, MatrixXd> frozen = solved;
    frozen.erase(layer);
    VectorXd g(v_star.size());
    for (Eigen::Index i = 0; i < v_star.size(); ++i) {
        VectorXd vp = v_star, vm = v_star;
        vp[i] += fd_step;
        vm[i] -= fd_step;
        g[i] = (frozen_except_loss(model, request, frozen, layer, vp, edit_set, mode) -
                frozen_except_loss(model, request, frozen, layer, vm, edit_set, mode)) /
               (2.0 * fd_step);
    }
    return g;
}

}  // namespace detail

/// Tail-layer share of the hypergradient: each layer's channel is measured by
/// finite-differencing with all other layers frozen at their solved updates,
/// then rho = ||sum of non-final channels|| / ||final channel||.
inline double dominance_ratio(const SyntheticModel& model, const EditRequest& request,
                              const VectorXd& v_star, double fd_step,
                              AllocationMode mode = AllocationMode::uniform) {
    if (!(fd_step > 0.0)) throw ConfigError("dominance_ratio: fd_step must be > 0");
    const std::vector<int> edit_set = all_layers(model);
    const auto solved = deltas_of(solve_multilayer(model, make_plan(model, v_star, edit_set, mode)));

    const int last = model.last_layer();
    const VectorXd channel_last =
        detail::layer_channel(model, request, solved, last, fd_step, v_star, edit_set, mode);
    const double denom = channel_last.norm();
    if (denom < 1e-12)
        throw SingularGeometryError("dominance_ratio: vanishing final-layer channel");

    VectorXd tail = VectorXd::Zero(v_star.size());
    for (int l = 0; l < last; ++l)
        tail += detail::layer_channel(model, request, solved, l, fd_step, v_star, edit_set, mode);
    return tail.norm() / denom;
}

struct InversePerturbationCheck {
    double bound = 0.0;
    double actual = 0.0;
    bool holds = false;
};

/// ||(A+E)^-1 - A^-1|| against the bound eps / (mu (mu - eps)) with
/// eps = ||E||_2 and mu = lambda_min(A). Requires eps < mu.
inline InversePerturbationCheck check_inverse_perturbation(const MatrixXd& a, const MatrixXd& e) {
    if (a.rows() != a.cols() || e.rows() != e.cols() || a.rows() != e.rows())
        throw ConfigError("check_inverse_perturbation: shape mismatch");
    if (max_abs_asymmetry(a) > 1e-10 || max_abs_asymmetry(e) > 1e-10)
        throw ConfigError("check_inverse_perturbation: inputs must be symmetric");
    const double mu = sym_lambda_min(a);
    if (!(mu > 0.0)) throw ConfigError("check_inverse_perturbation: A not positive definite");
    const double eps = sym_spectral_norm(e);
    if (!(eps < mu))
        throw ConfigError("check_inverse_perturbation: precondition ||E|| < lambda_min(A) violated");

    const MatrixXd a_inv = spd_inverse(a, "check_inverse_perturbation: A");
    const MatrixXd b_inv = spd_inverse(a + e, "check_inverse_perturbation: A+E");
    InversePerturbationCheck out;
    out.actual = sym_spectral_norm(symmetrized(b_inv - a_inv));
    out.bound = eps == 0.0 ? 0.0 : eps / (mu * (mu - eps));
    out.holds = out.actual <= out.bound + 1e-12;
    return out;
}

struct GeometryDiscrepancy {
    double max_discrepancy = 0.0;    // max_l ||M_l - M_L||_2
    double bound_constant_fit = 0.0; // through-origin slope of discrepancy vs drift
};

/// Cross-layer gate-row drift: computes every layer's channel row M_l and
/// reports the worst deviation from the final layer plus a through-origin
/// linear fit of deviation against per-layer drift magnitude.
inline GeometryDiscrepancy check_geometry_discrepancy(const SyntheticModel& model) {
    const int n = model.num_layers();
    const int last = model.last_layer();

    double b_key = 0.0, mu = std::numeric_limits<double>::infinity();
    for (const auto& layer : model.layers) {
        b_key = std::max(b_key, layer.key.norm());
        mu = std::min(mu, sym_lambda_min(layer.covariance) + layer.ridge);
    }
    double eps_c = 0.0, eps_k = 0.0;
    for (int l = 0; l < last; ++l) {
        eps_c = std::max(eps_c,
                         sym_spectral_norm(model.layers[l].covariance - model.layers[last].covariance));
        eps_k = std::max(eps_k, (model.layers[l].key - model.layers[last].key).norm());
    }
    if (!(eps_c + 2.0 * b_key * eps_k < mu))
        throw ConfigError(
            "check_geometry_discrepancy: precondition eps_C + 2 B_k eps_k < lambda_min of the "
            "effective geometry violated");

    std::vector<RowVectorXd> rows(n);
    for (int l = 0; l < n; ++l) rows[l] = build_gate(model.layers[l], l).gate_row;

    GeometryDiscrepancy out;
    double sxy = 0.0, sxx = 0.0;
    for (int l = 0; l < last; ++l) {
        const double y = (rows[l] - rows[last]).norm();
        const double x =
            sym_spectral_norm(model.layers[l].covariance - model.layers[last].covariance) +
            (model.layers[l].key - model.layers[last].key).norm();
        out.max_discrepancy = std::max(out.max_discrepancy, y);
        sxy += x * y;
        sxx += x * x;
    }
    out.bound_constant_fit = sxx > 0.0 ? sxy / sxx : 0.0;
    return out;
}

/// Everything the descent-direction analysis needs about one instance.
struct FidelityReport {
    VectorXd g_true;   // finite-difference hypergradient through the full solve
    VectorXd g_proxy;  // s_L M^T
    VectorXd g_last;   // final-layer channel, others frozen
    double rho = 0.0;
    double alpha = 0.0;  // ||g_proxy|| / (||s_L||_F ||M||_2)
    double inner_product = 0.0;
    double cosine = 0.0;
    double error_norm = 0.0;
    double eps_c_measured = 0.0;
    double eps_k_measured = 0.0;
    double fd_step_used = 0.0;
    bool descent_ok = false;
};

inline FidelityReport fidelity_report(const SyntheticModel& model, const EditRequest& request,
                                      const VectorXd& v_star, double fd_step = 1e-4,
                                      AllocationMode mode = AllocationMode::concentrated) {
    if (!(fd_step > 0.0)) throw ConfigError("fidelity_report: fd_step must be > 0");
    const std::vector<int> edit_set = all_layers(model);

    FidelityReport report;

    // proxy side: cotangent at the solved edit, pulled back through the gate
    const auto solved = deltas_of(solve_multilayer(model, make_plan(model, v_star, edit_set, mode)));
    const MatrixXd s_last =
        detail::meta_loss_grad_last(model, overrides_of(model, solved), request);
    const StructuralGate gate = build_gate(model);
    report.g_proxy = proxy_hypergradient(s_last, gate);

    // oracle side, with step halving until two consecutive steps agree
    double h = fd_step;
    VectorXd g_h = true_hypergradient(model, request, v_star, h, mode);
    for (int attempt = 0; attempt < 4; ++attempt) {
        const VectorXd g_half = true_hypergradient(model, request, v_star, h / 2.0, mode);
        const double rel = (g_h - g_half).norm() / std::max(g_half.norm(), 1e-12);
        g_h = g_half;
        h /= 2.0;
        if (rel < 1e-3) break;
    }
    report.g_true = g_h;
    report.fd_step_used = h;

    report.g_last = detail::layer_channel(model, request, solved, model.last_layer(), h, v_star,
                                          edit_set, mode);
    if (model.num_layers() == 1) {
        report.rho = 0.0;
    } else {
        report.rho = dominance_ratio(model, request, v_star, h, mode);
    }

    const double denom = s_last.norm() * gate.gate_row.norm();
    report.alpha = denom > 0.0 ? report.g_proxy.norm() / denom : 0.0;
    report.inner_product = report.g_true.dot(report.g_proxy);
    const double nn = report.g_true.norm() * report.g_proxy.norm();
    report.cosine = nn > 0.0 ? std::clamp(report.inner_product / nn, -1.0, 1.0) : 0.0;
    report.error_norm = (report.g_true - report.g_proxy).norm();

    const int last = model.last_layer();
    for (int l = 0; l < last; ++l) {
        report.eps_c_measured = std::max(
            report.eps_c_measured,
            sym_spectral_norm(model.layers[l].covariance - model.layers[last].covariance));
        report.eps_k_measured =
            std::max(report.eps_k_measured, (model.layers[l].key - model.layers[last].key).norm());
    }
    report.descent_ok = report.inner_product > 0.0;
    return report;
}

}  // namespace memedit
