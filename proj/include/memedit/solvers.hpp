#pragma once

#include <map>
#include <vector>

#include "memedit/memory_model.hpp"

namespace memedit {

/// Output of a single-key constrained solve. The realized residual delta*k is
/// always a scalar multiple beta of the requested one, with
/// beta = gamma / (1 + gamma) and gamma = k^T (C + ridge I)^-1 k.
struct SolveResult {
    MatrixXd delta;             // d1 x d0
    VectorXd realized_residual; // delta * key
    double gamma = 0.0;
    double beta = 0.0;
};

/// Per-layer targets t_l for a multi-layer edit.
struct AllocationPlan {
    std::map<int, VectorXd> layer_targets;
};

/// (A + k k^T)^-1 given A^-1, via the rank-one inverse-update identity.
inline MatrixXd sherman_morrison_inv(const MatrixXd& base_inverse, const VectorXd& k) {
    if (base_inverse.rows() != base_inverse.cols() || base_inverse.rows() != k.size())
        throw ConfigError("sherman_morrison_inv: shape mismatch");
    const VectorXd ak = base_inverse * k;
    const double denom = 1.0 + k.dot(ak);
    if (denom <= 1e-14)
        throw SingularGeometryError("sherman_morrison_inv: near-singular rank-one update");
    return base_inverse - (ak * ak.transpose()) / denom;
}

/// Value of the solve objective ||delta k - target||^2 + tr(delta C delta^T)
/// + ridge ||delta||_F^2.
inline double solve_objective(const LayerMemory& layer, const MatrixXd& delta,
                              const VectorXd& target_residual) {
    return (delta * layer.key - target_residual).squaredNorm() +
           (delta * layer.covariance * delta.transpose()).trace() +
           layer.ridge * delta.squaredNorm();
}

/// Closed-form minimizer delta = target k^T (C + ridge I + k k^T)^-1 of the
/// solve objective. The effective geometry C + ridge I must be positive
/// definite; a singular geometry is an error, never a pseudo-inverse.
inline SolveResult solve_closed_form(const LayerMemory& layer, const VectorXd& target_residual) {
    if (target_residual.size() != layer.d1())
        throw ConfigError("solve_closed_form: target length != d1");
    MatrixXd c_eff = layer.covariance;
    c_eff.diagonal().array() += layer.ridge;
    const MatrixXd c_eff_inv = spd_inverse(c_eff, "solve_closed_form: effective geometry");

    SolveResult out;
    out.gamma = layer.key.dot(c_eff_inv * layer.key);
    out.beta = out.gamma / (1.0 + out.gamma);
    const MatrixXd full_inv = sherman_morrison_inv(c_eff_inv, layer.key);
    out.delta = target_residual * (full_inv * layer.key).transpose();
    out.realized_residual = out.delta * layer.key;
    return out;
}

/// Independence oracle for solve_closed_form: plain fixed-step gradient
/// descent on the same objective, run until ||grad||_F < tol. Deliberately
/// shares no code path with the closed form.
inline MatrixXd solve_gradient_oracle(const LayerMemory& layer, const VectorXd& target_residual,
                                      double tol, int max_iterations = 200000) {
    if (!(tol > 0.0)) throw ConfigError("solve_gradient_oracle: tol must be > 0");
    if (target_residual.size() != layer.d1())
        throw ConfigError("solve_gradient_oracle: target length != d1");

    // grad J = 2 (delta k - target) k^T + 2 delta C + 2 ridge delta
    //        = 2 (delta B - target k^T),  B = C + ridge I + k k^T
    MatrixXd b = layer.covariance + layer.key * layer.key.transpose();
    b.diagonal().array() += layer.ridge;
    const MatrixXd target_kt = target_residual * layer.key.transpose();

    const double lam_max_c = sym_eigenvalues_desc(layer.covariance)[0];
    const double step = 1.0 / (2.0 * (lam_max_c + layer.ridge + layer.key.squaredNorm()));

    MatrixXd delta = MatrixXd::Zero(layer.d1(), layer.d0());
    for (int it = 0; it < max_iterations; ++it) {
        const MatrixXd grad = 2.0 * (delta * b - target_kt);
        if (grad.norm() < tol) return delta;
        delta -= step * grad;
    }
    throw DivergenceError("solve_gradient_oracle: no convergence within iteration cap");
}

/// Projection-constrained specialization: the executed update is delta P with
/// P the layer projector, solved in the executed variable against the
/// projected key. Attenuation is isotropic on the executed channel:
/// beta = ||P k||^2 / (||P k||^2 + ridge).
inline SolveResult solve_projection(const LayerMemory& layer, const VectorXd& target_residual) {
    if (!layer.projector) throw ConfigError("solve_projection: layer has no projector");
    if (target_residual.size() != layer.d1())
        throw ConfigError("solve_projection: target length != d1");
    if (!(layer.ridge > 0.0))
        throw SingularGeometryError("solve_projection: isotropic coefficient must be > 0");

    const MatrixXd& p = *layer.projector;
    const VectorXd projected_key = p * layer.key;
    const double energy = projected_key.squaredNorm();

    // (kt kt^T + ridge I)^-1 kt = kt / (ridge + ||kt||^2)
    const MatrixXd b_star = target_residual * projected_key.transpose() / (energy + layer.ridge);

    SolveResult out;
    out.delta = b_star * p;
    out.realized_residual = out.delta * layer.key;
    out.beta = energy / (energy + layer.ridge);
    out.gamma = energy / layer.ridge;
    return out;
}

/// base hidden plus the edited layers' pre-edit contributions; the reference
/// point residual allocation works against.
inline VectorXd stack_pre(const SyntheticModel& model, const std::vector<int>& edit_set) {
    VectorXd h = model.base_hidden;
    for (int l : edit_set) {
        if (l < 0 || l >= model.num_layers()) throw ConfigError("stack_pre: bad layer index");
        h += model.layers[l].weight * model.layers[l].key;
    }
    return h;
}

namespace detail {

inline void check_edit_set(const SyntheticModel& model, const std::vector<int>& edit_set) {
    if (edit_set.empty()) throw ConfigError("allocate_residual: empty edit set");
    bool has_last = false;
    for (int l : edit_set) {
        if (l < 0 || l >= model.num_layers())
            throw ConfigError("allocate_residual: layer index out of range");
        if (l == model.last_layer()) has_last = true;
    }
    if (!has_last) throw ConfigError("allocate_residual: final layer must be in the edit set");
}

}  // namespace detail

/// Uniform residual allocation: the total residual
/// v_star - (base_hidden + sum_{l in E} W_l k_l) is split evenly, so the
/// per-layer offsets telescope back to it exactly.
inline AllocationPlan allocate_residual(const SyntheticModel& model, const VectorXd& v_star,
                                        const std::vector<int>& edit_set) {
    detail::check_edit_set(model, edit_set);
    if (v_star.size() != model.d1()) throw ConfigError("allocate_residual: v_star length != d1");
    const VectorXd total = v_star - stack_pre(model, edit_set);
    const VectorXd share = total / static_cast<double>(edit_set.size());
    AllocationPlan plan;
    for (int l : edit_set)
        plan.layer_targets[l] = model.layers[l].weight * model.layers[l].key + share;
    return plan;
}

/// Allocation concentrated at the final layer: L absorbs the full residual,
/// every other edited layer keeps its pre-edit value (zero offset). This is
/// the identity-Jacobian channel the gradient proxy assumes.
inline AllocationPlan allocate_residual_concentrated(const SyntheticModel& model,
                                                     const VectorXd& v_star,
                                                     const std::vector<int>& edit_set) {
    detail::check_edit_set(model, edit_set);
    if (v_star.size() != model.d1()) throw ConfigError("allocate_residual: v_star length != d1");
    const VectorXd total = v_star - stack_pre(model, edit_set);
    AllocationPlan plan;
    for (int l : edit_set) {
        VectorXd t = model.layers[l].weight * model.layers[l].key;
        if (l == model.last_layer()) t += total;
        plan.layer_targets[l] = t;
    }
    return plan;
}

/// Solves every layer of the plan independently against its own geometry;
/// projection layers route through the projection solver.
inline std::map<int, SolveResult> solve_multilayer(const SyntheticModel& model,
                                                   const AllocationPlan& plan) {
    if (plan.layer_targets.empty()) throw ConfigError("solve_multilayer: empty plan");
    std::map<int, SolveResult> results;
    for (const auto& [l, target] : plan.layer_targets) {
        if (l < 0 || l >= model.num_layers())
            throw ConfigError("solve_multilayer: layer index out of range");
        const LayerMemory& layer = model.layers[l];
        const VectorXd residual = target - layer.weight * layer.key;
        results[l] = layer.projector ? solve_projection(layer, residual)
                                     : solve_closed_form(layer, residual);
    }
    return results;
}

/// Convenience: the weight deltas of a multilayer solve, ready to apply.
inline std::map<int, MatrixXd> deltas_of(const std::map<int, SolveResult>& results) {
    std::map<int, MatrixXd> out;
    for (const auto& [l, r] : results) out[l] = r.delta;
    return out;
}

/// Post-edit weights as a forward-pass override set.
inline LayerOverrides overrides_of(const SyntheticModel& model,
                                   const std::map<int, MatrixXd>& deltas) {
    LayerOverrides out;
    for (const auto& [l, delta] : deltas) {
        if (l < 0 || l >= model.num_layers()) throw ConfigError("overrides_of: bad layer index");
        out[l] = model.layers[l].weight + delta;
    }
    return out;
}

}  // namespace memedit
