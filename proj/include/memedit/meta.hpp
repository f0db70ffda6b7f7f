#pragma once

#include <utility>
#include <vector>

#include "memedit/solvers.hpp"

namespace memedit {

/// The differentiable proxy channel of the final layer's closed-form solve:
/// the row operator M = k^T (C + ridge I + k k^T)^-1 plus the cached inverse
/// it came from. M k equals the layer's attenuation coefficient beta.
struct StructuralGate {
    RowVectorXd gate_row;     // M, length d0
    int source_layer = 0;     // index of the layer the gate was built from
    MatrixXd cached_inverse;  // (C + ridge I + k k^T)^-1
};

inline StructuralGate build_gate(const LayerMemory& layer, int source_layer) {
    MatrixXd c_eff = layer.covariance;
    c_eff.diagonal().array() += layer.ridge;
    const MatrixXd c_eff_inv = spd_inverse(c_eff, "build_gate: effective geometry");
    StructuralGate gate;
    gate.source_layer = source_layer;
    gate.cached_inverse = sherman_morrison_inv(c_eff_inv, layer.key);
    gate.gate_row = (gate.cached_inverse * layer.key).transpose();
    return gate;
}

inline StructuralGate build_gate(const SyntheticModel& model) {
    return build_gate(model.layers.back(), model.last_layer());
}

/// Rank-one virtual update realizing the attenuated residual at the gate's
/// key: delta = (v_star - W_L k_L) M.
inline MatrixXd proxy_update(const VectorXd& v_star, const LayerMemory& layer,
                             const StructuralGate& gate) {
    if (v_star.size() != layer.d1()) throw ConfigError("proxy_update: v_star length != d1");
    if (gate.gate_row.size() != layer.d0()) throw ConfigError("proxy_update: gate/layer mismatch");
    return (v_star - layer.weight * layer.key) * gate.gate_row;
}

/// One edit request: the key and class to write, the initial value-space
/// plan, and the paraphrase/locality probe sets the meta-loss scores against.
struct EditRequest {
    VectorXd edit_key;
    int target_class = 0;
    VectorXd v_init;
    std::vector<VectorXd> paraphrase_keys;
    std::vector<VectorXd> locality_keys;
    double reg_weight = 0.1;

    void validate(const SyntheticModel& model) const {
        if (edit_key.size() != model.d0()) throw ConfigError("request: edit_key length != d0");
        if (v_init.size() != model.d1()) throw ConfigError("request: v_init length != d1");
        if (target_class < 0 || target_class >= model.num_classes())
            throw ConfigError("request: target_class out of range");
        if (!(reg_weight >= 0.0)) throw ConfigError("request: reg_weight must be >= 0");
        const double kn = edit_key.norm();
        auto near_duplicate = [&](const VectorXd& k) {
            if (k.size() != model.d0()) throw ConfigError("request: probe key length != d0");
            const double denom = kn * k.norm();
            if (denom == 0.0) return false;
            return edit_key.dot(k) / denom > 1.0 - 1e-9;
        };
        for (const auto& k : paraphrase_keys)
            if (near_duplicate(k)) throw ConfigError("request: paraphrase key duplicates edit key");
        for (const auto& k : locality_keys)
            if (near_duplicate(k)) throw ConfigError("request: locality key duplicates edit key");
    }
};

struct MetaLossTerms {
    double edit_loss = 0.0;
    double loc_loss = 0.0;
    double reg_loss = 0.0;
    double total = 0.0;
};

namespace detail {

inline VectorXd log_softmax(const VectorXd& z) {
    const double zmax = z.maxCoeff();
    const double lse = zmax + std::log((z.array() - zmax).exp().sum());
    return z.array() - lse;
}

inline VectorXd softmax(const VectorXd& z) { return log_softmax(z).array().exp(); }

// Loss with an arbitrary set of post-edit layer overrides. `model` is always
// the pre-edit reference the locality KL compares against.
inline MetaLossTerms meta_loss_over(const SyntheticModel& model, const LayerOverrides& post,
                                    const EditRequest& request, const VectorXd& v_star) {
    if (request.target_class < 0 || request.target_class >= model.num_classes())
        throw ConfigError("meta_loss: target_class out of range");

    MetaLossTerms terms;
    const VectorXd z_edit = forward(model, request.edit_key, post);
    terms.edit_loss = -log_softmax(z_edit)[request.target_class];

    for (const auto& x : request.locality_keys) {
        const VectorXd lp_pre = log_softmax(forward(model, x));
        const VectorXd lp_post = log_softmax(forward(model, x, post));
        const VectorXd p_pre = lp_pre.array().exp();
        terms.loc_loss += p_pre.dot(lp_pre - lp_post);
    }

    terms.reg_loss = request.reg_weight * (v_star - request.v_init).squaredNorm();
    terms.total = terms.edit_loss + terms.loc_loss + terms.reg_loss;
    return terms;
}

// Gradient of edit_loss + loc_loss with respect to the final layer's
// overridden weight, other overrides held fixed.
inline MatrixXd meta_loss_grad_last(const SyntheticModel& model, const LayerOverrides& post,
                                    const EditRequest& request) {
    if (request.target_class < 0 || request.target_class >= model.num_classes())
        throw ConfigError("meta_loss_grad_W: target_class out of range");

    const VectorXd p_edit = softmax(forward(model, request.edit_key, post));
    VectorXd residual = p_edit;
    residual[request.target_class] -= 1.0;
    MatrixXd grad = (model.readout.transpose() * residual) * request.edit_key.transpose();

    for (const auto& x : request.locality_keys) {
        const VectorXd p_pre = softmax(forward(model, x));
        const VectorXd p_post = softmax(forward(model, x, post));
        grad += (model.readout.transpose() * (p_post - p_pre)) * x.transpose();
    }
    return grad;
}

}  // namespace detail

/// Meta-loss under a virtual final-layer weight: target-class negative log
/// likelihood at the edit key, KL(pre || post) of the readout distributions
/// over the locality keys, and the value-space pull toward v_init.
inline MetaLossTerms meta_loss(const SyntheticModel& model, const MatrixXd& virtual_w_last,
                               const EditRequest& request, const VectorXd& v_star) {
    if (virtual_w_last.rows() != model.d1() || virtual_w_last.cols() != model.d0())
        throw ConfigError("meta_loss: virtual weight shape mismatch");
    return detail::meta_loss_over(model, {{model.last_layer(), virtual_w_last}}, request, v_star);
}

/// Analytic gradient of edit_loss + loc_loss with respect to the virtual
/// final-layer weight. The regularizer differentiates with respect to v_star
/// and is handled by the caller.
inline MatrixXd meta_loss_grad_W(const SyntheticModel& model, const MatrixXd& virtual_w_last,
                                 const EditRequest& request) {
    if (virtual_w_last.rows() != model.d1() || virtual_w_last.cols() != model.d0())
        throw ConfigError("meta_loss_grad_W: virtual weight shape mismatch");
    return detail::meta_loss_grad_last(model, {{model.last_layer(), virtual_w_last}}, request);
}

struct MetaIteration {
    int t = 0;
    VectorXd v_star;
    double edit_loss = 0.0;
    double loc_loss = 0.0;
    double reg_loss = 0.0;
    double grad_norm = 0.0;
    double beta_current = 0.0;
};

/// Audit trail of one look-ahead loop.
struct MetaTrace {
    std::vector<MetaIteration> iterations;
    bool converged = false;
    VectorXd final_v_star;
};

/// Divergence during the look-ahead loop, with the trace up to the failure.
struct MetaDivergenceError : DivergenceError {
    MetaTrace trace;
    MetaDivergenceError(const std::string& what, MetaTrace t)
        : DivergenceError(what), trace(std::move(t)) {}
};

struct MetaKeOptions {
    bool early_stop = true;   // stop once grad_norm < grad_tol (full-T run if false)
    double grad_tol = 1e-6;
    bool adam = false;        // momentum-style accumulation instead of raw steps
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
};

/// Look-ahead-and-correct loop: at each step the candidate target is pushed
/// through the structural gate to form virtual final-layer weights, the
/// meta-loss is evaluated there, and the weight-space gradient is pulled back
/// through the gate row to update the target:
///   v <- v - eta (grad_W meta_loss) M^T - eta * 2 reg_weight (v - v_init).
inline MetaTrace metake_run(const SyntheticModel& model, const EditRequest& request, double eta,
                            int iterations, const MetaKeOptions& options = {}) {
    if (!(eta > 0.0)) throw ConfigError("metake_run: eta must be > 0");
    if (iterations < 1) throw ConfigError("metake_run: need at least one iteration");
    request.validate(model);

    const LayerMemory& last = model.layers.back();
    const StructuralGate gate = build_gate(model);
    const double beta = gate.gate_row.dot(last.key);

    MetaTrace trace;
    VectorXd v = request.v_init;
    VectorXd adam_m = VectorXd::Zero(v.size());
    VectorXd adam_v = VectorXd::Zero(v.size());

    for (int t = 0; t < iterations; ++t) {
        const MatrixXd virtual_w = last.weight + proxy_update(v, last, gate);
        const MetaLossTerms terms = meta_loss(model, virtual_w, request, v);
        if (!std::isfinite(terms.total)) {
            trace.final_v_star = v;
            throw MetaDivergenceError("metake_run: non-finite meta-loss at t=" + std::to_string(t),
                                      trace);
        }
        const MatrixXd task_signal = meta_loss_grad_W(model, virtual_w, request);
        const VectorXd g = task_signal * gate.gate_row.transpose() +
                           2.0 * request.reg_weight * (v - request.v_init);
        const double grad_norm = g.norm();
        trace.iterations.push_back(
            {t, v, terms.edit_loss, terms.loc_loss, terms.reg_loss, grad_norm, beta});

        if (grad_norm < options.grad_tol) {
            trace.converged = true;
            if (options.early_stop) break;
        }

        if (options.adam) {
            adam_m = options.adam_beta1 * adam_m + (1.0 - options.adam_beta1) * g;
            adam_v = options.adam_beta2 * adam_v + (1.0 - options.adam_beta2) * g.cwiseProduct(g);
            const double c1 = 1.0 - std::pow(options.adam_beta1, t + 1);
            const double c2 = 1.0 - std::pow(options.adam_beta2, t + 1);
            const VectorXd step =
                (adam_m / c1).cwiseQuotient(((adam_v / c2).cwiseSqrt().array() + options.adam_eps)
                                                .matrix());
            v -= eta * step;
        } else {
            v -= eta * g;
        }
        if (!v.allFinite()) {
            trace.final_v_star = v;
            throw MetaDivergenceError("metake_run: target diverged at t=" + std::to_string(t),
                                      trace);
        }
    }

    trace.final_v_star = v;
    return trace;
}

/// Open-loop planning baseline: descends the target-class NLL plus an
/// isotropic penalty directly in value space, with no gate and no look-ahead.
/// The penalty enters through its proximal map so arbitrarily stiff lambda_up
/// stays stable.
inline VectorXd static_target_baseline(const SyntheticModel& model, const EditRequest& request,
                                       double lambda_up, int steps, double lr) {
    if (steps < 1) throw ConfigError("static_target_baseline: need at least one step");
    if (!(lr > 0.0)) throw ConfigError("static_target_baseline: lr must be > 0");
    if (!(lambda_up >= 0.0)) throw ConfigError("static_target_baseline: lambda_up must be >= 0");
    request.validate(model);

    // hidden state with the final layer's value replaced by v
    VectorXd rest = model.base_hidden;
    for (int l = 0; l + 1 < model.num_layers(); ++l)
        rest += model.layers[l].weight * request.edit_key;

    VectorXd v = request.v_init;
    for (int s = 0; s < steps; ++s) {
        const VectorXd z = model.readout * (rest + v);
        VectorXd residual = detail::softmax(z);
        residual[request.target_class] -= 1.0;
        const VectorXd grad_nll = model.readout.transpose() * residual;
        v = (v - lr * grad_nll + lr * lambda_up * request.v_init) / (1.0 + lr * lambda_up);
        if (!v.allFinite())
            throw DivergenceError("static_target_baseline: diverged at step " + std::to_string(s));
    }
    return v;
}

/// Objective the static baseline descends; used by tests and diagnostics.
inline double static_target_objective(const SyntheticModel& model, const EditRequest& request,
                                      double lambda_up, const VectorXd& v) {
    VectorXd rest = model.base_hidden;
    for (int l = 0; l + 1 < model.num_layers(); ++l)
        rest += model.layers[l].weight * request.edit_key;
    const VectorXd z = model.readout * (rest + v);
    return -detail::log_softmax(z)[request.target_class] +
           0.5 * lambda_up * (v - request.v_init).squaredNorm();
}

}  // namespace memedit
