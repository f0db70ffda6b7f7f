#pragma once

#include <functional>
#include <string>
#include <vector>

#include "memedit/harness.hpp"

namespace memedit {

struct CheckResult {
    std::string name;
    std::string status;  // "pass", "fail", or "precondition"
    json measured;
};

struct VerifyOptions {
    double perturbation_scale = 0.9;  // ||E|| as a multiple of lambda_min(A); >= 1 trips the bound's precondition
    int descent_instances = 40;
    int attenuation_instances = 200;
};

namespace verify_detail {

inline MatrixXd random_psd(Rng& rng, Eigen::Index d, double lo, double hi) {
    const MatrixXd q = random_orthogonal(rng, d);
    VectorXd eigs(d);
    for (Eigen::Index i = 0; i < d; ++i) eigs[i] = rng.uniform(lo, hi);
    return symmetrized(q * eigs.asDiagonal() * q.transpose());
}

inline LayerMemory random_layer(Rng& rng, Eigen::Index d0, Eigen::Index d1, double ridge,
                                double cov_lo, double cov_hi) {
    LayerMemory layer;
    layer.weight = rng.gaussian_matrix(d1, d0);
    layer.key = rng.gaussian_vector(d0);
    layer.covariance = random_psd(rng, d0, cov_lo, cov_hi);
    layer.ridge = ridge;
    return layer;
}

// numeric gradient of a scalar function of a weight matrix
template <class F>
MatrixXd fd_weight_gradient(F&& f, const MatrixXd& w, double h) {
    MatrixXd g(w.rows(), w.cols());
    for (Eigen::Index i = 0; i < w.rows(); ++i) {
        for (Eigen::Index j = 0; j < w.cols(); ++j) {
            MatrixXd wp = w, wm = w;
            wp(i, j) += h;
            wm(i, j) -= h;
            g(i, j) = (f(wp) - f(wm)) / (2.0 * h);
        }
    }
    return g;
}

inline SyntheticModel small_random_model(Rng& rng, int d0, int d1, int v, int n_layers,
                                         double ridge) {
    SyntheticModel model;
    for (int l = 0; l < n_layers; ++l)
        model.layers.push_back(random_layer(rng, d0, d1, ridge, 0.5, 4.0));
    model.readout.resize(v, d1);
    for (int o = 0; o < v; ++o) model.readout.row(o) = rng.gaussian_vector(d1).normalized();
    model.base_hidden = rng.gaussian_vector(d1);
    return model;
}

inline EditRequest small_request(Rng& rng, const SyntheticModel& model, int n_loc,
                                 double reg_weight) {
    EditRequest request;
    request.edit_key = model.layers.back().key;
    request.target_class =
        static_cast<int>(rng.below(static_cast<std::uint64_t>(model.num_classes())));
    request.v_init = model.layers.back().weight * request.edit_key;
    request.reg_weight = reg_weight;
    const double kn = std::max(request.edit_key.norm(), 1e-12);
    for (int i = 0; i < n_loc; ++i) {
        for (int attempt = 0; attempt < 1000; ++attempt) {
            const VectorXd g = rng.gaussian_vector(model.d0()).normalized();
            if (std::abs(g.dot(request.edit_key) / kn) < 0.5) {
                request.locality_keys.push_back(kn * g);
                break;
            }
        }
    }
    return request;
}

}  // namespace verify_detail

/// Runs the invariant battery of every module at the configured dimensions.
/// Failures are report content, not exceptions; the CLI maps any "fail" row
/// to a nonzero exit.
inline std::vector<CheckResult> verify_all(const ExperimentConfig& cfg,
                                           const VerifyOptions& options = {}) {
    cfg.validate();
    std::vector<CheckResult> checks;
    Rng rng(mix_seed(cfg.seed, 0xC0FFEE));

    // deterministic signal attenuation: realized residual is beta times the
    // requested one, beta = gamma / (1 + gamma)
    {
        double worst_rel = 0.0, worst_beta_gap = 0.0, worst_cos = 1.0;
        const double ridges[] = {0.1, 1.0, 10.0};
        for (int i = 0; i < options.attenuation_instances; ++i) {
            const Eigen::Index d0 = 2 + static_cast<Eigen::Index>(rng.below(15));
            const Eigen::Index d1 = 1 + static_cast<Eigen::Index>(rng.below(16));
            LayerMemory layer =
                verify_detail::random_layer(rng, d0, d1, ridges[i % 3], 0.0, 8.0);
            const VectorXd target = rng.gaussian_vector(d1);
            const SolveResult res = solve_closed_form(layer, target);
            worst_rel = std::max(worst_rel, (res.realized_residual - res.beta * target).norm() /
                                                std::max(target.norm(), 1e-300));
            worst_beta_gap =
                std::max(worst_beta_gap, std::abs(res.beta - res.gamma / (1.0 + res.gamma)));
            if (target.norm() > 0 && res.realized_residual.norm() > 0)
                worst_cos = std::min(worst_cos, target.dot(res.realized_residual) /
                                                    (target.norm() * res.realized_residual.norm()));
        }
        const bool ok = worst_rel <= 1e-8 && worst_beta_gap <= 1e-12 && worst_cos >= 1.0 - 1e-9;
        checks.push_back({"attenuation_law",
                          ok ? "pass" : "fail",
                          json{{"max_rel_residual_error", worst_rel},
                               {"max_beta_identity_gap", worst_beta_gap},
                               {"min_collinearity_cosine", worst_cos}}});
    }

    // spectral expansion of gamma agrees with dense inversion and the solver
    {
        double worst = 0.0;
        for (int i = 0; i < 50; ++i) {
            const Eigen::Index d0 = 2 + static_cast<Eigen::Index>(rng.below(31));
            const MatrixXd c = verify_detail::random_psd(rng, d0, 0.0, 6.0);
            const double ridge = 0.5;
            const VectorXd k = rng.gaussian_vector(d0);
            const SpectralReport rep = spectral_report(c, ridge, k);
            MatrixXd c_eff = c;
            c_eff.diagonal().array() += ridge;
            const double gamma_dense = k.dot(spd_inverse(c_eff, "verify") * k);
            LayerMemory layer{MatrixXd::Zero(1, d0), k, c, ridge, std::nullopt};
            const SolveResult res = solve_closed_form(layer, VectorXd::Ones(1));
            worst = std::max(worst, std::abs(rep.gamma - gamma_dense) / std::max(1.0, gamma_dense));
            worst = std::max(worst, std::abs(rep.beta - res.beta));
            worst = std::max(worst,
                             std::abs(rep.key_alignment.sum() - k.squaredNorm()) /
                                 std::max(1.0, k.squaredNorm()));
        }
        checks.push_back({"spectral_consistency", worst <= 1e-10 ? "pass" : "fail",
                          json{{"max_deviation", worst}}});
    }

    // suppression bound and its monotonicity along a protected-eigenvalue sweep
    {
        const Eigen::Index d0 = 8;
        const Eigen::Index n_prot = protected_dim(d0);
        const MatrixXd q = random_orthogonal(rng, d0);
        VectorXd coeff = rng.gaussian_vector(n_prot).normalized();
        const double ridge = 0.5;
        bool bound_ok = true, monotone_ok = true;
        double prev_beta = 1.0;
        json betas = json::array();
        for (const double sigma_min : {1e1, 1e2, 1e4, 1e6}) {
            VectorXd eigs(d0);
            for (Eigen::Index j = 0; j < d0; ++j)
                eigs[j] = j < n_prot ? sigma_min * (1.0 + static_cast<double>(n_prot - 1 - j))
                                     : 0.5 / static_cast<double>(j + 1);
            const MatrixXd c = symmetrized(q * eigs.asDiagonal() * q.transpose());
            const VectorXd k = 2.0 * (q.leftCols(n_prot) * coeff);  // fully protected key
            const SpectralReport rep = spectral_report(c, ridge, k);
            const double rhs = k.squaredNorm() / (k.squaredNorm() + sigma_min + ridge);
            bound_ok = bound_ok && rep.beta <= rhs + 1e-10;
            monotone_ok = monotone_ok && rep.beta <= prev_beta + 1e-15;
            prev_beta = rep.beta;
            betas.push_back(rep.beta);
        }
        checks.push_back({"suppression_bound", bound_ok && monotone_ok ? "pass" : "fail",
                          json{{"betas", betas}, {"bound_ok", bound_ok},
                               {"monotone_ok", monotone_ok}}});
    }

    // trust-region radius is non-increasing in the penalty strength
    {
        bool ok = true;
        double closed_form_gap = 0.0;
        for (int i = 0; i < 25; ++i) {
            const Eigen::Index d = 8;
            const MatrixXd h = verify_detail::random_psd(rng, d, 0.0, 5.0);
            const VectorXd g = rng.gaussian_vector(d);
            double prev = std::numeric_limits<double>::infinity();
            for (const double lam : {0.1, 1.0, 10.0, 100.0}) {
                const double r = trust_region_radius(h, g, lam);
                ok = ok && r <= prev * (1.0 + 1e-12);
                prev = r;
            }
            closed_form_gap = std::max(
                closed_form_gap,
                std::abs(trust_region_radius(MatrixXd::Zero(d, d), g, 5.0) - g.norm() / 5.0));
        }
        checks.push_back({"trust_region_radius_monotone", ok && closed_form_gap <= 1e-12 ? "pass" : "fail",
                          json{{"zero_curvature_gap", closed_form_gap}}});
    }

    // ball-ellipsoid gap and the inscribed/boundary inclusion witnesses
    {
        bool ok = true;
        for (int i = 0; i < 10; ++i) {
            const Eigen::Index d = 6;
            const MatrixXd a = verify_detail::random_psd(rng, d, 0.3, 9.0);
            const VectorXd ev = sym_eigenvalues_desc(a);
            const double tau = 2.0;
            ok = ok && std::abs(ball_ellipsoid_gap(a) - std::sqrt(ev[0] / ev[d - 1])) <= 1e-12;
            Eigen::SelfAdjointEigenSolver<MatrixXd> es(a);
            const VectorXd e_min = es.eigenvectors().col(0);
            const VectorXd boundary = std::sqrt(tau / ev[d - 1]) * e_min;
            ok = ok && std::abs(boundary.dot(a * boundary) - tau) <= 1e-9 * tau;
            const double r_in = std::sqrt(tau / ev[0]) * (1.0 - 1e-9);
            for (int s = 0; s < 1000; ++s) {
                const VectorXd u = rng.gaussian_vector(d).normalized();
                const VectorXd x = r_in * u;
                ok = ok && x.dot(a * x) <= tau;
            }
        }
        checks.push_back({"ball_ellipsoid_inclusion", ok ? "pass" : "fail", json{}});
    }

    // shared-penalty trap: interval algebra must agree with the grid oracle,
    // and the canonical witness pair behaves as constructed
    {
        const TrapWitness infeasible = static_trap_witness(1.0, 100.0, 1.0, 1.0, 1.0, 0.2);
        const TrapWitness feasible = static_trap_witness(1.0, 100.0, 1.0, 1.0, 0.3, 0.2);
        const TrapWitness from_cfg =
            static_trap_witness(1.0, std::max(cfg.geometry.kappa, 1.0), 1.0, 1.0, 1.0, 0.2);
        const bool canonical_ok = !infeasible.feasible && feasible.feasible &&
                                  !trap_grid_scan(infeasible).has_value() &&
                                  trap_grid_scan(feasible).has_value();
        const bool cfg_ok = from_cfg.feasible == trap_grid_scan(from_cfg).has_value();
        checks.push_back({"static_trap", canonical_ok && cfg_ok ? "pass" : "fail",
                          json{{"cfg_witness_feasible", from_cfg.feasible},
                               {"cfg_easy_max_lambda", from_cfg.easy_max_lambda},
                               {"cfg_hard_min_lambda", from_cfg.hard_min_lambda}}});
    }

    // analytic meta-gradient vs central finite differences, per term
    {
        double worst_edit = 0.0, worst_loc = 0.0;
        for (int i = 0; i < 5; ++i) {
            const SyntheticModel model = verify_detail::small_random_model(rng, 5, 6, 4, 2, 0.5);
            EditRequest with_loc = verify_detail::small_request(rng, model, 3, 0.0);
            EditRequest no_loc = with_loc;
            no_loc.locality_keys.clear();
            const MatrixXd w = model.layers.back().weight + 0.2 * rng.gaussian_matrix(6, 5);
            const MatrixXd grad_edit = meta_loss_grad_W(model, w, no_loc);
            const MatrixXd grad_loc = meta_loss_grad_W(model, w, with_loc) - grad_edit;
            const MatrixXd fd_edit = verify_detail::fd_weight_gradient(
                [&](const MatrixXd& m) { return meta_loss(model, m, no_loc, no_loc.v_init).edit_loss; },
                w, 1e-5);
            const MatrixXd fd_loc = verify_detail::fd_weight_gradient(
                [&](const MatrixXd& m) { return meta_loss(model, m, with_loc, with_loc.v_init).loc_loss; },
                w, 1e-5);
            worst_edit = std::max(worst_edit,
                                  (grad_edit - fd_edit).norm() / std::max(fd_edit.norm(), 1e-12));
            worst_loc =
                std::max(worst_loc, (grad_loc - fd_loc).norm() / std::max(fd_loc.norm(), 1e-12));
        }
        checks.push_back({"meta_gradient_check",
                          worst_edit <= 1e-5 && worst_loc <= 1e-5 ? "pass" : "fail",
                          json{{"edit_rel_err", worst_edit}, {"loc_rel_err", worst_loc}}});
    }

    // proxy channel identity: d/dv of loss-through-proxy along any direction
    // equals <dv, S M^T>, and the norm bound ||S M^T|| <= ||S||_F ||M||_2
    {
        double worst_dir = 0.0, worst_bound = 0.0;
        for (int i = 0; i < 8; ++i) {
            const SyntheticModel model = verify_detail::small_random_model(rng, 6, 6, 4, 1, 0.8);
            const EditRequest request = verify_detail::small_request(rng, model, 2, 0.0);
            const StructuralGate gate = build_gate(model);
            const LayerMemory& last = model.layers.back();
            const VectorXd v = request.v_init + rng.gaussian_vector(6);
            auto loss_at = [&](const VectorXd& vv) {
                const MetaLossTerms t =
                    meta_loss(model, last.weight + proxy_update(vv, last, gate), request, vv);
                return t.edit_loss + t.loc_loss;
            };
            const MatrixXd s = meta_loss_grad_W(model, last.weight + proxy_update(v, last, gate),
                                                request);
            const VectorXd g_proxy = proxy_hypergradient(s, gate);
            const VectorXd dv = rng.gaussian_vector(6).normalized();
            const double h = 1e-4;
            const double fd = (loss_at(v + h * dv) - loss_at(v - h * dv)) / (2.0 * h);
            const double analytic = dv.dot(g_proxy);
            worst_dir = std::max(worst_dir,
                                 std::abs(fd - analytic) / std::max(std::abs(analytic), 1e-10));
            worst_bound = std::max(worst_bound,
                                   g_proxy.norm() - s.norm() * gate.gate_row.norm());
        }
        checks.push_back({"proxy_channel_identity",
                          worst_dir <= 1e-6 && worst_bound <= 1e-12 ? "pass" : "fail",
                          json{{"dir_derivative_rel_err", worst_dir},
                               {"norm_bound_slack", worst_bound}}});
    }

    // with no regularizer, task-signal components orthogonal to the gate row
    // never reach the target update
    {
        double worst = 0.0;
        for (int i = 0; i < 8; ++i) {
            const SyntheticModel model = verify_detail::small_random_model(rng, 6, 7, 4, 1, 0.8);
            const EditRequest request = verify_detail::small_request(rng, model, 2, 0.0);
            const StructuralGate gate = build_gate(model);
            const LayerMemory& last = model.layers.back();
            const VectorXd v = request.v_init + rng.gaussian_vector(7);
            const MatrixXd s = meta_loss_grad_W(model, last.weight + proxy_update(v, last, gate),
                                                request);
            const RowVectorXd m = gate.gate_row;
            const MatrixXd s_perp = s - (s * m.transpose()) * m / m.squaredNorm();
            worst = std::max(worst, (s_perp * m.transpose()).norm());
        }
        checks.push_back({"feasible_direction_filter", worst <= 1e-12 ? "pass" : "fail",
                          json{{"max_orthogonal_leak", worst}}});
    }

    // descent direction of the proxy hypergradient on zero-drift instances
    // with the residual concentrated at the final layer
    {
        int positive = 0, total = 0;
        bool norm_bound_ok = true;
        double min_cos = 1.0;
        for (int i = 0; i < options.descent_instances; ++i) {
            GeometryConfig g;
            g.d0 = 8;
            g.d1 = 8;
            g.V = 4;
            g.n_layers = 2;
            g.kappa = 50.0;
            g.protected_mass = 0.7;
            g.eps_C = 0.0;
            g.eps_k = 0.0;
            g.ridge = 0.5;
            g.seed = rng.next_u64();
            const SyntheticModel model = gen_model(g);
            Rng inst(mix_seed(g.seed, 77));
            EditRequest request = verify_detail::small_request(inst, model, 2, 0.0);
            const VectorXd v_star =
                stack_pre(model, all_layers(model)) + inst.gaussian_vector(g.d1);
            const FidelityReport rep =
                fidelity_report(model, request, v_star, 1e-4, AllocationMode::concentrated);
            ++total;
            if (rep.inner_product > 0.0) ++positive;
            min_cos = std::min(min_cos, rep.cosine);
            norm_bound_ok = norm_bound_ok && rep.alpha <= 1.0 + 1e-12;
        }
        const double fraction = static_cast<double>(positive) / static_cast<double>(total);
        checks.push_back({"proxy_descent", fraction >= 0.99 && norm_bound_ok ? "pass" : "fail",
                          json{{"positive_fraction", fraction},
                               {"min_cosine", min_cos},
                               {"norm_bound_ok", norm_bound_ok}}});
    }

    // inverse perturbation bound; reports precondition violation instead of
    // failing when the injected perturbation is too large for the bound
    {
        bool ok = true;
        bool precondition_hit = false;
        double max_slack = 0.0;
        for (int i = 0; i < 30; ++i) {
            const Eigen::Index d = 10;
            const MatrixXd a = verify_detail::random_psd(rng, d, 0.5, 5.0);
            MatrixXd e = symmetrized(rng.gaussian_matrix(d, d));
            const double target_norm = options.perturbation_scale * sym_lambda_min(a);
            e *= target_norm / sym_spectral_norm(e);
            try {
                const InversePerturbationCheck c = check_inverse_perturbation(a, e);
                ok = ok && c.holds;
                max_slack = std::max(max_slack, c.actual - c.bound);
            } catch (const ConfigError&) {
                precondition_hit = true;
            }
        }
        std::string status = "pass";
        if (precondition_hit)
            status = "precondition";
        else if (!ok)
            status = "fail";
        checks.push_back({"inverse_perturbation", status,
                          json{{"max_bound_slack", max_slack},
                               {"perturbation_scale", options.perturbation_scale}}});
    }

    // gate-row discrepancy across layers: exact zero at zero drift, and
    // bounded by the two-term decomposition constants along a drift sweep
    {
        GeometryConfig g = cfg.geometry;
        g.eps_C = 0.0;
        g.eps_k = 0.0;
        const GeometryDiscrepancy zero = check_geometry_discrepancy(gen_model(g));
        bool ok = zero.max_discrepancy <= 1e-12;
        json sweep = json::array();
        for (const double drift : {0.01, 0.02, 0.04, 0.08}) {
            GeometryConfig gd = g;
            gd.eps_C = drift / 2.0;
            gd.eps_k = drift / 2.0;
            const SyntheticModel model = gen_model(gd);
            const int last = model.last_layer();
            double mu = std::numeric_limits<double>::infinity(), b_key = 0.0;
            for (const auto& layer : model.layers) {
                mu = std::min(mu, sym_lambda_min(layer.covariance) + layer.ridge);
                b_key = std::max(b_key, layer.key.norm());
            }
            const RowVectorXd m_last = build_gate(model.layers[last], last).gate_row;
            double max_disc = 0.0;
            for (int l = 0; l < last; ++l) {
                const double eps_c_l = sym_spectral_norm(model.layers[l].covariance -
                                                         model.layers[last].covariance);
                const double eps_k_l = (model.layers[l].key - model.layers[last].key).norm();
                const double e_total = eps_c_l + 2.0 * b_key * eps_k_l;
                const double disc =
                    (build_gate(model.layers[l], l).gate_row - m_last).norm();
                const double bound = eps_k_l / mu + model.layers[last].key.norm() * e_total /
                                                        (mu * (mu - e_total));
                ok = ok && e_total < mu && disc <= bound + 1e-12;
                max_disc = std::max(max_disc, disc);
            }
            sweep.push_back(json{{"drift", drift}, {"max_discrepancy", max_disc}});
        }
        checks.push_back({"geometry_discrepancy", ok ? "pass" : "fail",
                          json{{"zero_drift_discrepancy", zero.max_discrepancy},
                               {"sweep", sweep}}});
    }

    // generator honors its dials and is bit-deterministic
    {
        const SyntheticModel a = gen_model(cfg.geometry);
        const SyntheticModel b = gen_model(cfg.geometry);
        bool identical = a.readout == b.readout && a.base_hidden == b.base_hidden;
        for (int l = 0; l < a.num_layers() && identical; ++l)
            identical = a.layers[l].weight == b.layers[l].weight &&
                        a.layers[l].key == b.layers[l].key &&
                        a.layers[l].covariance == b.layers[l].covariance;

        const VectorXd ev = sym_eigenvalues_desc(a.layers.back().covariance);
        const double ratio = ev[0] / ev[ev.size() - 1];
        const bool kappa_ok = std::abs(ratio - cfg.geometry.kappa) <= 0.02 * cfg.geometry.kappa;

        Eigen::SelfAdjointEigenSolver<MatrixXd> es(a.layers.back().covariance);
        const Eigen::Index n_prot = protected_dim(a.d0());
        const MatrixXd top = es.eigenvectors().rightCols(n_prot);
        const double mass =
            (top.transpose() * a.layers.back().key).squaredNorm() / a.layers.back().key.squaredNorm();
        // a degenerate spectrum has no well-defined protected subspace; the
        // placement dial is only checkable when the boundary gap is real
        const bool spectrum_split =
            ev[n_prot - 1] - ev[n_prot] > 1e-9 * std::max(ev[0], 1.0);
        const bool mass_ok = !spectrum_split ||
                             std::abs(mass - cfg.geometry.protected_mass) <=
                                 0.02 * std::max(cfg.geometry.protected_mass, 1e-6) + 1e-9;

        bool drift_ok = true;
        for (int l = 0; l + 1 < a.num_layers(); ++l) {
            drift_ok = drift_ok &&
                       sym_spectral_norm(a.layers[l].covariance - a.layers.back().covariance) <=
                           cfg.geometry.eps_C + 1e-12;
            drift_ok = drift_ok &&
                       (a.layers[l].key - a.layers.back().key).norm() <= cfg.geometry.eps_k + 1e-12;
        }
        checks.push_back({"generator_determinism_and_dials",
                          identical && kappa_ok && mass_ok && drift_ok ? "pass" : "fail",
                          json{{"bit_identical", identical},
                               {"eigenvalue_ratio", ratio},
                               {"protected_mass_measured", mass},
                               {"drift_within_bounds", drift_ok}}});
    }

    return checks;
}

inline bool all_checks_passed(const std::vector<CheckResult>& checks) {
    for (const auto& c : checks)
        if (c.status == "fail") return false;
    return true;
}

}  // namespace memedit
