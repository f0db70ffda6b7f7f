#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "memedit/solvers.hpp"
#include "memedit/spectral.hpp"

using namespace memedit;

namespace {

MatrixXd random_psd(Rng& rng, Eigen::Index d, double lo, double hi) {
    const MatrixXd q = random_orthogonal(rng, d);
    VectorXd eigs(d);
    for (Eigen::Index i = 0; i < d; ++i) eigs[i] = rng.uniform(lo, hi);
    return symmetrized(q * eigs.asDiagonal() * q.transpose());
}

}  // namespace

TEST_CASE("spectral report on a hand-computable diagonal geometry") {
    MatrixXd c = MatrixXd::Zero(2, 2);
    c(0, 0) = 9.0;
    VectorXd k(2);
    k << 0.6, 0.8;
    const SpectralReport rep = spectral_report(c, 1.0, k);
    CHECK(rep.gamma == doctest::Approx(0.676).epsilon(1e-12));
    CHECK(rep.beta == doctest::Approx(0.676 / 1.676).epsilon(1e-10));
    CHECK(rep.eigenvalues[0] == doctest::Approx(9.0));
    CHECK(rep.key_alignment.sum() == doctest::Approx(1.0).epsilon(1e-10));
}

TEST_CASE("fully protected unit key under a huge eigenvalue") {
    MatrixXd c = MatrixXd::Zero(2, 2);
    c(0, 0) = 1e4;
    c(1, 1) = 1.0;
    VectorXd k(2);
    k << 1.0, 0.0;
    const SpectralReport rep = spectral_report(c, 0.0, k);
    CHECK(rep.gamma == doctest::Approx(1e-4).epsilon(1e-10));
    CHECK(rep.beta == doctest::Approx(9.999e-5).epsilon(1e-4));
}

TEST_CASE("spectral gamma agrees with the solver and dense inversion") {
    Rng rng(31);
    for (int i = 0; i < 40; ++i) {
        const Eigen::Index d0 = 2 + static_cast<Eigen::Index>(rng.below(63));
        const MatrixXd c = random_psd(rng, d0, 0.0, 7.0);
        const double ridge = 0.4;
        const VectorXd k = rng.gaussian_vector(d0);

        const SpectralReport rep = spectral_report(c, ridge, k);
        MatrixXd c_eff = c;
        c_eff.diagonal().array() += ridge;
        const double dense = k.dot(c_eff.llt().solve(k));
        CHECK(std::abs(rep.gamma - dense) <= 1e-10 * std::max(1.0, dense));

        LayerMemory layer;
        layer.weight = MatrixXd::Zero(2, d0);
        layer.key = k;
        layer.covariance = c;
        layer.ridge = ridge;
        const SolveResult res = solve_closed_form(layer, VectorXd::Ones(2));
        CHECK(std::abs(rep.beta - res.beta) <= 1e-10);
    }
}

TEST_CASE("C=0 reduces gamma to ||k||^2 / ridge, matching the solver") {
    Rng rng(5);
    const VectorXd k = rng.gaussian_vector(6);
    const SpectralReport rep = spectral_report(MatrixXd::Zero(6, 6), 2.0, k);
    CHECK(rep.gamma == doctest::Approx(k.squaredNorm() / 2.0).epsilon(1e-12));

    LayerMemory layer;
    layer.weight = MatrixXd::Zero(3, 6);
    layer.key = k;
    layer.covariance = MatrixXd::Zero(6, 6);
    layer.ridge = 2.0;
    const SolveResult res = solve_closed_form(layer, VectorXd::Ones(3));
    CHECK(std::abs(rep.gamma - res.gamma) < 1e-12 * std::max(1.0, res.gamma));
}

TEST_CASE("spectral report rejects bad inputs") {
    MatrixXd c(2, 2);
    c << 1, 2e-9, 0, 1;  // asymmetric beyond 1e-10
    CHECK_THROWS_AS(spectral_report(c, 0.1, VectorXd::Ones(2)), ConfigError);
    CHECK_THROWS_AS(spectral_report(MatrixXd::Zero(2, 2), 0.0, VectorXd::Ones(2)),
                    SingularGeometryError);
}

TEST_CASE("suppression bound holds when the key is fully protected") {
    Rng rng(8);
    const Eigen::Index d0 = 12;
    const Eigen::Index n_prot = protected_dim(d0);
    const MatrixXd q = random_orthogonal(rng, d0);
    const VectorXd coeff = rng.gaussian_vector(n_prot).normalized();
    for (const double sigma_min : {10.0, 100.0, 1e4, 1e6}) {
        VectorXd eigs(d0);
        for (Eigen::Index j = 0; j < d0; ++j)
            eigs[j] = j < n_prot ? sigma_min * static_cast<double>(1 + (n_prot - 1 - j)) : 0.2;
        const MatrixXd c = symmetrized(q * eigs.asDiagonal() * q.transpose());
        const VectorXd k = 3.0 * (q.leftCols(n_prot) * coeff);
        const SpectralReport rep = spectral_report(c, 0.5, k);
        const double bound = k.squaredNorm() / (k.squaredNorm() + sigma_min + 0.5);
        CHECK(rep.beta <= bound + 1e-10);
        CHECK(rep.suppression_upper_bound == doctest::Approx(bound).epsilon(1e-9));
    }
}

TEST_CASE("trust region radius: closed form and monotonicity") {
    VectorXd g(2);
    g << 3, 4;
    const MatrixXd h0 = MatrixXd::Zero(2, 2);
    CHECK(trust_region_radius(h0, g, 5.0) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(trust_region_radius(h0, g, 10.0) == doctest::Approx(0.5).epsilon(1e-12));

    Rng rng(9);
    for (int i = 0; i < 30; ++i) {
        const MatrixXd h = random_psd(rng, 8, 0.0, 5.0);
        const VectorXd grad = rng.gaussian_vector(8);
        double prev = std::numeric_limits<double>::infinity();
        for (const double lam : {0.1, 1.0, 10.0, 100.0}) {
            const double r = trust_region_radius(h, grad, lam);
            CHECK(r <= prev * (1.0 + 1e-12));
            prev = r;
        }
    }

    CHECK_THROWS_AS(trust_region_radius(-MatrixXd::Identity(2, 2), g, 0.0),
                    SingularGeometryError);
}

TEST_CASE("ball-ellipsoid gap and membership witnesses") {
    MatrixXd a(2, 2);
    a << 1, 0, 0, 100;
    CHECK(ball_ellipsoid_gap(a) == doctest::Approx(10.0).epsilon(1e-12));
    CHECK(ball_ellipsoid_gap(3.7 * MatrixXd::Identity(5, 5)) == doctest::Approx(1.0));
    CHECK_THROWS_AS(ball_ellipsoid_gap(MatrixXd::Zero(2, 2)), ConfigError);

    // singular geometry becomes usable through the dimensionless regularizer
    MatrixXd singular(2, 2);
    singular << 4, 0, 0, 0;
    const MatrixXd fixed = regularized_feasibility(singular);
    CHECK(sym_lambda_min(fixed) > 0.0);
    CHECK(ball_ellipsoid_gap(fixed) == doctest::Approx(std::sqrt(4.0 / (4e-8))).epsilon(1e-6));
    // positive definite inputs pass through untouched
    CHECK(regularized_feasibility(a) == a);

    Rng rng(10);
    const MatrixXd spd = random_psd(rng, 6, 0.2, 8.0);
    Eigen::SelfAdjointEigenSolver<MatrixXd> es(spd);
    const double lam_min = es.eigenvalues()[0];
    const double lam_max = es.eigenvalues()[5];
    const double tau = 1.7;

    // extreme eigendirection point sits on the boundary
    const VectorXd boundary = std::sqrt(tau / lam_min) * es.eigenvectors().col(0);
    CHECK(boundary.dot(spd * boundary) == doctest::Approx(tau).epsilon(1e-9));

    // the inscribed ball stays inside: 1000 sampled directions
    const double r_in = std::sqrt(tau / lam_max) * (1.0 - 1e-9);
    for (int s = 0; s < 1000; ++s) {
        const VectorXd x = r_in * rng.gaussian_vector(6).normalized();
        CHECK(x.dot(spd * x) <= tau);
    }
}

TEST_CASE("static trap witness: infeasible and feasible instances") {
    const TrapWitness hard = static_trap_witness(1.0, 100.0, 1.0, 1.0, 1.0, 0.2);
    CHECK(hard.easy_max_lambda == doctest::Approx(5.0));
    CHECK(hard.hard_min_lambda == doctest::Approx(10.0));
    CHECK_FALSE(hard.feasible);
    CHECK_FALSE(trap_grid_scan(hard).has_value());

    // instantiate the displacement curves at the two interval endpoints:
    // lambda = 5 makes progress but breaks feasibility, lambda = 10 is
    // feasible but makes no progress
    const Eigen::Matrix2d a_eps = Eigen::Vector2d(1.0, 100.0).asDiagonal();
    const Eigen::Vector2d e_min(1.0, 0.0), e_max(0.0, 1.0);
    for (const double lam : {5.0, 10.0}) {
        const Eigen::Vector2d u_easy = (hard.a / lam) * e_min;
        const Eigen::Vector2d u_hard = (hard.b / lam) * e_max;
        const bool progress = std::abs(e_min.dot(u_easy)) >= hard.m;
        const bool feasible = u_hard.dot(a_eps * u_hard) <= hard.tau;
        CHECK(progress == (lam == 5.0));
        CHECK(feasible == (lam == 10.0));
    }

    const TrapWitness ok = static_trap_witness(1.0, 100.0, 1.0, 1.0, 0.3, 0.2);
    CHECK(ok.hard_min_lambda == doctest::Approx(3.0));
    CHECK(ok.feasible);
    const auto found = trap_grid_scan(ok);
    REQUIRE(found.has_value());
    CHECK(*found >= 3.0 * (1.0 - 1e-9));
    CHECK(*found <= 5.0 * (1.0 + 1e-9));

    // lambda = 4 satisfies both predicates of the feasible variant directly
    CHECK(ok.a / 4.0 >= ok.m);
    CHECK(ok.lambda_max * ok.b * ok.b / 16.0 <= ok.tau);

    // m -> infinity closes the easy interval
    const TrapWitness closed = static_trap_witness(1.0, 100.0, 1.0, 1.0, 0.3, 1e12);
    CHECK_FALSE(closed.feasible);

    CHECK_THROWS_AS(static_trap_witness(1.0, 0.5, 1.0, 1.0, 1.0, 0.2), ConfigError);
    CHECK_THROWS_AS(static_trap_witness(-1.0, 2.0, 1.0, 1.0, 1.0, 0.2), ConfigError);
}

TEST_CASE("trap infeasibility confirmed by exhaustive predicate scan") {
    // when the witness says infeasible, no lambda on a fine log grid satisfies
    // both the progress and the feasibility predicate
    const TrapWitness hard = static_trap_witness(1.0, 400.0, 2.0, 0.7, 1.3, 0.3);
    REQUIRE_FALSE(hard.feasible);
    CHECK_FALSE(trap_grid_scan(hard, 10000).has_value());

    // the endpoints themselves satisfy their own predicate
    const double lam_easy = hard.easy_max_lambda;
    CHECK(hard.a / lam_easy >= hard.m - 1e-12);
    const double lam_hard = hard.hard_min_lambda;
    CHECK(hard.lambda_max * hard.b * hard.b / (lam_hard * lam_hard) <= hard.tau + 1e-12);
}

TEST_CASE("margin to progress") {
    VectorXd w(2);
    w << 0, 4;
    CHECK(margin_to_progress(2.0, w, MatrixXd::Identity(2, 2)) == doctest::Approx(0.5));

    MatrixXd p(2, 2);
    p << 1, 0, 0, 0;
    CHECK_THROWS_AS(margin_to_progress(2.0, w, p), SingularGeometryError);

    VectorXd w2(2);
    w2 << 3, 4;
    CHECK(margin_to_progress(1.0, w2, p) == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
}
