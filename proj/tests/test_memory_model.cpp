#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "memedit/memory_model.hpp"
#include "memedit/common.hpp"

using namespace memedit;

TEST_CASE("gen_model zero drift makes identical layers") {
    GeometryConfig cfg;
    cfg.d0 = 8;
    cfg.d1 = 6;
    cfg.n_layers = 3;
    cfg.eps_C = 0.0;
    cfg.eps_k = 0.0;
    cfg.kappa = 10.0;
    cfg.seed = 3;
    const SyntheticModel m = gen_model(cfg);
    REQUIRE(m.num_layers() == 3);
    for (int l = 0; l < 2; ++l) {
        CHECK((m.layers[l].covariance - m.layers[2].covariance).norm() == 0.0);
        CHECK((m.layers[l].key - m.layers[2].key).norm() == 0.0);
    }
}

TEST_CASE("gen_model kappa=1 gives a positive multiple of identity") {
    GeometryConfig cfg;
    cfg.d0 = 8;
    cfg.kappa = 1.0;
    cfg.seed = 11;
    const SyntheticModel m = gen_model(cfg);
    const VectorXd ev = sym_eigenvalues_desc(m.layers.back().covariance);
    CHECK(ev[0] / ev[ev.size() - 1] == doctest::Approx(1.0).epsilon(0.02));
    CHECK((m.layers.back().covariance - ev[0] * MatrixXd::Identity(8, 8)).norm() < 1e-8);
}

TEST_CASE("gen_model reproduces requested spectrum and key placement") {
    GeometryConfig cfg;
    cfg.d0 = 8;
    cfg.kappa = 1e4;
    cfg.protected_mass = 0.99;
    cfg.seed = 7;
    const SyntheticModel m = gen_model(cfg);
    const LayerMemory& last = m.layers.back();

    Eigen::SelfAdjointEigenSolver<MatrixXd> es(last.covariance);
    const VectorXd ev = es.eigenvalues();
    CHECK(ev[ev.size() - 1] / ev[0] == doctest::Approx(1e4).epsilon(0.02));

    const Eigen::Index n_prot = protected_dim(8);
    const MatrixXd top = es.eigenvectors().rightCols(n_prot);
    const double mass = (top.transpose() * last.key).squaredNorm() / last.key.squaredNorm();
    CHECK(mass == doctest::Approx(0.99).epsilon(0.02));
}

TEST_CASE("gen_model drift dials are honored exactly") {
    GeometryConfig cfg;
    cfg.d0 = 10;
    cfg.n_layers = 4;
    cfg.eps_C = 0.05;
    cfg.eps_k = 0.02;
    cfg.seed = 21;
    const SyntheticModel m = gen_model(cfg);
    for (int l = 0; l < 3; ++l) {
        CHECK(sym_spectral_norm(m.layers[l].covariance - m.layers[3].covariance) <= 0.05);
        CHECK((m.layers[l].key - m.layers[3].key).norm() <= 0.02);
    }
}

TEST_CASE("gen_model is deterministic and rejects bad dials") {
    GeometryConfig cfg;
    cfg.seed = 42;
    const SyntheticModel a = gen_model(cfg);
    const SyntheticModel b = gen_model(cfg);
    CHECK(a.readout == b.readout);
    CHECK(a.base_hidden == b.base_hidden);
    for (int l = 0; l < a.num_layers(); ++l) {
        CHECK(a.layers[l].weight == b.layers[l].weight);
        CHECK(a.layers[l].covariance == b.layers[l].covariance);
        CHECK(a.layers[l].key == b.layers[l].key);
    }

    GeometryConfig bad = cfg;
    bad.kappa = 0.5;
    CHECK_THROWS_AS(gen_model(bad), ConfigError);
    bad = cfg;
    bad.protected_mass = 1.5;
    CHECK_THROWS_AS(gen_model(bad), ConfigError);
}

TEST_CASE("forward composes identity pieces") {
    SyntheticModel m;
    LayerMemory layer;
    layer.weight = MatrixXd::Identity(2, 2);
    layer.key = VectorXd::Zero(2);
    layer.covariance = MatrixXd::Zero(2, 2);
    layer.ridge = 1.0;
    m.layers.push_back(layer);
    m.readout = MatrixXd::Identity(2, 2);
    m.base_hidden = VectorXd::Zero(2);

    VectorXd key(2);
    key << 1.0, 2.0;
    const VectorXd logits = forward(m, key);
    CHECK(logits[0] == doctest::Approx(1.0));
    CHECK(logits[1] == doctest::Approx(2.0));

    // no-op override leaves logits untouched
    const VectorXd same = forward(m, key, {{0, m.layers[0].weight}});
    CHECK((logits - same).norm() == 0.0);

    CHECK_THROWS_AS(forward(m, VectorXd::Zero(3)), ConfigError);
}

TEST_CASE("forward matches a naive matrix-product oracle") {
    GeometryConfig cfg;
    cfg.d0 = 8;
    cfg.d1 = 6;
    cfg.V = 5;
    cfg.n_layers = 3;
    cfg.kappa = 100.0;
    cfg.seed = 7;
    const SyntheticModel m = gen_model(cfg);
    const VectorXd key = m.layers.back().key;

    // hand-rolled evaluation with explicit loops
    VectorXd hidden = m.base_hidden;
    for (const auto& layer : m.layers) {
        for (Eigen::Index i = 0; i < layer.d1(); ++i) {
            double acc = 0.0;
            for (Eigen::Index j = 0; j < layer.d0(); ++j) acc += layer.weight(i, j) * key[j];
            hidden[i] += acc;
        }
    }
    VectorXd logits = VectorXd::Zero(m.num_classes());
    for (Eigen::Index o = 0; o < m.num_classes(); ++o)
        for (Eigen::Index i = 0; i < m.d1(); ++i) logits[o] += m.readout(o, i) * hidden[i];

    CHECK((forward(m, key) - logits).norm() < 1e-12);
}

TEST_CASE("forward is linear in the key up to the readout offset") {
    GeometryConfig cfg;
    cfg.seed = 5;
    const SyntheticModel m = gen_model(cfg);
    Rng rng(9);
    const VectorXd k = rng.gaussian_vector(m.d0());
    const VectorXd offset = m.readout * m.base_hidden;
    for (const double a : {-2.0, 0.5, 3.0}) {
        const VectorXd lhs = forward(m, a * k) - offset;
        const VectorXd rhs = a * (forward(m, k) - offset);
        CHECK((lhs - rhs).norm() < 1e-10 * std::max(1.0, rhs.norm()));
    }
}

TEST_CASE("covariance_of matches the double-loop oracle") {
    MatrixXd two(2, 2);
    two << 1, 0, 0, 1;
    CHECK((covariance_of(two) - MatrixXd::Identity(2, 2)).norm() == 0.0);

    MatrixXd one(1, 2);
    one << 2, 0;
    MatrixXd expected(2, 2);
    expected << 4, 0, 0, 0;
    CHECK((covariance_of(one) - expected).norm() == 0.0);

    Rng rng(13);
    const MatrixXd keys = rng.gaussian_matrix(50, 6);
    MatrixXd oracle = MatrixXd::Zero(6, 6);
    for (int i = 0; i < 50; ++i)
        for (int a = 0; a < 6; ++a)
            for (int b = 0; b < 6; ++b) oracle(a, b) += keys(i, a) * keys(i, b);
    CHECK((covariance_of(keys) - oracle).norm() < 1e-12 * oracle.norm());

    CHECK_THROWS_AS(covariance_of(MatrixXd(0, 4)), ConfigError);
}

TEST_CASE("with_key preserves drift offsets; projector helper is valid") {
    GeometryConfig cfg;
    cfg.d0 = 8;
    cfg.n_layers = 3;
    cfg.eps_k = 0.03;
    cfg.eps_C = 0.01;
    cfg.seed = 2;
    const SyntheticModel m = gen_model(cfg);
    Rng rng(4);
    const VectorXd k = rng.gaussian_vector(8);
    const SyntheticModel rekeyed = with_key(m, k);
    CHECK((rekeyed.layers.back().key - k).norm() == 0.0);
    for (int l = 0; l < 2; ++l) {
        const VectorXd before = m.layers[l].key - m.layers.back().key;
        const VectorXd after = rekeyed.layers[l].key - rekeyed.layers.back().key;
        CHECK((before - after).norm() < 1e-15);
    }

    const SyntheticModel proj = with_null_space_projectors(m);
    for (const auto& layer : proj.layers) {
        REQUIRE(layer.projector.has_value());
        layer.validate();
        // annihilates the protected subspace of its own covariance
        Eigen::SelfAdjointEigenSolver<MatrixXd> es(layer.covariance);
        const MatrixXd top = es.eigenvectors().rightCols(protected_dim(8));
        CHECK(((*layer.projector) * top).norm() < 1e-9);
    }
}

TEST_CASE("layer validation rejects malformed inputs") {
    LayerMemory layer;
    layer.weight = MatrixXd::Zero(2, 2);
    layer.key = VectorXd::Zero(2);
    layer.covariance = MatrixXd::Zero(2, 2);
    layer.covariance(0, 1) = 1e-6;  // asymmetric
    CHECK_THROWS_AS(layer.validate(), ConfigError);

    layer.covariance = -MatrixXd::Identity(2, 2);
    CHECK_THROWS_AS(layer.validate(), ConfigError);

    layer.covariance = MatrixXd::Zero(2, 2);
    layer.ridge = -1.0;
    CHECK_THROWS_AS(layer.validate(), ConfigError);

    layer.ridge = 1.0;
    MatrixXd p(2, 2);
    p << 0.5, 0.5, 0.5, 0.6;  // not idempotent
    layer.projector = p;
    CHECK_THROWS_AS(layer.validate(), ConfigError);
}
