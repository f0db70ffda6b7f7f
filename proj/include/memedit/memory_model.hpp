#pragma once

#include <map>
#include <optional>
#include <vector>

#include "memedit/common.hpp"

namespace memedit {

/// One linear associative memory layer: the value-writing map `weight`, the
/// frozen key it was probed with, the uncentered key covariance that encodes
/// the protected memory distribution, the ridge coefficient, and (optionally)
/// a null-space projector for projection-style solvers. `ridge` doubles as
/// the isotropic coefficient when `projector` is set.
struct LayerMemory {
    MatrixXd weight;      // d1 x d0
    VectorXd key;         // d0
    MatrixXd covariance;  // d0 x d0, symmetric PSD
    double ridge = 0.0;
    std::optional<MatrixXd> projector;  // d0 x d0, symmetric idempotent

    Eigen::Index d0() const { return weight.cols(); }
    Eigen::Index d1() const { return weight.rows(); }

    void validate() const {
        if (weight.size() == 0) throw ConfigError("layer: empty weight");
        if (key.size() != d0()) throw ConfigError("layer: key length != d0");
        if (covariance.rows() != d0() || covariance.cols() != d0())
            throw ConfigError("layer: covariance shape != d0 x d0");
        if (max_abs_asymmetry(covariance) > 1e-12)
            throw ConfigError("layer: covariance asymmetric beyond 1e-12");
        if (sym_lambda_min(covariance) < -1e-10)
            throw ConfigError("layer: covariance has eigenvalue below -1e-10");
        if (!(ridge >= 0.0)) throw ConfigError("layer: ridge must be >= 0");
        if (projector) {
            const MatrixXd& p = *projector;
            if (p.rows() != d0() || p.cols() != d0())
                throw ConfigError("layer: projector shape != d0 x d0");
            if ((p - p.transpose()).norm() > 1e-10)
                throw ConfigError("layer: projector not symmetric");
            if ((p * p - p).norm() > 1e-10)
                throw ConfigError("layer: projector not idempotent");
        }
    }
};

/// A stack of memory layers feeding a softmax readout. The hidden state is
/// the residual-stream sum base_hidden + sum_l W_l k, so every layer sees the
/// same input key and layer contributions compose additively.
struct SyntheticModel {
    std::vector<LayerMemory> layers;  // last index is the proxy source layer L
    MatrixXd readout;                 // V x d1
    VectorXd base_hidden;             // d1

    Eigen::Index d0() const { return layers.empty() ? 0 : layers.front().d0(); }
    Eigen::Index d1() const { return layers.empty() ? 0 : layers.front().d1(); }
    Eigen::Index num_classes() const { return readout.rows(); }
    int num_layers() const { return static_cast<int>(layers.size()); }
    int last_layer() const { return num_layers() - 1; }

    void validate() const {
        if (layers.empty()) throw ConfigError("model: no layers");
        for (const auto& l : layers) {
            l.validate();
            if (l.d0() != d0() || l.d1() != d1())
                throw ConfigError("model: layers disagree on d0/d1");
        }
        if (num_classes() < 2) throw ConfigError("model: readout needs V >= 2");
        if (readout.cols() != d1()) throw ConfigError("model: readout cols != d1");
        if (base_hidden.size() != d1()) throw ConfigError("model: base_hidden length != d1");
    }
};

/// Dials for the synthetic geometry: covariance condition number, how much of
/// the edit key sits in the protected (top-eigenvalue) subspace, and the
/// cross-layer drift magnitudes the proxy-fidelity analysis assumes.
struct GeometryConfig {
    int d0 = 16;
    int d1 = 16;
    int V = 8;
    int n_layers = 3;
    double kappa = 1.0;
    double protected_mass = 0.5;
    double eps_C = 0.0;
    double eps_k = 0.0;
    double ridge = 0.1;
    std::uint64_t seed = 0;

    void validate() const {
        if (d0 < 2 || d1 < 1 || V < 2 || n_layers < 1)
            throw ConfigError("geometry: need d0 >= 2, d1 >= 1, V >= 2, n_layers >= 1");
        if (!(kappa >= 1.0)) throw ConfigError("geometry: kappa must be >= 1");
        if (!(protected_mass >= 0.0 && protected_mass <= 1.0))
            throw ConfigError("geometry: protected_mass must be in [0,1]");
        if (!(eps_C >= 0.0 && eps_k >= 0.0))
            throw ConfigError("geometry: drift magnitudes must be >= 0");
        if (!(ridge >= 0.0)) throw ConfigError("geometry: ridge must be >= 0");
    }
};

/// Size of the protected index set: the top quarter of the spectrum.
inline Eigen::Index protected_dim(Eigen::Index d0) { return (d0 + 3) / 4; }

namespace detail {

// Unit vector with `mass` of its squared norm in the span of basis columns
// [0, split) and the rest in [split, d0); scaled to length sqrt(d0).
inline VectorXd place_key(Rng& rng, const MatrixXd& basis, Eigen::Index split, double mass) {
    const Eigen::Index d0 = basis.rows();
    VectorXd a = rng.gaussian_vector(split);
    VectorXd b = rng.gaussian_vector(d0 - split);
    if (a.size() > 0 && a.norm() > 0) a.normalize();
    if (b.size() > 0 && b.norm() > 0) b.normalize();
    VectorXd k = VectorXd::Zero(d0);
    if (a.size() > 0) k += std::sqrt(mass) * (basis.leftCols(split) * a);
    if (b.size() > 0) k += std::sqrt(1.0 - mass) * (basis.rightCols(d0 - split) * b);
    return std::sqrt(static_cast<double>(d0)) * k;
}

}  // namespace detail

/// Builds a model whose final layer has covariance eigenvalue ratio `kappa`,
/// whose key places `protected_mass` of its energy in the top-eigenvalue
/// subspace, and whose earlier layers drift from the final one by exactly
/// eps_C (covariance, spectral norm) and eps_k (key). Pure function of cfg.
inline SyntheticModel gen_model(const GeometryConfig& cfg) {
    cfg.validate();
    Rng rng(splitmix64(cfg.seed));

    const Eigen::Index d0 = cfg.d0, d1 = cfg.d1;

    // Base covariance at the final layer: orthogonal basis, log-uniform
    // eigenvalues on [1, kappa] with the extremes pinned so the measured
    // condition number is exact.
    const MatrixXd basis = random_orthogonal(rng, d0);
    VectorXd eigs(d0);
    for (Eigen::Index j = 0; j < d0; ++j)
        eigs[j] = std::exp(rng.uniform(0.0, std::log(std::max(cfg.kappa, 1.0))));
    std::sort(eigs.data(), eigs.data() + d0, std::greater<double>());
    eigs[0] = cfg.kappa;
    eigs[d0 - 1] = 1.0;
    const MatrixXd cov_last = symmetrized(basis * eigs.asDiagonal() * basis.transpose());

    const Eigen::Index n_prot = protected_dim(d0);
    const VectorXd key_last = detail::place_key(rng, basis, n_prot, cfg.protected_mass);

    // Drift shrinks by a hair below the requested magnitude so the bound
    // ||C_l - C_L|| <= eps_C survives floating-point measurement.
    const double shrink = 1.0 - 1e-12;

    SyntheticModel model;
    model.layers.resize(cfg.n_layers);
    for (int l = 0; l < cfg.n_layers; ++l) {
        LayerMemory& layer = model.layers[l];
        layer.weight = rng.gaussian_matrix(d1, d0) / std::sqrt(static_cast<double>(d0));
        layer.ridge = cfg.ridge;
        if (l == cfg.n_layers - 1) {
            layer.covariance = cov_last;
            layer.key = key_last;
        } else {
            VectorXd w = rng.gaussian_vector(d0).normalized();
            layer.covariance = cov_last + (cfg.eps_C * shrink) * (w * w.transpose());
            VectorXd u = rng.gaussian_vector(d0).normalized();
            layer.key = key_last + (cfg.eps_k * shrink) * u;
        }
    }

    model.readout.resize(cfg.V, d1);
    for (int o = 0; o < cfg.V; ++o)
        model.readout.row(o) = rng.gaussian_vector(d1).normalized().transpose();
    model.base_hidden = rng.gaussian_vector(d1) / std::sqrt(static_cast<double>(d1));

    model.validate();
    return model;
}

using LayerOverrides = std::map<int, MatrixXd>;

/// Pure forward pass: readout * (base_hidden + sum_l W_l key), with per-call
/// weight replacement for any layer listed in `overrides`.
inline VectorXd forward(const SyntheticModel& model, const VectorXd& key,
                        const LayerOverrides& overrides) {
    if (key.size() != model.d0()) throw ConfigError("forward: key length != d0");
    VectorXd hidden = model.base_hidden;
    for (int l = 0; l < model.num_layers(); ++l) {
        const auto it = overrides.find(l);
        if (it != overrides.end()) {
            if (it->second.rows() != model.d1() || it->second.cols() != model.d0())
                throw ConfigError("forward: override shape mismatch");
            hidden += it->second * key;
        } else {
            hidden += model.layers[l].weight * key;
        }
    }
    return model.readout * hidden;
}

inline VectorXd forward(const SyntheticModel& model, const VectorXd& key) {
    return forward(model, key, LayerOverrides{});
}

/// Uncentered covariance sum_i k_i k_i^T of the rows of `keys`.
inline MatrixXd covariance_of(const MatrixXd& keys) {
    if (keys.rows() < 1) throw ConfigError("covariance_of: empty key set");
    return symmetrized(keys.transpose() * keys);
}

/// Copy of the model re-aimed at a new edit key: the final layer gets the key
/// exactly and earlier layers keep their original drift offsets, so the
/// cross-layer drift magnitudes are preserved.
inline SyntheticModel with_key(const SyntheticModel& model, const VectorXd& key) {
    if (key.size() != model.d0()) throw ConfigError("with_key: key length != d0");
    SyntheticModel out = model;
    const VectorXd& k_last = model.layers.back().key;
    for (auto& layer : out.layers) layer.key = key + (layer.key - k_last);
    return out;
}

/// Copy with every layer carrying the null-space projector of its own
/// protected subspace: P = I - U_S U_S^T over the top-eigenvalue directions.
inline SyntheticModel with_null_space_projectors(const SyntheticModel& model) {
    SyntheticModel out = model;
    for (auto& layer : out.layers) {
        Eigen::SelfAdjointEigenSolver<MatrixXd> es(layer.covariance);
        if (es.info() != Eigen::Success) throw DivergenceError("projector: eigensolver failed");
        const Eigen::Index d0 = layer.d0();
        const Eigen::Index n_prot = protected_dim(d0);
        // eigenvectors come back ascending; the protected set is the tail
        const MatrixXd top = es.eigenvectors().rightCols(n_prot);
        layer.projector = symmetrized(MatrixXd::Identity(d0, d0) - top * top.transpose());
    }
    return out;
}

/// Edited copy: W_l += delta_l for every entry of `deltas`.
inline SyntheticModel apply_weight_updates(const SyntheticModel& model,
                                           const std::map<int, MatrixXd>& deltas) {
    SyntheticModel out = model;
    for (const auto& [l, delta] : deltas) {
        if (l < 0 || l >= model.num_layers()) throw ConfigError("apply: layer index out of range");
        if (delta.rows() != model.d1() || delta.cols() != model.d0())
            throw ConfigError("apply: delta shape mismatch");
        out.layers[l].weight += delta;
    }
    return out;
}

}  // namespace memedit
