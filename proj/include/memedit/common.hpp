#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

namespace memedit {

using Eigen::MatrixXd;
using Eigen::RowVectorXd;
using Eigen::VectorXd;

/// Invalid configuration, dimension mismatch, or malformed input.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Effective geometry is not positive definite where the math requires it.
struct SingularGeometryError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Non-finite values or an iteration cap hit before convergence.
struct DivergenceError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

/// Derives an independent stream seed; used so per-item work is order-free.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
    return splitmix64(seed ^ splitmix64(stream + 1));
}

/// Deterministic random source. Gaussians go through an explicit Box-Muller
/// transform instead of std::normal_distribution, whose output sequence is
/// implementation-defined.
class Rng {
  public:
    explicit Rng(std::uint64_t seed) : eng_(seed) {}

    // uniform in [0, 1)
    double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    double gaussian() {
        constexpr double two_pi = 6.283185307179586476925286766559;
        const double u1 = std::max(uniform(), 0x1.0p-1022);
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(two_pi * u2);
    }

    VectorXd gaussian_vector(Eigen::Index n) {
        VectorXd v(n);
        for (Eigen::Index i = 0; i < n; ++i) v[i] = gaussian();
        return v;
    }

    MatrixXd gaussian_matrix(Eigen::Index rows, Eigen::Index cols) {
        MatrixXd m(rows, cols);
        for (Eigen::Index i = 0; i < rows; ++i)
            for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = gaussian();
        return m;
    }

    std::uint64_t next_u64() { return eng_(); }

    // uniform integer in [0, n)
    std::uint64_t below(std::uint64_t n) {
        return static_cast<std::uint64_t>(uniform() * static_cast<double>(n)) % n;
    }

  private:
    std::mt19937_64 eng_;
};

inline MatrixXd symmetrized(const MatrixXd& a) { return 0.5 * (a + a.transpose()); }

inline double max_abs_asymmetry(const MatrixXd& a) {
    return (a - a.transpose()).cwiseAbs().maxCoeff();
}

/// Haar-ish random orthogonal matrix: QR of a Gaussian draw with the sign
/// convention fixed so the result is a pure function of the rng state.
inline MatrixXd random_orthogonal(Rng& rng, Eigen::Index n) {
    const MatrixXd g = rng.gaussian_matrix(n, n);
    Eigen::HouseholderQR<MatrixXd> qr(g);
    MatrixXd q = qr.householderQ();
    const MatrixXd r = qr.matrixQR().triangularView<Eigen::Upper>();
    for (Eigen::Index j = 0; j < n; ++j)
        if (r(j, j) < 0.0) q.col(j) = -q.col(j);
    return q;
}

/// Eigenvalues of a symmetric matrix in descending order.
inline VectorXd sym_eigenvalues_desc(const MatrixXd& a) {
    Eigen::SelfAdjointEigenSolver<MatrixXd> es(a, Eigen::EigenvaluesOnly);
    if (es.info() != Eigen::Success) throw DivergenceError("eigendecomposition failed");
    return es.eigenvalues().reverse();
}

inline double sym_spectral_norm(const MatrixXd& a) {
    if (a.size() == 0) return 0.0;
    const VectorXd ev = sym_eigenvalues_desc(a);
    return std::max(std::abs(ev[0]), std::abs(ev[ev.size() - 1]));
}

inline double sym_lambda_min(const MatrixXd& a) {
    const VectorXd ev = sym_eigenvalues_desc(a);
    return ev[ev.size() - 1];
}

/// Inverse of a symmetric positive definite matrix. Refuses anything that is
/// singular or indefinite; the degeneracies this library studies must surface
/// as errors, never as silent pseudo-inverses.
inline MatrixXd spd_inverse(const MatrixXd& a, const char* what) {
    if (a.rows() != a.cols()) throw ConfigError(std::string(what) + ": matrix not square");
    Eigen::LLT<MatrixXd> llt(a);
    if (llt.info() != Eigen::Success)
        throw SingularGeometryError(std::string(what) + ": matrix not positive definite");
    const VectorXd d = llt.matrixLLT().diagonal();
    const double dmax = d.maxCoeff();
    if (!(d.minCoeff() > 1e-150) || !(d.minCoeff() > 1e-9 * dmax * std::numeric_limits<double>::epsilon()))
        throw SingularGeometryError(std::string(what) + ": matrix numerically singular");
    return llt.solve(MatrixXd::Identity(a.rows(), a.cols()));
}

/// Shortest decimal string that parses back to the exact same double.
inline std::string format_double(double x) {
    char buf[40];
    const auto res = std::to_chars(buf, buf + sizeof(buf), x);
    return std::string(buf, res.ptr);
}

inline double parse_double(std::string_view s) {
    double x = 0.0;
    const auto res = std::from_chars(s.data(), s.data() + s.size(), x);
    if (res.ec != std::errc{}) throw ConfigError("cannot parse number: " + std::string(s));
    return x;
}

}  // namespace memedit
