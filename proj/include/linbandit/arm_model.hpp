#pragma once

#include <Eigen/Cholesky>
#include <Eigen/Dense>
#include <cstdint>
#include <optional>

#include "linbandit/common.hpp"

namespace linbandit {

/// Incremental ridge-regression state for one arm.
///
/// Maintains A = lambda*I + sum x x^T, b = sum r x and a cached A^-1 kept
/// current with Sherman-Morrison rank-one updates, so posterior queries cost
/// O(d^2) per observation instead of O(d^3).
class ArmModel {
public:
    ArmModel(int dim, double lambda) : lambda_(lambda) {
        if (dim < 1) throw std::invalid_argument("ArmModel: dim must be >= 1");
        if (lambda <= 0.0) throw std::invalid_argument("ArmModel: lambda must be > 0");
        a_ = Eigen::MatrixXd::Identity(dim, dim) * lambda;
        a_inv_ = Eigen::MatrixXd::Identity(dim, dim) / lambda;
        b_ = Eigen::VectorXd::Zero(dim);
    }

    // Restore from checkpointed sufficient statistics; the inverse is recomputed.
    ArmModel(Eigen::MatrixXd a, Eigen::VectorXd b, double lambda, std::int64_t n_updates)
        : a_(std::move(a)), b_(std::move(b)), lambda_(lambda), n_updates_(n_updates) {
        if (lambda <= 0.0) throw std::invalid_argument("ArmModel: lambda must be > 0");
        a_inv_ = dense_inverse();
    }

    void update(const Eigen::VectorXd& x, double reward) {
        if (x.size() != a_.rows()) throw std::invalid_argument("ArmModel::update: dimension mismatch");
        if (!x.allFinite() || !std::isfinite(reward)) throw DataError("ArmModel::update: non-finite input");

        a_.noalias() += x * x.transpose();
        b_.noalias() += reward * x;

        // Sherman-Morrison; 1 + x^T A^-1 x >= 1 because A^-1 is positive definite.
        const Eigen::VectorXd ax = a_inv_ * x;
        const double denom = 1.0 + x.dot(ax);
        a_inv_.noalias() -= (ax * ax.transpose()) / denom;
        a_inv_ = 0.5 * (a_inv_ + a_inv_.transpose()).eval();

        ++n_updates_;
        if (n_updates_ % kReinvertEvery == 0) a_inv_ = dense_inverse();
        theta_cache_.reset();
        chol_cache_.reset();
    }

    const Eigen::VectorXd& theta_hat() const {
        if (!theta_cache_) theta_cache_ = a_inv_ * b_;
        return *theta_cache_;
    }

    // x^T A^-1 x, with sub-roundoff negatives clamped to zero.
    double predictive_variance(const Eigen::VectorXd& x) const {
        if (!x.allFinite()) throw DataError("ArmModel::predictive_variance: non-finite input");
        const double value = x.dot(a_inv_ * x);
        if (value < 0.0) {
            if (value < -1e-12) throw NumericalError("predictive variance below -1e-12");
            return 0.0;
        }
        return value;
    }

    // Lower Cholesky factor of A^-1, cached until the next update. Near-singular
    // inverses get one retry with 1e-10 jitter on the diagonal.
    const Eigen::MatrixXd& inverse_cholesky() const {
        if (!chol_cache_) {
            Eigen::LLT<Eigen::MatrixXd> llt(a_inv_);
            if (llt.info() != Eigen::Success) {
                const Eigen::MatrixXd jittered =
                    a_inv_ + 1e-10 * Eigen::MatrixXd::Identity(a_inv_.rows(), a_inv_.cols());
                llt.compute(jittered);
                if (llt.info() != Eigen::Success)
                    throw NumericalError("Cholesky of A^-1 failed after jitter");
            }
            chol_cache_ = llt.matrixL();
        }
        return *chol_cache_;
    }

    int dim() const { return static_cast<int>(a_.rows()); }
    double lambda() const { return lambda_; }
    std::int64_t n_updates() const { return n_updates_; }
    const Eigen::MatrixXd& design() const { return a_; }
    const Eigen::MatrixXd& design_inverse() const { return a_inv_; }
    const Eigen::VectorXd& response() const { return b_; }

    // max |A * A_inv - I|, for integrity checks.
    double inverse_drift() const {
        const Eigen::MatrixXd residual =
            a_ * a_inv_ - Eigen::MatrixXd::Identity(a_.rows(), a_.cols());
        return residual.cwiseAbs().maxCoeff();
    }

    void reinvert() {
        a_inv_ = dense_inverse();
        theta_cache_.reset();
        chol_cache_.reset();
    }

private:
    static constexpr std::int64_t kReinvertEvery = 10000;

    Eigen::MatrixXd dense_inverse() const {
        return a_.llt().solve(Eigen::MatrixXd::Identity(a_.rows(), a_.cols()));
    }

    Eigen::MatrixXd a_;
    Eigen::MatrixXd a_inv_;
    Eigen::VectorXd b_;
    double lambda_;
    std::int64_t n_updates_ = 0;
    mutable std::optional<Eigen::VectorXd> theta_cache_;
    mutable std::optional<Eigen::MatrixXd> chol_cache_;
};

}  // namespace linbandit
