#pragma once

#include <string>
#include <vector>

#include "trc/calibration.hpp"

namespace trc {

// Everything the transportable estimator is a function of, with the
// finite-sample covariances of each piece. Parameter order used by
// pack/unpack and by the full Jacobian:
//   beta0*, beta1*, beta2*, b0, vec B2', vec Sz, c0, vec C1', vec C2', vec Se
struct ThetaHat {
    OutcomeSurrogateFit outcome;
    SurrogateMarginModel margin;
    MeasurementErrorModel error_model;
    Index n_M = 0;
    Index n_V = 0;

    Index p() const { return outcome.beta1_star.size(); }
    Index q() const { return outcome.beta2_star.size(); }
    void validate() const;

    // Same estimates, validation covariances rescaled as if n_V had been `nv`.
    ThetaHat with_validation_size(Index nv) const;
};

ThetaHat estimate_theta(const MainStudyData& main, const ValidationStudyData& validation);

Index theta_size(Index p, Index q);
Vec pack_theta(const ThetaHat& t);
// Overwrites the point estimates of `like` with the entries of v.
ThetaHat unpack_theta(const ThetaHat& like, const Vec& v);

// Block-diagonal covariance of pack_theta(t).
Mat parameter_vcov(const ThetaHat& t);

// (beta0, beta1, beta2) from the closed form; throws NonIdentifiable.
Vec corrected_coefficients(const ThetaHat& t);

// Denominator layout: rows index the parameter, columns the output.
// g0 = C B beta1* and g2 = D B beta1* are the intercept and confounder
// corrections, so beta0 = beta0* - g0 and beta2 = beta2* - g2.
struct DerivativeBlocks {
    Mat A;  // C1 Se
    Mat B;  // (Se - Sz)^-1
    Mat C;  // 1 x p, b0'Sz - c0'Se
    Mat D;  // q x p, B2 Sz - C2 Se
    Index p = 0;
    Index q = 0;

    Mat dBeta1_dBeta1star;  // p x p
    Mat dBeta1_dC1T;        // p^2 x p
    Mat dBeta1_dSigmaE;     // p^2 x p
    Mat dBeta1_dSigmaZ;     // p^2 x p

    Mat dG0_dBeta1star;  // p x 1
    Mat dG0_dc0;         // p x 1
    Mat dG0_db0;         // p x 1
    Mat dG0_dSigmaE;     // p^2 x 1
    Mat dG0_dSigmaZ;     // p^2 x 1

    Mat dG2_dBeta1star;  // p x q
    Mat dG2_dC2T;        // pq x q
    Mat dG2_dB2T;        // pq x q
    Mat dG2_dSigmaE;     // p^2 x q
    Mat dG2_dSigmaZ;     // p^2 x q
};

DerivativeBlocks derivative_blocks(const ThetaHat& t);

// theta_size x (1+p+q) Jacobian of corrected_coefficients, built from the blocks.
Mat full_jacobian(const DerivativeBlocks& d);

Mat assemble_vcov(const ThetaHat& t, const DerivativeBlocks& d, std::vector<std::string>* warnings = nullptr);

struct ConfidenceInterval {
    double estimate = 0.0;
    double se = 0.0;
    double lower = 0.0;
    double upper = 0.0;
};

double normal_quantile(double prob);
double two_sided_p_value(double z);

std::vector<ConfidenceInterval> confidence_intervals(const CorrectedEstimate& est, double level);

// Delta-method covariance of the original RC estimator given the main naive
// fit and the validation fit of X on (1, Z, W).
Mat original_rc_vcov(const OutcomeSurrogateFit& naive, const MultiOutputFit& calibration_fit, const Vec& beta1);

}  // namespace trc
