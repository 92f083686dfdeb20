#pragma once

#include <optional>
#include <string>
#include <vector>

#include "trc/linalg.hpp"

namespace trc {

struct MainStudyData {
    Vec y;  // n_M
    Mat z;  // n_M x p
    Mat w;  // n_M x q, q may be 0

    Index n() const { return z.rows(); }
    Index p() const { return z.cols(); }
    Index q() const { return w.cols(); }
    void validate() const;
};

struct ValidationStudyData {
    Mat x;  // n_V x p
    Mat z;  // n_V x p
    Mat w;  // n_V x q

    Index n() const { return z.rows(); }
    Index p() const { return z.cols(); }
    Index q() const { return w.cols(); }
    void validate() const;
};

// Z = c0 + C1'X + C2'W + e, var(e) = sigma_e.
// vcov_coeffs is ordered (c0, vec C1', vec C2').
struct MeasurementErrorModel {
    Vec c0;
    Mat C1;  // p x p
    Mat C2;  // q x p
    Mat sigma_e;
    Mat vcov_coeffs;
    Mat vcov_sigma_e;
    Index n = 0;
};

// Z = b0 + B2'W + e_z, var(e_z) = sigma_z.
// vcov_coeffs is ordered (b0, vec B2').
struct SurrogateMarginModel {
    Vec b0;
    Mat B2;  // q x p
    Mat sigma_z;
    Mat vcov_coeffs;
    Mat vcov_sigma_z;
    Index n = 0;
};

// Y on (1, Z, W); vcov ordered (beta0*, beta1*, beta2*).
struct OutcomeSurrogateFit {
    double beta0_star = 0.0;
    Vec beta1_star;
    Vec beta2_star;
    Mat vcov;
    Index n = 0;
};

// E(X | Z, W) = gamma0 + Gamma1'Z + Gamma2'W
struct CalibrationEquation {
    Vec gamma0;
    Mat Gamma1;  // p x p
    Mat Gamma2;  // q x p
    bool precision_gap_not_psd = false;
};

enum class Method { naive, original_rc, transportable_rc };

const char* method_name(Method m) noexcept;

struct CorrectedEstimate {
    double beta0 = 0.0;
    Vec beta1;
    Vec beta2;
    std::optional<Mat> vcov;
    Method method = Method::naive;
    std::vector<std::string> warnings;

    // (beta0, beta1, beta2) stacked
    Vec coefficients() const;
};

OutcomeSurrogateFit fit_naive(const MainStudyData& main);
MeasurementErrorModel fit_error_model(const ValidationStudyData& validation);
SurrogateMarginModel fit_surrogate_margin(const MainStudyData& main);

CalibrationEquation derive_calibration(const MeasurementErrorModel& me, const SurrogateMarginModel& sm);

Mat predict_true_exposures(const CalibrationEquation& cal, const Mat& z, const Mat& w);

CorrectedEstimate naive_estimate(const MainStudyData& main);
CorrectedEstimate transportable_rc_carroll(const MainStudyData& main, const ValidationStudyData& validation);
CorrectedEstimate transportable_rc_rosner(const MainStudyData& main, const ValidationStudyData& validation);
CorrectedEstimate original_rc(const MainStudyData& main, const ValidationStudyData& validation);

struct ThetaHat;
// Rosner form from already fitted pieces; lets callers share the naive fit.
CorrectedEstimate transportable_rc_from_theta(const ThetaHat& theta);
CorrectedEstimate original_rc_from_naive(const OutcomeSurrogateFit& naive, const ValidationStudyData& validation);

// Objective a' M^-1 (L2 Sz L2' + L1 Sx L1') M^-T a with M = L1 Gamma1' + L2,
// evaluated at the trial operators minus its value at L1 = Gamma1 Sx^-1, L2 = Sz^-1.
double operator_objective(const Mat& gamma1, const Mat& sigma_x, const Mat& sigma_z, const Vec& alpha,
                          const Mat& l1, const Mat& l2);
double optimal_operator_gap(const Mat& gamma1, const Mat& sigma_x, const Mat& sigma_z, const Vec& alpha,
                            const Mat& trial_l1, const Mat& trial_l2);

}  // namespace trc
