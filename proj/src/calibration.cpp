#include "trc/calibration.hpp"

#include <sstream>

#include "trc/error.hpp"
#include "trc/variance.hpp"

namespace trc {

const char* method_name(Method m) noexcept {
    switch (m) {
    case Method::naive: return "naive";
    case Method::original_rc: return "original-rc";
    case Method::transportable_rc: return "transportable-rc";
    }
    return "unknown";
}

Vec CorrectedEstimate::coefficients() const {
    Vec c(1 + beta1.size() + beta2.size());
    c(0) = beta0;
    c.segment(1, beta1.size()) = beta1;
    c.tail(beta2.size()) = beta2;
    return c;
}

namespace {

void check_rows(Index expected, Index got, const char* what) {
    if (expected != got) {
        std::ostringstream os;
        os << what << " has " << got << " rows, expected " << expected;
        throw Error(Errc::DimensionMismatch, what, os.str());
    }
}

void check_sample(Index n, Index p, Index q, const char* study) {
    if (p < 1) throw Error(Errc::DimensionMismatch, study, "need at least one exposure");
    if (n <= p + q + 1) {
        std::ostringstream os;
        os << "n = " << n << " but need n > p + q + 1 = " << p + q + 1;
        throw Error(Errc::InsufficientSampleSize, study, os.str());
    }
}

// Runs f, prefixing the subject of any library error with the stage name.
template <class F>
auto staged(const std::string& stage, F&& f) -> decltype(f()) {
    try {
        return f();
    } catch (const Error& e) {
        throw Error(e.code(), stage + "/" + e.subject(), e.detail());
    }
}

// Row map from vec(coef) to (intercepts, vec of slope-block transposes).
// coef is (1+k) x m with slope blocks of the given row sizes stacked below the intercept.
std::vector<Index> transposed_order(Index m, const std::vector<Index>& blocks) {
    Index r = 1;
    for (Index b : blocks) r += b;
    std::vector<Index> idx;
    for (Index j = 0; j < m; ++j) idx.push_back(r * j);
    Index off = 1;
    for (Index rows : blocks) {
        // vec(Block') entry (a, b) sits at a + m*b and equals coef(off + b, a)
        for (Index b = 0; b < rows; ++b)
            for (Index a = 0; a < m; ++a) idx.push_back(off + b + r * a);
        off += rows;
    }
    return idx;
}

Mat permute_sym(const Mat& v, const std::vector<Index>& idx) {
    const Index n = static_cast<Index>(idx.size());
    Mat out(n, n);
    for (Index i = 0; i < n; ++i)
        for (Index j = 0; j < n; ++j) out(i, j) = v(idx[i], idx[j]);
    return out;
}

void require_invertible_gamma1(const Mat& gamma1, const std::string& what) {
    const double c = condition_number(gamma1);
    if (!(c < kConditionLimit)) {
        std::ostringstream os;
        os << "Gamma1 condition number " << c << " exceeds " << kConditionLimit;
        throw Error(Errc::NonIdentifiable, what, os.str());
    }
}

const char* kPsdWarning = "sigma_e^-1 - sigma_z^-1 is not positive semidefinite";

}  // namespace

void MainStudyData::validate() const {
    check_rows(z.rows(), y.size(), "main.y");
    if (w.cols() > 0) check_rows(z.rows(), w.rows(), "main.w");
    check_sample(n(), p(), q(), "main");
    if (!y.allFinite() || !z.allFinite() || !w.allFinite())
        throw Error(Errc::NonFiniteInput, "main", "NaN or Inf in main study data");
}

void ValidationStudyData::validate() const {
    check_rows(z.rows(), x.rows(), "validation.x");
    if (x.cols() != z.cols()) throw Error(Errc::DimensionMismatch, "validation", "x and z differ in columns");
    if (w.cols() > 0) check_rows(z.rows(), w.rows(), "validation.w");
    check_sample(n(), p(), q(), "validation");
    if (!x.allFinite() || !z.allFinite() || !w.allFinite())
        throw Error(Errc::NonFiniteInput, "validation", "NaN or Inf in validation study data");
}

OutcomeSurrogateFit fit_naive(const MainStudyData& main) {
    main.validate();
    const Index p = main.p(), q = main.q();
    MultiOutputFit f = fit_multi_ols(design_with_intercept(main.z, main.w), main.y);
    OutcomeSurrogateFit out;
    out.beta0_star = f.coef(0, 0);
    out.beta1_star = f.coef.col(0).segment(1, p);
    out.beta2_star = f.coef.col(0).tail(q);
    out.vcov = f.coef_vcov;
    out.n = main.n();
    return out;
}

MeasurementErrorModel fit_error_model(const ValidationStudyData& validation) {
    validation.validate();
    const Index p = validation.p(), q = validation.q();
    MultiOutputFit f = fit_multi_ols(design_with_intercept(validation.x, validation.w), validation.z);
    MeasurementErrorModel me;
    me.c0 = f.coef.row(0).transpose();
    me.C1 = f.coef.middleRows(1, p);
    me.C2 = f.coef.bottomRows(q);
    me.sigma_e = f.residual_cov;
    me.vcov_coeffs = permute_sym(f.coef_vcov, transposed_order(p, {p, q}));
    me.vcov_sigma_e = f.residual_cov_vcov;
    me.n = validation.n();
    return me;
}

SurrogateMarginModel fit_surrogate_margin(const MainStudyData& main) {
    main.validate();
    const Index p = main.p(), q = main.q();
    MultiOutputFit f = fit_multi_ols(design_with_intercept(Mat(main.n(), 0), main.w), main.z);
    SurrogateMarginModel sm;
    sm.b0 = f.coef.row(0).transpose();
    sm.B2 = f.coef.bottomRows(q);
    sm.sigma_z = f.residual_cov;
    sm.vcov_coeffs = permute_sym(f.coef_vcov, transposed_order(p, {q}));
    sm.vcov_sigma_z = f.residual_cov_vcov;
    sm.n = main.n();
    return sm;
}

CalibrationEquation derive_calibration(const MeasurementErrorModel& me, const SurrogateMarginModel& sm) {
    const Index p = me.C1.rows();
    if (me.sigma_e.rows() != p || sm.sigma_z.rows() != p || sm.b0.size() != p || me.c0.size() != p ||
        me.C2.rows() != sm.B2.rows())
        throw Error(Errc::DimensionMismatch, "derive_calibration", "error model and margin disagree in shape");

    const Mat se = checked_inverse(me.sigma_e, "sigma_e");
    const Mat sz = checked_inverse(sm.sigma_z, "sigma_z");
    if (!(condition_number(me.C1) < kConditionLimit))
        throw Error(Errc::NonIdentifiable, "C1", "C1 is singular");
    const Mat m = se * me.C1.transpose();
    const Mat gap = se - sz;

    CalibrationEquation cal;
    cal.Gamma1 = checked_solve(m, gap, "sigma_e^-1 C1'").transpose();
    cal.gamma0 = checked_solve(m, sz * sm.b0 - se * me.c0, "sigma_e^-1 C1'");
    cal.Gamma2 = checked_solve(m, sz * sm.B2.transpose() - se * me.C2.transpose(), "sigma_e^-1 C1'").transpose();

    Eigen::SelfAdjointEigenSolver<Mat> eig(0.5 * (gap + gap.transpose()), Eigen::EigenvaluesOnly);
    const double scale = eig.eigenvalues().cwiseAbs().maxCoeff();
    cal.precision_gap_not_psd = eig.eigenvalues().minCoeff() < -1e-12 * scale;
    return cal;
}

Mat predict_true_exposures(const CalibrationEquation& cal, const Mat& z, const Mat& w) {
    const Index p = cal.Gamma1.rows();
    if (z.cols() != p || w.cols() != cal.Gamma2.rows() || (w.cols() > 0 && w.rows() != z.rows()))
        throw Error(Errc::DimensionMismatch, "predict_true_exposures", "z/w do not match the calibration equation");
    Mat xhat = z * cal.Gamma1;
    xhat.rowwise() += cal.gamma0.transpose();
    if (w.cols() > 0) xhat += w * cal.Gamma2;
    return xhat;
}

CorrectedEstimate naive_estimate(const MainStudyData& main) {
    OutcomeSurrogateFit f = fit_naive(main);
    CorrectedEstimate e;
    e.method = Method::naive;
    e.beta0 = f.beta0_star;
    e.beta1 = f.beta1_star;
    e.beta2 = f.beta2_star;
    e.vcov = f.vcov;
    return e;
}

namespace {

CorrectedEstimate with_delta_vcov(CorrectedEstimate e, const ThetaHat& theta) {
    DerivativeBlocks blocks = staged("variance", [&] { return derivative_blocks(theta); });
    e.vcov = assemble_vcov(theta, blocks, &e.warnings);
    return e;
}

}  // namespace

CorrectedEstimate transportable_rc_carroll(const MainStudyData& main, const ValidationStudyData& validation) {
    if (main.p() != validation.p() || main.q() != validation.q())
        throw Error(Errc::DimensionMismatch, "transportable_rc", "studies differ in p or q");
    ThetaHat theta;
    theta.error_model = staged("error-model", [&] { return fit_error_model(validation); });
    theta.margin = staged("surrogate-margin", [&] { return fit_surrogate_margin(main); });
    theta.outcome = staged("naive", [&] { return fit_naive(main); });
    theta.n_M = main.n();
    theta.n_V = validation.n();
    const CalibrationEquation cal =
        staged("calibration", [&] { return derive_calibration(theta.error_model, theta.margin); });
    staged("calibration", [&] { require_invertible_gamma1(cal.Gamma1, "Gamma1"); return 0; });

    const Mat xhat = predict_true_exposures(cal, main.z, main.w);
    const MultiOutputFit f = staged("outcome", [&] { return fit_multi_ols(design_with_intercept(xhat, main.w), main.y); });

    CorrectedEstimate e;
    e.method = Method::transportable_rc;
    const Index p = main.p(), q = main.q();
    e.beta0 = f.coef(0, 0);
    e.beta1 = f.coef.col(0).segment(1, p);
    e.beta2 = f.coef.col(0).tail(q);
    if (cal.precision_gap_not_psd) e.warnings.emplace_back(kPsdWarning);
    return with_delta_vcov(std::move(e), theta);
}

CorrectedEstimate transportable_rc_from_theta(const ThetaHat& theta) {
    const CalibrationEquation cal =
        staged("calibration", [&] { return derive_calibration(theta.error_model, theta.margin); });
    staged("calibration", [&] { require_invertible_gamma1(cal.Gamma1, "Gamma1"); return 0; });

    const Vec b = staged("correction", [&] { return corrected_coefficients(theta); });
    const Index p = theta.p(), q = theta.q();
    CorrectedEstimate e;
    e.method = Method::transportable_rc;
    e.beta0 = b(0);
    e.beta1 = b.segment(1, p);
    e.beta2 = b.tail(q);
    if (cal.precision_gap_not_psd) e.warnings.emplace_back(kPsdWarning);
    return with_delta_vcov(std::move(e), theta);
}

CorrectedEstimate transportable_rc_rosner(const MainStudyData& main, const ValidationStudyData& validation) {
    if (main.p() != validation.p() || main.q() != validation.q())
        throw Error(Errc::DimensionMismatch, "transportable_rc", "studies differ in p or q");
    ThetaHat theta;
    theta.error_model = staged("error-model", [&] { return fit_error_model(validation); });
    theta.margin = staged("surrogate-margin", [&] { return fit_surrogate_margin(main); });
    theta.outcome = staged("naive", [&] { return fit_naive(main); });
    theta.n_M = main.n();
    theta.n_V = validation.n();
    return transportable_rc_from_theta(theta);
}

CorrectedEstimate original_rc_from_naive(const OutcomeSurrogateFit& naive, const ValidationStudyData& validation) {
    validation.validate();
    const Index p = validation.p(), q = validation.q();
    if (naive.beta1_star.size() != p || naive.beta2_star.size() != q)
        throw Error(Errc::DimensionMismatch, "original_rc", "studies differ in p or q");
    const MultiOutputFit g = staged("calibration-model", [&] {
        return fit_multi_ols(design_with_intercept(validation.z, validation.w), validation.x);
    });
    const Vec gamma0 = g.coef.row(0).transpose();
    const Mat gamma1 = g.coef.middleRows(1, p);
    const Mat gamma2 = g.coef.bottomRows(q);
    staged("calibration-model", [&] { require_invertible_gamma1(gamma1, "Gamma1 (validation)"); return 0; });

    CorrectedEstimate e;
    e.method = Method::original_rc;
    e.beta1 = gamma1.partialPivLu().solve(naive.beta1_star);
    e.beta0 = naive.beta0_star - gamma0.dot(e.beta1);
    e.beta2 = naive.beta2_star - gamma2 * e.beta1;
    e.vcov = original_rc_vcov(naive, g, e.beta1);
    return e;
}

CorrectedEstimate original_rc(const MainStudyData& main, const ValidationStudyData& validation) {
    if (main.p() != validation.p() || main.q() != validation.q())
        throw Error(Errc::DimensionMismatch, "original_rc", "studies differ in p or q");
    const OutcomeSurrogateFit naive = staged("naive", [&] { return fit_naive(main); });
    return original_rc_from_naive(naive, validation);
}

double operator_objective(const Mat& gamma1, const Mat& sigma_x, const Mat& sigma_z, const Vec& alpha,
                          const Mat& l1, const Mat& l2) {
    const Index p = gamma1.rows();
    if (gamma1.cols() != p || sigma_x.rows() != p || sigma_z.rows() != p || alpha.size() != p || l1.rows() != p ||
        l1.cols() != p || l2.rows() != p || l2.cols() != p)
        throw Error(Errc::DimensionMismatch, "operator_objective", "all operands must be p x p");
    const Mat m = l1 * gamma1.transpose() + l2;
    const double c = condition_number(m);
    if (!(c < kConditionLimit)) throw Error(Errc::SingularOperatorSum, "L1 Gamma1' + L2", "operator sum is singular");
    const Vec u = m.transpose().partialPivLu().solve(alpha);
    const Mat s = l2 * sigma_z * l2.transpose() + l1 * sigma_x * l1.transpose();
    return u.dot(s * u);
}

double optimal_operator_gap(const Mat& gamma1, const Mat& sigma_x, const Mat& sigma_z, const Vec& alpha,
                            const Mat& trial_l1, const Mat& trial_l2) {
    const Mat l1 = gamma1 * checked_inverse(sigma_x, "sigma_x");
    const Mat l2 = checked_inverse(sigma_z, "sigma_z");
    const double best = operator_objective(gamma1, sigma_x, sigma_z, alpha, l1, l2);
    const double trial = operator_objective(gamma1, sigma_x, sigma_z, alpha, trial_l1, trial_l2);
    return trial - best;
}

}  // namespace trc
