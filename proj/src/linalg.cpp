#include "trc/linalg.hpp"

#include <cmath>
#include <sstream>

#include "trc/error.hpp"

namespace trc {

bool all_finite(const Mat& a) {
    return a.allFinite();
}

Mat kron(const Mat& a, const Mat& b) {
    Mat out(a.rows() * b.rows(), a.cols() * b.cols());
    for (Index i = 0; i < a.rows(); ++i)
        for (Index j = 0; j < a.cols(); ++j)
            out.block(i * b.rows(), j * b.cols(), b.rows(), b.cols()) = a(i, j) * b;
    return out;
}

Vec vec(const Mat& a) {
    // Eigen storage is column-major, so this is plain column stacking.
    return Eigen::Map<const Vec>(a.data(), a.size());
}

Mat unvec(const Vec& v, Index rows, Index cols) {
    if (v.size() != rows * cols)
        throw Error(Errc::DimensionMismatch, "unvec", "length does not equal rows*cols");
    return Eigen::Map<const Mat>(v.data(), rows, cols);
}

Mat commutation_matrix(Index p, Index q) {
    Mat k = Mat::Zero(p * q, p * q);
    // A(i,j) sits at i + p*j in vec(A) and at j + q*i in vec(A').
    for (Index i = 0; i < p; ++i)
        for (Index j = 0; j < q; ++j) k(j + q * i, i + p * j) = 1.0;
    return k;
}

Mat design_with_intercept(const Mat& a, const Mat& b) {
    if (a.cols() > 0 && b.cols() > 0 && a.rows() != b.rows())
        throw Error(Errc::DimensionMismatch, "design", "row counts differ");
    const Index n = a.cols() > 0 ? a.rows() : b.rows();
    Mat d(n, 1 + a.cols() + b.cols());
    d.col(0).setOnes();
    if (a.cols() > 0) d.middleCols(1, a.cols()) = a;
    if (b.cols() > 0) d.rightCols(b.cols()) = b;
    return d;
}

double condition_number(const Mat& a) {
    if (a.size() == 0) return 1.0;
    Eigen::JacobiSVD<Mat> svd(a);
    const auto& s = svd.singularValues();
    const double smax = s(0);
    const double smin = s(s.size() - 1);
    if (!(smax > 0.0) || !(smin > 0.0)) return INFINITY;
    return smax / smin;
}

static std::string cond_text(double c) {
    std::ostringstream os;
    os << "condition number " << c << " exceeds " << kConditionLimit;
    return os.str();
}

Mat checked_solve(const Mat& a, const Mat& b, const std::string& what) {
    if (a.rows() != a.cols() || a.rows() != b.rows())
        throw Error(Errc::DimensionMismatch, what, "solve shape mismatch");
    if (!a.allFinite()) throw Error(Errc::NonIdentifiable, what, "non-finite entries");
    const double c = condition_number(a);
    if (!(c < kConditionLimit)) throw Error(Errc::NonIdentifiable, what, cond_text(c));
    return a.partialPivLu().solve(b);
}

Mat checked_inverse(const Mat& a, const std::string& what) {
    return checked_solve(a, Mat::Identity(a.rows(), a.cols()), what);
}

MultiOutputFit fit_multi_ols(const Mat& design, const Mat& responses) {
    const Index n = design.rows();
    const Index cols = design.cols();
    const Index m = responses.cols();
    if (responses.rows() != n)
        throw Error(Errc::DimensionMismatch, "fit_multi_ols", "design and responses differ in rows");
    if (cols < 1 || m < 1)
        throw Error(Errc::DimensionMismatch, "fit_multi_ols", "empty design or responses");
    if (n <= cols) {
        std::ostringstream os;
        os << "n = " << n << " but need n > k + 1 = " << cols;
        throw Error(Errc::InsufficientSampleSize, "fit_multi_ols", os.str());
    }
    if (!design.allFinite() || !responses.allFinite())
        throw Error(Errc::NonFiniteInput, "fit_multi_ols", "NaN or Inf in input");

    Eigen::ColPivHouseholderQR<Mat> qr(design);
    Mat r = qr.matrixR().topLeftCorner(cols, cols).triangularView<Eigen::Upper>();
    const double cond = condition_number(r);
    if (!(cond < kConditionLimit))
        throw Error(Errc::RankDeficientDesign, "design", cond_text(cond));

    MultiOutputFit f;
    f.n = n;
    f.k = cols - 1;
    f.m = m;
    f.condition = cond;
    f.coef = qr.solve(responses);

    // (X'X)^-1 = P R^-1 R^-T P'
    Mat rinv = r.triangularView<Eigen::Upper>().solve(Mat::Identity(cols, cols));
    Mat perm_inv = rinv * rinv.transpose();
    const auto& perm = qr.colsPermutation();
    f.xtx_inv = perm * perm_inv * perm.transpose();
    f.xtx_inv = 0.5 * (f.xtx_inv + f.xtx_inv.transpose());

    Mat e = responses - design * f.coef;
    // residuals at rounding level mean an exact fit; zero them so that
    // a degenerate covariance is detected downstream
    for (Index j = 0; j < m; ++j) {
        const double scale = responses.col(j).cwiseAbs().maxCoeff();
        if (e.col(j).cwiseAbs().maxCoeff() <= 1e-12 * scale) e.col(j).setZero();
    }
    f.residual_cov = (e.transpose() * e) / static_cast<double>(n);
    f.residual_cov = 0.5 * (f.residual_cov + f.residual_cov.transpose());

    f.coef_vcov = kron(f.residual_cov, f.xtx_inv);
    Mat ss = kron(f.residual_cov, f.residual_cov);
    f.residual_cov_vcov = (ss + commutation_matrix(m, m) * ss) / static_cast<double>(n);
    f.residual_cov_vcov = 0.5 * (f.residual_cov_vcov + f.residual_cov_vcov.transpose());
    return f;
}

}  // namespace trc
