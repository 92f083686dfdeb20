#pragma once

#include <Eigen/Dense>
#include <string>

namespace trc {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;
using Index = Eigen::Index;

// Shared threshold for every "is this invertible" decision in the library.
inline constexpr double kConditionLimit = 1e12;

struct MultiOutputFit {
    Mat coef;               // (1+k) x m, intercept row first
    Mat residual_cov;       // m x m, 1/n divisor
    Mat coef_vcov;          // covariance of vec(coef), column-stacked
    Mat residual_cov_vcov;  // covariance of vec(residual_cov)
    Mat xtx_inv;            // (design' design)^-1
    Index n = 0;
    Index k = 0;
    Index m = 0;
    double condition = 0.0;  // 2-norm condition number of the design
};

MultiOutputFit fit_multi_ols(const Mat& design, const Mat& responses);

Mat kron(const Mat& a, const Mat& b);
Vec vec(const Mat& a);
Mat unvec(const Vec& v, Index rows, Index cols);

// K with K * vec(A) = vec(A') for A of size p x q.
Mat commutation_matrix(Index p, Index q);

// [1, a, b] with a leading column of ones; either block may have zero columns.
Mat design_with_intercept(const Mat& a, const Mat& b);

double condition_number(const Mat& a);

// Solves a x = b after checking a's condition number. Throws NonIdentifiable naming `what`.
Mat checked_solve(const Mat& a, const Mat& b, const std::string& what);
Mat checked_inverse(const Mat& a, const std::string& what);

bool all_finite(const Mat& a);

}  // namespace trc
