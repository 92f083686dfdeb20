#include "trc/variance.hpp"

#include <boost/math/distributions/normal.hpp>
#include <cmath>
#include <sstream>

#include "trc/error.hpp"

namespace trc {

void ThetaHat::validate() const {
    const Index pp = p(), qq = q();
    const auto bad = [](const char* what) { throw Error(Errc::DimensionMismatch, what, "inconsistent with p, q"); };
    if (outcome.vcov.rows() != 1 + pp + qq) bad("outcome.vcov");
    if (margin.b0.size() != pp || margin.B2.rows() != qq || margin.B2.cols() != pp) bad("margin");
    if (margin.sigma_z.rows() != pp || margin.sigma_z.cols() != pp) bad("sigma_z");
    if (margin.vcov_coeffs.rows() != pp * (1 + qq) || margin.vcov_sigma_z.rows() != pp * pp) bad("margin vcov");
    const auto& e = error_model;
    if (e.c0.size() != pp || e.C1.rows() != pp || e.C1.cols() != pp || e.C2.rows() != qq || e.C2.cols() != pp)
        bad("error_model");
    if (e.sigma_e.rows() != pp || e.sigma_e.cols() != pp) bad("sigma_e");
    if (e.vcov_coeffs.rows() != pp * (1 + pp + qq) || e.vcov_sigma_e.rows() != pp * pp) bad("error_model vcov");
}

ThetaHat ThetaHat::with_validation_size(Index nv) const {
    if (nv <= 0 || n_V <= 0) throw Error(Errc::InvalidSpec, "n_V", "sample sizes must be positive");
    ThetaHat t = *this;
    const double f = static_cast<double>(n_V) / static_cast<double>(nv);
    t.error_model.vcov_coeffs *= f;
    t.error_model.vcov_sigma_e *= f;
    t.error_model.n = nv;
    t.n_V = nv;
    return t;
}

ThetaHat estimate_theta(const MainStudyData& main, const ValidationStudyData& validation) {
    if (main.p() != validation.p() || main.q() != validation.q())
        throw Error(Errc::DimensionMismatch, "estimate_theta", "studies differ in p or q");
    ThetaHat t;
    t.outcome = fit_naive(main);
    t.margin = fit_surrogate_margin(main);
    t.error_model = fit_error_model(validation);
    t.n_M = main.n();
    t.n_V = validation.n();
    return t;
}

Index theta_size(Index p, Index q) {
    return (1 + p + q) + p * (1 + q) + p * p + p * (1 + p + q) + p * p;
}

namespace {

struct Offsets {
    Index out, b0, B2, Sz, c0, C1, C2, Se, total;
    Offsets(Index p, Index q) {
        out = 0;
        b0 = 1 + p + q;
        B2 = b0 + p;
        Sz = B2 + p * q;
        c0 = Sz + p * p;
        C1 = c0 + p;
        C2 = C1 + p * p;
        Se = C2 + p * q;
        total = Se + p * p;
    }
};

Vec vec_t(const Mat& a) {
    return vec(Mat(a.transpose()));
}

}  // namespace

Vec pack_theta(const ThetaHat& t) {
    const Index p = t.p(), q = t.q();
    const Offsets o(p, q);
    Vec v(o.total);
    v(0) = t.outcome.beta0_star;
    v.segment(1, p) = t.outcome.beta1_star;
    v.segment(1 + p, q) = t.outcome.beta2_star;
    v.segment(o.b0, p) = t.margin.b0;
    v.segment(o.B2, p * q) = vec_t(t.margin.B2);
    v.segment(o.Sz, p * p) = vec(t.margin.sigma_z);
    v.segment(o.c0, p) = t.error_model.c0;
    v.segment(o.C1, p * p) = vec_t(t.error_model.C1);
    v.segment(o.C2, p * q) = vec_t(t.error_model.C2);
    v.segment(o.Se, p * p) = vec(t.error_model.sigma_e);
    return v;
}

ThetaHat unpack_theta(const ThetaHat& like, const Vec& v) {
    const Index p = like.p(), q = like.q();
    const Offsets o(p, q);
    if (v.size() != o.total) throw Error(Errc::DimensionMismatch, "unpack_theta", "wrong parameter count");
    ThetaHat t = like;
    t.outcome.beta0_star = v(0);
    t.outcome.beta1_star = v.segment(1, p);
    t.outcome.beta2_star = v.segment(1 + p, q);
    t.margin.b0 = v.segment(o.b0, p);
    t.margin.B2 = unvec(v.segment(o.B2, p * q), p, q).transpose();
    t.margin.sigma_z = unvec(v.segment(o.Sz, p * p), p, p);
    t.error_model.c0 = v.segment(o.c0, p);
    t.error_model.C1 = unvec(v.segment(o.C1, p * p), p, p).transpose();
    t.error_model.C2 = unvec(v.segment(o.C2, p * q), p, q).transpose();
    t.error_model.sigma_e = unvec(v.segment(o.Se, p * p), p, p);
    return t;
}

Mat parameter_vcov(const ThetaHat& t) {
    t.validate();
    const Offsets o(t.p(), t.q());
    Mat s = Mat::Zero(o.total, o.total);
    const auto put = [&](Index at, const Mat& b) { s.block(at, at, b.rows(), b.cols()) = b; };
    put(o.out, t.outcome.vcov);
    put(o.b0, t.margin.vcov_coeffs);
    put(o.Sz, t.margin.vcov_sigma_z);
    put(o.c0, t.error_model.vcov_coeffs);
    put(o.Se, t.error_model.vcov_sigma_e);
    return s;
}

Vec corrected_coefficients(const ThetaHat& t) {
    const Index p = t.p(), q = t.q();
    const auto& e = t.error_model;
    const auto& m = t.margin;
    const Mat se = checked_inverse(e.sigma_e, "sigma_e");
    const Mat sz = checked_inverse(m.sigma_z, "sigma_z");
    const Vec v = checked_solve(se - sz, t.outcome.beta1_star, "sigma_e^-1 - sigma_z^-1");
    Vec out(1 + p + q);
    out(0) = t.outcome.beta0_star - (m.b0.transpose() * sz - e.c0.transpose() * se).dot(v);
    out.segment(1, p) = e.C1 * (se * v);
    out.tail(q) = t.outcome.beta2_star - (m.B2 * sz - e.C2 * se) * v;
    return out;
}

// Every block below comes from one differential identity: for f = M dS N with
// dS the perturbation of a p x p matrix, the denominator-layout gradient
// is N (x) M'. Inverses enter through dS^-1 = -S^-1 dS S^-1.
DerivativeBlocks derivative_blocks(const ThetaHat& t) {
    t.validate();
    const Index p = t.p(), q = t.q();
    const auto& e = t.error_model;
    const auto& m = t.margin;
    const Vec& b1s = t.outcome.beta1_star;

    const Mat se = checked_inverse(e.sigma_e, "sigma_e");
    const Mat sz = checked_inverse(m.sigma_z, "sigma_z");
    DerivativeBlocks d;
    d.p = p;
    d.q = q;
    d.A = e.C1 * se;
    d.B = checked_inverse(se - sz, "sigma_e^-1 - sigma_z^-1");
    d.C = m.b0.transpose() * sz - e.c0.transpose() * se;
    d.D = m.B2 * sz - e.C2 * se;

    const Vec v = d.B * b1s;
    const Vec sev = se * v;
    const Vec szv = sz * v;
    const Mat ip = Mat::Identity(p, p);
    const Mat iq = Mat::Identity(q, q);
    const Mat AB = d.A * d.B;
    const Mat CB = d.C * d.B;
    const Mat DB = d.D * d.B;

    // beta1 = A B beta1*
    d.dBeta1_dBeta1star = AB.transpose();
    d.dBeta1_dC1T = kron(ip, sev);
    d.dBeta1_dSigmaE = -kron(sev, se.transpose() * (e.C1 - AB).transpose());
    d.dBeta1_dSigmaZ = -kron(szv, sz.transpose() * AB.transpose());

    // g0 = C B beta1*
    d.dG0_dBeta1star = CB.transpose();
    d.dG0_dc0 = -sev;
    d.dG0_db0 = szv;
    d.dG0_dSigmaE = kron(sev, se.transpose() * (e.c0 + CB.transpose()));
    d.dG0_dSigmaZ = -kron(szv, sz.transpose() * (m.b0 + CB.transpose()));

    // g2 = D B beta1*
    d.dG2_dBeta1star = DB.transpose();
    d.dG2_dC2T = -kron(iq, sev);
    d.dG2_dB2T = kron(iq, szv);
    d.dG2_dSigmaE = kron(sev, se.transpose() * (e.C2 + DB).transpose());
    d.dG2_dSigmaZ = -kron(szv, sz.transpose() * (m.B2 + DB).transpose());
    return d;
}

Mat full_jacobian(const DerivativeBlocks& d) {
    const Index p = d.p, q = d.q;
    const Offsets o(p, q);
    const Index c1 = 1, c2 = 1 + p;
    Mat j = Mat::Zero(o.total, 1 + p + q);

    j(0, 0) = 1.0;
    j.block(1, 0, p, 1) = -d.dG0_dBeta1star;
    j.block(1, c1, p, p) = d.dBeta1_dBeta1star;
    j.block(1, c2, p, q) = -d.dG2_dBeta1star;
    j.block(1 + p, c2, q, q) = Mat::Identity(q, q);

    j.block(o.b0, 0, p, 1) = -d.dG0_db0;
    j.block(o.B2, c2, p * q, q) = -d.dG2_dB2T;
    j.block(o.Sz, 0, p * p, 1) = -d.dG0_dSigmaZ;
    j.block(o.Sz, c1, p * p, p) = d.dBeta1_dSigmaZ;
    j.block(o.Sz, c2, p * p, q) = -d.dG2_dSigmaZ;

    j.block(o.c0, 0, p, 1) = -d.dG0_dc0;
    j.block(o.C1, c1, p * p, p) = d.dBeta1_dC1T;
    j.block(o.C2, c2, p * q, q) = -d.dG2_dC2T;
    j.block(o.Se, 0, p * p, 1) = -d.dG0_dSigmaE;
    j.block(o.Se, c1, p * p, p) = d.dBeta1_dSigmaE;
    j.block(o.Se, c2, p * p, q) = -d.dG2_dSigmaE;
    return j;
}

// The covariance of the estimates is block diagonal across five groups:
// main-study outcome coefficients, margin coefficients, sigma_z, error-model
// coefficients and sigma_e. The two studies are independent, OLS coefficients
// are independent of residual covariances, and the outcome coefficients are
// asymptotically uncorrelated with the margin fit. Each of the six
// var/cov blocks of (beta0, beta1, beta2) is therefore a sum of one
// sandwich per group, which is what the loop below accumulates.
Mat assemble_vcov(const ThetaHat& t, const DerivativeBlocks& d, std::vector<std::string>* warnings) {
    const Index p = t.p(), q = t.q();
    if (d.p != p || d.q != q) throw Error(Errc::DimensionMismatch, "assemble_vcov", "blocks do not match theta");
    const Offsets o(p, q);
    const Mat j = full_jacobian(d);

    struct Group {
        Index at;
        const Mat* cov;
    };
    const Group groups[] = {
        {o.out, &t.outcome.vcov},          {o.b0, &t.margin.vcov_coeffs},          {o.Sz, &t.margin.vcov_sigma_z},
        {o.c0, &t.error_model.vcov_coeffs}, {o.Se, &t.error_model.vcov_sigma_e},
    };
    Mat v = Mat::Zero(1 + p + q, 1 + p + q);
    for (const auto& g : groups) {
        const Mat jg = j.middleRows(g.at, g.cov->rows());
        v.noalias() += jg.transpose() * (*g.cov) * jg;
    }
    v = 0.5 * (v + v.transpose());

    for (Index i = 0; i < v.rows(); ++i) {
        if (!(v(i, i) >= 0.0)) {
            if (warnings) {
                std::ostringstream os;
                os << "negative variance " << v(i, i) << " for coefficient " << i << " floored at 0";
                warnings->push_back(os.str());
            }
            v(i, i) = 0.0;
        }
    }
    return v;
}

double normal_quantile(double prob) {
    static const boost::math::normal_distribution<double> n01;
    return boost::math::quantile(n01, prob);
}

double two_sided_p_value(double z) {
    return std::erfc(std::abs(z) / std::sqrt(2.0));
}

std::vector<ConfidenceInterval> confidence_intervals(const CorrectedEstimate& est, double level) {
    if (!(level > 0.0 && level < 1.0)) {
        std::ostringstream os;
        os << "level " << level << " is not in (0, 1)";
        throw Error(Errc::InvalidLevel, "ci_level", os.str());
    }
    if (!est.vcov) throw Error(Errc::MissingVariance, method_name(est.method), "estimate has no covariance");
    const Vec b = est.coefficients();
    const Mat& v = *est.vcov;
    if (v.rows() != b.size()) throw Error(Errc::DimensionMismatch, "confidence_intervals", "vcov size");
    const double z = normal_quantile(0.5 * (1.0 + level));
    std::vector<ConfidenceInterval> out;
    out.reserve(b.size());
    for (Index i = 0; i < b.size(); ++i) {
        ConfidenceInterval ci;
        ci.estimate = b(i);
        ci.se = std::sqrt(std::max(v(i, i), 0.0));
        ci.lower = b(i) - z * ci.se;
        ci.upper = b(i) + z * ci.se;
        out.push_back(ci);
    }
    return out;
}

// beta* = T beta with T = [e1 | G | (0; 0; I)] and G = (gamma0'; Gamma1; Gamma2).
// Differentiating T beta = beta* gives d beta = T^-1 (d beta* - dG beta1).
Mat original_rc_vcov(const OutcomeSurrogateFit& naive, const MultiOutputFit& calibration_fit, const Vec& beta1) {
    const Index p = beta1.size();
    const Index r = naive.vcov.rows();
    const Index q = r - 1 - p;
    const Mat& g = calibration_fit.coef;
    if (g.rows() != r || g.cols() != p) throw Error(Errc::DimensionMismatch, "original_rc_vcov", "shape");
    Mat tm = Mat::Zero(r, r);
    tm(0, 0) = 1.0;
    tm.middleCols(1, p) = g;
    tm.block(1 + p, 1 + p, q, q) = Mat::Identity(q, q);
    const Mat tinv = checked_inverse(tm, "Gamma1 (validation)");
    const Mat lift = kron(beta1.transpose(), Mat::Identity(r, r));
    const Mat mid = naive.vcov + lift * calibration_fit.coef_vcov * lift.transpose();
    Mat v = tinv * mid * tinv.transpose();
    return 0.5 * (v + v.transpose());
}

}  // namespace trc
