#include <doctest.h>
#include "operator_search.hpp"
#include "oracles.hpp"
#include "trc/calibration.hpp"
#include "trc/error.hpp"
#include "trc/simulation.hpp"
#include "trc/variance.hpp"

using namespace trc;

namespace {

// Draws a pair of studies directly (not through generate_pair) from
// X = a0 + A2'W + eps, Z = c0 + C1'X + C2'W + e, Y = 1 + X b1 + W b2 + noise.
struct Truth {
    Index p, q;
    Vec a0, c0, b1, b2;
    Mat A2, C1, C2, Sx, Se;
};

Truth make_truth(std::mt19937_64& g, Index p, Index q) {
    Truth t;
    t.p = p;
    t.q = q;
    t.a0 = oracle::random_matrix(g, p, 1);
    t.c0 = 0.3 * oracle::random_matrix(g, p, 1);
    t.b1 = oracle::random_matrix(g, p, 1);
    t.b2 = oracle::random_matrix(g, q, 1);
    t.A2 = 0.5 * oracle::random_matrix(g, q, p);
    t.C1 = Mat::Identity(p, p) + 0.2 * oracle::random_matrix(g, p, p);
    t.C2 = 0.3 * oracle::random_matrix(g, q, p);
    t.Sx = oracle::random_spd(g, p, 0.5);
    t.Se = oracle::random_spd(g, p, 0.3);
    return t;
}

struct Draw {
    Mat x, z, w;
    Vec y;
};

Draw draw(std::mt19937_64& g, const Truth& t, Index n, double scale) {
    Draw d;
    d.w = oracle::random_matrix(g, n, t.q).array() + 1.0;
    const Mat lx = (scale * t.Sx).llt().matrixL();
    const Mat le = t.Se.llt().matrixL();
    d.x = oracle::random_matrix(g, n, t.p) * lx.transpose();
    d.x.rowwise() += (scale * t.a0).transpose();
    if (t.q > 0) d.x += d.w * (scale * t.A2);
    d.z = d.x * t.C1 + oracle::random_matrix(g, n, t.p) * le.transpose();
    d.z.rowwise() += t.c0.transpose();
    if (t.q > 0) d.z += d.w * t.C2;
    d.y = (d.x * t.b1).array() + 1.0;
    if (t.q > 0) d.y += d.w * t.b2;
    d.y += oracle::random_matrix(g, n, 1);
    return d;
}

MainStudyData as_main(const Draw& d) {
    return {d.y, d.z, d.w};
}

ValidationStudyData as_validation(const Draw& d) {
    return {d.x, d.z, d.w};
}

double max_rel_diff(const Vec& a, const Vec& b) {
    return (a - b).cwiseAbs().maxCoeff() / std::max(1.0, b.cwiseAbs().maxCoeff());
}

}  // namespace

TEST_CASE("naive fit recovers exact data") {
    std::mt19937_64 g(1);
    MainStudyData m;
    m.z = oracle::random_matrix(g, 30, 1);
    m.w = oracle::random_matrix(g, 30, 1);
    m.y = 1.0 + 2.0 * m.z.col(0).array() + 3.0 * m.w.col(0).array();
    const OutcomeSurrogateFit f = fit_naive(m);
    CHECK(f.beta0_star == doctest::Approx(1.0));
    CHECK(f.beta1_star(0) == doctest::Approx(2.0));
    CHECK(f.beta2_star(0) == doctest::Approx(3.0));
}

TEST_CASE("naive fit matches the normal-equations oracle and is scale equivariant") {
    std::mt19937_64 g(2);
    const Truth t = make_truth(g, 3, 2);
    const Draw d = draw(g, t, 500, 1.0);
    const OutcomeSurrogateFit f = fit_naive(as_main(d));
    const Mat ref = oracle::normal_equations(design_with_intercept(d.z, d.w), d.y);
    CHECK(std::abs(f.beta0_star - ref(0, 0)) < 1e-10);
    CHECK((f.beta1_star - ref.col(0).segment(1, 3)).cwiseAbs().maxCoeff() < 1e-10);
    CHECK((f.beta2_star - ref.col(0).tail(2)).cwiseAbs().maxCoeff() < 1e-10);

    MainStudyData scaled = as_main(d);
    scaled.z.col(1) *= 4.0;
    const OutcomeSurrogateFit fs = fit_naive(scaled);
    CHECK(fs.beta1_star(1) == doctest::Approx(f.beta1_star(1) / 4.0).epsilon(1e-12));
    CHECK(fs.beta1_star(0) == doctest::Approx(f.beta1_star(0)).epsilon(1e-12));
}

TEST_CASE("error model with an exact surrogate") {
    std::mt19937_64 g(3);
    ValidationStudyData v;
    v.x = oracle::random_matrix(g, 50, 1);
    v.z = v.x;
    v.w = oracle::random_matrix(g, 50, 1);
    const MeasurementErrorModel me = fit_error_model(v);
    CHECK(std::abs(me.c0(0)) < 1e-12);
    CHECK(me.C1(0, 0) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(std::abs(me.C2(0, 0)) < 1e-12);
    CHECK(std::abs(me.sigma_e(0, 0)) < 1e-20);
}

TEST_CASE("error model is consistent at large n") {
    std::mt19937_64 g(4);
    const Truth t = make_truth(g, 2, 1);
    const Draw d = draw(g, t, 100000, 1.0);
    const MeasurementErrorModel me = fit_error_model(as_validation(d));
    // theta order (c0, vec C1', vec C2')
    Vec truth(2 + 4 + 2), est(8);
    truth << t.c0, vec(Mat(t.C1.transpose())), vec(Mat(t.C2.transpose()));
    est << me.c0, vec(Mat(me.C1.transpose())), vec(Mat(me.C2.transpose()));
    for (Index i = 0; i < 8; ++i) {
        const double se = std::sqrt(me.vcov_coeffs(i, i));
        CHECK(std::abs(est(i) - truth(i)) < 3.0 * se);
    }
    const Vec se_vec = vec(me.sigma_e), se_true = vec(t.Se);
    for (Index i = 0; i < 4; ++i)
        CHECK(std::abs(se_vec(i) - se_true(i)) < 3.0 * std::sqrt(me.vcov_sigma_e(i, i)));
}

TEST_CASE("error model recovers C1 = diag(0.9, 1.1)") {
    std::mt19937_64 g(5);
    Truth t = make_truth(g, 2, 1);
    t.C1 = Vec((Vec(2) << 0.9, 1.1).finished()).asDiagonal();
    t.Sx = Mat::Identity(2, 2);
    t.Se = 0.25 * Mat::Identity(2, 2);
    const Draw d = draw(g, t, 50000, 1.0);
    const MeasurementErrorModel me = fit_error_model(as_validation(d));
    CHECK((me.C1 - t.C1).cwiseAbs().maxCoeff() < 0.01);
}

TEST_CASE("surrogate margin at large n") {
    std::mt19937_64 g(6);
    std::normal_distribution<double> n01;
    const Index n = 100000;
    MainStudyData m;
    m.w = oracle::random_matrix(g, n, 1);
    m.z.resize(n, 1);
    for (Index i = 0; i < n; ++i) m.z(i, 0) = 2.0 + 2.0 * n01(g);
    m.y = oracle::random_matrix(g, n, 1);
    const SurrogateMarginModel sm = fit_surrogate_margin(m);
    CHECK(std::abs(sm.B2(0, 0)) < 3.0 * std::sqrt(sm.vcov_coeffs(1, 1)));
    CHECK(std::abs(sm.b0(0) - 2.0) < 3.0 * std::sqrt(sm.vcov_coeffs(0, 0)));
    CHECK(std::abs(sm.sigma_z(0, 0) - 4.0) < 3.0 * std::sqrt(sm.vcov_sigma_z(0, 0)));
}

TEST_CASE("constant surrogate makes the calibration non-identifiable") {
    std::mt19937_64 g(7);
    MainStudyData m;
    m.w = oracle::random_matrix(g, 40, 1);
    m.z = Mat::Constant(40, 1, 3.0);
    m.y = oracle::random_matrix(g, 40, 1);
    const SurrogateMarginModel sm = fit_surrogate_margin(m);
    CHECK(std::abs(sm.sigma_z(0, 0)) < 1e-20);
    ValidationStudyData v;
    v.x = oracle::random_matrix(g, 40, 1);
    v.z = v.x + oracle::random_matrix(g, 40, 1);
    v.w = oracle::random_matrix(g, 40, 1);
    try {
        derive_calibration(fit_error_model(v), sm);
        FAIL("expected NonIdentifiable");
    } catch (const Error& e) {
        CHECK(e.code() == Errc::NonIdentifiable);
        CHECK(e.subject() == "sigma_z");
    }
}

TEST_CASE("derive_calibration scalar arithmetic") {
    MeasurementErrorModel me;
    me.c0 = Vec::Zero(1);
    me.C1 = Mat::Ones(1, 1);
    me.C2 = Mat::Zero(1, 1);
    me.sigma_e = Mat::Ones(1, 1);
    SurrogateMarginModel sm;
    sm.b0 = Vec::Zero(1);
    sm.B2 = Mat::Zero(1, 1);
    sm.sigma_z = Mat::Constant(1, 1, 2.0);
    const CalibrationEquation cal = derive_calibration(me, sm);
    CHECK(cal.gamma0(0) == doctest::Approx(0.0));
    CHECK(cal.Gamma1(0, 0) == doctest::Approx(0.5));
    CHECK(cal.Gamma2(0, 0) == doctest::Approx(0.0));
    CHECK(!cal.precision_gap_not_psd);

    SUBCASE("sigma_z = sigma_e leaves no exposure signal") {
        sm.sigma_z = me.sigma_e;
        const CalibrationEquation zero = derive_calibration(me, sm);
        CHECK(zero.Gamma1(0, 0) == 0.0);
        ThetaHat t;
        t.n_M = 100;
        t.n_V = 50;
        t.outcome.beta0_star = 0.0;
        t.outcome.beta1_star = Vec::Constant(1, 0.5);
        t.outcome.beta2_star = Vec::Zero(1);
        t.outcome.vcov = Mat::Identity(3, 3);
        t.margin = sm;
        t.margin.vcov_coeffs = Mat::Identity(2, 2);
        t.margin.vcov_sigma_z = Mat::Identity(1, 1);
        t.error_model = me;
        t.error_model.vcov_coeffs = Mat::Identity(3, 3);
        t.error_model.vcov_sigma_e = Mat::Identity(1, 1);
        try {
            transportable_rc_from_theta(t);
            FAIL("expected NonIdentifiable");
        } catch (const Error& e) {
            CHECK(e.code() == Errc::NonIdentifiable);
        }
    }
}

TEST_CASE("Rosner scalar arithmetic") {
    ThetaHat t;
    t.outcome.beta0_star = 0.0;
    t.outcome.beta1_star = Vec::Constant(1, 0.5);
    t.outcome.beta2_star = Vec(0);
    t.margin.b0 = Vec::Zero(1);
    t.margin.B2 = Mat(0, 1);
    t.margin.sigma_z = Mat::Constant(1, 1, 2.0);
    t.error_model.c0 = Vec::Zero(1);
    t.error_model.C1 = Mat::Ones(1, 1);
    t.error_model.C2 = Mat(0, 1);
    t.error_model.sigma_e = Mat::Ones(1, 1);
    CHECK(corrected_coefficients(t)(1) == doctest::Approx(1.0));
}

TEST_CASE("non-PSD precision gap proceeds with a warning") {
    MeasurementErrorModel me;
    me.c0 = Vec::Zero(2);
    me.C1 = Mat::Identity(2, 2);
    me.C2 = Mat::Zero(0, 2);
    me.sigma_e = Vec((Vec(2) << 1.0, 3.0).finished()).asDiagonal();
    SurrogateMarginModel sm;
    sm.b0 = Vec::Zero(2);
    sm.B2 = Mat::Zero(0, 2);
    sm.sigma_z = Vec((Vec(2) << 2.0, 2.0).finished()).asDiagonal();
    const CalibrationEquation cal = derive_calibration(me, sm);
    CHECK(cal.precision_gap_not_psd);
}

TEST_CASE("population transport formula equals the large-sample regression of X on (Z, W)") {
    std::mt19937_64 g(8);
    const Truth t = make_truth(g, 2, 1);
    // population error model and margin of the main study
    MeasurementErrorModel me;
    me.c0 = t.c0;
    me.C1 = t.C1;
    me.C2 = t.C2;
    me.sigma_e = t.Se;
    SurrogateMarginModel sm;
    sm.sigma_z = t.C1.transpose() * t.Sx * t.C1 + t.Se;
    sm.b0 = t.c0 + t.C1.transpose() * t.a0;
    sm.B2 = (t.C1.transpose() * t.A2.transpose() + t.C2.transpose()).transpose();
    const CalibrationEquation cal = derive_calibration(me, sm);

    const Draw d = draw(g, t, 1000000, 1.0);
    const MultiOutputFit f = fit_multi_ols(design_with_intercept(d.z, d.w), d.x);
    Mat g_cal(4, 2);
    g_cal << cal.gamma0.transpose(), cal.Gamma1, cal.Gamma2;
    const Vec diff = vec(f.coef) - vec(g_cal);
    for (Index i = 0; i < diff.size(); ++i) CHECK(std::abs(diff(i)) < 3.0 * std::sqrt(f.coef_vcov(i, i)));
}

TEST_CASE("predict_true_exposures") {
    CalibrationEquation cal;
    cal.gamma0 = Vec::Zero(2);
    cal.Gamma1 = Mat::Identity(2, 2);
    cal.Gamma2 = Mat::Zero(1, 2);
    std::mt19937_64 g(9);
    const Mat z = oracle::random_matrix(g, 5, 2);
    CHECK(predict_true_exposures(cal, z, oracle::random_matrix(g, 5, 1)) == z);

    CalibrationEquation c1;
    c1.gamma0 = Vec::Constant(1, 1.0);
    c1.Gamma1 = Mat::Constant(1, 1, 0.5);
    c1.Gamma2 = Mat::Constant(1, 1, 2.0);
    CHECK(predict_true_exposures(c1, Mat::Constant(1, 1, 2.0), Mat::Constant(1, 1, 1.0))(0, 0) == doctest::Approx(4.0));
    CHECK_THROWS_AS(predict_true_exposures(c1, Mat::Constant(2, 2, 1.0), Mat::Constant(2, 1, 1.0)), Error);

    SUBCASE("pipeline mean of predicted exposures") {
        const Truth t = make_truth(g, 2, 1);
        const Draw dm = draw(g, t, 100000, 1.0);
        const Draw dv = draw(g, t, 100000, 0.8);
        const CalibrationEquation est =
            derive_calibration(fit_error_model(as_validation(dv)), fit_surrogate_margin(as_main(dm)));
        const Mat xhat = predict_true_exposures(est, dm.z, dm.w);
        for (Index j = 0; j < 2; ++j) {
            const double mc_se = std::sqrt((dm.x.col(j).array() - dm.x.col(j).mean()).square().mean() / 100000.0);
            CHECK(std::abs(xhat.col(j).mean() - dm.x.col(j).mean()) < 3.0 * mc_se);
        }
    }
}

TEST_CASE("Carroll and Rosner forms coincide on random datasets") {
    std::mt19937_64 g(10);
    double worst = 0.0;
    for (int rep = 0; rep < 100; ++rep) {
        const Index p = 1 + rep % 3, q = rep % 3;
        const Truth t = make_truth(g, p, q);
        const Draw dm = draw(g, t, 300, 1.0);
        const Draw dv = draw(g, t, 100, 1.25);
        const CorrectedEstimate a = transportable_rc_carroll(as_main(dm), as_validation(dv));
        const CorrectedEstimate b = transportable_rc_rosner(as_main(dm), as_validation(dv));
        worst = std::max(worst, max_rel_diff(a.coefficients(), b.coefficients()));
        CHECK(oracle::rel_err(*a.vcov, *b.vcov) < 1e-12);
    }
    CHECK(worst < 1e-10);
}

TEST_CASE("no-error limit reproduces the OLS on true exposures") {
    std::mt19937_64 g(11);
    Truth t = make_truth(g, 2, 1);
    Draw dm = draw(g, t, 2000, 1.0);
    Draw dv = draw(g, t, 500, 1.0);
    dm.z = dm.x + 1e-7 * oracle::random_matrix(g, 2000, 2);
    dv.z = dv.x + 1e-7 * oracle::random_matrix(g, 500, 2);
    const CorrectedEstimate c = transportable_rc_carroll(as_main(dm), as_validation(dv));
    const Mat ols = oracle::normal_equations(design_with_intercept(dm.x, dm.w), dm.y);
    CHECK((c.coefficients() - ols.col(0)).cwiseAbs().maxCoeff() < 1e-6);
}

TEST_CASE("double transportability: original RC and transportable RC agree, naive-attenuation identities hold") {
    ScenarioSpec s = default_scenario(1, Transport::S1, MeLevel::small, ErrorDist::normal);
    s.n_M = 100000;
    s.n_V = 100000;
    const StudyPair pr = generate_pair(s, 5);
    const CorrectedEstimate o = original_rc(pr.main, pr.validation);
    const CorrectedEstimate tr = transportable_rc_rosner(pr.main, pr.validation);
    for (Index i = 0; i < 3; ++i) {
        const double se = std::sqrt((*o.vcov)(i, i) + (*tr.vcov)(i, i));
        CHECK(std::abs(o.coefficients()(i) - tr.coefficients()(i)) < 3.0 * se);
    }
    // beta1* = Gamma1 beta1 and beta2* = beta2 + Gamma2 beta1 with population Gamma
    const OutcomeSurrogateFit nf = fit_naive(pr.main);
    const ExpectedAttenuation ea = expected_attenuation(s);
    const Mat gamma2 = (s.A2.transpose() - ea.gamma1_main.transpose() * (s.C1.transpose() * s.A2.transpose() +
                                                                          s.C2.transpose()))
                           .transpose();
    CHECK(std::abs(nf.beta1_star(0) - (ea.gamma1_main * s.beta1)(0)) < 3.0 * std::sqrt(nf.vcov(1, 1)));
    CHECK(std::abs(nf.beta2_star(0) - (s.beta2 + gamma2 * s.beta1)(0)) < 3.0 * std::sqrt(nf.vcov(2, 2)));
}

TEST_CASE("consistency at n = 1e5 across scenarios") {
    for (Transport tr : {Transport::S1, Transport::S2, Transport::S3}) {
        ScenarioSpec s = default_scenario(1, tr, MeLevel::small, ErrorDist::normal);
        s.n_M = 100000;
        s.n_V = 100000;
        const StudyPair pr = generate_pair(s, 17);
        const CorrectedEstimate t = transportable_rc_rosner(pr.main, pr.validation);
        const CorrectedEstimate o = original_rc(pr.main, pr.validation);
        const double se_t = std::sqrt((*t.vcov)(1, 1));
        CHECK(std::abs(t.beta1(0) - 1.0) < 5.0 * se_t);
        if (tr != Transport::S1) CHECK(std::abs(o.beta1(0) - 1.0) > 5.0 * std::sqrt((*o.vcov)(1, 1)));
    }
}

TEST_CASE("original RC delta-method variance matches a finite-difference sandwich") {
    std::mt19937_64 g(12);
    const Truth t = make_truth(g, 2, 1);
    const Draw dm = draw(g, t, 400, 1.0);
    const Draw dv = draw(g, t, 200, 1.0);
    const OutcomeSurrogateFit nf = fit_naive(as_main(dm));
    const MultiOutputFit gf = fit_multi_ols(design_with_intercept(dv.z, dv.w), dv.x);
    const CorrectedEstimate o = original_rc(as_main(dm), as_validation(dv));

    const Index r = 4, p = 2;
    Vec th(r + r * p);
    th << nf.beta0_star, nf.beta1_star, nf.beta2_star, vec(gf.coef);
    const auto h = [&](const Vec& x) {
        const Mat G = unvec(x.tail(r * p), r, p);
        const Vec b1 = oracle::gauss_solve(G.middleRows(1, p), x.segment(1, p));
        Vec out(r);
        out(0) = x(0) - G.row(0).dot(b1);
        out.segment(1, p) = b1;
        out(3) = x(3) - G.row(3).dot(b1);
        return out;
    };
    const Mat j = oracle::fd_jacobian(h, th);
    Mat sd = Mat::Zero(th.size(), th.size());
    sd.topLeftCorner(r, r) = nf.vcov;
    sd.bottomRightCorner(r * p, r * p) = gf.coef_vcov;
    CHECK(oracle::rel_err(*o.vcov, j.transpose() * sd * j) < 1e-5);
    CHECK(oracle::rel_err(h(th), o.coefficients()) < 1e-12);
}

TEST_CASE("input validation") {
    MainStudyData m;
    m.z = Mat::Ones(3, 1);
    m.w = Mat::Ones(3, 1);
    m.y = Vec::Ones(3);
    try {
        fit_naive(m);
        FAIL("expected InsufficientSampleSize");
    } catch (const Error& e) {
        CHECK(e.code() == Errc::InsufficientSampleSize);
    }
    m.y = Vec::Ones(2);
    try {
        fit_naive(m);
        FAIL("expected DimensionMismatch");
    } catch (const Error& e) {
        CHECK(e.code() == Errc::DimensionMismatch);
    }
}

TEST_CASE("operator gap is zero at the closed-form optimum and along its ray") {
    std::mt19937_64 g(20);
    for (Index p : {1, 2}) {
        const OpProblem o = random_problem(g, p);
        const Mat l1 = o.gamma1 * o.sx.inverse();
        const Mat l2 = o.sz.inverse();
        CHECK(optimal_operator_gap(o.gamma1, o.sx, o.sz, o.alpha, l1, l2) == 0.0);
        const double scaled = optimal_operator_gap(o.gamma1, o.sx, o.sz, o.alpha, 3.7 * l1, 3.7 * l2);
        const double base = operator_objective(o.gamma1, o.sx, o.sz, o.alpha, l1, l2);
        CHECK(std::abs(scaled) < 1e-12 * base);
    }
    const OpProblem o = random_problem(g, 2);
    try {
        optimal_operator_gap(o.gamma1, o.sx, o.sz, o.alpha, Mat::Zero(2, 2), Mat::Zero(2, 2));
        FAIL("expected SingularOperatorSum");
    } catch (const Error& e) {
        CHECK(e.code() == Errc::SingularOperatorSum);
    }
}

TEST_CASE("operator gap is nonnegative and a numerical minimizer closes it") {
    std::mt19937_64 g(21);
    double worst = 0.0;
    for (Index p : {1, 2}) {
        for (int t = 0; t < 1000; ++t) {
            const OpProblem o = random_problem(g, p);
            const double gap = optimal_operator_gap(o.gamma1, o.sx, o.sz, o.alpha, oracle::random_matrix(g, p, p),
                                                    oracle::random_matrix(g, p, p));
            worst = std::min(worst, gap);
        }
    }
    CHECK(worst >= -1e-9);

    for (Index p : {1, 2}) {
        const OpProblem o = random_problem(g, p);
        for (int start = 0; start < 20; ++start) {
            const double gap = minimize_gap(o, g);
            INFO("p=" << p << " start=" << start);
            CHECK(gap < 1e-6);
            CHECK(gap >= -1e-9);
        }
    }
}
