#include "trc/simulation.hpp"

#include <atomic>
#include <boost/math/distributions/normal.hpp>
#include <boost/math/special_functions/gamma.hpp>
#include <cmath>
#include <exception>
#include <limits>
#include <mutex>
#include <random>
#include <sstream>
#include <thread>

#include "trc/error.hpp"
#include "trc/variance.hpp"

namespace trc {

double transport_factor(Transport t) noexcept {
    switch (t) {
    case Transport::S1: return 1.0;
    case Transport::S2: return 0.8;
    case Transport::S3: return 1.25;
    }
    return 1.0;
}

const char* transport_name(Transport t) noexcept {
    switch (t) {
    case Transport::S1: return "S1";
    case Transport::S2: return "S2";
    case Transport::S3: return "S3";
    }
    return "?";
}

const char* me_level_name(MeLevel m) noexcept {
    return m == MeLevel::small ? "small" : "large";
}

const char* error_dist_name(ErrorDist d) noexcept {
    return d == ErrorDist::normal ? "normal" : "gamma";
}

namespace {

constexpr double kMeThreshold = 0.5;

void spec_error(const char* field, const std::string& msg) {
    throw Error(Errc::InvalidSpec, field, msg);
}

bool is_spd(const Mat& m) {
    if (m.rows() != m.cols() || !m.allFinite()) return false;
    if (!m.isApprox(m.transpose(), 1e-12)) return false;
    Eigen::LLT<Mat> llt(m);
    return llt.info() == Eigen::Success;
}

}  // namespace

Mat residual_exposure_cov(const Mat& sigma_xw, const Mat& C1, const Mat& sigma_e) {
    const Mat cov_xz = sigma_xw * C1;
    const Mat var_z = C1.transpose() * sigma_xw * C1 + sigma_e;
    return sigma_xw - cov_xz * var_z.ldlt().solve(cov_xz.transpose());
}

Mat calibrate_error_variances(const Mat& sigma_xw, const Mat& C1, const Vec& beta1, double target) {
    const Index p = sigma_xw.rows();
    if (beta1.size() != p || C1.rows() != p) spec_error("sigma_e", "calibration shapes disagree");
    Vec d = Vec::Constant(p, 1.0);
    const auto score = [&](Index j, double dj) {
        Vec t = d;
        t(j) = dj;
        return beta1(j) * beta1(j) * residual_exposure_cov(sigma_xw, C1, t.asDiagonal().toDenseMatrix())(j, j);
    };
    for (int sweep = 0; sweep < 500; ++sweep) {
        double change = 0.0;
        for (Index j = 0; j < p; ++j) {
            // score is increasing in d_j; bracket on a log scale then bisect
            double lo = 1e-12, hi = 1.0;
            while (score(j, hi) < target) {
                hi *= 2.0;
                if (hi > 1e12) {
                    std::ostringstream os;
                    os << "target " << target << " unreachable for exposure " << j + 1;
                    spec_error("sigma_e", os.str());
                }
            }
            if (score(j, lo) > target) spec_error("sigma_e", "target below the no-error limit");
            for (int it = 0; it < 200; ++it) {
                const double mid = std::sqrt(lo * hi);
                (score(j, mid) < target ? lo : hi) = mid;
                if (hi / lo - 1.0 < 1e-15) break;
            }
            const double nd = 0.5 * (lo + hi);
            change = std::max(change, std::abs(nd - d(j)) / nd);
            d(j) = nd;
        }
        if (change < 1e-13) break;
    }
    return d.asDiagonal().toDenseMatrix();
}

ScenarioSpec default_scenario(Index p, Transport t, MeLevel m, ErrorDist d) {
    ScenarioSpec s;
    s.p = p;
    s.q = 1;
    s.transport = t;
    s.me_level = m;
    s.exposure_error_dist = d;
    s.beta0 = 1.0;
    s.beta2 = Vec::Constant(1, 0.5);
    s.a0 = Vec::Constant(p, 0.5);
    s.A2 = Mat::Constant(1, p, 0.5);
    s.c0 = Vec::Zero(p);
    s.C1 = Mat::Identity(p, p);
    s.C2 = Mat::Zero(1, p);
    if (p == 1) {
        s.beta1 = Vec::Constant(1, 1.0);
        s.sigma_M = Mat::Constant(1, 1, 1.0);
        s.sigma_e = Mat::Constant(1, 1, m == MeLevel::small ? 0.4925 : 1.941);
    } else if (p == 4) {
        s.beta1.resize(4);
        s.beta1 << 1.2, 1.1, 0.9, 0.8;
        // correlation 0.3, variance 2
        s.sigma_M = Mat::Constant(4, 4, 0.6);
        s.sigma_M.diagonal().setConstant(2.0);
        s.sigma_e = calibrate_error_variances(s.sigma_M, s.C1, s.beta1, m == MeLevel::small ? 0.33 : 0.66);
    } else {
        spec_error("p", "defaults exist for p = 1 and p = 4 only");
    }
    return s;
}

void ScenarioSpec::validate() const {
    if (p < 1) spec_error("p", "must be at least 1");
    if (q < 0) spec_error("q", "must be nonnegative");
    if (n_M <= p + q + 1) spec_error("n_M", "must exceed p + q + 1");
    if (n_V <= p + q + 1) spec_error("n_V", "must exceed p + q + 1");
    if (beta1.size() != p) spec_error("beta1", "length must equal p");
    if (beta2.size() != q) spec_error("beta2", "length must equal q");
    if (a0.size() != p) spec_error("a0", "length must equal p");
    if (A2.rows() != q || A2.cols() != p) spec_error("A2", "must be q x p");
    if (c0.size() != p) spec_error("c0", "length must equal p");
    if (C1.rows() != p || C1.cols() != p) spec_error("C1", "must be p x p");
    if (C2.rows() != q || C2.cols() != p) spec_error("C2", "must be q x p");
    if (!is_spd(sigma_M)) spec_error("sigma_M", "must be symmetric positive definite p x p");
    if (!is_spd(sigma_e)) spec_error("sigma_e", "must be symmetric positive definite p x p");
    if (!(sigma_y >= 0.0) || !std::isfinite(sigma_y)) spec_error("sigma_y", "must be finite and nonnegative");
    if (!(w_var > 0.0) || !std::isfinite(w_var) || !std::isfinite(w_mean)) spec_error("w_var", "must be positive");
    if (!(condition_number(C1) < kConditionLimit)) spec_error("C1", "must be invertible");
    for (const Vec* v : {&beta1, &beta2, &a0, &c0})
        if (!v->allFinite()) spec_error("beta", "non-finite entry");
    if (!std::isfinite(beta0) || !A2.allFinite() || !C2.allFinite()) spec_error("spec", "non-finite entry");

    // small/large rule, checked in the main study
    const Mat vx = residual_exposure_cov(sigma_M, C1, sigma_e);
    for (Index j = 0; j < p; ++j) {
        const double r = beta1(j) * beta1(j) * vx(j, j);
        const bool small = r < kMeThreshold;
        if (small != (me_level == MeLevel::small)) {
            std::ostringstream os;
            os << "beta1_" << j + 1 << "^2 var(X|Z,W) = " << r << " contradicts me_level = " << me_level_name(me_level);
            spec_error("me_level", os.str());
        }
    }
}

std::uint64_t splitmix64(std::uint64_t& state) noexcept {
    std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

std::uint64_t replication_seed(std::uint64_t seed, std::uint64_t rep) noexcept {
    std::uint64_t s = seed + 0x9e3779b97f4a7c15ULL * (rep + 1);
    return splitmix64(s);
}

namespace {

struct StudyDraw {
    Mat w, x, z;
    Vec y;
};

StudyDraw draw_study(const ScenarioSpec& s, Index n, double factor, bool with_outcome, std::uint64_t seed) {
    std::mt19937_64 eng(seed);
    std::normal_distribution<double> n01(0.0, 1.0);
    const Index p = s.p, q = s.q;
    StudyDraw d;

    d.w.resize(n, q);
    const double wsd = std::sqrt(s.w_var);
    for (Index j = 0; j < q; ++j)
        for (Index i = 0; i < n; ++i) d.w(i, j) = s.w_mean + wsd * n01(eng);

    const Mat sx = factor * s.sigma_M;
    Mat eps(n, p);
    if (s.exposure_error_dist == ErrorDist::gamma && p == 1) {
        const double shape = sx(0, 0);
        std::gamma_distribution<double> g(shape, 1.0);
        for (Index i = 0; i < n; ++i) eps(i, 0) = g(eng) - shape;
    } else {
        const Mat lx = sx.llt().matrixL();
        Mat u(n, p);
        for (Index j = 0; j < p; ++j)
            for (Index i = 0; i < n; ++i) u(i, j) = n01(eng);
        eps = u * lx.transpose();
        if (s.exposure_error_dist == ErrorDist::gamma) {
            // normal copula with variance-matched shifted gamma marginals
            static const boost::math::normal_distribution<double> std_normal;
            for (Index j = 0; j < p; ++j) {
                const double shape = sx(j, j);
                const double sd = std::sqrt(shape);
                for (Index i = 0; i < n; ++i) {
                    const double ui = boost::math::cdf(std_normal, eps(i, j) / sd);
                    const double uc = std::min(std::max(ui, 1e-300), 1.0 - 1e-16);
                    eps(i, j) = boost::math::gamma_p_inv(shape, uc) - shape;
                }
            }
        }
    }
    d.x = eps;
    d.x.rowwise() += (factor * s.a0).transpose();
    if (q > 0) d.x += d.w * (factor * s.A2);

    const Mat le = s.sigma_e.llt().matrixL();
    Mat u(n, p);
    for (Index j = 0; j < p; ++j)
        for (Index i = 0; i < n; ++i) u(i, j) = n01(eng);
    d.z = d.x * s.C1 + u * le.transpose();
    d.z.rowwise() += s.c0.transpose();
    if (q > 0) d.z += d.w * s.C2;

    if (with_outcome) {
        d.y = d.x * s.beta1;
        d.y.array() += s.beta0;
        if (q > 0) d.y += d.w * s.beta2;
        for (Index i = 0; i < n; ++i) d.y(i) += s.sigma_y * n01(eng);
    }
    return d;
}

}  // namespace

StudyPair generate_pair(const ScenarioSpec& spec, std::uint64_t seed) {
    spec.validate();
    std::uint64_t st = seed;
    const std::uint64_t main_seed = splitmix64(st);
    const std::uint64_t val_seed = splitmix64(st);

    StudyDraw m = draw_study(spec, spec.n_M, 1.0, true, main_seed);
    StudyDraw v = draw_study(spec, spec.n_V, transport_factor(spec.transport), false, val_seed);
    StudyPair out;
    out.main.y = std::move(m.y);
    out.main.z = std::move(m.z);
    out.main.w = std::move(m.w);
    out.main_x = std::move(m.x);
    out.validation.x = std::move(v.x);
    out.validation.z = std::move(v.z);
    out.validation.w = std::move(v.w);
    return out;
}

ExpectedAttenuation expected_attenuation(const ScenarioSpec& spec) {
    spec.validate();
    const auto gamma1 = [&](double f) {
        const Mat sxw = f * spec.sigma_M;
        const Mat var_z = spec.C1.transpose() * sxw * spec.C1 + spec.sigma_e;
        // E(X | Z, W) = ... + Gamma1'Z with Gamma1 = var(Z|W)^-1 cov(Z, X | W)
        return Mat(var_z.ldlt().solve(spec.C1.transpose() * sxw));
    };
    ExpectedAttenuation e;
    e.gamma1_main = gamma1(1.0);
    e.gamma1_validation = gamma1(transport_factor(spec.transport));
    e.naive_beta1 = e.gamma1_main * spec.beta1;
    e.original_rc_beta1 = e.gamma1_validation.partialPivLu().solve(e.naive_beta1);
    return e;
}

std::vector<std::string> coefficient_names(Index p, Index q) {
    std::vector<std::string> names{"beta0"};
    for (Index j = 0; j < p; ++j) names.push_back("beta1_" + std::to_string(j + 1));
    for (Index j = 0; j < q; ++j) names.push_back("beta2_" + std::to_string(j + 1));
    return names;
}

const MethodSummary& ReplicationSummary::method(Method m) const {
    for (const auto& s : methods)
        if (s.method == m) return s;
    throw Error(Errc::InvalidSpec, method_name(m), "method not present in summary");
}

namespace {

constexpr Method kMethods[] = {Method::transportable_rc, Method::original_rc, Method::naive};
constexpr int kNumMethods = 3;

struct RepResult {
    bool ok[kNumMethods] = {false, false, false};
    Vec est[kNumMethods];
    Vec se[kNumMethods];
};

void record(RepResult& r, int k, const CorrectedEstimate& e) {
    r.ok[k] = true;
    r.est[k] = e.coefficients();
    r.se[k] = e.vcov->diagonal().cwiseMax(0.0).cwiseSqrt();
}

RepResult one_replication(const ScenarioSpec& spec, std::uint64_t seed) {
    RepResult r;
    const StudyPair pair = generate_pair(spec, seed);
    ThetaHat theta;
    try {
        theta = estimate_theta(pair.main, pair.validation);
    } catch (const Error&) {
        return r;
    }
    try {
        record(r, 0, transportable_rc_from_theta(theta));
    } catch (const Error&) {
    }
    try {
        record(r, 1, original_rc_from_naive(theta.outcome, pair.validation));
    } catch (const Error&) {
    }
    CorrectedEstimate naive;
    naive.method = Method::naive;
    naive.beta0 = theta.outcome.beta0_star;
    naive.beta1 = theta.outcome.beta1_star;
    naive.beta2 = theta.outcome.beta2_star;
    naive.vcov = theta.outcome.vcov;
    record(r, 2, naive);
    return r;
}

}  // namespace

ReplicationSummary run_study(const ScenarioSpec& spec, Index replications, std::uint64_t seed, int parallelism,
                             double ci_level) {
    spec.validate();
    if (replications < 1) spec_error("replications", "must be at least 1");
    if (!(ci_level > 0.0 && ci_level < 1.0)) throw Error(Errc::InvalidLevel, "ci_level", "must be in (0, 1)");
    const int threads = std::max(1, std::min<int>(parallelism, static_cast<int>(replications)));

    std::vector<RepResult> results(static_cast<std::size_t>(replications));
    std::atomic<Index> next{0};
    std::exception_ptr failure;
    std::mutex failure_mu;
    const auto worker = [&] {
        try {
            for (Index i = next++; i < replications; i = next++)
                results[static_cast<std::size_t>(i)] =
                    one_replication(spec, replication_seed(seed, static_cast<std::uint64_t>(i)));
        } catch (...) {
            std::lock_guard<std::mutex> lk(failure_mu);
            if (!failure) failure = std::current_exception();
            next = replications;
        }
    };
    if (threads == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (int t = 0; t < threads; ++t) pool.emplace_back(worker);
        for (auto& t : pool) t.join();
    }
    if (failure) std::rethrow_exception(failure);

    // reduction in replication order so the summary does not depend on threads
    const Index k = 1 + spec.p + spec.q;
    Vec truth(k);
    truth(0) = spec.beta0;
    truth.segment(1, spec.p) = spec.beta1;
    truth.tail(spec.q) = spec.beta2;
    const double zq = normal_quantile(0.5 * (1.0 + ci_level));
    const auto names = coefficient_names(spec.p, spec.q);

    ReplicationSummary out;
    out.spec = spec;
    out.replications = replications;
    out.seed = seed;
    out.ci_level = ci_level;
    for (const auto& r : results)
        if (!(r.ok[0] && r.ok[1] && r.ok[2])) ++out.failed_replications;

    for (int m = 0; m < kNumMethods; ++m) {
        MethodSummary ms;
        ms.method = kMethods[m];
        Vec mean = Vec::Zero(k), m2 = Vec::Zero(k), se_sum = Vec::Zero(k), hits = Vec::Zero(k);
        for (const auto& r : results) {
            if (!r.ok[m]) {
                ++ms.failures;
                continue;
            }
            ++ms.successes;
            const Vec& e = r.est[m];
            const Vec delta = e - mean;
            mean += delta / static_cast<double>(ms.successes);
            m2 += delta.cwiseProduct(e - mean);
            se_sum += r.se[m];
            for (Index i = 0; i < k; ++i)
                if (std::abs(e(i) - truth(i)) <= zq * r.se[m](i)) hits(i) += 1.0;
        }
        for (Index i = 0; i < k; ++i) {
            CoefficientSummary c;
            c.name = names[static_cast<std::size_t>(i)];
            c.truth = truth(i);
            if (ms.successes > 0) {
                const double n = static_cast<double>(ms.successes);
                c.mean = mean(i);
                if (truth(i) != 0.0) c.bias_pct = 100.0 * (mean(i) - truth(i)) / truth(i);
                c.mean_se = se_sum(i) / n;
                if (ms.successes > 1) c.sd = std::sqrt(m2(i) / (n - 1.0));
                c.coverage_pct = 100.0 * hits(i) / n;
            } else {
                // no successful replication: reported as absent
                c.mean = c.mean_se = c.coverage_pct = std::numeric_limits<double>::quiet_NaN();
            }
            ms.coefficients.push_back(c);
        }
        out.methods.push_back(std::move(ms));
    }
    return out;
}

}  // namespace trc
