#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "trc/calibration.hpp"

namespace trc {

enum class Transport { S1, S2, S3 };
enum class MeLevel { small, large };
enum class ErrorDist { normal, gamma };

// Validation-study multiplier on the mean and covariance of X | W.
double transport_factor(Transport t) noexcept;
const char* transport_name(Transport t) noexcept;
const char* me_level_name(MeLevel m) noexcept;
const char* error_dist_name(ErrorDist d) noexcept;

inline constexpr const char* kRngName = "mt19937_64+splitmix64/v1";

struct ScenarioSpec {
    Index p = 1;
    Index q = 1;
    Index n_M = 10000;
    Index n_V = 500;
    Transport transport = Transport::S1;
    MeLevel me_level = MeLevel::small;
    ErrorDist exposure_error_dist = ErrorDist::normal;

    double beta0 = 1.0;
    Vec beta1;
    Vec beta2;

    // X = a0 + A2'W + eps, var(eps) = sigma_M in the main study
    Vec a0;
    Mat A2;  // q x p
    Mat sigma_M;

    // Z = c0 + C1'X + C2'W + e, shared by both studies
    Vec c0;
    Mat C1;
    Mat C2;  // q x p
    Mat sigma_e;

    double sigma_y = 1.0;
    double w_mean = 1.0;
    double w_var = 1.0;

    void validate() const;
};

// Defaults for p = 1 or p = 4; every field can be overridden afterwards.
ScenarioSpec default_scenario(Index p, Transport t, MeLevel m, ErrorDist d);

// var(X | Z, W) in the study whose X | W covariance is sigma_xw.
Mat residual_exposure_cov(const Mat& sigma_xw, const Mat& C1, const Mat& sigma_e);

// Diagonal sigma_e such that beta1_j^2 var(X_j | Z, W) = target for every j.
Mat calibrate_error_variances(const Mat& sigma_xw, const Mat& C1, const Vec& beta1, double target);

struct StudyPair {
    MainStudyData main;
    ValidationStudyData validation;
    Mat main_x;  // latent main-study exposures, for checks only
};

StudyPair generate_pair(const ScenarioSpec& spec, std::uint64_t seed);

std::uint64_t splitmix64(std::uint64_t& state) noexcept;
std::uint64_t replication_seed(std::uint64_t seed, std::uint64_t rep) noexcept;

struct ExpectedAttenuation {
    Mat gamma1_main;
    Mat gamma1_validation;
    Vec naive_beta1;
    Vec original_rc_beta1;
};

ExpectedAttenuation expected_attenuation(const ScenarioSpec& spec);

// mean, mean_se and coverage_pct are NaN when no replication succeeded
struct CoefficientSummary {
    std::string name;
    double truth = 0.0;
    double mean = 0.0;
    std::optional<double> bias_pct;
    double mean_se = 0.0;
    std::optional<double> sd;
    double coverage_pct = 0.0;
};

struct MethodSummary {
    Method method = Method::naive;
    Index successes = 0;
    Index failures = 0;
    std::vector<CoefficientSummary> coefficients;
};

struct ReplicationSummary {
    ScenarioSpec spec;
    Index replications = 0;
    std::uint64_t seed = 0;
    double ci_level = 0.95;
    Index failed_replications = 0;
    std::vector<MethodSummary> methods;  // transportable-rc, original-rc, naive

    bool failure_rate_exceeded() const { return failed_replications * 100 > replications; }
    const MethodSummary& method(Method m) const;
};

ReplicationSummary run_study(const ScenarioSpec& spec, Index replications, std::uint64_t seed, int parallelism,
                             double ci_level = 0.95);

std::vector<std::string> coefficient_names(Index p, Index q);

}  // namespace trc
