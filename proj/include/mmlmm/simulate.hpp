#pragma once

#include "mmlmm/em.hpp"

#include <cstdint>
#include <random>

namespace mmlmm {

// Cohort keeps each year-1 class together through all years; it reproduces
// the insufficient-mixing identifiability failure and is meant for negative
// tests only.
enum class MixingRule { Random, Cohort };

struct SimSpec {
    ModelVariant variant = ModelVariant::GpR;
    int n = 0;
    int T = 0;
    std::vector<int> m;          // teachers per year
    ParamState truth;
    double missing_rate = 0.0;   // per (student, year) MAR score deletion
    std::uint64_t seed = 0;
    MixingRule mixing = MixingRule::Random;
};

struct SimResult {
    std::vector<ObservationRecord> records;
    std::shared_ptr<const LongitudinalDataset> dataset;
    ModelDesign design;
    ParamState truth;
    Vec eta_true;                      // aligned with design columns
    bool identifiability_warning = false;
};

// PD truth values on sensible scales for quick simulations
ParamState make_default_truth(ModelVariant v, int T);

SimResult simulate_dataset(const SimSpec& spec);

// Literal dense evaluation of the observed-data log-likelihood with explicit
// V = S G S' + R. Reference for the sparse path; refuses n_obs > cap.
double dense_oracle_loglik(const ModelDesign& d, const ParamState& p, int cap = 500);

// central-difference gradient of the dense oracle over the free parameters
Vec numeric_score(const ModelDesign& d, const ParamState& p, double step = 1e-5, int cap = 500);

}  // namespace mmlmm
