#pragma once

#include "mmlmm/em.hpp"

#include <string>
#include <vector>

namespace mmlmm {

struct InferenceResult {
    // central-difference observed information over the free parameters
    Mat observed_information;
    Vec param_se;                  // sqrt diag of its inverse (pseudo-inverse if not PD)
    std::vector<std::string> param_labels;
    bool information_pd = true;

    Vec beta_se_information;       // from the beta block of the information matrix
    Vec beta_se_c11;               // from C11 of the bordered mixed-model system
    Vec c22_diag;                  // prediction variances of the random effects
    Vec eblup_se;                  // sqrt of c22_diag
    Vec vtilde_diag;               // conditional variances (underestimate)
};

// -dS(Psi)/dPsi by central differences of the analytic score at the MLE,
// symmetrized; step h_j = max(h, h |psi_j|) with h = cfg.fd_step
InferenceResult observed_information(const ModelDesign& d, const ParamState& params_hat,
                                     const EMConfig& cfg = {});

// diag C22 and C11 beta SEs from the bordered system
// [X'R^-1X, X'R^-1S; S'R^-1X, S'R^-1S + G^-1] via the Schur complement
// against the factorized normal matrix
InferenceResult prediction_variance(const ModelDesign& d, const ParamState& params_hat,
                                    const EMConfig& cfg = {});

// both of the above merged into one result
InferenceResult full_inference(const ModelDesign& d, const ParamState& params_hat,
                               const EMConfig& cfg = {});

}  // namespace mmlmm
