#pragma once

#include "mmlmm/design.hpp"
#include "mmlmm/sparse.hpp"

#include <memory>
#include <optional>
#include <vector>

namespace mmlmm {

struct EMConfig {
    double rel_tol = 1e-7;        // relative log-likelihood change
    int max_iter = 5000;
    double nr_damp_initial = 0.1;  // lambda_0 = nr_damp_initial * mean|diag H|
    double nr_damp_decay = 0.5;    // per outer EM iteration
    int nr_damp_iters = 5;         // damping active for this many outer iterations
    double nr_inner_tol = 1e-10;   // inf-norm of the sigma-grid score
    int nr_max_inner = 200;
    double fd_step = 1e-4;         // central-difference step rule: max(h, h*|psi|)
    double var_floor = 1e-10;
    int dense_threshold = 2000;    // selected-inverse dense fallback
    // below this q the engine factors M densely and keeps the full inverse;
    // a blocked dense inverse beats per-entry extraction on one core until
    // the factor stops fitting in a few hundred MB
    int moment_dense_threshold = 6000;
    std::optional<double> fix_alpha;  // VP: pin all persistence parameters, skip their M-step
};

// E-step moments. The backing factor (sparse with a Takahashi inverse subset,
// or a dense Cholesky with the full inverse) is shared with the engine that
// produced it and is valid until that engine's next refresh.
struct PosteriorMoments {
    Vec eta;
    std::shared_ptr<const CholFactor> factor;
    std::shared_ptr<const InverseSubset> vsub;
    std::shared_ptr<const Eigen::LLT<Mat>> dense_factor;
    std::shared_ptr<const Mat> vdense;

    double v_entry(int i, int j) const;
    Mat v_block(const std::vector<int>& idx) const;
    Vec v_diagonal() const;
    Vec solve_m(const Vec& b) const;
    Mat solve_m(const Mat& b) const;
};

struct EMTrace {
    std::vector<double> loglik;         // per recorded iteration (index 0 = initial)
    std::vector<double> rel_change;
    std::vector<double> lambda;         // sigma-grid damping in effect
    std::vector<double> min_gamma_eig;  // smallest eigenvalue across Gamma blocks
    int iterations = 0;
    bool converged = false;
    double final_score_norm = 0.0;
    bool boundary_warning = false;
};

struct FitResult {
    ParamState params;
    EMTrace trace;
    PosteriorMoments moments;
};

// Assembles the normal matrix M = S'R^-1 S + G^-1 for a design once, then
// refactors in place as parameters move. One engine = one single-threaded
// fit; the posterior moments it returns alias its factor.
class EmEngine {
public:
    EmEngine(const ModelDesign& d, EMConfig cfg = {});

    struct State {
        PosteriorMoments moments;
        double loglik = 0.0;
    };
    State refresh(const ParamState& p, bool want_moments = true);

    const ModelDesign& design() const { return d_; }
    const EMConfig& config() const { return cfg_; }

private:
    void fill_values(const ParamState& p);

    const ModelDesign& d_;
    EMConfig cfg_;
    // flattened S rows
    std::vector<int> row_ptr_;
    std::vector<int> e_col_;
    std::vector<int> e_g_, e_t_;
    std::vector<double> e_val_;

    std::shared_ptr<CholFactor> factor_;
    std::shared_ptr<InverseSubset> vsub_;
    std::shared_ptr<Eigen::LLT<Mat>> dense_factor_;
    std::shared_ptr<Mat> vdense_;
    Mat m_dense_;
};

ParamPacking packing_for(const ModelDesign& d);

// moment equations (Henderson system solve); factorization failure signals
// a non-PD normal matrix, i.e. broken parameters
PosteriorMoments e_step(const ModelDesign& d, const ParamState& p, const EMConfig& cfg = {});

// observed-data log-likelihood, constants dropped, evaluated through
// log|V| = log|R| + log|G| + log|M| and the Woodbury quadratic form
double loglik(const ModelDesign& d, const ParamState& p, const EMConfig& cfg = {});

// GLS solve against the EBLUP-adjusted response; p supplies R and alpha
Vec m_step_beta(const ModelDesign& d, const PosteriorMoments& mom, const ParamState& p);

// average of the per-teacher diagonal blocks of vtilde + eta eta'; grades
// with no teachers keep their previous block
std::vector<Mat> m_step_gamma(const ModelDesign& d, const PosteriorMoments& mom,
                              const std::vector<Mat>& gamma_old);
double m_step_gamma_stu(const ModelDesign& d, const PosteriorMoments& mom);

// GP.G yearly error variances; p.beta is the updated beta, p.sigma2 the
// previous values (kept, with *dropped_year set, for years without data)
Vec m_step_sigma_years(const ModelDesign& d, const PosteriorMoments& mom, const ParamState& p,
                       bool* dropped_year = nullptr);

// joint Newton-Raphson solve of the sigma-grid score equations starting from
// p.sigma; damp_scale > 0 replaces the Hessian H by H - lambda*I with
// lambda = damp_scale * mean|diag H|; steps are halved until every realized
// pattern block stays PD. *lambda_used reports the damping in effect.
Mat m_step_r(const ModelDesign& d, const PosteriorMoments& mom, const ParamState& p,
             double damp_scale, const EMConfig& cfg, double* lambda_used = nullptr);

// single exact Newton step for the persistence parameters (VP only)
Vec m_step_alpha(const ModelDesign& d, const PosteriorMoments& mom, const ParamState& p);

// analytic observed-data score over the free parameters, packing order
Vec score_vector(const ModelDesign& d, const ParamState& p, const PosteriorMoments& mom);

// data-driven starting values inside the parameter space
ParamState initial_params(const ModelDesign& d);

FitResult run_em(const ModelDesign& d, const ParamState& init, const EMConfig& cfg = {});

}  // namespace mmlmm
