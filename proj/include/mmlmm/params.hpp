#pragma once

#include "mmlmm/types.hpp"

#include <string>
#include <vector>

namespace mmlmm {

enum class ModelVariant { GpR, RGpR, GpG, Vp, Cp };

const char* variant_name(ModelVariant v);
ModelVariant variant_from_name(const std::string& name);  // "gp.r", "rgp.r", "gp.g", "vp", "cp"

// number of persistence parameters alpha_{gt}, t < g
inline int alpha_count(int T) { return T * (T - 1) / 2; }

// canonical alpha order: g-major, t ascending within g
inline int alpha_index(int g, int t, int /*T*/) {
    return (g - 1) * (g - 2) / 2 + (t - 1);
}

// The full parameter vector Psi for one model variant. Which fields are live
// depends on the variant: sigma grid for GP.R/rGP.R/VP/CP, sigma2/gamma_stu
// for GP.G, alpha for VP (frozen at 1 for CP).
struct ParamState {
    Vec beta;
    std::vector<Mat> gamma;   // per grade, K_g x K_g
    Mat sigma;                // T x T symmetric grid
    Vec sigma2;               // per-year error variances (GP.G)
    double gamma_stu = 0.0;   // student-intercept variance (GP.G)
    Vec alpha;                // persistence parameters, canonical order (VP/CP)
};

// Free-parameter layout for score vectors, finite differences, and SEs.
// Order: beta, vech(Gamma_g) per grade, then sigma grid vech (or sigma2 and
// gamma_stu for GP.G), then alpha (VP only).
class ParamPacking {
public:
    ParamPacking(ModelVariant variant, int T, int n_beta, std::vector<int> block_sizes);

    int dim() const { return dim_; }
    ModelVariant variant() const { return variant_; }
    int n_beta() const { return n_beta_; }
    int T() const { return T_; }
    const std::vector<int>& block_sizes() const { return block_sizes_; }
    bool has_alpha() const { return variant_ == ModelVariant::Vp; }

    Vec pack(const ParamState& p) const;
    ParamState unpack(const Vec& v) const;
    std::vector<std::string> labels() const;

    int beta_offset() const { return 0; }
    int gamma_offset(int g) const { return gamma_offset_[g - 1]; }  // 1-based grade
    int r_offset() const { return r_offset_; }
    int alpha_offset() const { return alpha_offset_; }

private:
    ModelVariant variant_;
    int T_;
    int n_beta_;
    std::vector<int> block_sizes_;
    std::vector<int> gamma_offset_;
    int r_offset_ = 0;
    int alpha_offset_ = 0;
    int dim_ = 0;
};

// lower-triangle (vech) helpers, column order
inline int vech_size(int k) { return k * (k + 1) / 2; }
Vec vech(const Mat& m);
Mat unvech(const Vec& v, int k);

}  // namespace mmlmm
