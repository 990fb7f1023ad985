#include "mmlmm/params.hpp"

#include <algorithm>

namespace mmlmm {

const char* variant_name(ModelVariant v) {
    switch (v) {
        case ModelVariant::GpR: return "gp.r";
        case ModelVariant::RGpR: return "rgp.r";
        case ModelVariant::GpG: return "gp.g";
        case ModelVariant::Vp: return "vp";
        case ModelVariant::Cp: return "cp";
    }
    return "?";
}

ModelVariant variant_from_name(const std::string& name) {
    std::string s = name;
    std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
    if (s == "gp.r") return ModelVariant::GpR;
    if (s == "rgp.r") return ModelVariant::RGpR;
    if (s == "gp.g") return ModelVariant::GpG;
    if (s == "vp") return ModelVariant::Vp;
    if (s == "cp") return ModelVariant::Cp;
    throw ConfigError("unknown model '" + name + "' (expected gp.r, rgp.r, gp.g, vp, cp)");
}

Vec vech(const Mat& m) {
    const int k = static_cast<int>(m.rows());
    Vec v(vech_size(k));
    int idx = 0;
    for (int j = 0; j < k; ++j)
        for (int i = j; i < k; ++i) v[idx++] = m(i, j);
    return v;
}

Mat unvech(const Vec& v, int k) {
    Mat m(k, k);
    int idx = 0;
    for (int j = 0; j < k; ++j)
        for (int i = j; i < k; ++i) {
            m(i, j) = v[idx];
            m(j, i) = v[idx];
            ++idx;
        }
    return m;
}

ParamPacking::ParamPacking(ModelVariant variant, int T, int n_beta, std::vector<int> block_sizes)
    : variant_(variant), T_(T), n_beta_(n_beta), block_sizes_(std::move(block_sizes)) {
    int off = n_beta_;
    gamma_offset_.resize(block_sizes_.size());
    for (std::size_t g = 0; g < block_sizes_.size(); ++g) {
        gamma_offset_[g] = off;
        off += vech_size(block_sizes_[g]);
    }
    r_offset_ = off;
    if (variant_ == ModelVariant::GpG)
        off += T_ + 1;  // sigma2 per year, then gamma_stu
    else
        off += vech_size(T_);
    alpha_offset_ = off;
    if (has_alpha()) off += alpha_count(T_);
    dim_ = off;
}

Vec ParamPacking::pack(const ParamState& p) const {
    Vec v(dim_);
    v.head(n_beta_) = p.beta;
    for (std::size_t g = 0; g < block_sizes_.size(); ++g)
        v.segment(gamma_offset_[g], vech_size(block_sizes_[g])) = vech(p.gamma[g]);
    if (variant_ == ModelVariant::GpG) {
        v.segment(r_offset_, T_) = p.sigma2;
        v[r_offset_ + T_] = p.gamma_stu;
    } else {
        v.segment(r_offset_, vech_size(T_)) = vech(p.sigma);
    }
    if (has_alpha()) v.segment(alpha_offset_, alpha_count(T_)) = p.alpha;
    return v;
}

ParamState ParamPacking::unpack(const Vec& v) const {
    if (v.size() != dim_) throw DimensionError("packed parameter vector has wrong length");
    ParamState p;
    p.beta = v.head(n_beta_);
    p.gamma.resize(block_sizes_.size());
    for (std::size_t g = 0; g < block_sizes_.size(); ++g)
        p.gamma[g] = unvech(v.segment(gamma_offset_[g], vech_size(block_sizes_[g])),
                            block_sizes_[g]);
    if (variant_ == ModelVariant::GpG) {
        p.sigma2 = v.segment(r_offset_, T_);
        p.gamma_stu = v[r_offset_ + T_];
    } else {
        p.sigma = unvech(v.segment(r_offset_, vech_size(T_)), T_);
    }
    if (variant_ == ModelVariant::Vp)
        p.alpha = v.segment(alpha_offset_, alpha_count(T_));
    else if (variant_ == ModelVariant::Cp)
        p.alpha = Vec::Ones(alpha_count(T_));
    return p;
}

std::vector<std::string> ParamPacking::labels() const {
    std::vector<std::string> out;
    for (int j = 0; j < n_beta_; ++j) out.push_back("beta[" + std::to_string(j + 1) + "]");
    for (std::size_t g = 0; g < block_sizes_.size(); ++g)
        for (int c = 0; c < block_sizes_[g]; ++c)
            for (int r = c; r < block_sizes_[g]; ++r)
                out.push_back("gamma" + std::to_string(g + 1) + "[" + std::to_string(r + 1) + "," +
                              std::to_string(c + 1) + "]");
    if (variant_ == ModelVariant::GpG) {
        for (int g = 1; g <= T_; ++g) out.push_back("sigma2[" + std::to_string(g) + "]");
        out.push_back("gamma_stu");
    } else {
        for (int l = 1; l <= T_; ++l)
            for (int k = l; k <= T_; ++k)
                out.push_back("sigma[" + std::to_string(k) + "," + std::to_string(l) + "]");
    }
    if (has_alpha())
        for (int g = 2; g <= T_; ++g)
            for (int t = 1; t < g; ++t)
                out.push_back("alpha[" + std::to_string(g) + "," + std::to_string(t) + "]");
    return out;
}

}  // namespace mmlmm
