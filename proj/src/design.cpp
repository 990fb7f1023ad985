#include "mmlmm/design.hpp"

#include <Eigen/Cholesky>

#include <algorithm>
#include <cmath>

namespace mmlmm {

void EffectLayout::finalize() {
    grade_offset.resize(T);
    int off = n_stu;
    for (int g = 0; g < T; ++g) {
        grade_offset[g] = off;
        off += m[g] * K[g];
    }
    dim = off;
}

int ModelDesign::year_pos(int slot, int year) const {
    const auto& ys = patterns[slot].years;
    auto it = std::lower_bound(ys.begin(), ys.end(), year);
    if (it == ys.end() || *it != year) throw DimensionError("year not in pattern block");
    return static_cast<int>(it - ys.begin());
}

SpMatRow ModelDesign::to_sparse(const ParamState& p) const {
    std::vector<Triplet> trips;
    for (int r = 0; r < n_obs; ++r)
        for (const auto& e : s_rows[r]) trips.emplace_back(r, e.col, s_value(e, p));
    SpMatRow s(n_obs, layout.dim);
    s.setFromTriplets(trips.begin(), trips.end());
    return s;
}

SpMatRow ModelDesign::to_sparse() const {
    ParamState unit;
    unit.alpha = Vec::Ones(alpha_count(T));
    return to_sparse(unit);
}

ModelDesign build_design(std::shared_ptr<const LongitudinalDataset> data, ModelVariant variant,
                         const std::vector<std::string>& covariate_selection,
                         bool distinct_scales) {
    if (!data) throw ConfigError("null dataset");
    if (distinct_scales &&
        (variant == ModelVariant::GpG || variant == ModelVariant::RGpR))
        throw ConfigError(std::string(variant_name(variant)) +
                          " requires scores on a common scale across years");

    ModelDesign d;
    d.variant = variant;
    d.data = data;
    d.T = data->T;
    d.n_obs = data->n_obs;

    // X: one intercept column per year, then selected covariates
    std::vector<int> cov_cols;
    for (const auto& name : covariate_selection) {
        auto it = std::find(data->covariate_names.begin(), data->covariate_names.end(), name);
        if (it == data->covariate_names.end())
            throw ConfigError("covariate column '" + name + "' not in dataset");
        cov_cols.push_back(static_cast<int>(it - data->covariate_names.begin()));
    }
    const int p = d.T + static_cast<int>(cov_cols.size());
    d.X = Mat::Zero(d.n_obs, p);
    for (int r = 0; r < d.n_obs; ++r) {
        d.X(r, data->row_year[r] - 1) = 1.0;
        for (std::size_t c = 0; c < cov_cols.size(); ++c) {
            const double v = data->covariates(r, cov_cols[c]);
            if (std::isnan(v))
                throw ValidationError("missing covariate '" + covariate_selection[c] +
                                      "' on a scored observation");
            d.X(r, d.T + static_cast<int>(c)) = v;
        }
    }
    for (int g = 1; g <= d.T; ++g) d.x_labels.push_back("year" + std::to_string(g));
    for (const auto& name : covariate_selection) d.x_labels.push_back(name);

    // effect layout
    d.layout.T = d.T;
    d.layout.m = data->m;
    d.layout.K.resize(d.T);
    for (int g = 1; g <= d.T; ++g) {
        switch (variant) {
            case ModelVariant::GpR:
            case ModelVariant::GpG: d.layout.K[g - 1] = d.T - g + 1; break;
            case ModelVariant::RGpR: d.layout.K[g - 1] = std::min(2, d.T - g + 1); break;
            case ModelVariant::Vp:
            case ModelVariant::Cp: d.layout.K[g - 1] = 1; break;
        }
    }
    d.layout.n_stu = (variant == ModelVariant::GpG) ? data->n : 0;
    d.layout.finalize();
    if (variant == ModelVariant::Vp || variant == ModelVariant::Cp) {
        d.expanded.T = d.T;
        d.expanded.m = data->m;
        d.expanded.K.resize(d.T);
        for (int g = 1; g <= d.T; ++g) d.expanded.K[g - 1] = d.T - g + 1;
        d.expanded.finalize();
    }

    // S rows: for observation (i, g), one entry per linked year t <= g
    d.s_rows.resize(d.n_obs);
    for (int r = 0; r < d.n_obs; ++r) {
        const int i = data->row_student[r];
        const int g = data->row_year[r];
        if (variant == ModelVariant::GpG) d.s_rows[r].push_back({i, g, g});
        for (int t = 1; t <= g; ++t) {
            const int j = data->teacher_of(i, t);
            if (j < 0) continue;
            int col;
            switch (variant) {
                case ModelVariant::GpR:
                case ModelVariant::GpG: col = d.layout.teacher_col(t, j) + (g - t); break;
                case ModelVariant::RGpR:
                    col = d.layout.teacher_col(t, j) + (t == g ? 0 : 1);
                    break;
                case ModelVariant::Vp:
                case ModelVariant::Cp: col = d.layout.teacher_col(t, j); break;
            }
            d.s_rows[r].push_back({col, g, t});
        }
    }

    // column labels
    d.labels.resize(d.layout.dim);
    for (int i = 0; i < d.layout.n_stu; ++i) d.labels[i] = {true, i, 0, 0};
    for (int g = 1; g <= d.T; ++g)
        for (int j = 0; j < d.layout.m[g - 1]; ++j)
            for (int k = 0; k < d.layout.K[g - 1]; ++k) {
                int effect_year;
                if (variant == ModelVariant::RGpR)
                    effect_year = (k == 0) ? g : 0;  // 0 = pooled future years
                else
                    effect_year = g + k;
                d.labels[d.layout.teacher_col(g, j) + k] = {false, j, g, effect_year};
            }

    // pattern registry
    d.pattern_slot_of_student.resize(data->n);
    for (const auto& [id, members] : data->pattern_members) {
        PatternInfo info;
        info.id = id;
        info.count = static_cast<int>(members.size());
        info.students = members;
        for (int g = 1; g <= d.T; ++g)
            if (id & (1 << (d.T - g))) info.years.push_back(g);
        d.patterns.push_back(std::move(info));
    }
    for (std::size_t s = 0; s < d.patterns.size(); ++s)
        for (int i : d.patterns[s].students)
            d.pattern_slot_of_student[i] = static_cast<int>(s);

    return d;
}

GAssembly assemble_g(const ModelDesign& d, const ParamState& p) {
    if (static_cast<int>(p.gamma.size()) != d.T)
        throw DimensionError("expected one Gamma block per grade");
    GAssembly a;
    a.n_stu = d.layout.n_stu;
    if (a.n_stu > 0) {
        if (!(p.gamma_stu > 0.0))
            throw PdViolationError("student intercept variance must be positive");
        a.gamma_stu = p.gamma_stu;
        a.gamma_stu_inv = 1.0 / p.gamma_stu;
        a.logdet += a.n_stu * std::log(p.gamma_stu);
    }
    a.gamma.resize(d.T);
    a.gamma_inv.resize(d.T);
    for (int g = 1; g <= d.T; ++g) {
        const Mat& gamma = p.gamma[g - 1];
        const int K = d.layout.K[g - 1];
        if (gamma.rows() != K || gamma.cols() != K)
            throw DimensionError("Gamma block for grade " + std::to_string(g) +
                                 " has wrong size");
        Eigen::LLT<Mat> llt(gamma);
        if (llt.info() != Eigen::Success)
            throw PdViolationError("Gamma block for grade " + std::to_string(g) +
                                   " is not positive definite");
        a.gamma[g - 1] = gamma;
        a.gamma_inv[g - 1] = llt.solve(Mat::Identity(K, K));
        double ld = 0.0;
        for (int k = 0; k < K; ++k) ld += 2.0 * std::log(llt.matrixL()(k, k));
        a.logdet += d.layout.m[g - 1] * ld;
    }
    return a;
}

RAssembly assemble_r_inverse(const ModelDesign& d, const ParamState& p) {
    RAssembly a;
    const bool diag = (d.variant == ModelVariant::GpG);
    if (diag) {
        if (p.sigma2.size() != d.T) throw DimensionError("expected one sigma2 per year");
    } else if (p.sigma.rows() != d.T || p.sigma.cols() != d.T) {
        throw DimensionError("sigma grid must be T x T");
    }
    a.block.resize(d.patterns.size());
    a.block_inv.resize(d.patterns.size());
    a.block_logdet.resize(d.patterns.size());
    for (std::size_t s = 0; s < d.patterns.size(); ++s) {
        const auto& years = d.patterns[s].years;
        const int sz = static_cast<int>(years.size());
        Mat block(sz, sz);
        if (diag) {
            block.setZero();
            for (int i = 0; i < sz; ++i) block(i, i) = p.sigma2[years[i] - 1];
        } else {
            for (int i = 0; i < sz; ++i)
                for (int j = 0; j < sz; ++j) block(i, j) = p.sigma(years[i] - 1, years[j] - 1);
        }
        Eigen::LLT<Mat> llt(block);
        if (llt.info() != Eigen::Success)
            throw PdViolationError("R block for OTS pattern " + std::to_string(d.patterns[s].id) +
                                   " is not positive definite");
        a.block[s] = block;
        a.block_inv[s] = llt.solve(Mat::Identity(sz, sz));
        double ld = 0.0;
        for (int k = 0; k < sz; ++k) ld += 2.0 * std::log(llt.matrixL()(k, k));
        a.block_logdet[s] = ld;
        a.logdet += d.patterns[s].count * ld;
    }
    return a;
}

SpMatRow assemble_sstar(const SpMatRow& s_expanded, const Vec& alpha,
                        const EffectLayout& expanded, const EffectLayout& teachers) {
    if (s_expanded.cols() != expanded.dim)
        throw DimensionError("expanded design has wrong column count");
    if (alpha.size() != alpha_count(expanded.T))
        throw DimensionError("alpha vector has wrong length");
    if (!alpha.allFinite()) throw ValidationError("alpha entries must be finite");

    // expanded column -> (grade t, teacher j, effect year te); target column is
    // the teacher's single effect, scaled by alpha_{te,t}
    std::vector<Triplet> trips;
    for (int r = 0; r < s_expanded.outerSize(); ++r) {
        for (SpMatRow::InnerIterator it(s_expanded, r); it; ++it) {
            const int col = static_cast<int>(it.col());
            int t = expanded.T;
            while (expanded.grade_offset[t - 1] > col) --t;
            const int within = col - expanded.grade_offset[t - 1];
            const int j = within / expanded.K[t - 1];
            const int te = t + within % expanded.K[t - 1];
            const double a = (te == t) ? 1.0 : alpha[alpha_index(te, t, expanded.T)];
            trips.emplace_back(r, teachers.teacher_col(t, j), it.value() * a);
        }
    }
    SpMatRow s(s_expanded.rows(), teachers.dim);
    s.setFromTriplets(trips.begin(), trips.end());
    return s;
}

SpMatRow expanded_s(const ModelDesign& d) {
    if (d.variant != ModelVariant::Vp && d.variant != ModelVariant::Cp)
        throw ConfigError("expanded design only defined for VP/CP");
    std::vector<Triplet> trips;
    for (int r = 0; r < d.n_obs; ++r)
        for (const auto& e : d.s_rows[r]) {
            const int j = d.data->teacher_of(d.data->row_student[r], e.t);
            trips.emplace_back(r, d.expanded.teacher_col(e.t, j) + (e.g - e.t), 1.0);
        }
    SpMatRow s(d.n_obs, d.expanded.dim);
    s.setFromTriplets(trips.begin(), trips.end());
    return s;
}

SpMatRow delta_pattern(const ModelDesign& d, int g, int t) {
    if (d.variant != ModelVariant::Vp && d.variant != ModelVariant::Cp)
        throw ConfigError("delta pattern only defined for VP/CP");
    if (t < 1 || t >= g || g > d.T)
        throw DimensionError("delta pattern requires 1 <= t < g <= T");
    std::vector<Triplet> trips;
    for (int r = 0; r < d.n_obs; ++r)
        for (const auto& e : d.s_rows[r])
            if (e.g == g && e.t == t) trips.emplace_back(r, e.col, 1.0);
    SpMatRow s(d.n_obs, d.layout.dim);
    s.setFromTriplets(trips.begin(), trips.end());
    return s;
}

}  // namespace mmlmm
