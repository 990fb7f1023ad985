#pragma once

#include "mmlmm/data.hpp"
#include "mmlmm/params.hpp"

#include <memory>
#include <vector>

namespace mmlmm {

// Column layout of the random-effect vector: optional leading student
// intercepts, then grade-major teacher blocks of size K_g, effect-year
// innermost.
struct EffectLayout {
    int T = 0;
    std::vector<int> m;             // teachers per grade
    std::vector<int> K;             // block size per grade
    int n_stu = 0;                  // leading student-intercept columns (GP.G)
    std::vector<int> grade_offset;  // first column of each grade's blocks
    int dim = 0;

    void finalize();
    int teacher_col(int g, int j) const {  // g 1-based, j roster index
        return grade_offset[g - 1] + j * K[g - 1];
    }
};

struct EffectLabel {
    bool student = false;
    int index = -1;       // student index, or teacher roster index
    int grade = 0;        // 1-based; 0 for student intercepts
    int effect_year = 0;  // 1-based target year; 0 = pooled future (rGP.R)
};

// One structural nonzero of S (or S*): observation in year g linked to the
// year-t teacher column `col`. Value is 1 except for VP, where it is
// alpha_{g,t} (1 on the diagonal t = g).
struct SRowEntry {
    int col;
    int g;
    int t;
};

struct PatternInfo {
    int id = 0;                 // OTS pattern
    std::vector<int> years;     // observed years, ascending, 1-based
    int count = 0;              // n_p
    std::vector<int> students;  // b(p)
};

struct ModelDesign {
    ModelVariant variant = ModelVariant::GpR;
    std::shared_ptr<const LongitudinalDataset> data;
    int n_obs = 0;
    int T = 0;

    Mat X;
    std::vector<std::string> x_labels;

    EffectLayout layout;    // columns of S (VP/CP: one column per teacher)
    EffectLayout expanded;  // VP/CP only: GP layout behind the (S, A) factor pair
    int q() const { return layout.dim; }

    std::vector<std::vector<SRowEntry>> s_rows;
    std::vector<EffectLabel> labels;  // per column

    std::vector<PatternInfo> patterns;         // sorted by id
    std::vector<int> pattern_slot_of_student;  // per student
    int year_pos(int slot, int year) const;    // position of year within pattern block

    double s_value(const SRowEntry& e, const ParamState& p) const {
        if (variant == ModelVariant::Vp && e.t != e.g)
            return p.alpha[alpha_index(e.g, e.t, T)];
        return 1.0;
    }
    SpMatRow to_sparse(const ParamState& p) const;
    SpMatRow to_sparse() const;  // unit values (all variants except VP at alpha != 1)
};

// covariate_selection: names of dataset covariate columns entering X after
// the T yearly intercept columns.
ModelDesign build_design(std::shared_ptr<const LongitudinalDataset> data, ModelVariant variant,
                         const std::vector<std::string>& covariate_selection = {},
                         bool distinct_scales = false);

// G = blockdiag(Gamma_stu I_n, Gamma_1 x m_1, ..., Gamma_T x m_T)
struct GAssembly {
    int n_stu = 0;
    double gamma_stu = 0.0;
    double gamma_stu_inv = 0.0;
    std::vector<Mat> gamma;      // per grade (PD-validated)
    std::vector<Mat> gamma_inv;
    double logdet = 0.0;         // log|G|
};
GAssembly assemble_g(const ModelDesign& d, const ParamState& p);

// R^-1 per OTS pattern; blocks are sigma-grid subsets (diagonal for GP.G)
struct RAssembly {
    std::vector<Mat> block;      // per pattern slot
    std::vector<Mat> block_inv;
    std::vector<double> block_logdet;
    double logdet = 0.0;         // log|R| over all students
};
RAssembly assemble_r_inverse(const ModelDesign& d, const ParamState& p);

// VP/CP: S* = S A(alpha) built structurally (nonzero set independent of the
// alpha values). S is the expanded GP-layout design.
SpMatRow assemble_sstar(const SpMatRow& s_expanded, const Vec& alpha,
                        const EffectLayout& expanded, const EffectLayout& teachers);
SpMatRow expanded_s(const ModelDesign& d);  // VP/CP only

// dS*/dalpha_{gt}, 1 <= t < g <= T
SpMatRow delta_pattern(const ModelDesign& d, int g, int t);

}  // namespace mmlmm
