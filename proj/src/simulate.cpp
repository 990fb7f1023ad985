#include "mmlmm/simulate.hpp"

#include <Eigen/Cholesky>

#include <cmath>
#include <cstdio>
#include <map>

namespace mmlmm {

namespace {

std::string padded(const std::string& prefix, int idx, int width) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%0*d", width, idx);
    return prefix + buf;
}

int id_width(int count) {
    int w = 1;
    for (int v = count; v >= 10; v /= 10) ++w;
    return w;
}

Mat chol_lower(const Mat& m, const char* what) {
    Eigen::LLT<Mat> llt(m);
    if (llt.info() != Eigen::Success)
        throw PdViolationError(std::string("simulation truth: ") + what +
                               " is not positive definite");
    return llt.matrixL();
}

}  // namespace

ParamState make_default_truth(ModelVariant v, int T) {
    ParamState p;
    p.beta = Vec::LinSpaced(T, 2.5, 2.5 + 0.5 * (T - 1));
    p.gamma.resize(T);
    for (int g = 1; g <= T; ++g) {
        int K;
        switch (v) {
            case ModelVariant::RGpR: K = std::min(2, T - g + 1); break;
            case ModelVariant::Vp:
            case ModelVariant::Cp: K = 1; break;
            default: K = T - g + 1; break;
        }
        Vec sd(K);
        sd[0] = 0.5;  // current-year effects vary more than future ones
        for (int k = 1; k < K; ++k) sd[k] = 0.3;
        Mat corr = Mat::Constant(K, K, 0.5);
        corr.diagonal().setOnes();
        p.gamma[g - 1] = sd.asDiagonal() * corr * sd.asDiagonal();
    }
    if (v == ModelVariant::GpG) {
        p.sigma2 = Vec::LinSpaced(T, 0.6, 0.6 + 0.1 * (T - 1));
        p.gamma_stu = 0.4;
    } else {
        p.sigma = Mat(T, T);
        for (int k = 0; k < T; ++k)
            for (int l = 0; l < T; ++l) p.sigma(k, l) = std::pow(0.5, std::abs(k - l));
    }
    if (v == ModelVariant::Vp) p.alpha = Vec::Constant(alpha_count(T), 0.4);
    if (v == ModelVariant::Cp) p.alpha = Vec::Ones(alpha_count(T));
    return p;
}

SimResult simulate_dataset(const SimSpec& spec) {
    const int T = spec.T;
    if (spec.n < 1 || T < 1) throw ConfigError("simulation needs n >= 1 and T >= 1");
    if (static_cast<int>(spec.m.size()) != T)
        throw ConfigError("simulation needs one teacher count per year");
    for (int g = 0; g < T; ++g)
        if (spec.m[g] < 1)
            throw ConfigError("year " + std::to_string(g + 1) + " has no teachers");
    if (!(spec.missing_rate >= 0.0 && spec.missing_rate < 1.0))
        throw ConfigError("missing rate must lie in [0, 1)");

    std::mt19937_64 rng(spec.seed);
    std::normal_distribution<double> gauss(0.0, 1.0);
    std::uniform_real_distribution<double> unif(0.0, 1.0);

    const bool vp_kind = spec.variant == ModelVariant::Vp || spec.variant == ModelVariant::Cp;
    std::vector<int> K(T);
    for (int g = 1; g <= T; ++g) {
        if (spec.variant == ModelVariant::RGpR)
            K[g - 1] = std::min(2, T - g + 1);
        else if (vp_kind)
            K[g - 1] = 1;
        else
            K[g - 1] = T - g + 1;
    }

    // teacher effects, keyed by generated id
    const int sw = id_width(spec.n);
    std::vector<int> tw(T);
    std::vector<std::vector<std::string>> teacher_ids(T);
    std::map<std::string, Vec> theta;
    for (int g = 1; g <= T; ++g) {
        tw[g - 1] = id_width(spec.m[g - 1]);
        const Mat chol = chol_lower(spec.truth.gamma[g - 1], "Gamma");
        for (int j = 0; j < spec.m[g - 1]; ++j) {
            const std::string id = padded("y" + std::to_string(g) + "t", j, tw[g - 1]);
            teacher_ids[g - 1].push_back(id);
            Vec z(K[g - 1]);
            for (int k = 0; k < K[g - 1]; ++k) z[k] = gauss(rng);
            theta[id] = chol * z;
        }
    }
    std::map<std::string, double> delta;  // student intercepts (GP.G)

    Mat sigma_chol;
    if (spec.variant != ModelVariant::GpG)
        sigma_chol = chol_lower(spec.truth.sigma, "sigma grid");
    else
        for (int g = 0; g < T; ++g)
            if (!(spec.truth.sigma2[g] > 0.0))
                throw PdViolationError("simulation truth: sigma2 must be positive");

    auto alpha_of = [&](int g, int t) {
        if (t == g) return 1.0;
        if (spec.variant == ModelVariant::Cp) return 1.0;
        return spec.truth.alpha[alpha_index(g, t, T)];
    };

    std::vector<ObservationRecord> records;
    records.reserve(static_cast<std::size_t>(spec.n) * T);
    std::uniform_int_distribution<int> pick_cohort(0, spec.m[0] - 1);
    for (int i = 0; i < spec.n; ++i) {
        const std::string sid = padded("s", i, sw);
        std::vector<int> assigned(T);
        int cohort = (spec.mixing == MixingRule::Cohort) ? pick_cohort(rng) : 0;
        for (int g = 1; g <= T; ++g) {
            if (spec.mixing == MixingRule::Cohort) {
                assigned[g - 1] = cohort % spec.m[g - 1];
            } else {
                std::uniform_int_distribution<int> pick(0, spec.m[g - 1] - 1);
                assigned[g - 1] = pick(rng);
            }
        }
        if (spec.variant == ModelVariant::GpG) {
            delta[sid] = std::sqrt(spec.truth.gamma_stu) * gauss(rng);
        }
        Vec eps(T);
        if (spec.variant == ModelVariant::GpG) {
            for (int g = 0; g < T; ++g) eps[g] = std::sqrt(spec.truth.sigma2[g]) * gauss(rng);
        } else {
            Vec z(T);
            for (int g = 0; g < T; ++g) z[g] = gauss(rng);
            eps = sigma_chol * z;
        }
        for (int g = 1; g <= T; ++g) {
            double mean = spec.truth.beta[g - 1];
            for (int t = 1; t <= g; ++t) {
                const Vec& th = theta[teacher_ids[t - 1][assigned[t - 1]]];
                if (vp_kind)
                    mean += alpha_of(g, t) * th[0];
                else if (spec.variant == ModelVariant::RGpR)
                    mean += th[t == g ? 0 : 1];
                else
                    mean += th[g - t];
            }
            if (spec.variant == ModelVariant::GpG) mean += delta[sid];
            ObservationRecord rec;
            rec.student = sid;
            rec.year = g;
            rec.teacher = teacher_ids[g - 1][assigned[g - 1]];
            if (unif(rng) >= spec.missing_rate) rec.score = mean + eps[g - 1];
            records.push_back(std::move(rec));
        }
    }

    SimResult out;
    out.records = std::move(records);
    out.dataset = build_dataset(out.records, T);
    out.design = build_design(out.dataset, spec.variant);
    out.truth = spec.truth;
    out.identifiability_warning = (spec.mixing == MixingRule::Cohort);

    out.eta_true = Vec::Zero(out.design.q());
    for (int c = 0; c < out.design.q(); ++c) {
        const auto& lab = out.design.labels[c];
        if (lab.student)
            out.eta_true[c] = delta.at(out.dataset->students[lab.index]);
        else {
            const Vec& th = theta.at(out.dataset->rosters[lab.grade - 1][lab.index]);
            const int k = c - out.design.layout.teacher_col(lab.grade, lab.index);
            out.eta_true[c] = th[k];
        }
    }
    return out;
}

double dense_oracle_loglik(const ModelDesign& d, const ParamState& p, int cap) {
    if (d.n_obs > cap)
        throw ConfigError("dense oracle refuses n_obs > " + std::to_string(cap));
    const Mat s = Mat(d.to_sparse(p));

    // dense G assembled block by block from the parameter values
    const int q = d.q();
    Mat g = Mat::Zero(q, q);
    for (int i = 0; i < d.layout.n_stu; ++i) g(i, i) = p.gamma_stu;
    for (int gr = 1; gr <= d.T; ++gr) {
        const int K = d.layout.K[gr - 1];
        for (int j = 0; j < d.layout.m[gr - 1]; ++j) {
            const int c0 = d.layout.teacher_col(gr, j);
            g.block(c0, c0, K, K) = p.gamma[gr - 1];
        }
    }

    // dense block-diagonal R straight from the grid / yearly variances
    Mat r = Mat::Zero(d.n_obs, d.n_obs);
    for (int i = 0; i < d.data->n; ++i) {
        const int r0 = d.data->row_start[i];
        const auto& ys = d.data->obs_years[i];
        for (std::size_t a = 0; a < ys.size(); ++a)
            for (std::size_t b = 0; b < ys.size(); ++b) {
                double v;
                if (d.variant == ModelVariant::GpG)
                    v = (a == b) ? p.sigma2[ys[a] - 1] : 0.0;
                else
                    v = p.sigma(ys[a] - 1, ys[b] - 1);
                r(r0 + static_cast<int>(a), r0 + static_cast<int>(b)) = v;
            }
    }

    const Mat v = s * g * s.transpose() + r;
    Eigen::LLT<Mat> llt(v);
    if (llt.info() != Eigen::Success)
        throw PdViolationError("dense oracle: V is not positive definite");
    double logdet = 0.0;
    for (int i = 0; i < d.n_obs; ++i) logdet += 2.0 * std::log(llt.matrixL()(i, i));
    const Vec resid = d.data->y - d.X * p.beta;
    return -0.5 * (logdet + resid.dot(llt.solve(resid)));
}

Vec numeric_score(const ModelDesign& d, const ParamState& p, double step, int cap) {
    if (d.n_obs > cap)
        throw ConfigError("dense oracle refuses n_obs > " + std::to_string(cap));
    const ParamPacking pk = packing_for(d);
    const Vec psi = pk.pack(p);
    Vec grad(pk.dim());
    for (int j = 0; j < pk.dim(); ++j) {
        const double h = std::max(step, step * std::abs(psi[j]));
        Vec up = psi, dn = psi;
        up[j] += h;
        dn[j] -= h;
        grad[j] = (dense_oracle_loglik(d, pk.unpack(up), cap) -
                   dense_oracle_loglik(d, pk.unpack(dn), cap)) /
                  (2.0 * h);
    }
    return grad;
}

}  // namespace mmlmm
