#include "mmlmm/em.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <limits>

namespace mmlmm {

namespace {

Vec fitted_random(const ModelDesign& d, const ParamState& p, const Vec& eta) {
    Vec f = Vec::Zero(d.n_obs);
    for (int r = 0; r < d.n_obs; ++r)
        for (const auto& e : d.s_rows[r]) f[r] += d.s_value(e, p) * eta[e.col];
    return f;
}

// quadratic form s' vtilde s for one observation row
double row_quad(const ModelDesign& d, const ParamState& p, const PosteriorMoments& mom, int r) {
    double acc = 0.0;
    for (const auto& ea : d.s_rows[r])
        for (const auto& eb : d.s_rows[r])
            acc += d.s_value(ea, p) * d.s_value(eb, p) * mom.v_entry(ea.col, eb.col);
    return acc;
}

// per-grade sums of the teacher blocks of vtilde + eta eta'
std::vector<Mat> gamma_numerators(const ModelDesign& d, const PosteriorMoments& mom) {
    std::vector<Mat> sums(d.T);
    for (int g = 1; g <= d.T; ++g) {
        const int K = d.layout.K[g - 1];
        Mat acc = Mat::Zero(K, K);
        for (int j = 0; j < d.layout.m[g - 1]; ++j) {
            const int c0 = d.layout.teacher_col(g, j);
            for (int a = 0; a < K; ++a)
                for (int b = 0; b < K; ++b)
                    acc(a, b) += mom.v_entry(c0 + a, c0 + b) + mom.eta[c0 + a] * mom.eta[c0 + b];
        }
        sums[g - 1] = 0.5 * (acc + acc.transpose());
    }
    return sums;
}

// per-pattern aggregates E_p = sum_b [ d_b d_b' + S_b vtilde S_b' ]
std::vector<Mat> pattern_aggregates(const ModelDesign& d, const ParamState& p,
                                    const PosteriorMoments& mom) {
    const Vec resid = d.data->y - d.X * p.beta;
    const Vec f = fitted_random(d, p, mom.eta);
    std::vector<Mat> agg(d.patterns.size());
    for (std::size_t s = 0; s < d.patterns.size(); ++s) {
        const int sz = static_cast<int>(d.patterns[s].years.size());
        agg[s] = Mat::Zero(sz, sz);
    }
    for (int i = 0; i < d.data->n; ++i) {
        const int slot = d.pattern_slot_of_student[i];
        const int r0 = d.data->row_start[i];
        const int sz = d.data->rows_of(i);
        Mat& e = agg[slot];
        for (int a = 0; a < sz; ++a) {
            const double da = resid[r0 + a] - f[r0 + a];
            for (int b = 0; b < sz; ++b) {
                double svs = 0.0;
                for (const auto& ea : d.s_rows[r0 + a])
                    for (const auto& eb : d.s_rows[r0 + b])
                        svs += d.s_value(ea, p) * d.s_value(eb, p) *
                               mom.v_entry(ea.col, eb.col);
                e(a, b) += da * (resid[r0 + b] - f[r0 + b]) + svs;
            }
        }
    }
    return agg;
}

// active sigma-grid coordinates: (k, l), l <= k, appearing in some pattern
struct GridCoords {
    std::vector<std::pair<int, int>> pairs;                 // 1-based years
    std::vector<std::vector<int>> slots;                    // P_kl as pattern slots
    std::vector<std::vector<std::pair<int, int>>> pos;      // (pos_k, pos_l) per slot
};

GridCoords grid_coords(const ModelDesign& d) {
    GridCoords gc;
    for (int l = 1; l <= d.T; ++l)
        for (int k = l; k <= d.T; ++k) {
            std::vector<int> slots;
            std::vector<std::pair<int, int>> pos;
            for (std::size_t s = 0; s < d.patterns.size(); ++s) {
                const auto& ys = d.patterns[s].years;
                if (std::binary_search(ys.begin(), ys.end(), k) &&
                    std::binary_search(ys.begin(), ys.end(), l)) {
                    slots.push_back(static_cast<int>(s));
                    pos.emplace_back(d.year_pos(static_cast<int>(s), k),
                                     d.year_pos(static_cast<int>(s), l));
                }
            }
            if (!slots.empty()) {
                gc.pairs.emplace_back(k, l);
                gc.slots.push_back(std::move(slots));
                gc.pos.push_back(std::move(pos));
            }
        }
    return gc;
}

// pattern-block inverses of the grid; throws PdViolationError via assemble
std::vector<Mat> pattern_inverses(const ModelDesign& d, const Mat& sigma) {
    std::vector<Mat> w(d.patterns.size());
    for (std::size_t s = 0; s < d.patterns.size(); ++s) {
        const auto& ys = d.patterns[s].years;
        const int sz = static_cast<int>(ys.size());
        Mat block(sz, sz);
        for (int a = 0; a < sz; ++a)
            for (int b = 0; b < sz; ++b) block(a, b) = sigma(ys[a] - 1, ys[b] - 1);
        Eigen::LLT<Mat> llt(block);
        if (llt.info() != Eigen::Success)
            throw PdViolationError("sigma grid gives a non-PD block for pattern " +
                                   std::to_string(d.patterns[s].id));
        w[s] = llt.solve(Mat::Identity(sz, sz));
    }
    return w;
}

bool grid_blocks_pd(const ModelDesign& d, const Mat& sigma) {
    for (const auto& pat : d.patterns) {
        const int sz = static_cast<int>(pat.years.size());
        Mat block(sz, sz);
        for (int a = 0; a < sz; ++a)
            for (int b = 0; b < sz; ++b) block(a, b) = sigma(pat.years[a] - 1, pat.years[b] - 1);
        if (Eigen::LLT<Mat>(block).info() != Eigen::Success) return false;
    }
    return true;
}

Vec grid_score(const ModelDesign& d, const GridCoords& gc, const std::vector<Mat>& w,
               const std::vector<Mat>& e) {
    Vec s(static_cast<Eigen::Index>(gc.pairs.size()));
    for (std::size_t a = 0; a < gc.pairs.size(); ++a) {
        const double c = (gc.pairs[a].first == gc.pairs[a].second) ? 0.5 : 1.0;
        double acc = 0.0;
        for (std::size_t t = 0; t < gc.slots[a].size(); ++t) {
            const int slot = gc.slots[a][t];
            const auto [pk, pl] = gc.pos[a][t];
            const Mat wew = w[slot] * e[slot] * w[slot];
            acc += d.patterns[slot].count * w[slot](pk, pl) - wew(pk, pl);
        }
        s[static_cast<Eigen::Index>(a)] = -c * acc;
    }
    return s;
}

Mat grid_hessian(const ModelDesign& d, const GridCoords& gc, const std::vector<Mat>& w,
                 const std::vector<Mat>& e) {
    const int na = static_cast<int>(gc.pairs.size());
    std::vector<Mat> a_mat(d.patterns.size());  // W E W per slot
    for (std::size_t s = 0; s < d.patterns.size(); ++s) a_mat[s] = w[s] * e[s] * w[s];

    // slot -> position of (k,l) for each active pair, -1 when absent
    std::vector<std::vector<int>> where(na, std::vector<int>(d.patterns.size(), -1));
    for (int a = 0; a < na; ++a)
        for (std::size_t t = 0; t < gc.slots[a].size(); ++t)
            where[a][gc.slots[a][t]] = static_cast<int>(t);

    Mat h = Mat::Zero(na, na);
    for (int a = 0; a < na; ++a) {
        const double ca = (gc.pairs[a].first == gc.pairs[a].second) ? 0.5 : 1.0;
        for (int b = 0; b < na; ++b) {
            const bool bd = (gc.pairs[b].first == gc.pairs[b].second);
            double acc = 0.0;
            for (std::size_t t = 0; t < gc.slots[a].size(); ++t) {
                const int slot = gc.slots[a][t];
                const int tb = where[b][slot];
                if (tb < 0) continue;
                const auto [pk, pl] = gc.pos[a][t];
                const auto [qk, ql] = gc.pos[b][static_cast<std::size_t>(tb)];
                const Mat& W = w[slot];
                const Mat& A = a_mat[slot];
                const double np = d.patterns[slot].count;
                // d/dsigma_b of (n_p W - W E W) at entry (pk, pl)
                double term = -np * W(pk, qk) * W(ql, pl) + W(pk, qk) * A(ql, pl) +
                              A(pk, qk) * W(ql, pl);
                if (!bd)
                    term += -np * W(pk, ql) * W(qk, pl) + W(pk, ql) * A(qk, pl) +
                            A(pk, ql) * W(qk, pl);
                acc += term;
            }
            h(a, b) = -ca * acc;
        }
    }
    return h;
}

// linear system behind the alpha score: S(alpha) = b - J alpha over all
// (g, t) pairs with t <= g (current-year pairs are fixed at 1)
struct AlphaSystem {
    Vec b;
    Mat j;
    static int index(int g, int t) { return g * (g - 1) / 2 + (t - 1); }
};

AlphaSystem alpha_system(const ModelDesign& d, const PosteriorMoments& mom, const ParamState& p,
                         const RAssembly& r_asm) {
    const int np = d.T * (d.T + 1) / 2;
    AlphaSystem sys;
    sys.b = Vec::Zero(np);
    sys.j = Mat::Zero(np, np);
    const Vec resid = d.data->y - d.X * p.beta;
    for (int i = 0; i < d.data->n; ++i) {
        const int slot = d.pattern_slot_of_student[i];
        const Mat& w = r_asm.block_inv[slot];
        const int r0 = d.data->row_start[i];
        const int sz = d.data->rows_of(i);
        const Vec wi = w * resid.segment(r0, sz);
        for (int a = 0; a < sz; ++a) {
            for (const auto& ea : d.s_rows[r0 + a]) {
                const int ia = AlphaSystem::index(ea.g, ea.t);
                sys.b[ia] += wi[a] * mom.eta[ea.col];
                for (int b = 0; b < sz; ++b) {
                    const double wab = w(a, b);
                    if (wab == 0.0) continue;
                    for (const auto& eb : d.s_rows[r0 + b]) {
                        sys.j(ia, AlphaSystem::index(eb.g, eb.t)) +=
                            wab * (mom.v_entry(ea.col, eb.col) +
                                   mom.eta[ea.col] * mom.eta[eb.col]);
                    }
                }
            }
        }
    }
    return sys;
}

}  // namespace

// ---------------------------------------------------------------------------
// posterior moments
// ---------------------------------------------------------------------------

double PosteriorMoments::v_entry(int i, int j) const {
    if (vdense) return (*vdense)(i, j);
    if (vsub) {
        if (auto v = vsub->entry(i, j)) return *v;
    }
    return factor->solve(Vec(Vec::Unit(factor->dim(), j)))[i];
}

Mat PosteriorMoments::v_block(const std::vector<int>& idx) const {
    const int sz = static_cast<int>(idx.size());
    if (vdense) {
        Mat b(sz, sz);
        for (int a = 0; a < sz; ++a)
            for (int c = 0; c < sz; ++c) b(a, c) = (*vdense)(idx[a], idx[c]);
        return b;
    }
    if (vsub) {
        Mat b(sz, sz);
        bool complete = true;
        for (int a = 0; a < sz && complete; ++a)
            for (int c = 0; c < sz; ++c) {
                const auto off = vsub->offset(idx[a], idx[c]);
                if (off < 0) {
                    complete = false;
                    break;
                }
                b(a, c) = vsub->value(off);
            }
        if (complete) return b;
    }
    return factor->inverse_block(idx);
}

Vec PosteriorMoments::v_diagonal() const {
    if (vdense) return vdense->diagonal();
    return vsub->diagonal();
}

Vec PosteriorMoments::solve_m(const Vec& b) const {
    if (dense_factor) return dense_factor->solve(b);
    return factor->solve(b);
}

Mat PosteriorMoments::solve_m(const Mat& b) const {
    if (dense_factor) return dense_factor->solve(b);
    return factor->solve(b);
}

// ---------------------------------------------------------------------------
// engine
// ---------------------------------------------------------------------------

EmEngine::EmEngine(const ModelDesign& d, EMConfig cfg) : d_(d), cfg_(cfg) {
    row_ptr_.push_back(0);
    for (int r = 0; r < d.n_obs; ++r) {
        for (const auto& e : d.s_rows[r]) {
            e_col_.push_back(e.col);
            e_g_.push_back(e.g);
            e_t_.push_back(e.t);
        }
        row_ptr_.push_back(static_cast<int>(e_col_.size()));
    }
    e_val_.assign(e_col_.size(), 1.0);
}

void EmEngine::fill_values(const ParamState& p) {
    if (d_.variant != ModelVariant::Vp) return;
    for (std::size_t k = 0; k < e_col_.size(); ++k)
        e_val_[k] = (e_t_[k] == e_g_[k]) ? 1.0
                                         : p.alpha[alpha_index(e_g_[k], e_t_[k], d_.T)];
}

EmEngine::State EmEngine::refresh(const ParamState& p, bool want_moments) {
    const GAssembly g = assemble_g(d_, p);
    const RAssembly r = assemble_r_inverse(d_, p);
    fill_values(p);

    const int q = d_.q();
    const Vec resid = d_.data->y - d_.X * p.beta;
    Vec u = Vec::Zero(q);
    double r_quad = 0.0;
    std::vector<Triplet> trips;
    trips.reserve(e_col_.size() * 8 + static_cast<std::size_t>(q));

    for (int i = 0; i < d_.data->n; ++i) {
        const int slot = d_.pattern_slot_of_student[i];
        const Mat& w = r.block_inv[slot];
        const int r0 = d_.data->row_start[i];
        const int sz = d_.data->rows_of(i);
        const Vec ri = resid.segment(r0, sz);
        const Vec wi = w * ri;
        r_quad += ri.dot(wi);
        for (int a = 0; a < sz; ++a)
            for (int k = row_ptr_[r0 + a]; k < row_ptr_[r0 + a + 1]; ++k)
                u[e_col_[k]] += e_val_[k] * wi[a];
        for (int a = 0; a < sz; ++a)
            for (int b = 0; b < sz; ++b) {
                const double wab = w(a, b);
                if (wab == 0.0) continue;  // structural (diagonal R)
                for (int ka = row_ptr_[r0 + a]; ka < row_ptr_[r0 + a + 1]; ++ka)
                    for (int kb = row_ptr_[r0 + b]; kb < row_ptr_[r0 + b + 1]; ++kb)
                        if (e_col_[ka] >= e_col_[kb])
                            trips.emplace_back(e_col_[ka], e_col_[kb],
                                               e_val_[ka] * wab * e_val_[kb]);
            }
    }
    for (int i = 0; i < g.n_stu; ++i) trips.emplace_back(i, i, g.gamma_stu_inv);
    for (int gr = 1; gr <= d_.T; ++gr) {
        const Mat& inv = g.gamma_inv[gr - 1];
        const int K = d_.layout.K[gr - 1];
        for (int j = 0; j < d_.layout.m[gr - 1]; ++j) {
            const int c0 = d_.layout.teacher_col(gr, j);
            for (int b = 0; b < K; ++b)
                for (int a = b; a < K; ++a) trips.emplace_back(c0 + a, c0 + b, inv(a, b));
        }
    }
    SymSparse m = SymSparse::from_triplets(q, trips);

    State st;
    if (q <= cfg_.moment_dense_threshold) {
        m_dense_ = m.dense();
        if (!dense_factor_) dense_factor_ = std::make_shared<Eigen::LLT<Mat>>();
        dense_factor_->compute(m_dense_);
        if (dense_factor_->info() != Eigen::Success)
            throw FactorizationError("normal matrix is not numerically positive definite");
        double logdet_m = 0.0;
        for (int k = 0; k < q; ++k)
            logdet_m += 2.0 * std::log(dense_factor_->matrixLLT()(k, k));
        st.moments.eta = dense_factor_->solve(u);
        st.moments.dense_factor = dense_factor_;
        st.loglik = -0.5 * (r.logdet + g.logdet + logdet_m + r_quad - u.dot(st.moments.eta));
        if (want_moments) {
            if (!vdense_) vdense_ = std::make_shared<Mat>();
            *vdense_ = dense_factor_->solve(Mat(Mat::Identity(q, q)));
            st.moments.vdense = vdense_;
        }
        return st;
    }

    if (!factor_) {
        factor_ = std::make_shared<CholFactor>(m, cfg_.dense_threshold);
    } else {
        try {
            factor_->refactor(m);
        } catch (const DimensionError&) {
            factor_ = std::make_shared<CholFactor>(m, cfg_.dense_threshold);
            vsub_.reset();
        }
    }

    st.moments.eta = factor_->solve(u);
    st.moments.factor = factor_;
    st.loglik = -0.5 * (r.logdet + g.logdet + factor_->log_det() + r_quad -
                        u.dot(st.moments.eta));
    if (want_moments) {
        if (!vsub_)
            vsub_ = std::make_shared<InverseSubset>(*factor_);
        else
            vsub_->recompute(*factor_);
        st.moments.vsub = vsub_;
    }
    return st;
}

ParamPacking packing_for(const ModelDesign& d) {
    return ParamPacking(d.variant, d.T, static_cast<int>(d.X.cols()), d.layout.K);
}

PosteriorMoments e_step(const ModelDesign& d, const ParamState& p, const EMConfig& cfg) {
    EmEngine eng(d, cfg);
    return eng.refresh(p, true).moments;
}

double loglik(const ModelDesign& d, const ParamState& p, const EMConfig& cfg) {
    EmEngine eng(d, cfg);
    return eng.refresh(p, false).loglik;
}

// ---------------------------------------------------------------------------
// M-steps
// ---------------------------------------------------------------------------

Vec m_step_beta(const ModelDesign& d, const PosteriorMoments& mom, const ParamState& p) {
    const RAssembly r = assemble_r_inverse(d, p);
    const Vec adj = d.data->y - fitted_random(d, p, mom.eta);
    const int np = static_cast<int>(d.X.cols());
    Mat xtwx = Mat::Zero(np, np);
    Vec rhs = Vec::Zero(np);
    for (int i = 0; i < d.data->n; ++i) {
        const int slot = d.pattern_slot_of_student[i];
        const int r0 = d.data->row_start[i];
        const int sz = d.data->rows_of(i);
        const auto xi = d.X.middleRows(r0, sz);
        const Mat w = r.block_inv[slot];
        xtwx.noalias() += xi.transpose() * w * xi;
        rhs.noalias() += xi.transpose() * (w * adj.segment(r0, sz));
    }
    Eigen::LLT<Mat> llt(xtwx);
    if (llt.info() != Eigen::Success)
        throw RankError("singular GLS normal matrix (collinear covariates)");
    return llt.solve(rhs);
}

std::vector<Mat> m_step_gamma(const ModelDesign& d, const PosteriorMoments& mom,
                              const std::vector<Mat>& gamma_old) {
    const auto sums = gamma_numerators(d, mom);
    std::vector<Mat> out(d.T);
    for (int g = 1; g <= d.T; ++g)
        out[g - 1] = d.layout.m[g - 1] > 0 ? Mat(sums[g - 1] / d.layout.m[g - 1])
                                           : gamma_old[g - 1];
    return out;
}

double m_step_gamma_stu(const ModelDesign& d, const PosteriorMoments& mom) {
    const int n = d.layout.n_stu;
    if (n == 0) throw ConfigError("student intercepts only exist under gp.g");
    double acc = 0.0;
    for (int i = 0; i < n; ++i) acc += mom.v_entry(i, i) + mom.eta[i] * mom.eta[i];
    return acc / n;
}

Vec m_step_sigma_years(const ModelDesign& d, const PosteriorMoments& mom, const ParamState& p,
                       bool* dropped_year) {
    const Vec resid = d.data->y - d.X * p.beta;
    const Vec f = fitted_random(d, p, mom.eta);
    Vec acc = Vec::Zero(d.T);
    for (int r = 0; r < d.n_obs; ++r) {
        const double dd = resid[r] - f[r];
        acc[d.data->row_year[r] - 1] += dd * dd + row_quad(d, p, mom, r);
    }
    Vec out = p.sigma2;
    if (dropped_year) *dropped_year = false;
    for (int g = 0; g < d.T; ++g) {
        if (d.data->n_year[g] > 0)
            out[g] = acc[g] / d.data->n_year[g];
        else if (dropped_year)
            *dropped_year = true;
    }
    return out;
}

Mat m_step_r(const ModelDesign& d, const PosteriorMoments& mom, const ParamState& p,
             double damp_scale, const EMConfig& cfg, double* lambda_used) {
    const GridCoords gc = grid_coords(d);
    const auto agg = pattern_aggregates(d, p, mom);
    const int na = static_cast<int>(gc.pairs.size());

    Mat sigma = p.sigma;
    double lambda_base = 0.0;  // scheduled damping, reported in the trace
    double lambda_adapt = 0.0;
    Vec score(na);

    auto apply = [&](const Mat& base, const Vec& delta) {
        Mat next = base;
        for (int a = 0; a < na; ++a) {
            const auto [k, l] = gc.pairs[a];
            next(k - 1, l - 1) += delta[a];
            next(l - 1, k - 1) = next(k - 1, l - 1);
        }
        return next;
    };
    // conditional expectation being maximized; -inf outside the PD region,
    // which folds the PD step-halving into the line search
    auto q_of = [&](const Mat& grid) {
        double q = 0.0;
        for (std::size_t s = 0; s < d.patterns.size(); ++s) {
            const auto& ys = d.patterns[s].years;
            const int sz = static_cast<int>(ys.size());
            Mat block(sz, sz);
            for (int a = 0; a < sz; ++a)
                for (int b = 0; b < sz; ++b) block(a, b) = grid(ys[a] - 1, ys[b] - 1);
            Eigen::LLT<Mat> llt(block);
            if (llt.info() != Eigen::Success)
                return -std::numeric_limits<double>::infinity();
            double logdet = 0.0;
            for (int a = 0; a < sz; ++a) logdet += 2.0 * std::log(llt.matrixL()(a, a));
            q -= 0.5 * (d.patterns[s].count * logdet + llt.solve(agg[s]).trace());
        }
        return q;
    };

    auto active_coords = [&]() {
        Vec x(na);
        for (int a = 0; a < na; ++a) {
            const auto [k, l] = gc.pairs[a];
            x[a] = sigma(k - 1, l - 1);
        }
        return x;
    };

    double q_cur = q_of(sigma);
    for (int it = 0; it <= cfg.nr_max_inner; ++it) {
        const auto w = pattern_inverses(d, sigma);
        score = grid_score(d, gc, w, agg);
        const double snorm = score.lpNorm<Eigen::Infinity>();
        if (snorm <= cfg.nr_inner_tol) {
            if (lambda_used) *lambda_used = lambda_base;
            return sigma;
        }
        if (it == cfg.nr_max_inner) break;
        const Mat h = grid_hessian(d, gc, w, agg);
        const double diag_scale = h.diagonal().cwiseAbs().mean();
        if (it == 0 && damp_scale > 0.0) lambda_base = damp_scale * diag_scale;

        // damped Newton with a line search on the conditional objective;
        // lambda grows until lambda*I - H is PD, which makes the step an
        // ascent direction, and decays again after accepted steps
        bool accepted = false;
        for (int bump = 0; bump < 24 && !accepted; ++bump) {
            const double lam = std::max(lambda_base, lambda_adapt);
            Mat nd = -h;
            nd.diagonal().array() += lam;
            Eigen::LLT<Mat> llt(nd);
            if (llt.info() != Eigen::Success) {
                lambda_adapt = std::max(4.0 * std::max(lam, 1e-3 * diag_scale),
                                        4.0 * lambda_adapt);
                continue;
            }
            Vec delta = llt.solve(score);
            for (int half = 0; half < 40; ++half) {
                const Mat trial = apply(sigma, delta);
                const double q_trial = q_of(trial);
                if (q_trial >= q_cur - 1e-13 * (1.0 + std::abs(q_cur))) {
                    sigma = trial;
                    q_cur = q_trial;
                    accepted = true;
                    break;
                }
                delta *= 0.5;
            }
            if (accepted)
                lambda_adapt *= 0.25;
            else
                lambda_adapt = std::max(4.0 * std::max(lam, 1e-3 * diag_scale),
                                        4.0 * lambda_adapt);
        }
        if (!accepted)
            throw MStepError("sigma-grid Newton cannot improve the objective",
                             active_coords(), snorm);
    }
    throw MStepError("sigma-grid Newton did not converge in " +
                         std::to_string(cfg.nr_max_inner) + " iterations",
                     active_coords(), score.lpNorm<Eigen::Infinity>());
}

Vec m_step_alpha(const ModelDesign& d, const PosteriorMoments& mom, const ParamState& p) {
    if (d.variant != ModelVariant::Vp)
        throw ConfigError("persistence parameters are only estimated under vp");
    const RAssembly r = assemble_r_inverse(d, p);
    const AlphaSystem sys = alpha_system(d, mom, p, r);

    std::vector<int> free_idx, fixed_idx;
    for (int g = 1; g <= d.T; ++g) {
        fixed_idx.push_back(AlphaSystem::index(g, g));
        for (int t = 1; t < g; ++t) free_idx.push_back(AlphaSystem::index(g, t));
    }
    const int nf = static_cast<int>(free_idx.size());
    Mat jff(nf, nf);
    Vec rhs(nf);
    for (int a = 0; a < nf; ++a) {
        rhs[a] = sys.b[free_idx[a]];
        for (int b = 0; b < nf; ++b) jff(a, b) = sys.j(free_idx[a], free_idx[b]);
        for (int fx : fixed_idx) rhs[a] -= sys.j(free_idx[a], fx);
    }
    Eigen::FullPivLU<Mat> lu(jff);
    if (!lu.isInvertible())
        throw IdentifiabilityError(
            "persistence parameters are not identified (insufficient mixing)");
    return lu.solve(rhs);
}

// ---------------------------------------------------------------------------
// score vector
// ---------------------------------------------------------------------------

Vec score_vector(const ModelDesign& d, const ParamState& p, const PosteriorMoments& mom) {
    const ParamPacking pk = packing_for(d);
    Vec s = Vec::Zero(pk.dim());
    const RAssembly r = assemble_r_inverse(d, p);

    const Vec resid = d.data->y - d.X * p.beta;
    const Vec f = fitted_random(d, p, mom.eta);
    const Vec dvec = resid - f;
    for (int i = 0; i < d.data->n; ++i) {
        const int slot = d.pattern_slot_of_student[i];
        const int r0 = d.data->row_start[i];
        const int sz = d.data->rows_of(i);
        s.head(pk.n_beta()).noalias() +=
            d.X.middleRows(r0, sz).transpose() * (r.block_inv[slot] * dvec.segment(r0, sz));
    }

    const auto sums = gamma_numerators(d, mom);
    for (int g = 1; g <= d.T; ++g) {
        const int K = d.layout.K[g - 1];
        const int mg = d.layout.m[g - 1];
        Mat dmat = Mat::Zero(K, K);
        if (mg > 0) {
            const Mat ginv = p.gamma[g - 1].llt().solve(Mat::Identity(K, K));
            dmat = -0.5 * (mg * ginv - ginv * sums[g - 1] * ginv);
        }
        int idx = pk.gamma_offset(g);
        for (int c = 0; c < K; ++c)
            for (int rr = c; rr < K; ++rr)
                s[idx++] = (rr == c) ? dmat(rr, c) : 2.0 * dmat(rr, c);
    }

    if (d.variant == ModelVariant::GpG) {
        Vec acc = Vec::Zero(d.T);
        for (int rr = 0; rr < d.n_obs; ++rr) {
            const double dd = dvec[rr];
            acc[d.data->row_year[rr] - 1] += dd * dd + row_quad(d, p, mom, rr);
        }
        for (int g = 0; g < d.T; ++g) {
            const double s2 = p.sigma2[g];
            s[pk.r_offset() + g] =
                -0.5 * (d.data->n_year[g] / s2 - acc[g] / (s2 * s2));
        }
        double stu = 0.0;
        for (int i = 0; i < d.layout.n_stu; ++i)
            stu += mom.v_entry(i, i) + mom.eta[i] * mom.eta[i];
        s[pk.r_offset() + d.T] =
            -0.5 * (d.layout.n_stu / p.gamma_stu - stu / (p.gamma_stu * p.gamma_stu));
    } else {
        const GridCoords gc = grid_coords(d);
        const auto agg = pattern_aggregates(d, p, mom);
        const auto w = pattern_inverses(d, p.sigma);
        const Vec gs = grid_score(d, gc, w, agg);
        // map active pairs into the full vech layout; inactive entries stay 0
        for (std::size_t a = 0; a < gc.pairs.size(); ++a) {
            const auto [k, l] = gc.pairs[a];
            int idx = pk.r_offset();
            for (int ll = 1; ll <= d.T; ++ll)
                for (int kk = ll; kk <= d.T; ++kk) {
                    if (kk == k && ll == l) s[idx] = gs[static_cast<Eigen::Index>(a)];
                    ++idx;
                }
        }
    }

    if (d.variant == ModelVariant::Vp) {
        const AlphaSystem sys = alpha_system(d, mom, p, r);
        Vec alpha_all = Vec::Zero(d.T * (d.T + 1) / 2);
        for (int g = 1; g <= d.T; ++g) {
            alpha_all[AlphaSystem::index(g, g)] = 1.0;
            for (int t = 1; t < g; ++t)
                alpha_all[AlphaSystem::index(g, t)] = p.alpha[alpha_index(g, t, d.T)];
        }
        const Vec full = sys.b - sys.j * alpha_all;
        for (int g = 2; g <= d.T; ++g)
            for (int t = 1; t < g; ++t)
                s[pk.alpha_offset() + alpha_index(g, t, d.T)] = full[AlphaSystem::index(g, t)];
    }
    return s;
}

// ---------------------------------------------------------------------------
// initial values and the EM loop
// ---------------------------------------------------------------------------

ParamState initial_params(const ModelDesign& d) {
    ParamState p;
    Eigen::ColPivHouseholderQR<Mat> qr(d.X);
    if (qr.rank() < d.X.cols()) throw RankError("design matrix X is rank deficient");
    p.beta = qr.solve(d.data->y);
    const Vec e = d.data->y - d.X * p.beta;

    const double pooled = std::max(e.squaredNorm() / d.n_obs, 1e-8);
    Vec var_year = Vec::Constant(d.T, pooled);
    for (int g = 0; g < d.T; ++g)
        if (d.data->n_year[g] > 0) {
            double acc = 0.0;
            for (int r = 0; r < d.n_obs; ++r)
                if (d.data->row_year[r] == g + 1) acc += e[r] * e[r];
            var_year[g] = std::max(acc / d.data->n_year[g], 1e-8);
        }

    p.gamma.resize(d.T);
    for (int g = 1; g <= d.T; ++g)
        p.gamma[g - 1] = 0.1 * pooled * Mat::Identity(d.layout.K[g - 1], d.layout.K[g - 1]);

    if (d.variant == ModelVariant::GpG) {
        p.sigma2 = 0.5 * var_year;
        p.gamma_stu = 0.5 * var_year.mean();
    } else {
        p.sigma = Mat::Zero(d.T, d.T);
        p.sigma.diagonal() = var_year;
        // pooled residual cross-moments per year pair
        Mat cross = Mat::Zero(d.T, d.T);
        Mat count = Mat::Zero(d.T, d.T);
        for (int i = 0; i < d.data->n; ++i) {
            const int r0 = d.data->row_start[i];
            const auto& ys = d.data->obs_years[i];
            for (std::size_t a = 0; a < ys.size(); ++a)
                for (std::size_t b = 0; b < a; ++b) {
                    cross(ys[a] - 1, ys[b] - 1) += e[r0 + static_cast<int>(a)] *
                                                   e[r0 + static_cast<int>(b)];
                    count(ys[a] - 1, ys[b] - 1) += 1.0;
                }
        }
        for (int k = 1; k < d.T; ++k)
            for (int l = 0; l < k; ++l)
                if (count(k, l) > 0) {
                    p.sigma(k, l) = cross(k, l) / count(k, l);
                    p.sigma(l, k) = p.sigma(k, l);
                }
        for (int tries = 0; tries < 200 && !grid_blocks_pd(d, p.sigma); ++tries) {
            for (int k = 1; k < d.T; ++k)
                for (int l = 0; l < k; ++l) {
                    p.sigma(k, l) *= 0.9;
                    p.sigma(l, k) = p.sigma(k, l);
                }
        }
    }
    if (d.variant == ModelVariant::Vp || d.variant == ModelVariant::Cp)
        p.alpha = Vec::Ones(alpha_count(d.T));
    return p;
}

namespace {

double min_gamma_eigenvalue(const ModelDesign& d, const ParamState& p) {
    double me = std::numeric_limits<double>::infinity();
    for (const auto& g : p.gamma) {
        Eigen::SelfAdjointEigenSolver<Mat> es(g, Eigen::EigenvaluesOnly);
        me = std::min(me, es.eigenvalues().minCoeff());
    }
    if (d.variant == ModelVariant::GpG) me = std::min(me, p.gamma_stu);
    return me;
}

void apply_floors(const ModelDesign& d, ParamState& p, const EMConfig& cfg, EMTrace& trace) {
    auto floor_scalar = [&](double& v) {
        if (v < cfg.var_floor) {
            v = cfg.var_floor;
            trace.boundary_warning = true;
        }
    };
    for (auto& g : p.gamma) {
        Eigen::SelfAdjointEigenSolver<Mat> es(g, Eigen::EigenvaluesOnly);
        const double me = es.eigenvalues().minCoeff();
        if (me < cfg.var_floor) {
            g.diagonal().array() += cfg.var_floor - me;
            trace.boundary_warning = true;
        }
    }
    if (d.variant == ModelVariant::GpG) {
        floor_scalar(p.gamma_stu);
        for (int g = 0; g < d.T; ++g) floor_scalar(p.sigma2[g]);
    }
}

}  // namespace

FitResult run_em(const ModelDesign& d, const ParamState& init, const EMConfig& cfg) {
    EmEngine eng(d, cfg);
    ParamState p = init;
    const bool estimate_alpha = (d.variant == ModelVariant::Vp) && !cfg.fix_alpha;
    if (d.variant == ModelVariant::Vp && cfg.fix_alpha)
        p.alpha = Vec::Constant(alpha_count(d.T), *cfg.fix_alpha);
    EMTrace trace;

    auto st = eng.refresh(p, true);
    double l = st.loglik;
    trace.loglik.push_back(l);
    trace.rel_change.push_back(std::numeric_limits<double>::quiet_NaN());
    trace.lambda.push_back(0.0);
    trace.min_gamma_eig.push_back(min_gamma_eigenvalue(d, p));

    bool converged = false;
    int k = 0;
    while (k < cfg.max_iter && !converged) {
        ++k;
        ParamState pn = p;
        pn.beta = m_step_beta(d, st.moments, p);
        pn.gamma = m_step_gamma(d, st.moments, p.gamma);
        double lambda = 0.0;
        if (d.variant == ModelVariant::GpG) {
            pn.gamma_stu = m_step_gamma_stu(d, st.moments);
            ParamState tmp = p;
            tmp.beta = pn.beta;
            bool dropped = false;
            pn.sigma2 = m_step_sigma_years(d, st.moments, tmp, &dropped);
        } else {
            ParamState tmp = p;
            tmp.beta = pn.beta;
            const double damp =
                (k - 1 < cfg.nr_damp_iters)
                    ? cfg.nr_damp_initial * std::pow(cfg.nr_damp_decay, k - 1)
                    : 0.0;
            pn.sigma = m_step_r(d, st.moments, tmp, damp, cfg, &lambda);
        }
        if (estimate_alpha) pn.alpha = m_step_alpha(d, st.moments, pn);

        trace.min_gamma_eig.push_back(min_gamma_eigenvalue(d, pn));
        apply_floors(d, pn, cfg, trace);

        st = eng.refresh(pn, true);
        p = pn;
        const double ln = st.loglik;
        const double rel = std::abs(ln - l) / std::max(std::abs(ln), 1e-100);
        trace.loglik.push_back(ln);
        trace.rel_change.push_back(rel);
        trace.lambda.push_back(lambda);
        if (rel < cfg.rel_tol) converged = true;
        l = ln;
    }
    trace.iterations = k;
    trace.converged = converged;
    trace.final_score_norm = score_vector(d, p, st.moments).lpNorm<Eigen::Infinity>();
    return {std::move(p), std::move(trace), std::move(st.moments)};
}

}  // namespace mmlmm
