#include "mmlmm/inference.hpp"

#include <Eigen/Eigenvalues>

#include <cmath>

namespace mmlmm {

InferenceResult observed_information(const ModelDesign& d, const ParamState& params_hat,
                                     const EMConfig& cfg) {
    const ParamPacking pk = packing_for(d);
    const Vec psi = pk.pack(params_hat);
    const int dim = pk.dim();
    EmEngine eng(d, cfg);

    auto score_at = [&](const Vec& v) {
        const ParamState p = pk.unpack(v);
        return score_vector(d, p, eng.refresh(p, true).moments);
    };

    Mat h = Mat::Zero(dim, dim);
    for (int j = 0; j < dim; ++j) {
        double step = std::max(cfg.fd_step, cfg.fd_step * std::abs(psi[j]));
        for (int tries = 0;; ++tries) {
            try {
                Vec up = psi, dn = psi;
                up[j] += step;
                dn[j] -= step;
                const Vec splus = score_at(up);
                const Vec sminus = score_at(dn);
                h.col(j) = -(splus - sminus) / (2.0 * step);
                break;
            } catch (const PdViolationError&) {
                // perturbation left the parameter space; shrink the step
                if (tries >= 3) throw;
                step *= 0.25;
            } catch (const FactorizationError&) {
                if (tries >= 3) throw;
                step *= 0.25;
            }
        }
    }
    h = 0.5 * (h + h.transpose()).eval();

    InferenceResult res;
    res.observed_information = h;
    res.param_labels = pk.labels();
    Eigen::LLT<Mat> llt(h);
    if (llt.info() == Eigen::Success) {
        res.information_pd = true;
        res.param_se = llt.solve(Mat::Identity(dim, dim)).diagonal().cwiseMax(0.0).cwiseSqrt();
    } else {
        // saddle or boundary: report pseudo-inverse SEs and flag it
        res.information_pd = false;
        Eigen::SelfAdjointEigenSolver<Mat> es(h);
        const Vec ev = es.eigenvalues();
        const double tol = 1e-12 * std::max(1.0, ev.cwiseAbs().maxCoeff());
        Vec inv_ev = Vec::Zero(dim);
        for (int i = 0; i < dim; ++i)
            if (ev[i] > tol) inv_ev[i] = 1.0 / ev[i];
        const Mat pinv = es.eigenvectors() * inv_ev.asDiagonal() * es.eigenvectors().transpose();
        res.param_se = pinv.diagonal().cwiseMax(0.0).cwiseSqrt();
    }

    const int nb = pk.n_beta();
    Eigen::LLT<Mat> bllt(Mat(h.topLeftCorner(nb, nb)));
    if (bllt.info() == Eigen::Success)
        res.beta_se_information =
            bllt.solve(Mat::Identity(nb, nb)).diagonal().cwiseMax(0.0).cwiseSqrt();
    else
        res.beta_se_information = res.param_se.head(nb);
    return res;
}

InferenceResult prediction_variance(const ModelDesign& d, const ParamState& params_hat,
                                    const EMConfig& cfg) {
    EmEngine eng(d, cfg);
    const auto st = eng.refresh(params_hat, true);
    const RAssembly r = assemble_r_inverse(d, params_hat);

    InferenceResult res;
    res.vtilde_diag = st.moments.v_diagonal();

    const int q = d.q();
    const int np = static_cast<int>(d.X.cols());
    if (np == 0) {
        res.c22_diag = res.vtilde_diag;
        res.eblup_se = res.c22_diag.cwiseSqrt();
        res.beta_se_c11 = Vec();
        return res;
    }

    // B = S'R^-1 X, accumulated per student
    Mat b = Mat::Zero(q, np);
    Mat xtwx = Mat::Zero(np, np);
    for (int i = 0; i < d.data->n; ++i) {
        const int slot = d.pattern_slot_of_student[i];
        const Mat& w = r.block_inv[slot];
        const int r0 = d.data->row_start[i];
        const int sz = d.data->rows_of(i);
        const Mat wx = w * d.X.middleRows(r0, sz);
        xtwx.noalias() += d.X.middleRows(r0, sz).transpose() * wx;
        for (int a = 0; a < sz; ++a)
            for (const auto& e : d.s_rows[r0 + a])
                b.row(e.col) += d.s_value(e, params_hat) * wx.row(a);
    }

    const Mat u = st.moments.solve_m(b);  // M^-1 B
    Eigen::LLT<Mat> c11_llt(Mat(xtwx - b.transpose() * u));
    if (c11_llt.info() != Eigen::Success)
        throw RankError("fixed-effect block of the bordered system is rank deficient");
    const Mat c11 = c11_llt.solve(Mat::Identity(np, np));

    res.beta_se_c11 = c11.diagonal().cwiseMax(0.0).cwiseSqrt();
    res.c22_diag = res.vtilde_diag;
    for (int i = 0; i < q; ++i) res.c22_diag[i] += u.row(i) * c11 * u.row(i).transpose();
    res.eblup_se = res.c22_diag.cwiseSqrt();
    return res;
}

InferenceResult full_inference(const ModelDesign& d, const ParamState& params_hat,
                               const EMConfig& cfg) {
    InferenceResult res = observed_information(d, params_hat, cfg);
    InferenceResult pv = prediction_variance(d, params_hat, cfg);
    res.beta_se_c11 = std::move(pv.beta_se_c11);
    res.c22_diag = std::move(pv.c22_diag);
    res.eblup_se = std::move(pv.eblup_se);
    res.vtilde_diag = std::move(pv.vtilde_diag);
    return res;
}

}  // namespace mmlmm
