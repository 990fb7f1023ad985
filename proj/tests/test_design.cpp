#include <doctest.h>

#include "mmlmm/design.hpp"
#include "mmlmm/simulate.hpp"

#include <sstream>

using namespace mmlmm;

namespace {

std::shared_ptr<const LongitudinalDataset> two_year_pair() {
    // one student, teachers t1 (year 1) and t2 (year 2), both years scored
    std::vector<ObservationRecord> recs = {
        {"s1", 1, "t1", 1.0, {}},
        {"s1", 2, "t2", 2.0, {}},
    };
    return build_dataset(recs, 2);
}

SimResult sim(ModelVariant v, int n, int T, int m_per_year, double miss, std::uint64_t seed) {
    SimSpec spec;
    spec.variant = v;
    spec.n = n;
    spec.T = T;
    spec.m.assign(T, m_per_year);
    spec.truth = make_default_truth(v, T);
    spec.missing_rate = miss;
    spec.seed = seed;
    return simulate_dataset(spec);
}

}  // namespace

TEST_CASE("GP.R rows carry current and lagged effects") {
    auto d = build_design(two_year_pair(), ModelVariant::GpR);
    // layout: t1 -> columns 0 (year-1 effect), 1 (year-2 effect); t2 -> column 2
    REQUIRE(d.q() == 3);
    Mat s = Mat(d.to_sparse());
    CHECK(s(0, 0) == 1.0);
    CHECK(s(0, 1) == 0.0);
    CHECK(s(1, 1) == 1.0);  // theta_{1[t1,2]}
    CHECK(s(1, 2) == 1.0);  // theta_{2[t2,2]}
    CHECK(s(1, 0) == 0.0);
}

TEST_CASE("VP rows scale lagged teachers by alpha") {
    auto d = build_design(two_year_pair(), ModelVariant::Vp);
    REQUIRE(d.q() == 2);
    ParamState p = make_default_truth(ModelVariant::Vp, 2);
    p.alpha[0] = 0.37;
    Mat s = Mat(d.to_sparse(p));
    CHECK(s(0, 0) == 1.0);
    CHECK(s(1, 0) == doctest::Approx(0.37));
    CHECK(s(1, 1) == 1.0);
}

TEST_CASE("T=1 designs coincide across variants") {
    std::vector<ObservationRecord> recs = {{"s1", 1, "t1", 1.0, {}},
                                           {"s2", 1, "t2", 2.0, {}}};
    auto ds = build_dataset(recs, 1);
    Mat gp = Mat(build_design(ds, ModelVariant::GpR).to_sparse());
    Mat vp = Mat(build_design(ds, ModelVariant::Vp).to_sparse());
    Mat cp = Mat(build_design(ds, ModelVariant::Cp).to_sparse());
    CHECK((gp - vp).norm() == 0.0);
    CHECK((gp - cp).norm() == 0.0);
    for (int r = 0; r < gp.rows(); ++r) CHECK(gp.row(r).sum() == 1.0);
}

TEST_CASE("rGP.R allocates one future-effect column per teacher") {
    auto res = sim(ModelVariant::RGpR, 6, 3, 2, 0.0, 11);
    const auto& d = res.design;
    CHECK(d.layout.K == std::vector<int>{2, 2, 1});
    Mat s = Mat(d.to_sparse());
    for (int r = 0; r < d.n_obs; ++r) {
        const int i = res.dataset->row_student[r];
        const int g = res.dataset->row_year[r];
        // one current entry plus one future entry per earlier linked teacher
        double expect = 0.0;
        for (int t = 1; t <= g; ++t)
            if (res.dataset->teacher_of(i, t) >= 0) expect += 1.0;
        CHECK(s.row(r).sum() == doctest::Approx(expect));
    }
}

TEST_CASE("GP.G prepends student intercept columns") {
    auto res = sim(ModelVariant::GpG, 5, 2, 2, 0.0, 3);
    const auto& d = res.design;
    CHECK(d.layout.n_stu == 5);
    Mat s = Mat(d.to_sparse());
    for (int r = 0; r < d.n_obs; ++r) {
        const int i = res.dataset->row_student[r];
        for (int c = 0; c < 5; ++c) CHECK(s(r, c) == (c == i ? 1.0 : 0.0));
    }
}

TEST_CASE("row sums of S count linked teachers (GP.R)") {
    auto res = sim(ModelVariant::GpR, 12, 3, 3, 0.3, 5);
    Mat s = Mat(res.design.to_sparse());
    for (int r = 0; r < res.design.n_obs; ++r) {
        const int i = res.dataset->row_student[r];
        const int g = res.dataset->row_year[r];
        double links = 0.0;
        for (int t = 1; t <= g; ++t)
            if (res.dataset->teacher_of(i, t) >= 0) links += 1.0;
        CHECK(s.row(r).sum() == doctest::Approx(links));
    }
}

TEST_CASE("X holds yearly intercepts") {
    auto res = sim(ModelVariant::GpR, 4, 3, 2, 0.2, 9);
    const auto& d = res.design;
    REQUIRE(d.X.cols() == 3);
    for (int r = 0; r < d.n_obs; ++r)
        for (int g = 1; g <= 3; ++g)
            CHECK(d.X(r, g - 1) == (res.dataset->row_year[r] == g ? 1.0 : 0.0));
}

TEST_CASE("distinct-scale refusal for rGP.R and GP.G") {
    auto ds = two_year_pair();
    CHECK_THROWS_AS(build_design(ds, ModelVariant::RGpR, {}, true), ConfigError);
    CHECK_THROWS_AS(build_design(ds, ModelVariant::GpG, {}, true), ConfigError);
    CHECK_NOTHROW(build_design(ds, ModelVariant::GpR, {}, true));
}

TEST_CASE("assemble_g: scalar blocks and block order") {
    std::vector<ObservationRecord> recs = {{"s1", 1, "t1", 1.0, {}},
                                           {"s2", 1, "t2", 2.0, {}}};
    auto d = build_design(build_dataset(recs, 1), ModelVariant::GpR);
    ParamState p = make_default_truth(ModelVariant::GpR, 1);
    p.gamma[0] = Mat::Constant(1, 1, 0.5);
    auto g = assemble_g(d, p);
    CHECK(g.logdet == doctest::Approx(2.0 * std::log(0.5)));
    CHECK(g.gamma_inv[0](0, 0) == doctest::Approx(2.0));

    p.gamma[0](0, 0) = -1.0;
    CHECK_THROWS_AS(assemble_g(d, p), PdViolationError);
}

TEST_CASE("assemble_g matches a dense inverse") {
    auto res = sim(ModelVariant::GpR, 8, 3, 2, 0.25, 21);
    const auto& d = res.design;
    auto g = assemble_g(d, res.truth);

    const int q = d.q();
    REQUIRE(q <= 50);
    Mat dense = Mat::Zero(q, q);
    Mat dense_inv_blocks = Mat::Zero(q, q);
    double logdet = 0.0;
    for (int gr = 1; gr <= d.T; ++gr) {
        const int K = d.layout.K[gr - 1];
        for (int j = 0; j < d.layout.m[gr - 1]; ++j) {
            const int c0 = d.layout.teacher_col(gr, j);
            dense.block(c0, c0, K, K) = res.truth.gamma[gr - 1];
            dense_inv_blocks.block(c0, c0, K, K) = g.gamma_inv[gr - 1];
        }
    }
    logdet = std::log(dense.determinant());
    CHECK(g.logdet == doctest::Approx(logdet).epsilon(1e-10));
    CHECK((dense_inv_blocks - dense.inverse()).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("assemble_r_inverse selects pattern blocks from the grid") {
    std::vector<ObservationRecord> recs = {{"s1", 1, "t1", 1.0, {}},
                                           {"s1", 3, "t3", 2.0, {}}};
    auto d = build_design(build_dataset(recs, 3), ModelVariant::GpR);
    ParamState p = make_default_truth(ModelVariant::GpR, 3);
    REQUIRE(d.patterns.size() == 1);
    CHECK(d.patterns[0].id == 5);
    auto r = assemble_r_inverse(d, p);
    Mat expect(2, 2);
    expect << p.sigma(0, 0), p.sigma(2, 0), p.sigma(2, 0), p.sigma(2, 2);
    CHECK((r.block[0] - expect).cwiseAbs().maxCoeff() == 0.0);
    CHECK((r.block_inv[0] - expect.inverse()).cwiseAbs().maxCoeff() < 1e-12);

    p.sigma(2, 0) = p.sigma(0, 2) = 10.0;  // breaks PD of the {1,3} block
    CHECK_THROWS_WITH_AS(assemble_r_inverse(d, p),
                         "R block for OTS pattern 5 is not positive definite",
                         PdViolationError);
}

TEST_CASE("assemble_r_inverse: GP.G diagonal blocks") {
    std::vector<ObservationRecord> recs = {{"s1", 1, "t1", 1.0, {}},
                                           {"s1", 2, "t2", 2.0, {}}};
    auto d = build_design(build_dataset(recs, 2), ModelVariant::GpG);
    ParamState p = make_default_truth(ModelVariant::GpG, 2);
    p.sigma2 << 1.0, 4.0;
    auto r = assemble_r_inverse(d, p);
    CHECK(r.block[0](0, 0) == 1.0);
    CHECK(r.block[0](1, 1) == 4.0);
    CHECK(r.block[0](0, 1) == 0.0);
    CHECK(r.block_logdet[0] == doctest::Approx(std::log(4.0)));
}

TEST_CASE("assembled log|R| matches the dense log-determinant") {
    auto res = sim(ModelVariant::GpR, 18, 3, 2, 0.35, 33);
    REQUIRE(res.dataset->n <= 30);
    const auto& d = res.design;
    auto r = assemble_r_inverse(d, res.truth);
    Mat dense = Mat::Zero(d.n_obs, d.n_obs);
    for (int i = 0; i < res.dataset->n; ++i) {
        const int r0 = res.dataset->row_start[i];
        const auto& ys = res.dataset->obs_years[i];
        for (std::size_t a = 0; a < ys.size(); ++a)
            for (std::size_t b = 0; b < ys.size(); ++b)
                dense(r0 + a, r0 + b) = res.truth.sigma(ys[a] - 1, ys[b] - 1);
    }
    const double dense_logdet = 2.0 * Mat(dense.llt().matrixL()).diagonal().array().log().sum();
    CHECK(r.logdet == doctest::Approx(dense_logdet).epsilon(1e-10));
}

TEST_CASE("assemble_sstar: limits and dense product oracle") {
    auto res = sim(ModelVariant::Vp, 10, 3, 2, 0.2, 44);
    const auto& d = res.design;
    const SpMatRow s_exp = expanded_s(d);

    // alpha = 1 reproduces the CP design: row sums count linked teachers
    Vec ones = Vec::Ones(alpha_count(3));
    Mat cp = Mat(assemble_sstar(s_exp, ones, d.expanded, d.layout));
    for (int r = 0; r < d.n_obs; ++r) {
        const int i = res.dataset->row_student[r];
        const int g = res.dataset->row_year[r];
        double links = 0.0;
        for (int t = 1; t <= g; ++t)
            if (res.dataset->teacher_of(i, t) >= 0) links += 1.0;
        CHECK(cp.row(r).sum() == doctest::Approx(links));
    }

    // alpha = 0 collapses to the current-year indicator
    Vec zeros = Vec::Zero(alpha_count(3));
    SpMatRow zp_sparse = assemble_sstar(s_exp, zeros, d.expanded, d.layout);
    Mat zp = Mat(zp_sparse);
    for (int r = 0; r < d.n_obs; ++r) {
        const int i = res.dataset->row_student[r];
        const int g = res.dataset->row_year[r];
        const int j = res.dataset->teacher_of(i, g);
        CHECK(zp.row(r).sum() == (j >= 0 ? 1.0 : 0.0));
    }

    // structural pattern is independent of the alpha values
    SpMatRow one_sparse = assemble_sstar(s_exp, ones, d.expanded, d.layout);
    REQUIRE(zp_sparse.nonZeros() == one_sparse.nonZeros());
    for (int r = 0; r < d.n_obs; ++r) {
        SpMatRow::InnerIterator a(zp_sparse, r), b(one_sparse, r);
        for (; a && b; ++a, ++b) CHECK(a.col() == b.col());
    }

    // S* eta equals S (A eta) computed densely
    std::mt19937_64 rng(7);
    std::normal_distribution<double> gauss;
    Vec alpha(alpha_count(3));
    for (int k = 0; k < alpha.size(); ++k) alpha[k] = gauss(rng);
    Mat sstar = Mat(assemble_sstar(s_exp, alpha, d.expanded, d.layout));
    // dense A: expanded x teachers
    Mat a = Mat::Zero(d.expanded.dim, d.layout.dim);
    for (int g = 1; g <= 3; ++g)
        for (int j = 0; j < d.layout.m[g - 1]; ++j)
            for (int k = 0; k < d.expanded.K[g - 1]; ++k) {
                const int te = g + k;
                a(d.expanded.teacher_col(g, j) + k, d.layout.teacher_col(g, j)) =
                    (te == g) ? 1.0 : alpha[alpha_index(te, g, 3)];
            }
    Vec eta(d.layout.dim);
    for (int k = 0; k < eta.size(); ++k) eta[k] = gauss(rng);
    const Vec lhs = sstar * eta;
    const Vec rhs = Mat(s_exp) * (a * eta);
    CHECK((lhs - rhs).lpNorm<Eigen::Infinity>() < 1e-14);
}

TEST_CASE("delta_pattern marks year-g rows under year-t teacher columns") {
    auto d = build_design(two_year_pair(), ModelVariant::Vp);
    Mat delta = Mat(delta_pattern(d, 2, 1));
    CHECK(delta.sum() == 1.0);
    CHECK(delta(1, 0) == 1.0);  // year-2 row, t1 column
    CHECK_THROWS_AS(delta_pattern(d, 1, 1), DimensionError);
    CHECK_THROWS_AS(delta_pattern(d, 1, 2), DimensionError);

    // finite difference of S* in alpha_{21} is exactly delta
    const SpMatRow s_exp = expanded_s(d);
    Vec a0 = Vec::Ones(1), a1 = Vec::Ones(1);
    a1[0] += 0.8125;
    Mat fd = (Mat(assemble_sstar(s_exp, a1, d.expanded, d.layout)) -
              Mat(assemble_sstar(s_exp, a0, d.expanded, d.layout))) /
             0.8125;
    CHECK((fd - delta).cwiseAbs().maxCoeff() < 1e-14);
}

TEST_CASE("delta_pattern: missing year-t link zeroes the row") {
    std::vector<ObservationRecord> recs = {
        {"s1", 1, "t1", 1.0, {}}, {"s1", 2, "t2", 1.5, {}},
        {"s2", 1, std::nullopt, 0.5, {}}, {"s2", 2, "t2", 0.8, {}},
        {"s3", 1, "t1", 0.1, {}}, {"s3", 2, "t3", 0.2, {}},
    };
    auto d = build_design(build_dataset(recs, 2), ModelVariant::Vp);
    Mat delta = Mat(delta_pattern(d, 2, 1));
    // s2 has no year-1 teacher: its year-2 row carries no entry
    const int s2_row = d.data->row_of(1, 2);
    CHECK(delta.row(s2_row).sum() == 0.0);
    CHECK(delta.sum() == 2.0);
}
