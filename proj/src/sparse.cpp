#include "mmlmm/sparse.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>
#include <set>

namespace mmlmm {

namespace {
constexpr double kSolveTol = 1e-10;
}

SymSparse SymSparse::from_triplets(int dim, std::vector<Triplet>& trips) {
    for (auto& t : trips)
        if (t.row() < t.col()) t = Triplet(t.col(), t.row(), t.value());
    SymSparse m;
    m.dim = dim;
    m.lower.resize(dim, dim);
    m.lower.setFromTriplets(trips.begin(), trips.end());
    return m;
}

Mat SymSparse::dense() const {
    Mat d = Mat::Zero(dim, dim);
    for (int j = 0; j < lower.outerSize(); ++j)
        for (SpMat::InnerIterator it(lower, j); it; ++it) {
            d(it.row(), j) = it.value();
            d(j, it.row()) = it.value();
        }
    return d;
}

Vec SymSparse::multiply(const Vec& x) const {
    Vec y = Vec::Zero(dim);
    for (int j = 0; j < lower.outerSize(); ++j)
        for (SpMat::InnerIterator it(lower, j); it; ++it) {
            const int i = static_cast<int>(it.row());
            y[i] += it.value() * x[j];
            if (i != j) y[j] += it.value() * x[i];
        }
    return y;
}

Mat SymSparse::multiply(const Mat& x) const {
    Mat y = Mat::Zero(dim, x.cols());
    for (int j = 0; j < lower.outerSize(); ++j)
        for (SpMat::InnerIterator it(lower, j); it; ++it) {
            const int i = static_cast<int>(it.row());
            y.row(i) += it.value() * x.row(j);
            if (i != j) y.row(j) += it.value() * x.row(i);
        }
    return y;
}

int BlockDiagSpec::dim() const {
    if (blocks.empty()) return 0;
    return offsets.back() + static_cast<int>(blocks.back().rows());
}

void BlockDiagSpec::append(const Mat& block) {
    offsets.push_back(dim());
    blocks.push_back(block);
}

Mat BlockDiagSpec::dense() const {
    Mat d = Mat::Zero(dim(), dim());
    for (std::size_t b = 0; b < blocks.size(); ++b) {
        const int sz = static_cast<int>(blocks[b].rows());
        d.block(offsets[b], offsets[b], sz, sz) = blocks[b];
    }
    return d;
}

SymSparse assemble_normal_matrix(const SpMatRow& s, const BlockDiagSpec& r_inv,
                                 const BlockDiagSpec& g_inv) {
    const int n = static_cast<int>(s.rows());
    const int q = static_cast<int>(s.cols());
    if (r_inv.dim() != n) throw DimensionError("R^-1 dimension does not match rows of S");
    if (g_inv.dim() != q) throw DimensionError("G^-1 dimension does not match columns of S");

    std::vector<Triplet> trips;
    // S' R^-1 S, one block of R^-1 (one student) at a time
    struct Entry {
        int col;
        double val;
    };
    std::vector<std::vector<Entry>> rows;
    for (std::size_t b = 0; b < r_inv.blocks.size(); ++b) {
        const Mat& w = r_inv.blocks[b];
        const int off = r_inv.offsets[b];
        const int sz = static_cast<int>(w.rows());
        rows.assign(sz, {});
        for (int a = 0; a < sz; ++a)
            for (SpMatRow::InnerIterator it(s, off + a); it; ++it)
                rows[a].push_back({static_cast<int>(it.col()), it.value()});
        for (int a = 0; a < sz; ++a)
            for (int c = 0; c < sz; ++c) {
                const double wac = w(a, c);
                if (wac == 0.0) continue;
                for (const auto& ea : rows[a])
                    for (const auto& ec : rows[c])
                        if (ea.col >= ec.col)
                            trips.emplace_back(ea.col, ec.col, ea.val * wac * ec.val);
            }
    }
    for (std::size_t b = 0; b < g_inv.blocks.size(); ++b) {
        const Mat& blk = g_inv.blocks[b];
        const int off = g_inv.offsets[b];
        const int sz = static_cast<int>(blk.rows());
        for (int j = 0; j < sz; ++j)
            for (int i = j; i < sz; ++i) trips.emplace_back(off + i, off + j, blk(i, j));
    }
    return SymSparse::from_triplets(q, trips);
}

void write_coordinate(const SymSparse& m, std::ostream& out) {
    out << m.dim << " " << m.dim << " " << m.lower.nonZeros() << "\n";
    for (int j = 0; j < m.lower.outerSize(); ++j)
        for (SpMat::InnerIterator it(m.lower, j); it; ++it)
            out << it.row() + 1 << " " << j + 1 << " " << it.value() << "\n";
}

void write_coordinate(const SpMatRow& m, std::ostream& out) {
    out << m.rows() << " " << m.cols() << " " << m.nonZeros() << "\n";
    for (int r = 0; r < m.outerSize(); ++r)
        for (SpMatRow::InnerIterator it(m, r); it; ++it)
            out << r + 1 << " " << it.col() + 1 << " " << it.value() << "\n";
}

void write_coordinate(const Mat& m, std::ostream& out) {
    out << m.rows() << " " << m.cols() << " " << m.size() << "\n";
    for (int j = 0; j < m.cols(); ++j)
        for (int i = 0; i < m.rows(); ++i)
            out << i + 1 << " " << j + 1 << " " << m(i, j) << "\n";
}

// ---------------------------------------------------------------------------
// CholFactor
// ---------------------------------------------------------------------------

CholFactor::CholFactor(const SymSparse& m, int dense_threshold)
    : m_(m), dense_threshold_(dense_threshold) {
    llt_.compute(m_.lower);
    check_success();
}

void CholFactor::refactor(const SymSparse& m) {
    if (m.dim != m_.dim || m.lower.nonZeros() != m_.lower.nonZeros())
        throw DimensionError("refactor requires an identical sparsity pattern");
    m_ = m;
    dense_inv_.reset();
    llt_.factorize(m_.lower);
    check_success();
}

void CholFactor::check_success() {
    if (llt_.info() != Eigen::Success) {
        // LDLT pass only to name the offending pivot
        Eigen::SimplicialLDLT<SpMat, Eigen::Lower, Eigen::AMDOrdering<int>> ldlt;
        ldlt.compute(m_.lower);
        int pivot = -1;
        const Vec d = ldlt.vectorD();
        for (int k = 0; k < d.size(); ++k)
            if (!(d[k] > 0.0)) {
                pivot = ldlt.permutationPinv().indices()[k];
                break;
            }
        throw FactorizationError("matrix is not numerically positive definite", pivot);
    }
    logdet_ = 0.0;
    const SpMat& L = factor_lower();
    for (int j = 0; j < L.outerSize(); ++j) {
        SpMat::InnerIterator it(L, j);
        logdet_ += 2.0 * std::log(it.value());
    }
}

const SpMat& CholFactor::factor_lower() const { return llt_.matrixL().nestedExpression(); }

const Eigen::PermutationMatrix<Eigen::Dynamic, Eigen::Dynamic, int>& CholFactor::permutation()
    const {
    return llt_.permutationP();
}

Vec CholFactor::solve(const Vec& b) const {
    Vec x = llt_.solve(b);
    const double bn = b.lpNorm<Eigen::Infinity>();
    if (bn > 0.0) {
        Vec r = b - m_.multiply(x);
        if (r.lpNorm<Eigen::Infinity>() / bn > kSolveTol) x += llt_.solve(r);
    }
    return x;
}

Mat CholFactor::solve(const Mat& b) const {
    Mat x = llt_.solve(b);
    const double bn = b.lpNorm<Eigen::Infinity>();
    if (bn > 0.0) {
        Mat r = b - m_.multiply(x);
        if (r.lpNorm<Eigen::Infinity>() / bn > kSolveTol) x += llt_.solve(r);
    }
    return x;
}

const Mat& CholFactor::dense_inverse() const {
    if (!dense_inv_) dense_inv_ = solve(Mat(Mat::Identity(m_.dim, m_.dim)));
    return *dense_inv_;
}

Mat CholFactor::inverse_block(const std::vector<int>& indices) const {
    auto blocks = selected_inverse({indices});
    return blocks.front();
}

std::vector<Mat> CholFactor::selected_inverse(
    const std::vector<std::vector<int>>& requests) const {
    for (const auto& req : requests)
        for (int i : req)
            if (i < 0 || i >= m_.dim) throw DimensionError("selected inverse index out of range");

    std::vector<Mat> out(requests.size());
    if (m_.dim <= dense_threshold_) {
        const Mat& inv = dense_inverse();
        for (std::size_t r = 0; r < requests.size(); ++r) {
            const auto& req = requests[r];
            const int sz = static_cast<int>(req.size());
            out[r].resize(sz, sz);
            for (int a = 0; a < sz; ++a)
                for (int b = 0; b < sz; ++b) out[r](a, b) = inv(req[a], req[b]);
        }
        return out;
    }

    std::set<int> uni;
    for (const auto& req : requests) uni.insert(req.begin(), req.end());
    std::vector<int> cols(uni.begin(), uni.end());
    Mat e = Mat::Zero(m_.dim, static_cast<Eigen::Index>(cols.size()));
    for (std::size_t c = 0; c < cols.size(); ++c) e(cols[c], static_cast<Eigen::Index>(c)) = 1.0;
    Mat x = solve(e);
    auto pos = [&](int i) {
        return static_cast<int>(std::lower_bound(cols.begin(), cols.end(), i) - cols.begin());
    };
    for (std::size_t r = 0; r < requests.size(); ++r) {
        const auto& req = requests[r];
        const int sz = static_cast<int>(req.size());
        out[r].resize(sz, sz);
        for (int a = 0; a < sz; ++a)
            for (int b = 0; b < sz; ++b) out[r](a, b) = x(req[a], pos(req[b]));
    }
    return out;
}

std::unique_ptr<CholFactor> factorize(const SymSparse& m, int dense_threshold) {
    return std::make_unique<CholFactor>(m, dense_threshold);
}

// ---------------------------------------------------------------------------
// InverseSubset (Takahashi recurrences on the factor pattern)
// ---------------------------------------------------------------------------

InverseSubset::InverseSubset(const CholFactor& f) {
    dim_ = f.dim();
    const SpMat& L = f.factor_lower();

    // symmetric pattern of L + L': column k holds {j < k : L(k,j) != 0}
    // followed by the rows of L's column k
    std::vector<std::vector<int>> upper(dim_);
    for (int j = 0; j < dim_; ++j)
        for (SpMat::InnerIterator it(L, j); it; ++it)
            if (it.row() > j) upper[it.row()].push_back(j);

    col_ptr_.assign(dim_ + 1, 0);
    for (int k = 0; k < dim_; ++k) {
        const int lower_nnz = static_cast<int>(L.outerIndexPtr()[k + 1] - L.outerIndexPtr()[k]);
        col_ptr_[k + 1] = col_ptr_[k] + static_cast<std::ptrdiff_t>(upper[k].size()) + lower_nnz;
    }
    row_idx_.resize(static_cast<std::size_t>(col_ptr_[dim_]));
    diag_off_.resize(dim_);
    for (int k = 0; k < dim_; ++k) {
        std::ptrdiff_t pos = col_ptr_[k];
        for (int j : upper[k]) row_idx_[pos++] = j;
        diag_off_[k] = pos;
        for (SpMat::InnerIterator it(L, k); it; ++it) row_idx_[pos++] = static_cast<int>(it.row());
    }
    values_.assign(row_idx_.size(), 0.0);

    compute(f);

    // pin the permutation convention empirically: M^-1(i,j) must equal the
    // pattern entry at (perm(i), perm(j)) for whichever direction Eigen uses
    const auto& ind = f.permutation().indices();
    std::vector<int> fwd(dim_), inv(dim_);
    for (int i = 0; i < dim_; ++i) {
        fwd[i] = ind[i];
        inv[ind[i]] = i;
    }
    perm_ = fwd;
    double err_fwd = 0.0, err_inv = 0.0;
    const int trials = std::min(dim_, 3);
    for (int t = 0; t < trials; ++t) {
        const int k = (dim_ - 1) * t / std::max(1, trials - 1);
        const Vec x = f.solve(Vec(Vec::Unit(dim_, k)));
        for (int i = 0; i < dim_; ++i) {
            perm_ = fwd;
            if (auto o = offset(i, k); o >= 0) err_fwd += std::abs(values_[o] - x[i]);
            perm_ = inv;
            if (auto o = offset(i, k); o >= 0) err_inv += std::abs(values_[o] - x[i]);
        }
    }
    perm_ = (err_fwd <= err_inv) ? fwd : inv;
}

void InverseSubset::recompute(const CholFactor& f) { compute(f); }

void InverseSubset::compute(const CholFactor& f) {
    const SpMat& L = f.factor_lower();
    if (f.dim() != dim_ ||
        2 * L.nonZeros() - dim_ != static_cast<Eigen::Index>(row_idx_.size()))
        throw DimensionError("inverse subset pattern mismatch");
    const auto* Lp = L.outerIndexPtr();
    const auto* Li = L.innerIndexPtr();
    const double* Lx = L.valuePtr();

    std::fill(values_.begin(), values_.end(), 0.0);
    std::vector<int> mark(dim_, -1);
    std::vector<double> work(dim_, 0.0);

    for (int j = dim_ - 1; j >= 0; --j) {
        const auto begin = Lp[j];
        const auto end = Lp[j + 1];
        const double ljj = Lx[begin];  // diagonal first (sorted rows)
        for (auto idx = begin + 1; idx < end; ++idx) {
            mark[Li[idx]] = j;
            work[Li[idx]] = 0.0;
        }
        for (auto idx = begin + 1; idx < end; ++idx) {
            const int k = Li[idx];
            const double lkj = Lx[idx];
            // marked rows all lie below j; skip the sorted head of the column
            const std::ptrdiff_t zb =
                std::lower_bound(row_idx_.data() + col_ptr_[k],
                                 row_idx_.data() + col_ptr_[k + 1], j + 1) -
                row_idx_.data();
            for (std::ptrdiff_t z = zb; z < col_ptr_[k + 1]; ++z) {
                const int i = row_idx_[z];
                if (mark[i] == j) work[i] += lkj * values_[z];
            }
        }
        double below = 0.0;
        // below-diagonal entries of Z column j, mirrored into the upper part
        std::ptrdiff_t zl = diag_off_[j] + 1;
        for (auto idx = begin + 1; idx < end; ++idx, ++zl) {
            const int i = Li[idx];
            const double v = -work[i] / ljj;
            values_[zl] = v;
            // mirrored position: row j in the upper section of column i
            const std::ptrdiff_t zu =
                std::lower_bound(row_idx_.data() + col_ptr_[i], row_idx_.data() + diag_off_[i], j) -
                row_idx_.data();
            values_[zu] = v;
            below += Lx[idx] * v;
        }
        values_[diag_off_[j]] = 1.0 / (ljj * ljj) - below / ljj;
    }
}

std::ptrdiff_t InverseSubset::offset(int i, int j) const {
    const int pi = perm_[i];
    const int pj = perm_[j];
    const auto* lo = row_idx_.data() + col_ptr_[pj];
    const auto* hi = row_idx_.data() + col_ptr_[pj + 1];
    const auto* it = std::lower_bound(lo, hi, pi);
    if (it == hi || *it != pi) return -1;
    return it - row_idx_.data();
}

std::optional<double> InverseSubset::entry(int i, int j) const {
    const auto off = offset(i, j);
    if (off < 0) return std::nullopt;
    return values_[off];
}

Vec InverseSubset::diagonal() const {
    Vec d(dim_);
    for (int i = 0; i < dim_; ++i) d[i] = values_[diag_off_[perm_[i]]];
    return d;
}

}  // namespace mmlmm
