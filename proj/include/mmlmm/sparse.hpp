#pragma once

#include "mmlmm/types.hpp"

#include <iosfwd>
#include <memory>
#include <optional>
#include <vector>

namespace mmlmm {

// Symmetric sparse matrix, lower triangle stored in compressed columns.
struct SymSparse {
    int dim = 0;
    SpMat lower;  // column-major, row indices sorted, i >= j entries only

    static SymSparse from_triplets(int dim, std::vector<Triplet>& trips);
    Mat dense() const;                      // full symmetric dense
    Vec multiply(const Vec& x) const;       // full symmetric mat-vec
    Mat multiply(const Mat& x) const;
};

// Block-diagonal operand for normal-matrix assembly.
struct BlockDiagSpec {
    std::vector<int> offsets;
    std::vector<Mat> blocks;
    int dim() const;
    void append(const Mat& block);
    Mat dense() const;
};

// M = S' R^-1 S + G^-1
SymSparse assemble_normal_matrix(const SpMatRow& s, const BlockDiagSpec& r_inv,
                                 const BlockDiagSpec& g_inv);

void write_coordinate(const SymSparse& m, std::ostream& out);
void write_coordinate(const SpMatRow& m, std::ostream& out);
void write_coordinate(const Mat& m, std::ostream& out);

// Sparse Cholesky P M P' = L L' with AMD fill-reducing ordering. Read-only
// after construction except refactor(), which reuses the symbolic analysis
// for a matrix with the same pattern.
class CholFactor {
public:
    explicit CholFactor(const SymSparse& m, int dense_threshold = 2000);
    void refactor(const SymSparse& m);

    int dim() const { return m_.dim; }
    double log_det() const { return logdet_; }

    // permuted triangular solves; one iterative-refinement pass if the
    // residual check fails
    Vec solve(const Vec& b) const;
    Mat solve(const Mat& b) const;

    // principal blocks of M^-1: dense inverse when dim <= dense_threshold,
    // otherwise column solves for the union of requested indices
    std::vector<Mat> selected_inverse(const std::vector<std::vector<int>>& requests) const;
    Mat inverse_block(const std::vector<int>& indices) const;

    const SpMat& factor_lower() const;                // L (permuted space)
    const Eigen::PermutationMatrix<Eigen::Dynamic, Eigen::Dynamic, int>& permutation() const;
    const SymSparse& matrix() const { return m_; }
    int dense_threshold() const { return dense_threshold_; }

private:
    using Solver = Eigen::SimplicialLLT<SpMat, Eigen::Lower, Eigen::AMDOrdering<int>>;
    void check_success();
    const Mat& dense_inverse() const;

    Solver llt_;
    SymSparse m_;
    double logdet_ = 0.0;
    int dense_threshold_;
    mutable std::optional<Mat> dense_inv_;
};

std::unique_ptr<CholFactor> factorize(const SymSparse& m, int dense_threshold = 2000);

// All entries of M^-1 on the pattern of L + L' (Takahashi recurrences,
// exact on that pattern). Entry lookups are in original (unpermuted)
// indices; off-pattern pairs return no offset.
class InverseSubset {
public:
    explicit InverseSubset(const CholFactor& f);
    void recompute(const CholFactor& f);  // pattern must be unchanged

    std::ptrdiff_t offset(int i, int j) const;  // -1 if not on pattern
    double value(std::ptrdiff_t off) const { return values_[off]; }
    std::optional<double> entry(int i, int j) const;
    Vec diagonal() const;
    int dim() const { return dim_; }

private:
    void compute(const CholFactor& f);

    int dim_ = 0;
    std::vector<int> perm_;        // original -> permuted
    // symmetric pattern of L + L' in compressed columns (permuted space)
    std::vector<std::ptrdiff_t> col_ptr_;
    std::vector<int> row_idx_;
    std::vector<double> values_;
    std::vector<std::ptrdiff_t> diag_off_;
};

}  // namespace mmlmm
