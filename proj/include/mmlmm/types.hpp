#pragma once

#include <Eigen/Dense>
#include <Eigen/Sparse>

#include <stdexcept>
#include <string>

namespace mmlmm {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;
using SpMat = Eigen::SparseMatrix<double>;
using SpMatRow = Eigen::SparseMatrix<double, Eigen::RowMajor>;
using Triplet = Eigen::Triplet<double>;

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// malformed input text (carries 1-based row number when known)
class ParseError : public Error {
public:
    ParseError(const std::string& msg, long row = -1)
        : Error(row >= 0 ? "row " + std::to_string(row) + ": " + msg : msg), row_(row) {}
    long row() const { return row_; }

private:
    long row_;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

class ValidationError : public Error {
public:
    using Error::Error;
};

class DimensionError : public Error {
public:
    using Error::Error;
};

// a covariance block that must be positive definite is not
class PdViolationError : public Error {
public:
    using Error::Error;
};

class FactorizationError : public Error {
public:
    FactorizationError(const std::string& msg, int pivot = -1)
        : Error(pivot >= 0 ? msg + " (pivot " + std::to_string(pivot) + ")" : msg),
          pivot_(pivot) {}
    int pivot() const { return pivot_; }

private:
    int pivot_;
};

class RankError : public Error {
public:
    using Error::Error;
};

class IdentifiabilityError : public Error {
public:
    using Error::Error;
};

// inner Newton solve for the residual covariance grid failed to converge
class MStepError : public Error {
public:
    MStepError(const std::string& msg, Vec last_iterate, double score_norm)
        : Error(msg), last_iterate_(std::move(last_iterate)), score_norm_(score_norm) {}
    const Vec& last_iterate() const { return last_iterate_; }
    double score_norm() const { return score_norm_; }

private:
    Vec last_iterate_;
    double score_norm_;
};

}  // namespace mmlmm
