#pragma once

#include "mmlmm/types.hpp"

#include <cstdint>
#include <iosfwd>
#include <map>
#include <memory>
#include <optional>
#include <vector>

namespace mmlmm {

// One row of long-format input: a (student, year) cell with optional teacher
// link, optional score, and covariate values (NaN where the cell was empty).
struct ObservationRecord {
    std::string student;
    int year = 0;
    std::optional<std::string> teacher;
    std::optional<double> score;
    std::vector<double> covariates;
};

// Column mapping for delimiter-separated input. The header row is required;
// names are matched exactly. Missing cells are empty or "NA".
struct CsvSchema {
    std::string student = "student";
    std::string year = "year";
    std::string teacher = "teacher";
    std::string score = "score";
    std::vector<std::string> covariates;
    char delimiter = ',';
};

std::vector<ObservationRecord> parse_records(std::istream& in, const CsvSchema& schema);

// Observed-test-score pattern: the binary indicator string read as a base-2
// number with the year-1 indicator as the most significant bit.
int ots_pattern(const std::vector<int>& indicators);

// Validated, indexed long-format data. Rows (and y) are ordered by student
// (lexicographic id) and then by year; only scored observations have rows.
// Link-only records contribute membership, not responses.
struct LongitudinalDataset {
    int n = 0;       // retained students
    int T = 0;       // years
    int n_obs = 0;   // scored observations

    std::vector<std::string> students;               // sorted ids; index = student
    std::vector<std::vector<std::string>> rosters;   // per year, sorted teacher ids
    std::vector<int> m;                              // teachers per year

    Vec y;
    std::vector<int> row_student;                    // per row
    std::vector<int> row_year;                       // per row, 1-based
    std::vector<int> row_start;                      // per student; rows contiguous

    std::vector<std::vector<int>> obs_years;         // A_i, sorted 1-based years
    std::vector<std::vector<int>> links;             // per student, size T: roster index or -1
    std::vector<std::vector<int>> year_members;      // B_g, student indices
    std::vector<int> n_year;                         // n_g

    std::vector<int> pattern;                        // per student OTS pattern
    std::map<int, int> pattern_counts;               // n_p
    std::map<int, std::vector<int>> pattern_members; // b(p)

    Mat covariates;                                  // n_obs x n_cov
    std::vector<std::string> covariate_names;

    std::size_t dropped_records = 0;                 // missing both score and link
    std::size_t dropped_students = 0;                // no scored record in any year

    int rows_of(int student) const {
        return static_cast<int>(obs_years[student].size());
    }
    int row_of(int student, int year) const;         // -1 if not scored
    int teacher_of(int student, int year) const {    // roster index or -1
        return links[student][year - 1];
    }
};

std::shared_ptr<const LongitudinalDataset> build_dataset(
    const std::vector<ObservationRecord>& records, int T,
    const std::vector<std::string>& covariate_names = {});

}  // namespace mmlmm
