#include "mmlmm/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <istream>
#include <limits>
#include <set>
#include <sstream>

namespace mmlmm {

namespace {

constexpr int kMaxYears = 30;  // OTS patterns are base-2 over years

std::vector<std::string> split_line(const std::string& line, char delim) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : line) {
        if (c == delim) {
            out.push_back(cur);
            cur.clear();
        } else if (c != '\r') {
            cur += c;
        }
    }
    out.push_back(cur);
    return out;
}

bool is_missing(const std::string& cell) {
    return cell.empty() || cell == "NA" || cell == "na" || cell == "NaN";
}

double parse_double(const std::string& cell, long row, const char* what) {
    double v = 0.0;
    const char* b = cell.data();
    const char* e = b + cell.size();
    while (b < e && (*b == ' ' || *b == '\t')) ++b;
    auto [ptr, ec] = std::from_chars(b, e, v);
    while (ptr < e && (*ptr == ' ' || *ptr == '\t')) ++ptr;
    if (ec != std::errc() || ptr != e)
        throw ParseError(std::string("non-numeric ") + what + " '" + cell + "'", row);
    return v;
}

long parse_year(const std::string& cell, long row) {
    double v = parse_double(cell, row, "year");
    long y = std::lround(v);
    if (std::abs(v - static_cast<double>(y)) > 0)
        throw ParseError("non-integer year '" + cell + "'", row);
    return y;
}

int column_index(const std::vector<std::string>& header, const std::string& name) {
    auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end())
        throw ConfigError("schema column '" + name + "' not found in header");
    return static_cast<int>(it - header.begin());
}

}  // namespace

std::vector<ObservationRecord> parse_records(std::istream& in, const CsvSchema& schema) {
    std::string line;
    if (!std::getline(in, line)) throw ParseError("empty input: header row required");
    const auto header = split_line(line, schema.delimiter);

    const int c_student = column_index(header, schema.student);
    const int c_year = column_index(header, schema.year);
    const int c_teacher = column_index(header, schema.teacher);
    const int c_score = column_index(header, schema.score);
    std::vector<int> c_cov;
    for (const auto& name : schema.covariates) c_cov.push_back(column_index(header, name));

    std::vector<ObservationRecord> records;
    long row = 1;
    while (std::getline(in, line)) {
        ++row;
        if (line.empty() || line == "\r") continue;
        const auto cells = split_line(line, schema.delimiter);
        if (cells.size() != header.size())
            throw ParseError("expected " + std::to_string(header.size()) + " fields, got " +
                                 std::to_string(cells.size()),
                             row);
        ObservationRecord rec;
        rec.student = cells[c_student];
        if (rec.student.empty()) throw ParseError("empty student id", row);
        long y = parse_year(cells[c_year], row);
        if (y < 1 || y > kMaxYears)
            throw ParseError("year " + std::to_string(y) + " outside 1.." +
                                 std::to_string(kMaxYears),
                             row);
        rec.year = static_cast<int>(y);
        if (!is_missing(cells[c_teacher])) rec.teacher = cells[c_teacher];
        if (!is_missing(cells[c_score])) rec.score = parse_double(cells[c_score], row, "score");
        for (int c : c_cov) {
            rec.covariates.push_back(is_missing(cells[c])
                                         ? std::numeric_limits<double>::quiet_NaN()
                                         : parse_double(cells[c], row, "covariate"));
        }
        records.push_back(std::move(rec));
    }
    return records;
}

int ots_pattern(const std::vector<int>& indicators) {
    const int T = static_cast<int>(indicators.size());
    if (T < 1 || T > kMaxYears) throw DimensionError("indicator length outside 1..30");
    int p = 0;
    for (int g = 0; g < T; ++g) {
        if (indicators[g] != 0 && indicators[g] != 1)
            throw ValidationError("OTS indicators must be 0/1");
        p = (p << 1) | indicators[g];
    }
    if (p == 0) throw ValidationError("student with no observed score in any year");
    return p;
}

int LongitudinalDataset::row_of(int student, int year) const {
    const auto& years = obs_years[student];
    auto it = std::lower_bound(years.begin(), years.end(), year);
    if (it == years.end() || *it != year) return -1;
    return row_start[student] + static_cast<int>(it - years.begin());
}

std::shared_ptr<const LongitudinalDataset> build_dataset(
    const std::vector<ObservationRecord>& records, int T,
    const std::vector<std::string>& covariate_names) {
    if (T < 1 || T > kMaxYears)
        throw DimensionError("T must be in 1.." + std::to_string(kMaxYears));

    auto ds = std::make_shared<LongitudinalDataset>();
    ds->T = T;
    ds->covariate_names = covariate_names;
    const std::size_t n_cov = covariate_names.size();

    // merge per (student, year); drop records carrying neither score nor link
    struct Cell {
        std::optional<std::string> teacher;
        std::optional<double> score;
        std::vector<double> covariates;
    };
    std::map<std::string, std::map<int, Cell>> by_student;
    for (const auto& rec : records) {
        if (!rec.score && !rec.teacher) {
            ++ds->dropped_records;
            continue;
        }
        if (rec.year > T)
            throw DimensionError("observed year " + std::to_string(rec.year) +
                                 " exceeds T=" + std::to_string(T));
        if (rec.covariates.size() != n_cov)
            throw ValidationError("record for student '" + rec.student + "' has " +
                                  std::to_string(rec.covariates.size()) + " covariates, expected " +
                                  std::to_string(n_cov));
        Cell& cell = by_student[rec.student][rec.year];
        if (rec.score) {
            if (cell.score)
                throw ValidationError("duplicate scored record for student '" + rec.student +
                                      "' year " + std::to_string(rec.year));
            cell.score = rec.score;
            cell.covariates = rec.covariates;
        }
        if (rec.teacher) {
            if (cell.teacher && *cell.teacher != *rec.teacher)
                throw ValidationError("conflicting teacher links for student '" + rec.student +
                                      "' year " + std::to_string(rec.year));
            cell.teacher = rec.teacher;
        }
    }

    // retain students with at least one scored year
    for (auto it = by_student.begin(); it != by_student.end();) {
        bool scored = false;
        for (const auto& [year, cell] : it->second)
            if (cell.score) scored = true;
        if (!scored) {
            ++ds->dropped_students;
            it = by_student.erase(it);
        } else {
            ++it;
        }
    }
    if (by_student.empty()) throw ValidationError("no student has a scored record");

    for (const auto& [id, cells] : by_student) ds->students.push_back(id);
    ds->n = static_cast<int>(ds->students.size());

    // rosters: lexicographic teacher order fixes effect-column order
    std::vector<std::set<std::string>> roster_sets(T);
    for (const auto& [id, cells] : by_student)
        for (const auto& [year, cell] : cells)
            if (cell.teacher) roster_sets[year - 1].insert(*cell.teacher);
    ds->rosters.resize(T);
    ds->m.resize(T);
    for (int g = 0; g < T; ++g) {
        ds->rosters[g].assign(roster_sets[g].begin(), roster_sets[g].end());
        ds->m[g] = static_cast<int>(ds->rosters[g].size());
    }
    auto roster_index = [&](int year, const std::string& id) {
        const auto& r = ds->rosters[year - 1];
        return static_cast<int>(std::lower_bound(r.begin(), r.end(), id) - r.begin());
    };

    ds->obs_years.resize(ds->n);
    ds->links.assign(ds->n, std::vector<int>(T, -1));
    ds->year_members.resize(T);
    ds->n_year.assign(T, 0);
    ds->pattern.resize(ds->n);
    ds->row_start.resize(ds->n);

    std::vector<double> y_vals;
    std::vector<std::vector<double>> cov_rows;
    int si = 0;
    for (const auto& [id, cells] : by_student) {
        ds->row_start[si] = static_cast<int>(y_vals.size());
        std::vector<int> ind(T, 0);
        for (const auto& [year, cell] : cells) {
            if (cell.teacher) ds->links[si][year - 1] = roster_index(year, *cell.teacher);
            if (cell.score) {
                ind[year - 1] = 1;
                ds->obs_years[si].push_back(year);
                ds->row_student.push_back(si);
                ds->row_year.push_back(year);
                y_vals.push_back(*cell.score);
                cov_rows.push_back(cell.covariates);
                ds->year_members[year - 1].push_back(si);
                ++ds->n_year[year - 1];
            }
        }
        const int p = ots_pattern(ind);
        ds->pattern[si] = p;
        ds->pattern_counts[p] += 1;
        ds->pattern_members[p].push_back(si);
        ++si;
    }

    ds->n_obs = static_cast<int>(y_vals.size());
    ds->y = Eigen::Map<const Vec>(y_vals.data(), ds->n_obs);
    ds->covariates.resize(ds->n_obs, static_cast<Eigen::Index>(n_cov));
    for (int r = 0; r < ds->n_obs; ++r)
        for (std::size_t c = 0; c < n_cov; ++c) ds->covariates(r, c) = cov_rows[r][c];

    return ds;
}

}  // namespace mmlmm
