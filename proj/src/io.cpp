#include "mmlmm/io.hpp"

#include <json.hpp>

#include <cmath>
#include <iomanip>
#include <ostream>

namespace mmlmm {

namespace {

using nlohmann::json;

json matrix_to_json(const Mat& m) {
    json rows = json::array();
    for (int i = 0; i < m.rows(); ++i) {
        json row = json::array();
        for (int j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
        rows.push_back(row);
    }
    return rows;
}

Mat matrix_from_json(const json& j) {
    const auto nr = j.size();
    const auto nc = nr ? j.at(0).size() : 0;
    Mat m(static_cast<Eigen::Index>(nr), static_cast<Eigen::Index>(nc));
    for (std::size_t i = 0; i < nr; ++i)
        for (std::size_t c = 0; c < nc; ++c)
            m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c)) =
                j.at(i).at(c).get<double>();
    return m;
}

json vector_to_json(const Vec& v) {
    json out = json::array();
    for (int i = 0; i < v.size(); ++i) out.push_back(v[i]);
    return out;
}

Vec vector_from_json(const json& j) {
    Vec v(static_cast<Eigen::Index>(j.size()));
    for (std::size_t i = 0; i < j.size(); ++i)
        v[static_cast<Eigen::Index>(i)] = j.at(i).get<double>();
    return v;
}

json params_json_body(ModelVariant variant, int T, const ParamState& p) {
    json doc;
    doc["model"] = variant_name(variant);
    doc["beta"] = vector_to_json(p.beta);
    json gammas = json::array();
    for (const auto& g : p.gamma) gammas.push_back(matrix_to_json(g));
    doc["gamma"] = gammas;
    if (variant == ModelVariant::GpG) {
        doc["sigma2"] = vector_to_json(p.sigma2);
        doc["gamma_stu"] = p.gamma_stu;
    } else {
        doc["sigma"] = matrix_to_json(p.sigma);
    }
    if (variant == ModelVariant::Vp || variant == ModelVariant::Cp) {
        json alpha = json::array();
        for (int g = 2; g <= T; ++g)
            for (int t = 1; t < g; ++t)
                alpha.push_back({{"g", g}, {"t", t}, {"estimate", p.alpha[alpha_index(g, t, T)]}});
        doc["alpha"] = alpha;
    }
    return doc;
}

}  // namespace

std::string params_to_json(const ModelDesign& d, const ParamState& p, const InferenceResult* inf,
                           const EMTrace* trace) {
    json doc = params_json_body(d.variant, d.T, p);
    json beta_labels = json::array();
    for (const auto& l : d.x_labels) beta_labels.push_back(l);
    doc["beta_labels"] = beta_labels;
    if (inf) {
        json se;
        se["labels"] = inf->param_labels;
        se["values"] = vector_to_json(inf->param_se);
        doc["param_se"] = se;
        doc["beta_se"] = vector_to_json(inf->beta_se_c11.size() ? inf->beta_se_c11
                                                                : inf->beta_se_information);
        doc["information_pd"] = inf->information_pd;
    }
    if (trace) {
        doc["loglik"] = trace->loglik.empty() ? 0.0 : trace->loglik.back();
        doc["iterations"] = trace->iterations;
        doc["converged"] = trace->converged;
        doc["final_score_norm"] = trace->final_score_norm;
        doc["boundary_warning"] = trace->boundary_warning;
    }
    return doc.dump(2) + "\n";
}

std::string truth_to_json(const SimSpec& spec) {
    json doc = params_json_body(spec.variant, spec.T, spec.truth);
    doc["n"] = spec.n;
    doc["T"] = spec.T;
    doc["m"] = spec.m;
    doc["missing_rate"] = spec.missing_rate;
    doc["seed"] = spec.seed;
    return doc.dump(2) + "\n";
}

ParamState params_from_json(const std::string& text, const ModelDesign& d) {
    json doc = json::parse(text);
    if (doc.contains("model") &&
        variant_from_name(doc["model"].get<std::string>()) != d.variant)
        throw ConfigError("parameter document was written for model " +
                          doc["model"].get<std::string>());
    ParamState p;
    p.beta = vector_from_json(doc.at("beta"));
    if (p.beta.size() != d.X.cols())
        throw DimensionError("beta length does not match the design");
    for (const auto& g : doc.at("gamma")) p.gamma.push_back(matrix_from_json(g));
    if (static_cast<int>(p.gamma.size()) != d.T)
        throw DimensionError("expected one Gamma block per grade");
    if (d.variant == ModelVariant::GpG) {
        p.sigma2 = vector_from_json(doc.at("sigma2"));
        p.gamma_stu = doc.at("gamma_stu").get<double>();
    } else {
        p.sigma = matrix_from_json(doc.at("sigma"));
    }
    if (d.variant == ModelVariant::Vp || d.variant == ModelVariant::Cp) {
        p.alpha = Vec::Ones(alpha_count(d.T));
        if (doc.contains("alpha"))
            for (const auto& a : doc["alpha"])
                p.alpha[alpha_index(a.at("g").get<int>(), a.at("t").get<int>(), d.T)] =
                    a.at("estimate").get<double>();
    }
    return p;
}

void write_eblups_csv(std::ostream& out, const ModelDesign& d, const Vec& eta,
                      const Vec* eblup_se) {
    out << "effect_id,grade,effect_year,estimate,se\n";
    out << std::setprecision(12);
    for (int c = 0; c < d.q(); ++c) {
        const auto& lab = d.labels[c];
        if (lab.student)
            out << d.data->students[lab.index] << ",0,0,";
        else
            out << d.data->rosters[lab.grade - 1][lab.index] << "," << lab.grade << ","
                << lab.effect_year << ",";
        out << eta[c] << ",";
        if (eblup_se) out << (*eblup_se)[c];
        out << "\n";
    }
}

void write_trace_csv(std::ostream& out, const EMTrace& trace) {
    out << "iteration,loglik,rel_change,lambda\n";
    out << std::setprecision(15);
    for (std::size_t k = 0; k < trace.loglik.size(); ++k) {
        out << k << "," << trace.loglik[k] << ",";
        if (std::isnan(trace.rel_change[k]))
            out << "";
        else
            out << trace.rel_change[k];
        out << "," << trace.lambda[k] << "\n";
    }
}

void write_summary(std::ostream& out, const ModelDesign& d, const EMTrace& trace,
                   bool hessian_warning) {
    const auto& ds = *d.data;
    out << "model: " << variant_name(d.variant) << "\n";
    out << "students: " << ds.n << "\nyears: " << ds.T << "\nobservations: " << ds.n_obs
        << "\n";
    out << "teachers per year:";
    for (int g = 0; g < ds.T; ++g) out << " " << ds.m[g];
    out << "\nrandom effects: " << d.q() << "\n";
    out << "dropped records (no score, no link): " << ds.dropped_records << "\n";
    out << "dropped students (never scored): " << ds.dropped_students << "\n";
    out << "\nOTS patterns:\n";
    for (const auto& pat : d.patterns) {
        out << "  pattern " << pat.id << " (";
        for (int g = 1; g <= ds.T; ++g) out << ((pat.id >> (ds.T - g)) & 1);
        out << "): " << pat.count << " students\n";
    }
    out << "\nconverged: " << (trace.converged ? "yes" : "no") << "\n";
    out << "iterations: " << trace.iterations << "\n";
    if (!trace.loglik.empty())
        out << "loglik: " << std::setprecision(12) << trace.loglik.back() << "\n";
    out << "final score norm: " << trace.final_score_norm << "\n";
    if (trace.boundary_warning)
        out << "warning: a variance parameter reached the lower floor\n";
    if (hessian_warning)
        out << "warning: observed information is not positive definite at the fit\n";
}

void write_records_csv(std::ostream& out, const std::vector<ObservationRecord>& records) {
    out << "student,year,teacher,score\n";
    out << std::setprecision(12);
    for (const auto& r : records) {
        out << r.student << "," << r.year << ",";
        if (r.teacher) out << *r.teacher;
        out << ",";
        if (r.score) out << *r.score;
        out << "\n";
    }
}

}  // namespace mmlmm
