#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "mmlmm/io.hpp"

#include <sstream>

namespace py = pybind11;
using namespace mmlmm;

namespace {

py::object json_loads(const std::string& text) {
    return py::module_::import("json").attr("loads")(text);
}

ModelVariant variant_arg(const std::string& model) { return variant_from_name(model); }

std::pair<std::shared_ptr<const LongitudinalDataset>, ModelDesign> load(
    const std::string& data_csv, const std::string& model,
    const std::vector<std::string>& covariates) {
    CsvSchema schema;
    schema.covariates = covariates;
    std::istringstream in(data_csv);
    auto records = parse_records(in, schema);
    int T = 0;
    for (const auto& r : records) T = std::max(T, r.year);
    auto dataset = build_dataset(records, T, covariates);
    return {dataset, build_design(dataset, variant_arg(model), covariates)};
}

py::dict fit_csv(const std::string& data_csv, const std::string& model, double tol,
                 int max_iter, const std::vector<std::string>& covariates, bool compute_se,
                 py::object init_json) {
    auto [dataset, design] = load(data_csv, model, covariates);
    EMConfig cfg;
    cfg.rel_tol = tol;
    cfg.max_iter = max_iter;
    ParamState init = init_json.is_none()
                          ? initial_params(design)
                          : params_from_json(init_json.cast<std::string>(), design);
    auto fit = run_em(design, init, cfg);

    const InferenceResult* inf_ptr = nullptr;
    InferenceResult inf;
    if (compute_se) {
        inf = full_inference(design, fit.params, cfg);
        inf_ptr = &inf;
    }

    py::dict out;
    out["params"] = json_loads(params_to_json(design, fit.params, inf_ptr, &fit.trace));
    out["converged"] = fit.trace.converged;
    out["iterations"] = fit.trace.iterations;
    out["loglik_trace"] = std::vector<double>(fit.trace.loglik.begin(),
                                              fit.trace.loglik.end());
    std::ostringstream eb;
    write_eblups_csv(eb, design, fit.moments.eta, inf_ptr ? &inf.eblup_se : nullptr);
    out["eblups_csv"] = eb.str();
    return out;
}

py::dict simulate_py(const std::string& model, int n, int t, py::object m, double miss,
                     std::uint64_t seed, bool cohort) {
    SimSpec spec;
    spec.variant = variant_arg(model);
    spec.n = n;
    spec.T = t;
    if (py::isinstance<py::int_>(m))
        spec.m.assign(t, m.cast<int>());
    else
        spec.m = m.cast<std::vector<int>>();
    spec.truth = make_default_truth(spec.variant, t);
    spec.missing_rate = miss;
    spec.seed = seed;
    spec.mixing = cohort ? MixingRule::Cohort : MixingRule::Random;
    auto res = simulate_dataset(spec);

    py::dict out;
    std::ostringstream data;
    write_records_csv(data, res.records);
    out["data_csv"] = data.str();
    out["truth"] = json_loads(truth_to_json(spec));
    out["identifiability_warning"] = res.identifiability_warning;
    return out;
}

double oracle_loglik_csv(const std::string& data_csv, const std::string& model,
                         py::object params, int cap) {
    auto [dataset, design] = load(data_csv, model, {});
    const std::string text =
        py::module_::import("json").attr("dumps")(params).cast<std::string>();
    return dense_oracle_loglik(design, params_from_json(text, design), cap);
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "EM estimation of longitudinal multiple-membership linear mixed models";

    m.def("ots_pattern", &ots_pattern, py::arg("indicators"),
          "observed-test-score pattern index (year 1 is the most significant bit)");

    m.def("fit", &fit_csv, py::arg("data_csv"), py::arg("model"), py::arg("tol") = 1e-7,
          py::arg("max_iter") = 5000, py::arg("covariates") = std::vector<std::string>{},
          py::arg("compute_se") = true, py::arg("init_json") = py::none(),
          "fit a model to long-format CSV text; returns parameters, trace, and EBLUPs");

    m.def("simulate", &simulate_py, py::arg("model"), py::arg("n"), py::arg("t"),
          py::arg("m"), py::arg("miss") = 0.0, py::arg("seed") = 0,
          py::arg("cohort") = false,
          "draw a synthetic data set; returns CSV text and the generating truth");

    m.def("oracle_loglik", &oracle_loglik_csv, py::arg("data_csv"), py::arg("model"),
          py::arg("params"), py::arg("cap") = 500,
          "dense-V reference log-likelihood (refuses more than `cap` observations)");
}
