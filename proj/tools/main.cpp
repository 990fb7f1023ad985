#include "mmlmm/io.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

namespace fs = std::filesystem;
using namespace mmlmm;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitInput = 1;
constexpr int kExitNoConvergence = 2;

std::vector<std::string> split_csv_list(const std::string& s) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : s) {
        if (c == ',') {
            if (!cur.empty()) out.push_back(cur);
            cur.clear();
        } else {
            cur += c;
        }
    }
    if (!cur.empty()) out.push_back(cur);
    return out;
}

std::string slurp(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_file(const fs::path& path, const std::string& text) {
    std::ofstream out(path);
    if (!out) throw ConfigError("cannot write " + path.string());
    out << text;
}

// truth document for the simulator: parsed without a design (dims from flags)
ParamState truth_from_json(const std::string& text, ModelVariant v, int T) {
    const nlohmann::json doc = nlohmann::json::parse(text);
    ParamState p;
    const auto& jb = doc.at("beta");
    p.beta.resize(static_cast<Eigen::Index>(jb.size()));
    for (std::size_t i = 0; i < jb.size(); ++i) p.beta[i] = jb.at(i).get<double>();
    for (const auto& jg : doc.at("gamma")) {
        Mat g(jg.size(), jg.size());
        for (std::size_t a = 0; a < jg.size(); ++a)
            for (std::size_t b = 0; b < jg.size(); ++b) g(a, b) = jg.at(a).at(b).get<double>();
        p.gamma.push_back(g);
    }
    if (v == ModelVariant::GpG) {
        const auto& js = doc.at("sigma2");
        p.sigma2.resize(static_cast<Eigen::Index>(js.size()));
        for (std::size_t i = 0; i < js.size(); ++i) p.sigma2[i] = js.at(i).get<double>();
        p.gamma_stu = doc.at("gamma_stu").get<double>();
    } else {
        const auto& js = doc.at("sigma");
        Mat s(js.size(), js.size());
        for (std::size_t a = 0; a < js.size(); ++a)
            for (std::size_t b = 0; b < js.size(); ++b) s(a, b) = js.at(a).at(b).get<double>();
        p.sigma = s;
    }
    if (v == ModelVariant::Vp || v == ModelVariant::Cp) {
        p.alpha = Vec::Ones(alpha_count(T));
        if (doc.contains("alpha"))
            for (const auto& a : doc["alpha"])
                p.alpha[alpha_index(a.at("g").get<int>(), a.at("t").get<int>(), T)] =
                    a.at("estimate").get<double>();
    }
    return p;
}

struct FitOptions {
    std::string model;
    std::string data_path;
    std::string out_dir;
    double tol = 1e-7;
    int max_iter = 5000;
    CsvSchema schema;
    std::string covariates;
    std::string init_path;
    double fix_alpha = std::numeric_limits<double>::quiet_NaN();
    std::uint64_t seed = 0;
    bool distinct_scales = false;
    bool dump_design = false;
    bool no_se = false;
};

int run_fit(const FitOptions& opt) {
    ModelVariant variant = variant_from_name(opt.model);
    if (!std::isnan(opt.fix_alpha)) {
        if (variant != ModelVariant::Vp)
            throw ConfigError("--fix-alpha only applies to --model vp");
        if (opt.fix_alpha != 1.0)
            throw ConfigError("--fix-alpha supports the value 1 (complete persistence)");
        variant = ModelVariant::Cp;  // vp with persistence pinned at 1 is cp
    }

    CsvSchema schema = opt.schema;
    schema.covariates = split_csv_list(opt.covariates);

    std::ifstream in(opt.data_path);
    if (!in) throw ConfigError("cannot read data file " + opt.data_path);
    auto records = parse_records(in, schema);
    int T = 0;
    for (const auto& r : records) T = std::max(T, r.year);
    auto dataset = build_dataset(records, T, schema.covariates);
    auto design =
        build_design(dataset, variant, schema.covariates, opt.distinct_scales);

    EMConfig cfg;
    cfg.rel_tol = opt.tol;
    cfg.max_iter = opt.max_iter;

    ParamState init = opt.init_path.empty()
                          ? initial_params(design)
                          : params_from_json(slurp(opt.init_path), design);
    auto fit = run_em(design, init, cfg);

    fs::create_directories(opt.out_dir);
    const fs::path out(opt.out_dir);

    bool hessian_warning = false;
    std::string inference_note;
    const InferenceResult* inf_ptr = nullptr;
    InferenceResult inf;
    if (!opt.no_se) {
        try {
            inf = full_inference(design, fit.params, cfg);
            inf_ptr = &inf;
            hessian_warning = !inf.information_pd;
        } catch (const std::exception& e) {
            inference_note = e.what();
        }
    }

    write_file(out / "params.json", params_to_json(design, fit.params, inf_ptr, &fit.trace));
    {
        std::ofstream eb(out / "eblups.csv");
        write_eblups_csv(eb, design, fit.moments.eta,
                         inf_ptr ? &inf.eblup_se : nullptr);
    }
    {
        std::ofstream tr(out / "trace.csv");
        write_trace_csv(tr, fit.trace);
    }
    {
        std::ofstream sm(out / "summary.txt");
        write_summary(sm, design, fit.trace, hessian_warning);
        if (!inference_note.empty())
            sm << "warning: standard errors unavailable: " << inference_note << "\n";
        if (opt.seed != 0) sm << "seed: " << opt.seed << "\n";
    }
    if (opt.dump_design) {
        std::ofstream xs(out / "x.coo");
        write_coordinate(design.X, xs);
        std::ofstream ss(out / "s.coo");
        write_coordinate(design.to_sparse(fit.params), ss);
    }

    std::cout << (fit.trace.converged ? "converged" : "did not converge") << " after "
              << fit.trace.iterations << " iterations, loglik "
              << fit.trace.loglik.back() << "\n";
    return fit.trace.converged ? kExitOk : kExitNoConvergence;
}

struct SimOptions {
    std::string model = "gp.r";
    std::string out_dir;
    int n = 0;
    int T = 0;
    std::string m;
    double miss = 0.0;
    std::uint64_t seed = 0;
    std::string truth_path;
    bool cohort = false;
};

int run_simulate(const SimOptions& opt) {
    SimSpec spec;
    spec.variant = variant_from_name(opt.model);
    spec.n = opt.n;
    spec.T = opt.T;
    for (const auto& tok : split_csv_list(opt.m)) spec.m.push_back(std::stoi(tok));
    if (spec.m.size() == 1) spec.m.assign(opt.T, spec.m[0]);
    spec.missing_rate = opt.miss;
    spec.seed = opt.seed;
    spec.mixing = opt.cohort ? MixingRule::Cohort : MixingRule::Random;
    spec.truth = opt.truth_path.empty()
                     ? make_default_truth(spec.variant, opt.T)
                     : truth_from_json(slurp(opt.truth_path), spec.variant, opt.T);

    auto res = simulate_dataset(spec);
    fs::create_directories(opt.out_dir);
    const fs::path out(opt.out_dir);
    {
        std::ofstream data(out / "data.csv");
        write_records_csv(data, res.records);
    }
    write_file(out / "truth.json", truth_to_json(spec));
    if (res.identifiability_warning)
        std::cerr << "warning: cohort mixing may leave persistence parameters "
                     "unidentified\n";
    std::cout << "wrote " << res.records.size() << " records for " << res.dataset->n
              << " students\n";
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"maximum likelihood for longitudinal multiple-membership mixed models"};
    app.require_subcommand(1);

    FitOptions fopt;
    auto* fit = app.add_subcommand("fit", "fit a model to a CSV data file");
    fit->add_option("--model", fopt.model, "gp.r, rgp.r, gp.g, vp, cp")->required();
    fit->add_option("--data", fopt.data_path, "long-format CSV input")->required();
    fit->add_option("--out", fopt.out_dir, "output directory")->required();
    fit->add_option("--tol", fopt.tol, "relative log-likelihood tolerance");
    fit->add_option("--max-iter", fopt.max_iter, "EM iteration cap");
    fit->add_option("--col-student", fopt.schema.student, "student id column");
    fit->add_option("--col-year", fopt.schema.year, "year column");
    fit->add_option("--col-teacher", fopt.schema.teacher, "teacher id column");
    fit->add_option("--col-score", fopt.schema.score, "score column");
    fit->add_option("--covariates", fopt.covariates, "comma-separated covariate columns");
    fit->add_option("--init", fopt.init_path, "initial parameters (params.json)");
    fit->add_option("--fix-alpha", fopt.fix_alpha,
                    "pin the vp persistence parameters (value 1 = cp)");
    fit->add_option("--seed", fopt.seed, "recorded in the summary");
    fit->add_flag("--distinct-scales", fopt.distinct_scales,
                  "declare that yearly scores are on different scales");
    fit->add_flag("--dump-design", fopt.dump_design, "write X and S in coordinate format");
    fit->add_flag("--no-se", fopt.no_se, "skip standard errors");

    SimOptions sopt;
    auto* sim = app.add_subcommand("simulate", "generate a synthetic data set");
    sim->add_option("--model", sopt.model, "generating variant");
    sim->add_option("--out", sopt.out_dir, "output directory")->required();
    sim->add_option("--n", sopt.n, "students")->required();
    sim->add_option("--t", sopt.T, "years")->required();
    sim->add_option("--m", sopt.m, "teachers per year (single value or comma list)")
        ->required();
    sim->add_option("--miss", sopt.miss, "per-year MAR score deletion rate");
    sim->add_option("--seed", sopt.seed, "RNG seed");
    sim->add_option("--truth", sopt.truth_path, "truth parameter document");
    sim->add_flag("--cohort", sopt.cohort, "cohort-preserving class assignment");

    CLI11_PARSE(app, argc, argv);

    try {
        if (app.got_subcommand("fit")) return run_fit(fopt);
        return run_simulate(sopt);
    } catch (const MStepError& e) {
        std::cerr << "error: " << e.what() << " (score norm " << e.score_norm() << ")\n";
        return kExitNoConvergence;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitInput;
    }
}
