#pragma once

#include "mmlmm/inference.hpp"
#include "mmlmm/simulate.hpp"

#include <iosfwd>
#include <string>

namespace mmlmm {

// parameter document (estimates plus optional SEs / fit metadata)
std::string params_to_json(const ModelDesign& d, const ParamState& p,
                           const InferenceResult* inf = nullptr,
                           const EMTrace* trace = nullptr);
std::string truth_to_json(const SimSpec& spec);
ParamState params_from_json(const std::string& text, const ModelDesign& d);

// effect id, grade, effect-year, estimate, prediction SE
void write_eblups_csv(std::ostream& out, const ModelDesign& d, const Vec& eta,
                      const Vec* eblup_se);
// iteration, loglik, relative change, damping lambda
void write_trace_csv(std::ostream& out, const EMTrace& trace);
void write_summary(std::ostream& out, const ModelDesign& d, const EMTrace& trace,
                   bool hessian_warning);
void write_records_csv(std::ostream& out, const std::vector<ObservationRecord>& records);

}  // namespace mmlmm
