#ifndef LOGITSHIFT_REPORT_HPP
#define LOGITSHIFT_REPORT_HPP

#include "logitshift/attribution.hpp"
#include "logitshift/surgery.hpp"

#include <json.hpp>

#include <optional>
#include <string>
#include <vector>

namespace logitshift {

inline constexpr std::string_view kToolName = "logitshift";
inline constexpr std::string_view kToolVersion = "1.0.0";
inline constexpr std::string_view kReportFormat = "logitshift.report";
inline constexpr int kReportVersion = 1;

using Json = nlohmann::ordered_json;

/// One checked quantity. `upper` criteria pass when value <= limit, the rest
/// when value >= limit.
struct Criterion
{
    std::string name;
    double value = 0.0;
    double limit = 0.0;
    bool upper = true;

    bool passed() const { return upper ? value <= limit : value >= limit; }
};

Json to_json(const Criterion& c);
Json to_json(const Tolerances& t);
Json to_json(const EquivalenceReport& r);
Json to_json(const ComparisonReport& r);
Json to_json(const AttackConfig& a);

/// Recomputes each verdict from its recorded value and limit.
bool all_passed(const std::vector<Criterion>& criteria);
std::vector<Criterion> criteria_from_json(const Json& report);

} // namespace logitshift

#endif
