#include "logitshift/report.hpp"

namespace logitshift {

namespace {

Json optional_number(const std::optional<double>& v)
{
    return v ? Json(*v) : Json(nullptr);
}

} // namespace

Json to_json(const Criterion& c)
{
    return Json{{"name", c.name},
                {"value", c.value},
                {"limit", c.limit},
                {"comparison", c.upper ? "value <= limit" : "value >= limit"},
                {"passed", c.passed()}};
}

Json to_json(const Tolerances& t)
{
    return Json{{"output", t.output},
                {"gradient", t.gradient},
                {"parameter_gradient", t.parameter_gradient},
                {"attribution", t.attribution}};
}

Json to_json(const EquivalenceReport& r)
{
    return Json{{"max_output_deviation", {{"value", r.max_output_deviation}, {"tolerance", r.tolerances.output}}},
                {"prediction_agreement", {{"value", r.prediction_agreement}, {"tolerance", 1.0}}},
                {"max_postsoftmax_gradient_deviation",
                 {{"value", r.max_postsoftmax_gradient_deviation}, {"tolerance", r.tolerances.gradient}}},
                {"max_parameter_gradient_deviation",
                 {{"value", r.max_parameter_gradient_deviation}, {"tolerance", r.tolerances.parameter_gradient}}},
                {"probe_count", r.probe_count},
                {"passed", r.passed()}};
}

Json to_json(const ComparisonReport& r)
{
    return Json{{"pearson", optional_number(r.pearson)},
                {"spearman", optional_number(r.spearman)},
                {"correlation_defined", r.pearson.has_value() && r.spearman.has_value()},
                {"max_abs_diff", r.max_abs_diff},
                {"argmax_distance", r.argmax_distance},
                {"mass_fraction_a", r.mass_fraction_a},
                {"mass_fraction_b", r.mass_fraction_b}};
}

Json to_json(const AttackConfig& a)
{
    return Json{{"tap_layer", a.tap_layer}, {"i0", a.row}, {"j0", a.col}, {"K", a.gain}};
}

bool all_passed(const std::vector<Criterion>& criteria)
{
    for (const auto& c : criteria) {
        if (!c.passed()) return false;
    }
    return true;
}

std::vector<Criterion> criteria_from_json(const Json& report)
{
    std::vector<Criterion> out;
    for (const auto& c : report.at("criteria")) {
        out.push_back({c.at("name").get<std::string>(), c.at("value").get<double>(), c.at("limit").get<double>(),
                       c.at("comparison").get<std::string>() == "value <= limit"});
    }
    return out;
}

} // namespace logitshift
