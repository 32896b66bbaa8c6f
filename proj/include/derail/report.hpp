#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "derail/eval.hpp"

namespace derail {

// Percent with one decimal, "-" when absent.
std::string format_percent(std::optional<double> ratio);

// "Acc / FPR / P / R / F1 / H" with rates in percent and H in utterances.
std::string slash_row(const MetricsReport& m);

using LabeledMetrics = std::pair<std::string, MetricsReport>;
using LabeledAggregate = std::pair<std::string, AggregateReport>;

// Aligned plain-text tables in the Acc/FPR/P/R/F1/H column order.
std::string metrics_table(const std::vector<LabeledMetrics>& rows);
std::string aggregate_table(const std::vector<LabeledAggregate>& rows);
std::string sweep_table(const std::vector<SweepRow>& rows);

nlohmann::ordered_json metrics_json(const MetricsReport& m);
nlohmann::ordered_json aggregate_json(const AggregateReport& a);
nlohmann::ordered_json sweep_json(const std::vector<SweepRow>& rows);

// tau,acc,fpr,p,r,f1,h,matched_threshold,matched_acc,...; absent values are empty cells.
std::string sweep_csv(const std::vector<SweepRow>& rows);

} // namespace derail
