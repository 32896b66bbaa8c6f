#include "derail/report.hpp"

#include <algorithm>
#include <sstream>

#include "derail/util.hpp"

namespace derail {

using nlohmann::ordered_json;

namespace {

const std::vector<std::string> kColumns = {"Acc", "FPR", "P", "R", "F1", "H"};

std::string format_horizon(std::optional<double> h) { return h ? format_fixed(*h, 1) : "-"; }

std::vector<std::string> metric_cells(const MetricsReport& m) {
    return {format_percent(m.accuracy), format_percent(m.fpr),          format_percent(m.precision),
            format_percent(m.recall),   format_percent(m.f1), format_horizon(m.mean_horizon)};
}

std::string mean_sd_cell(const std::optional<MeanSd>& v, bool percent) {
    if (!v) return "-";
    const double scale = percent ? 100.0 : 1.0;
    std::string out = format_fixed(v->mean * scale, 1);
    if (v->sd) out += "±" + format_fixed(*v->sd * scale, 1);
    return out;
}

// Display width counting UTF-8 code points.
std::size_t width(const std::string& s) {
    return static_cast<std::size_t>(std::count_if(s.begin(), s.end(), [](char c) {
        return (static_cast<unsigned char>(c) & 0xC0) != 0x80;
    }));
}

std::string render(const std::vector<std::string>& header, const std::vector<std::vector<std::string>>& body) {
    std::vector<std::size_t> widths(header.size(), 0);
    for (std::size_t i = 0; i < header.size(); ++i) widths[i] = width(header[i]);
    for (const auto& row : body) {
        for (std::size_t i = 0; i < row.size(); ++i) widths[i] = std::max(widths[i], width(row[i]));
    }
    std::ostringstream out;
    const auto line = [&](const std::vector<std::string>& row) {
        std::string text;
        for (std::size_t i = 0; i < row.size(); ++i) {
            const std::string pad(widths[i] - width(row[i]), ' ');
            // First column left-aligned, numbers right-aligned.
            text += i == 0 ? row[i] + pad : pad + row[i];
            if (i + 1 < row.size()) text += "  ";
        }
        out << text << '\n';
    };
    line(header);
    std::vector<std::string> rule;
    for (auto w : widths) rule.emplace_back(w, '-');
    line(rule);
    for (const auto& row : body) line(row);
    return out.str();
}

ordered_json optional_number(std::optional<double> v) { return v ? ordered_json(*v) : ordered_json(nullptr); }

std::string csv_cell(std::optional<double> v) { return v ? format_fixed(*v, 6) : ""; }

} // namespace

std::string format_percent(std::optional<double> ratio) { return ratio ? format_fixed(*ratio * 100.0, 1) : "-"; }

std::string slash_row(const MetricsReport& m) {
    const auto cells = metric_cells(m);
    std::string out;
    for (std::size_t i = 0; i < cells.size(); ++i) {
        if (i) out += " / ";
        out += cells[i];
    }
    return out;
}

std::string metrics_table(const std::vector<LabeledMetrics>& rows) {
    std::vector<std::string> header{"system"};
    header.insert(header.end(), kColumns.begin(), kColumns.end());
    std::vector<std::vector<std::string>> body;
    for (const auto& [label, m] : rows) {
        std::vector<std::string> row{label};
        for (auto& c : metric_cells(m)) row.push_back(std::move(c));
        body.push_back(std::move(row));
    }
    return render(header, body);
}

std::string aggregate_table(const std::vector<LabeledAggregate>& rows) {
    std::vector<std::string> header{"system"};
    header.insert(header.end(), kColumns.begin(), kColumns.end());
    header.push_back("seeds");
    std::vector<std::vector<std::string>> body;
    for (const auto& [label, a] : rows) {
        body.push_back({label, mean_sd_cell(a.accuracy, true), mean_sd_cell(a.fpr, true),
                        mean_sd_cell(a.precision, true), mean_sd_cell(a.recall, true), mean_sd_cell(a.f1, true),
                        mean_sd_cell(a.mean_horizon, false), std::to_string(a.seeds)});
    }
    return render(header, body);
}

std::string sweep_table(const std::vector<SweepRow>& rows) {
    std::vector<std::string> header{"tau"};
    header.insert(header.end(), kColumns.begin(), kColumns.end());
    for (const auto& c : {"T*", "Acc*", "FPR*", "P*", "R*", "F1*", "H*"}) header.emplace_back(c);
    std::vector<std::vector<std::string>> body;
    for (const auto& r : rows) {
        std::vector<std::string> row{std::to_string(r.tau)};
        for (auto& c : metric_cells(r.metrics)) row.push_back(std::move(c));
        row.push_back(r.matched_threshold ? format_fixed(*r.matched_threshold, 4) : "-");
        if (r.matched_metrics) {
            for (auto& c : metric_cells(*r.matched_metrics)) row.push_back(std::move(c));
        } else {
            row.insert(row.end(), 6, "-");
        }
        body.push_back(std::move(row));
    }
    return render(header, body);
}

ordered_json metrics_json(const MetricsReport& m) {
    ordered_json j;
    j["accuracy"] = m.accuracy;
    j["fpr"] = optional_number(m.fpr);
    j["precision"] = optional_number(m.precision);
    j["recall"] = optional_number(m.recall);
    j["f1"] = m.f1;
    j["mean_horizon"] = optional_number(m.mean_horizon);
    j["counts"] = {{"tp", m.counts.tp}, {"fp", m.counts.fp}, {"fn", m.counts.fn}, {"tn", m.counts.tn}};
    j["horizon_sum"] = m.horizon_sum;
    return j;
}

ordered_json aggregate_json(const AggregateReport& a) {
    ordered_json j;
    j["seeds"] = a.seeds;
    const auto put = [&](const char* key, const std::optional<MeanSd>& v) {
        if (!v) {
            j[key] = nullptr;
            return;
        }
        j[key] = {{"mean", v->mean}, {"sd", optional_number(v->sd)}};
    };
    put("accuracy", a.accuracy);
    put("fpr", a.fpr);
    put("precision", a.precision);
    put("recall", a.recall);
    put("f1", a.f1);
    put("mean_horizon", a.mean_horizon);
    return j;
}

ordered_json sweep_json(const std::vector<SweepRow>& rows) {
    ordered_json out = ordered_json::array();
    for (const auto& r : rows) {
        ordered_json j;
        j["tau"] = r.tau;
        j["metrics"] = metrics_json(r.metrics);
        j["per_seed"] = aggregate_json(r.per_seed);
        j["matched_threshold"] = optional_number(r.matched_threshold);
        j["matched_metrics"] = r.matched_metrics ? metrics_json(*r.matched_metrics) : ordered_json(nullptr);
        out.push_back(std::move(j));
    }
    return out;
}

std::string sweep_csv(const std::vector<SweepRow>& rows) {
    std::ostringstream out;
    out << "tau,acc,fpr,p,r,f1,h,matched_threshold,matched_acc,matched_fpr,matched_p,matched_r,matched_f1,matched_h\n";
    const auto cells = [](const MetricsReport& m) {
        return csv_cell(m.accuracy) + ',' + csv_cell(m.fpr) + ',' + csv_cell(m.precision) + ',' + csv_cell(m.recall) +
               ',' + csv_cell(m.f1) + ',' + csv_cell(m.mean_horizon);
    };
    for (const auto& r : rows) {
        out << r.tau << ',' << cells(r.metrics) << ',' << csv_cell(r.matched_threshold) << ',';
        out << (r.matched_metrics ? cells(*r.matched_metrics) : std::string(",,,,,")) << '\n';
    }
    return out.str();
}

} // namespace derail
