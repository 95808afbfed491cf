#include <algorithm>
#include <fstream>
#include <sstream>

#include "trialmatch/error.hpp"
#include "trialmatch/harness.hpp"
#include "trialmatch/util.hpp"

namespace trialmatch {

namespace {

std::string csv_field(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c;
    }
    return out + "\"";
}

std::string xml_escape(const std::string& s) {
    std::string out;
    for (char c : s) {
        switch (c) {
            case '&': out += "&amp;"; break;
            case '<': out += "&lt;"; break;
            case '>': out += "&gt;"; break;
            case '"': out += "&quot;"; break;
            default: out += c;
        }
    }
    return out;
}

void write_file(const std::filesystem::path& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write " + path.string());
    out << content;
    if (!out) throw DataError("failed writing " + path.string());
}

std::string fixed(double v, int digits) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.*f", digits, v);
    return buf;
}

}  // namespace

std::string results_csv(const std::vector<RunResult>& results) {
    std::string out = std::string(kResultsCsvPrefix) + std::string(kReportCsvHeader) +
                      std::string(kResultsCsvSuffix) + "\n";
    for (const auto& r : results) {
        out += csv_field(r.task) + "," + csv_field(r.variant) + "," + csv_field(r.dataset) + "," + csv_field(r.trial) +
               "," + (r.exclusion ? format_double(*r.exclusion) : std::string()) + "," + report_csv_row(r.report) +
               "," + std::to_string(r.seed) + "," + r.config_hash + "\n";
    }
    return out;
}

std::string bar_chart_svg(const std::string& title, const std::vector<RunResult>& results) {
    // grouped bars: AUROC, AUPRC, Macro-F1 per run
    const char* colors[] = {"#4e79a7", "#f28e2b", "#59a14f"};
    const char* names[] = {"AUROC", "AUPRC", "Macro-F1"};
    const double group_w = 54, bar_w = 14, left = 50, top = 40, plot_h = 220;
    const double width = left + 20 + group_w * static_cast<double>(std::max<std::size_t>(results.size(), 1));
    const double height = top + plot_h + 110;
    std::ostringstream s;
    s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << fixed(width, 0) << "\" height=\""
      << fixed(height, 0) << "\" font-family=\"sans-serif\" font-size=\"10\">\n";
    s << "<text x=\"" << left << "\" y=\"20\" font-size=\"13\">" << xml_escape(title) << "</text>\n";
    for (int tick = 0; tick <= 4; ++tick) {
        const double y = top + plot_h - plot_h * tick / 4.0;
        s << "<line x1=\"" << left << "\" x2=\"" << fixed(width - 10, 1) << "\" y1=\"" << fixed(y, 1) << "\" y2=\""
          << fixed(y, 1) << "\" stroke=\"#ddd\"/>\n";
        s << "<text x=\"" << left - 6 << "\" y=\"" << fixed(y + 3, 1) << "\" text-anchor=\"end\">"
          << fixed(tick / 4.0, 2) << "</text>\n";
    }
    for (std::size_t i = 0; i < results.size(); ++i) {
        const auto& r = results[i];
        const double values[] = {r.report.auroc.value_or(-1.0), r.report.auprc.value_or(-1.0), r.report.macro_f1};
        const double gx = left + 8 + group_w * static_cast<double>(i);
        for (int k = 0; k < 3; ++k) {
            if (values[k] < 0.0) continue;
            const double h = plot_h * values[k];
            s << "<rect x=\"" << fixed(gx + bar_w * k, 1) << "\" y=\"" << fixed(top + plot_h - h, 1) << "\" width=\""
              << bar_w - 2 << "\" height=\"" << fixed(h, 1) << "\" fill=\"" << colors[k] << "\"><title>" << names[k]
              << " " << fixed(values[k], 4) << "</title></rect>\n";
        }
        std::string label = r.variant;
        if (!r.trial.empty()) label += " " + r.trial;
        if (r.exclusion) label += " @" + format_double(*r.exclusion);
        const double lx = gx + bar_w * 1.5, ly = top + plot_h + 10;
        s << "<text x=\"" << fixed(lx, 1) << "\" y=\"" << fixed(ly, 1) << "\" transform=\"rotate(45 " << fixed(lx, 1)
          << " " << fixed(ly, 1) << ")\">" << xml_escape(label) << "</text>\n";
    }
    for (int k = 0; k < 3; ++k) {
        const double lx = left + 90.0 * k, ly = height - 12;
        s << "<rect x=\"" << fixed(lx, 1) << "\" y=\"" << fixed(ly - 9, 1) << "\" width=\"10\" height=\"10\" fill=\""
          << colors[k] << "\"/><text x=\"" << fixed(lx + 14, 1) << "\" y=\"" << fixed(ly, 1) << "\">" << names[k]
          << "</text>\n";
    }
    s << "</svg>\n";
    return s.str();
}

std::vector<std::filesystem::path> write_outputs(const TaskOutput& out, const RunLog& log,
                                                 const std::filesystem::path& dir, bool plots) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw DataError("cannot create output directory " + dir.string() + ": " + ec.message());
    std::vector<std::filesystem::path> written;

    write_file(dir / "results.csv", results_csv(out.results));
    written.push_back(dir / "results.csv");
    write_file(dir / "manifest.json", out.manifest.dump(2) + "\n");
    written.push_back(dir / "manifest.json");

    std::string log_text;
    for (const auto& line : log.lines()) log_text += line + "\n";
    write_file(dir / "run.log", log_text);
    written.push_back(dir / "run.log");

    for (std::size_t i = 0; i < out.results.size(); ++i) {
        if (out.results[i].model.is_null()) continue;
        const auto model_dir = dir / "models";
        std::filesystem::create_directories(model_dir, ec);
        if (ec) throw DataError("cannot create " + model_dir.string() + ": " + ec.message());
        char name[32];
        std::snprintf(name, sizeof name, "run_%03zu.json", i + 1);
        write_file(model_dir / name, out.results[i].model.dump() + "\n");
        written.push_back(model_dir / name);
    }

    const auto plot_dir = dir / "plots";
    if (plots) {
        std::filesystem::create_directories(plot_dir, ec);
        if (ec) throw DataError("cannot create " + plot_dir.string() + ": " + ec.message());
        // one chart per dataset
        std::vector<std::string> order;
        for (const auto& r : out.results)
            if (std::find(order.begin(), order.end(), r.dataset) == order.end()) order.push_back(r.dataset);
        for (const auto& name : order) {
            std::vector<RunResult> subset;
            for (const auto& r : out.results)
                if (r.dataset == name) subset.push_back(r);
            const std::string task = subset.empty() ? "task" : subset.front().task;
            const auto path = plot_dir / (task + "_" + name + ".svg");
            write_file(path, bar_chart_svg(task + " on " + name, subset));
            written.push_back(path);
        }
    }
    return written;
}

}  // namespace trialmatch
