#include "cs2k/metrics.hpp"

#include "cs2k/errors.hpp"

#include <json.hpp>

#include <algorithm>
#include <cstdio>
#include <sstream>

namespace cs2k {

void ConfusionMatrix::add(int gt, int pred) {
    if (gt < 0 || pred < 0 || static_cast<std::size_t>(gt) >= n_ || static_cast<std::size_t>(pred) >= n_) {
        throw InputError("class id out of range for confusion matrix");
    }
    ++counts_[static_cast<std::size_t>(gt) * n_ + static_cast<std::size_t>(pred)];
}

ConfusionMatrix& ConfusionMatrix::operator+=(const ConfusionMatrix& other) {
    if (other.n_ != n_) throw ConfigError("confusion matrices differ in size");
    for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
    return *this;
}

std::uint64_t ConfusionMatrix::total() const {
    std::uint64_t t = 0;
    for (auto c : counts_) t += c;
    return t;
}

std::optional<double> ConfusionMatrix::iou(std::size_t cls) const {
    std::uint64_t tp = at(cls, cls);
    std::uint64_t fp = 0;
    std::uint64_t fn = 0;
    for (std::size_t k = 0; k < n_; ++k) {
        if (k == cls) continue;
        fp += at(k, cls);
        fn += at(cls, k);
    }
    const std::uint64_t uni = tp + fp + fn;
    if (uni == 0) return std::nullopt;
    return static_cast<double>(tp) / static_cast<double>(uni);
}

ConfusionMatrix confusion(const std::vector<int>& predictions, const std::vector<int>& gt, std::size_t num_classes,
                          const std::vector<bool>* skip) {
    if (predictions.size() != gt.size()) throw InputError("predictions and ground truth differ in length");
    ConfusionMatrix m(num_classes);
    for (std::size_t i = 0; i < gt.size(); ++i) {
        if (skip != nullptr && (*skip)[i]) continue;
        m.add(gt[i], predictions[i]);
    }
    return m;
}

std::optional<double> miou(const ConfusionMatrix& matrix, const std::vector<int>& group) {
    double sum = 0.0;
    int n = 0;
    for (int c : group) {
        if (c < 0 || static_cast<std::size_t>(c) >= matrix.num_classes()) continue;
        if (auto v = matrix.iou(static_cast<std::size_t>(c))) {
            sum += *v;
            ++n;
        }
    }
    if (n == 0) return std::nullopt;
    return sum / n;
}

MetricsReport make_report(int step, const ConfusionMatrix& matrix, const std::vector<int>& old_classes,
                          const std::vector<int>& new_classes, bool background_in_old) {
    MetricsReport r;
    r.step = step;
    std::vector<int> old_group = old_classes;
    std::vector<int> new_group = new_classes;
    if (step == 0 || !background_in_old) {
        new_group.insert(new_group.begin(), 0);
    } else {
        old_group.insert(old_group.begin(), 0);
    }
    std::vector<int> all{0};
    all.insert(all.end(), old_classes.begin(), old_classes.end());
    all.insert(all.end(), new_classes.begin(), new_classes.end());
    std::sort(all.begin(), all.end());
    for (int c : all) {
        std::uint64_t gt_pixels = 0;
        for (std::size_t k = 0; k < matrix.num_classes(); ++k) gt_pixels += matrix.at(static_cast<std::size_t>(c), k);
        r.pixel_counts[c] = gt_pixels;
        if (auto v = matrix.iou(static_cast<std::size_t>(c))) r.per_class_iou[c] = *v;
    }
    if (step > 0 || !old_classes.empty()) r.miou_old = miou(matrix, old_group);
    r.miou_new = miou(matrix, new_group);
    r.miou_all = miou(matrix, all);
    return r;
}

std::string format_metric(std::optional<double> v) {
    if (!v) return "NA";
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.6f", *v);
    return buf;
}

std::string reports_csv(const std::vector<MetricsReport>& reports) {
    std::ostringstream out;
    out << "step,group,miou\n";
    for (const auto& r : reports) {
        out << r.step << ",old," << format_metric(r.miou_old) << "\n";
        out << r.step << ",new," << format_metric(r.miou_new) << "\n";
        out << r.step << ",all," << format_metric(r.miou_all) << "\n";
    }
    return out.str();
}

namespace {

nlohmann::ordered_json opt_json(std::optional<double> v) { return v ? nlohmann::ordered_json(*v) : nullptr; }

std::optional<double> json_opt(const nlohmann::json& j) {
    if (j.is_null()) return std::nullopt;
    return j.get<double>();
}

} // namespace

std::string reports_json(const std::vector<MetricsReport>& reports) {
    nlohmann::ordered_json arr = nlohmann::ordered_json::array();
    for (const auto& r : reports) {
        nlohmann::ordered_json j;
        j["step"] = r.step;
        j["miou_old"] = opt_json(r.miou_old);
        j["miou_new"] = opt_json(r.miou_new);
        j["miou_all"] = opt_json(r.miou_all);
        nlohmann::ordered_json per = nlohmann::ordered_json::object();
        for (const auto& [c, v] : r.per_class_iou) per[std::to_string(c)] = v;
        j["per_class_iou"] = per;
        nlohmann::ordered_json counts = nlohmann::ordered_json::object();
        for (const auto& [c, v] : r.pixel_counts) counts[std::to_string(c)] = v;
        j["pixel_counts"] = counts;
        arr.push_back(j);
    }
    return arr.dump(2) + "\n";
}

std::vector<MetricsReport> reports_from_json(const std::string& text) {
    std::vector<MetricsReport> out;
    try {
        const auto arr = nlohmann::json::parse(text);
        for (const auto& j : arr) {
            MetricsReport r;
            r.step = j.at("step").get<int>();
            r.miou_old = json_opt(j.at("miou_old"));
            r.miou_new = json_opt(j.at("miou_new"));
            r.miou_all = json_opt(j.at("miou_all"));
            for (const auto& [k, v] : j.at("per_class_iou").items()) r.per_class_iou[std::stoi(k)] = v.get<double>();
            for (const auto& [k, v] : j.at("pixel_counts").items()) {
                r.pixel_counts[std::stoi(k)] = v.get<std::uint64_t>();
            }
            out.push_back(std::move(r));
        }
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("bad report JSON: ") + e.what());
    }
    return out;
}

namespace {

std::string xml_escape(const std::string& s) {
    std::string out;
    for (char c : s) {
        switch (c) {
        case '<': out += "&lt;"; break;
        case '>': out += "&gt;"; break;
        case '&': out += "&amp;"; break;
        case '"': out += "&quot;"; break;
        default: out += c;
        }
    }
    return out;
}

} // namespace

std::string reports_svg(const std::vector<MetricsReport>& reports, const std::string& title) {
    constexpr int kW = 480, kH = 320, kPad = 48;
    const int steps = std::max<int>(1, static_cast<int>(reports.size()) - 1);
    auto px = [&](int i) { return kPad + (kW - 2 * kPad) * i / steps; };
    auto py = [&](double v) { return kH - kPad - static_cast<int>((kH - 2 * kPad) * v); };

    std::ostringstream out;
    out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kW << "\" height=\"" << kH << "\">\n";
    out << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    out << "<text x=\"" << kW / 2 << "\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">" << xml_escape(title) << "</text>\n";
    out << "<line x1=\"" << kPad << "\" y1=\"" << py(0) << "\" x2=\"" << kW - kPad << "\" y2=\"" << py(0)
        << "\" stroke=\"black\"/>\n";
    out << "<line x1=\"" << kPad << "\" y1=\"" << py(0) << "\" x2=\"" << kPad << "\" y2=\"" << py(1)
        << "\" stroke=\"black\"/>\n";
    for (int k = 0; k <= 4; ++k) {
        const double v = k / 4.0;
        out << "<text x=\"" << kPad - 6 << "\" y=\"" << py(v) + 4 << "\" text-anchor=\"end\" font-size=\"10\">" << v
            << "</text>\n";
    }
    for (std::size_t i = 0; i < reports.size(); ++i) {
        out << "<text x=\"" << px(static_cast<int>(i)) << "\" y=\"" << kH - kPad + 16
            << "\" text-anchor=\"middle\" font-size=\"10\">" << reports[i].step << "</text>\n";
    }
    struct Series {
        const char* name;
        const char* color;
        std::optional<double> MetricsReport::*field;
    };
    const Series series[] = {{"old", "#1f77b4", &MetricsReport::miou_old},
                             {"new", "#ff7f0e", &MetricsReport::miou_new},
                             {"all", "#2ca02c", &MetricsReport::miou_all}};
    int legend_y = 40;
    for (const auto& s : series) {
        std::ostringstream pts;
        for (std::size_t i = 0; i < reports.size(); ++i) {
            const auto v = reports[i].*(s.field);
            if (v) pts << px(static_cast<int>(i)) << "," << py(*v) << " ";
        }
        out << "<polyline fill=\"none\" stroke=\"" << s.color << "\" stroke-width=\"2\" points=\"" << pts.str()
            << "\"/>\n";
        out << "<text x=\"" << kW - kPad + 4 << "\" y=\"" << legend_y << "\" font-size=\"10\" fill=\"" << s.color
            << "\">" << s.name << "</text>\n";
        legend_y += 14;
    }
    out << "</svg>\n";
    return out.str();
}

} // namespace cs2k
