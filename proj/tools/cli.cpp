#include "cli.hpp"

#include "cs2k/errors.hpp"
#include "cs2k/runner.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <map>
#include <set>
#include <sstream>

#ifndef CS2K_VERSION
#define CS2K_VERSION "dev"
#endif

namespace cs2k::cli {

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

namespace {

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << text;
}

std::string read_text(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot read " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

ojson parse_json(const std::string& text, const std::string& what) {
    try {
        return ojson::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(what + " is not valid JSON: " + e.what());
    }
}

std::optional<double> median_of(std::vector<double> v) {
    if (v.empty()) return std::nullopt;
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::optional<double> parse_metric(const std::string& s) {
    if (s == "NA") return std::nullopt;
    try {
        std::size_t used = 0;
        const double v = std::stod(s, &used);
        if (used != s.size()) throw FormatError("bad metric '" + s + "'");
        return v;
    } catch (const std::logic_error&) {
        throw FormatError("bad metric '" + s + "'");
    }
}

std::string method_label(const std::string& preset, const std::vector<std::string>& ablations) {
    std::string label = preset;
    for (const auto& a : ablations) label += "-" + a;
    return label;
}

// --- generate ---------------------------------------------------------------

struct GenerateArgs {
    std::string spec_file;
    std::optional<std::uint64_t> seed;
    std::string out;
};

void cmd_generate(const GenerateArgs& a, std::ostream& out) {
    ScenarioSpec spec;
    if (!a.spec_file.empty()) spec = ScenarioSpec::from_json(read_text(a.spec_file));
    if (a.seed) spec.seed = *a.seed;
    spec.validate();

    const fs::path path = output_path(a.out);
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    const Scenario sc = generate_scenario(spec);
    save_scenario(path.string(), sc);

    ojson m;
    m["tool"] = "cs2k";
    m["version"] = CS2K_VERSION;
    m["command"] = "generate";
    m["spec"] = ojson::parse(spec.to_json());
    m["scenario"] = path.filename().string();
    write_text(path.string() + ".manifest.json", m.dump(2) + "\n");
    out << "wrote " << path.string() << " (" << sc.steps.size() << " steps, " << sc.test_set.size()
        << " test images)\n";
}

// --- run --------------------------------------------------------------------

struct RunArgs {
    std::string scenario;
    std::string method = "cs2k";
    std::vector<std::string> ablate;
    std::string seeds = "0";
    std::string out;
    std::string config;
    int from_step = 0;
    std::optional<int> epochs;
    std::optional<int> batch_images;
    std::optional<double> lr;
    std::optional<double> tau;
};

TrainConfig resolve_hyper(const RunArgs& a) {
    // defaults < config file < flags
    TrainConfig h;
    if (!a.config.empty()) h = TrainConfig::from_json(read_text(a.config));
    if (a.epochs) h.epochs = *a.epochs;
    if (a.batch_images) h.batch_images = *a.batch_images;
    if (a.lr) h.lr = *a.lr;
    if (a.tau) h.tau = *a.tau;
    h.validate();
    return h;
}

std::string aggregate_csv(const std::vector<std::uint64_t>& seeds,
                          const std::vector<std::vector<MetricsReport>>& per_seed) {
    std::ostringstream out;
    out << "seed,step,group,miou\n";
    static const std::pair<const char*, std::optional<double> MetricsReport::*> groups[] = {
        {"old", &MetricsReport::miou_old}, {"new", &MetricsReport::miou_new}, {"all", &MetricsReport::miou_all}};
    for (std::size_t s = 0; s < seeds.size(); ++s) {
        for (const auto& r : per_seed[s]) {
            for (const auto& [name, field] : groups) {
                out << seeds[s] << "," << r.step << "," << name << "," << format_metric(r.*field) << "\n";
            }
        }
    }
    const std::size_t steps = per_seed.front().size();
    for (std::size_t t = 0; t < steps; ++t) {
        for (const auto& [name, field] : groups) {
            std::vector<double> vals;
            for (const auto& reports : per_seed) {
                if (const auto v = reports[t].*field) vals.push_back(*v);
            }
            out << "median," << per_seed.front()[t].step << "," << name << "," << format_metric(median_of(vals))
                << "\n";
        }
    }
    return out.str();
}

void cmd_run(const RunArgs& a, std::ostream& out) {
    MethodConfig method = method_preset(a.method);
    for (const auto& flag : a.ablate) method = ablate(method, flag);
    method.validate();
    const TrainConfig hyper = resolve_hyper(a);
    const auto seeds = parse_seeds(a.seeds);
    if (a.from_step < 0) throw ConfigError("--from-step must be non-negative");
    const Scenario sc = load_scenario(a.scenario);

    const fs::path dir = output_path(a.out);
    fs::create_directories(dir);

    // The manifest goes down before any training so an interrupted run can be
    // reproduced from it.
    ojson m;
    m["tool"] = "cs2k";
    m["version"] = CS2K_VERSION;
    m["command"] = "run";
    m["scenario_file"] = fs::absolute(a.scenario).lexically_normal().string();
    m["spec"] = ojson::parse(sc.spec.to_json());
    m["label"] = method_label(a.method, a.ablate);
    m["preset"] = a.method;
    m["ablate"] = a.ablate;
    m["method"] = ojson::parse(method.to_json());
    m["hyper"] = ojson::parse(hyper.to_json());
    m["seeds"] = seeds;
    m["from_step"] = a.from_step;
    m["output"] = dir.string();
    write_text(dir / "manifest.json", m.dump(2) + "\n");

    std::vector<std::vector<MetricsReport>> per_seed;
    for (const auto seed : seeds) {
        const fs::path seed_dir = dir / ("seed_" + std::to_string(seed));
        const fs::path ckpt = seed_dir / "checkpoints";
        fs::create_directories(ckpt);
        auto reports = run_scenario(sc, method, hyper, seed, RunOptions{ckpt, a.from_step});
        write_text(seed_dir / "report.csv", reports_csv(reports));
        write_text(seed_dir / "report.json", reports_json(reports));
        write_text(seed_dir / "report.svg",
                   reports_svg(reports, method_label(a.method, a.ablate) + ", seed " + std::to_string(seed)));
        out << "seed " << seed << ": final all-mIoU " << format_metric(reports.back().miou_all) << "\n";
        per_seed.push_back(std::move(reports));
    }
    write_text(dir / "aggregate.csv", aggregate_csv(seeds, per_seed));
    out << "wrote " << dir.string() << "\n";
}

// --- compare ----------------------------------------------------------------

struct CompareArgs {
    std::vector<std::string> dirs;
    std::string out;
};

void cmd_compare(const CompareArgs& a, std::ostream& out) {
    struct Column {
        std::string label;
        std::map<std::pair<int, std::string>, std::optional<double>> medians;
    };
    std::vector<Column> cols;
    std::optional<ojson> spec;
    std::set<std::string> labels;
    std::vector<std::pair<int, std::string>> keys;

    for (const auto& d : a.dirs) {
        const ojson m = parse_json(read_text(fs::path(d) / "manifest.json"), d + "/manifest.json");
        if (!m.contains("spec") || !m.contains("label")) throw FormatError(d + ": manifest lacks spec or label");
        if (!spec) {
            spec = m["spec"];
        } else if (*spec != m["spec"]) {
            throw ConfigError(d + " was run on a different scenario than " + a.dirs.front());
        }
        Column c;
        c.label = m["label"].get<std::string>();
        for (int k = 2; labels.count(c.label); ++k) c.label = m["label"].get<std::string>() + "#" + std::to_string(k);
        labels.insert(c.label);
        for (const auto& row : read_aggregate(fs::path(d) / "aggregate.csv")) {
            if (row.seed != "median") continue;
            const auto key = std::make_pair(row.step, row.group);
            c.medians[key] = row.miou;
            if (cols.empty()) keys.push_back(key);
        }
        if (!cols.empty() && c.medians.size() != cols.front().medians.size()) {
            throw ConfigError(d + " has a different number of steps than " + a.dirs.front());
        }
        cols.push_back(std::move(c));
    }

    auto delta = [](std::optional<double> v, std::optional<double> base) -> std::optional<double> {
        if (!v || !base) return std::nullopt;
        return *v - *base;
    };

    std::ostringstream csv;
    csv << "step,group";
    for (const auto& c : cols) csv << "," << c.label;
    for (std::size_t i = 1; i < cols.size(); ++i) csv << ",delta_" << cols[i].label;
    csv << "\n";
    for (const auto& key : keys) {
        csv << key.first << "," << key.second;
        for (const auto& c : cols) csv << "," << format_metric(c.medians.at(key));
        for (std::size_t i = 1; i < cols.size(); ++i) {
            csv << "," << format_metric(delta(cols[i].medians.at(key), cols[0].medians.at(key)));
        }
        csv << "\n";
    }

    // Console table: medians, then deltas against the first directory.
    std::size_t w = 10;
    for (const auto& c : cols) w = std::max(w, c.label.size() + 8);
    out << std::left << std::setw(6) << "step" << std::setw(7) << "group";
    for (const auto& c : cols) out << std::setw(static_cast<int>(w)) << c.label;
    for (std::size_t i = 1; i < cols.size(); ++i) out << std::setw(static_cast<int>(w)) << ("d(" + cols[i].label + ")");
    out << "\n";
    for (const auto& key : keys) {
        out << std::setw(6) << key.first << std::setw(7) << key.second;
        for (const auto& c : cols) out << std::setw(static_cast<int>(w)) << format_metric(c.medians.at(key));
        for (std::size_t i = 1; i < cols.size(); ++i) {
            out << std::setw(static_cast<int>(w))
                << format_metric(delta(cols[i].medians.at(key), cols[0].medians.at(key)));
        }
        out << "\n";
    }
    if (!a.out.empty()) {
        const fs::path path = output_path(a.out);
        if (path.has_parent_path()) fs::create_directories(path.parent_path());
        write_text(path, csv.str());
    }
}

} // namespace

// --- helpers ----------------------------------------------------------------

fs::path output_path(const std::string& given) {
    const fs::path p(given);
    if (p.is_absolute()) return p;
    if (const char* root = std::getenv("CS2K_OUTPUT_ROOT"); root != nullptr && *root != '\0') return fs::path(root) / p;
    return p;
}

std::vector<std::uint64_t> parse_seeds(const std::string& text) {
    std::vector<std::uint64_t> seeds;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (item.empty() || item.find_first_not_of("0123456789") != std::string::npos) {
            throw ConfigError("bad seed list '" + text + "'");
        }
        const auto s = std::stoull(item);
        if (std::find(seeds.begin(), seeds.end(), s) != seeds.end()) throw ConfigError("duplicate seed " + item);
        seeds.push_back(s);
    }
    if (seeds.empty()) throw ConfigError("empty seed list");
    return seeds;
}

std::vector<AggregateRow> read_aggregate(const fs::path& path) {
    std::istringstream in(read_text(path));
    std::string line;
    if (!std::getline(in, line) || line != "seed,step,group,miou") throw FormatError(path.string() + ": bad header");
    std::vector<AggregateRow> rows;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::vector<std::string> f;
        std::stringstream ls(line);
        std::string cell;
        while (std::getline(ls, cell, ',')) f.push_back(cell);
        if (f.size() != 4) throw FormatError(path.string() + ": bad row '" + line + "'");
        AggregateRow r;
        r.seed = f[0];
        try {
            r.step = std::stoi(f[1]);
        } catch (const std::logic_error&) {
            throw FormatError(path.string() + ": bad step '" + f[1] + "'");
        }
        r.group = f[2];
        r.miou = parse_metric(f[3]);
        rows.push_back(std::move(r));
    }
    return rows;
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Class-incremental segmentation experiments on synthetic scenarios", "cs2k"};
    app.require_subcommand(1);
    app.set_version_flag("--version", CS2K_VERSION);

    GenerateArgs gen;
    auto* g = app.add_subcommand("generate", "Write a scenario file and its manifest");
    g->add_option("--spec", gen.spec_file, "Scenario spec JSON; defaults apply to missing fields")->check(CLI::ExistingFile);
    g->add_option("--seed", gen.seed, "Overrides the scenario seed");
    g->add_option("--out", gen.out, "Scenario file to write")->required();

    RunArgs ra;
    auto* r = app.add_subcommand("run", "Train a method over every step of a scenario");
    r->add_option("scenario", ra.scenario, "Scenario file from `generate`")->required();
    r->add_option("--method", ra.method, "ft, joint, naive, median, wf or cs2k")->capture_default_str();
    r->add_option("--ablate", ra.ablate, "Remove a mechanism: ppl, pca-sa, pca-ia, wsc (repeatable)");
    r->add_option("--seeds", ra.seeds, "Comma-separated run seeds")->capture_default_str();
    r->add_option("--out", ra.out, "Output directory")->required();
    r->add_option("--config", ra.config, "Training config JSON")->check(CLI::ExistingFile);
    r->add_option("--from-step", ra.from_step, "Resume from the checkpoints of the earlier steps");
    r->add_option("--epochs", ra.epochs, "Overrides the config file");
    r->add_option("--batch-images", ra.batch_images, "Overrides the config file");
    r->add_option("--lr", ra.lr, "Overrides the config file");
    r->add_option("--tau", ra.tau, "Overrides the config file");

    CompareArgs ca;
    auto* c = app.add_subcommand("compare", "Tabulate median mIoU of several run directories");
    c->add_option("dirs", ca.dirs, "Run directories; deltas are against the first")->required();
    c->add_option("--out", ca.out, "CSV file to write");

    try {
        std::vector<std::string> reversed(args.rbegin(), args.rend());
        app.parse(reversed);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return kExitOk;
    } catch (const CLI::CallForVersion&) {
        out << CS2K_VERSION << "\n";
        return kExitOk;
    } catch (const CLI::ParseError& e) {
        // Subcommand help arrives here too.
        if (e.get_exit_code() == 0) {
            out << app.help();
            return kExitOk;
        }
        err << "error: " << e.what() << "\n";
        return kExitConfig;
    }

    try {
        if (*g) cmd_generate(gen, out);
        if (*r) cmd_run(ra, out);
        if (*c) cmd_compare(ca, out);
    } catch (const ConfigError& e) {
        err << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return kExitRuntime;
    }
    return kExitOk;
}

} // namespace cs2k::cli
