// Command-line surface: generate models, run edit suites, sweep geometry
// grids, run the verification battery, and re-aggregate results files.
//
// Exit codes: 0 success, 2 verification failure, 3 config error,
// 4 numerical divergence.

#include <CLI11.hpp>

#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "memedit/memedit.hpp"

namespace {

using memedit::json;

json load_config_json(const std::string& path) {
    if (path.empty()) return json::object();
    try {
        return json::parse(memedit::read_text_file(path));
    } catch (const json::parse_error& e) {
        throw memedit::ConfigError("config " + path + ": " + e.what());
    }
}

// --a.b=value overrides one config field through its JSON pointer
void apply_overrides(json& cfg, const std::vector<std::string>& extras) {
    for (const auto& raw : extras) {
        if (raw.rfind("--", 0) != 0)
            throw memedit::ConfigError("unrecognized argument: " + raw);
        const auto eq = raw.find('=');
        if (eq == std::string::npos || eq <= 2)
            throw memedit::ConfigError("overrides take the form --key=value: " + raw);
        std::string path = raw.substr(2, eq - 2);
        const std::string value = raw.substr(eq + 1);
        for (auto& c : path)
            if (c == '.') c = '/';
        json parsed;
        try {
            parsed = json::parse(value);
        } catch (...) {
            parsed = value;  // bare strings (e.g. method names) need no quotes
        }
        try {
            cfg[json::json_pointer("/" + path)] = parsed;
        } catch (const json::exception& e) {
            throw memedit::ConfigError("cannot apply override " + raw + ": " + e.what());
        }
    }
}

memedit::ExperimentConfig config_from_json(const json& j) {
    try {
        return j.get<memedit::ExperimentConfig>();
    } catch (const json::exception& e) {
        throw memedit::ConfigError(std::string("malformed config: ") + e.what());
    }
}

std::vector<double> parse_double_list(const std::string& csv) {
    std::vector<double> out;
    std::size_t start = 0;
    while (start <= csv.size()) {
        const std::size_t comma = csv.find(',', start);
        const std::string tok = csv.substr(start, comma - start);
        if (!tok.empty()) out.push_back(memedit::parse_double(tok));
        if (comma == std::string::npos) break;
        start = comma + 1;
    }
    if (out.empty()) throw memedit::ConfigError("empty list: " + csv);
    return out;
}

std::vector<std::string> parse_string_list(const std::string& csv) {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (start <= csv.size()) {
        const std::size_t comma = csv.find(',', start);
        const std::string tok = csv.substr(start, comma - start);
        if (!tok.empty()) out.push_back(tok);
        if (comma == std::string::npos) break;
        start = comma + 1;
    }
    if (out.empty()) throw memedit::ConfigError("empty list: " + csv);
    return out;
}

int run_gen(const std::string& config_path, const std::string& out_path, bool seed_set,
            std::uint64_t seed, const std::vector<std::string>& extras) {
    json j = load_config_json(config_path);
    apply_overrides(j, extras);
    memedit::ExperimentConfig cfg = config_from_json(j);
    if (seed_set) cfg.geometry.seed = seed;
    const memedit::SyntheticModel model = memedit::gen_model(cfg.geometry);
    memedit::write_text_file(out_path,
                             memedit::model_to_json(model, &cfg.geometry).dump(2) + "\n");
    std::cout << "wrote " << out_path << "\n";
    return 0;
}

int run_edit(const std::string& config_path, std::uint64_t seed, const std::string& out_dir,
             const std::string& traces_path, const std::vector<std::string>& extras) {
    json j = load_config_json(config_path);
    apply_overrides(j, extras);
    memedit::ExperimentConfig cfg = config_from_json(j);
    cfg.seed = seed;
    if (cfg.geometry.seed == 0) cfg.geometry.seed = seed;

    std::vector<memedit::MetaTrace> traces;
    const memedit::ResultsRecord record = memedit::run_experiment(cfg, &traces);

    std::filesystem::create_directories(out_dir);
    const std::string csv_path = out_dir + "/results.csv";
    const std::string summary_path = out_dir + "/summary.json";
    memedit::emit_results(record, cfg, csv_path, summary_path);
    if (!traces_path.empty() && cfg.method == memedit::Method::metake) {
        std::string jsonl;
        for (const auto& t : traces) jsonl += memedit::trace_to_jsonl(t);
        memedit::write_text_file(traces_path, jsonl);
    }
    std::cout << "efficacy " << memedit::format_double(record.efficacy) << "  generalization "
              << memedit::format_double(record.generalization) << "  specificity "
              << memedit::format_double(record.specificity) << "\n";
    std::cout << "wrote " << csv_path << " and " << summary_path << "\n";
    return 0;
}

int run_sweep(const std::string& config_path, std::uint64_t seed, const std::string& out_dir,
              const std::string& kappas_csv, const std::string& masses_csv,
              const std::string& methods_csv, const std::vector<std::string>& extras) {
    json j = load_config_json(config_path);
    apply_overrides(j, extras);
    const memedit::ExperimentConfig base = config_from_json(j);

    const std::vector<double> kappas = parse_double_list(kappas_csv);
    const std::vector<double> masses = parse_double_list(masses_csv);
    const std::vector<std::string> methods = parse_string_list(methods_csv);

    std::filesystem::create_directories(out_dir);
    json summaries = json::array();
    for (const double kappa : kappas) {
        for (const double mass : masses) {
            for (const auto& method : methods) {
                memedit::ExperimentConfig cfg = base;
                cfg.seed = seed;
                cfg.geometry.kappa = kappa;
                cfg.geometry.protected_mass = mass;
                cfg.method = memedit::method_from_string(method);
                if (cfg.geometry.seed == 0) cfg.geometry.seed = seed;
                const memedit::ResultsRecord record = memedit::run_experiment(cfg);

                std::string tag = "kappa" + memedit::format_double(kappa) + "_mass" +
                                  memedit::format_double(mass) + "_" + method;
                memedit::write_text_file(out_dir + "/results_" + tag + ".csv",
                                         memedit::results_to_csv(record, cfg.method));
                summaries.push_back(memedit::results_summary_json(record, cfg));
                std::cout << tag << ": efficacy " << memedit::format_double(record.efficacy)
                          << "\n";
            }
        }
    }
    memedit::write_text_file(out_dir + "/sweep_summary.json", summaries.dump(2) + "\n");
    std::cout << "wrote " << out_dir << "/sweep_summary.json\n";
    return 0;
}

int run_verify(const std::string& config_path, const std::string& out_path,
               double perturbation_scale, const std::vector<std::string>& extras) {
    json j = load_config_json(config_path);
    apply_overrides(j, extras);
    const memedit::ExperimentConfig cfg =
        j.empty() ? memedit::ExperimentConfig{} : config_from_json(j);
    memedit::VerifyOptions options;
    options.perturbation_scale = perturbation_scale;
    const auto checks = memedit::verify_all(cfg, options);

    json report = json::array();
    for (const auto& c : checks) {
        const char* tag = c.status == "pass" ? "PASS" : (c.status == "fail" ? "FAIL" : "SKIP");
        std::cout << "[" << tag << "] " << c.name;
        if (c.status == "precondition") std::cout << " (precondition violated)";
        std::cout << "\n";
        report.push_back(json{{"name", c.name}, {"status", c.status}, {"measured", c.measured}});
    }
    if (!out_path.empty()) memedit::write_text_file(out_path, report.dump(2) + "\n");
    if (!memedit::all_checks_passed(checks)) {
        std::cout << "verification FAILED\n";
        return 2;
    }
    std::cout << "verification passed\n";
    return 0;
}

int run_report(const std::string& csv_path, const std::string& out_path) {
    const memedit::CsvAggregates agg =
        memedit::aggregate_results_csv(memedit::read_text_file(csv_path));
    json j{{"rows", agg.rows},
           {"efficacy", agg.efficacy},
           {"generalization", agg.generalization},
           {"specificity", agg.specificity}};
    const std::string text = j.dump(2) + "\n";
    if (!out_path.empty())
        memedit::write_text_file(out_path, text);
    else
        std::cout << text;
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"synthetic associative-memory editing harness"};
    app.require_subcommand(1);
    app.allow_extras();

    std::string config_path, out_path, out_dir = "results", traces_path, csv_path;
    std::string kappas = "1,100,10000", masses = "0.5,0.99";
    std::string methods = "metake,static_baseline,ridge_only";
    std::uint64_t seed = 0;
    double perturbation_scale = 0.9;

    auto* gen = app.add_subcommand("gen", "generate a model and write it as JSON");
    gen->allow_extras();
    gen->add_option("--config", config_path, "experiment config JSON");
    auto* gen_seed = gen->add_option("--seed", seed, "override geometry seed");
    gen->add_option("--out", out_path, "output model path")->required();

    auto* edit = app.add_subcommand("edit", "run one edit-suite config");
    edit->allow_extras();
    edit->add_option("--config", config_path, "experiment config JSON");
    edit->add_option("--seed", seed, "experiment seed")->required();
    edit->add_option("--out-dir", out_dir, "directory for results.csv + summary.json");
    edit->add_option("--traces", traces_path, "write look-ahead traces as JSON lines");

    auto* sweep = app.add_subcommand("sweep", "grid over kappa x protected_mass x method");
    sweep->allow_extras();
    sweep->add_option("--config", config_path, "experiment config JSON");
    sweep->add_option("--seed", seed, "experiment seed (shared across the grid)")->required();
    sweep->add_option("--out-dir", out_dir, "output directory");
    sweep->add_option("--kappas", kappas, "comma-separated condition numbers");
    sweep->add_option("--masses", masses, "comma-separated protected masses");
    sweep->add_option("--methods", methods, "comma-separated methods");

    auto* verify = app.add_subcommand("verify", "run the invariant battery");
    verify->allow_extras();
    verify->add_option("--config", config_path, "experiment config JSON");
    verify->add_option("--out", out_path, "write the JSON report here");
    verify->add_option("--perturbation-scale", perturbation_scale,
                       "perturbation size as a multiple of lambda_min");

    auto* report = app.add_subcommand("report", "re-aggregate a results CSV");
    report->add_option("--csv", csv_path, "results CSV path")->required();
    report->add_option("--out", out_path, "write the summary here instead of stdout");

    try {
        app.parse(argc, argv);
        if (gen->parsed())
            return run_gen(config_path, out_path, gen_seed->count() > 0, seed, gen->remaining());
        if (edit->parsed())
            return run_edit(config_path, seed, out_dir, traces_path, edit->remaining());
        if (sweep->parsed())
            return run_sweep(config_path, seed, out_dir, kappas, masses, methods,
                             sweep->remaining());
        if (verify->parsed())
            return run_verify(config_path, out_path, perturbation_scale, verify->remaining());
        if (report->parsed()) return run_report(csv_path, out_path);
        return 3;
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 3;
    } catch (const memedit::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 3;
    } catch (const memedit::DivergenceError& e) {
        std::cerr << "numerical divergence: " << e.what() << "\n";
        return 4;
    } catch (const memedit::SingularGeometryError& e) {
        std::cerr << "singular geometry: " << e.what() << "\n";
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    }
}
