#pragma once

#include <atomic>
#include <cstdlib>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "memedit/fidelity.hpp"
#include "memedit/model_io.hpp"
#include "memedit/spectral.hpp"

namespace memedit {

enum class EditDifficulty { easy, hard, mixed };
enum class Method { metake, static_baseline, ridge_only, projection_only };

inline std::string to_string(EditDifficulty d) {
    switch (d) {
        case EditDifficulty::easy: return "easy";
        case EditDifficulty::hard: return "hard";
        default: return "mixed";
    }
}

inline std::string to_string(Method m) {
    switch (m) {
        case Method::metake: return "metake";
        case Method::static_baseline: return "static_baseline";
        case Method::ridge_only: return "ridge_only";
        default: return "projection_only";
    }
}

inline EditDifficulty difficulty_from_string(const std::string& s) {
    if (s == "easy") return EditDifficulty::easy;
    if (s == "hard") return EditDifficulty::hard;
    if (s == "mixed") return EditDifficulty::mixed;
    throw ConfigError("unknown edit_difficulty: " + s);
}

inline Method method_from_string(const std::string& s) {
    if (s == "metake") return Method::metake;
    if (s == "static_baseline") return Method::static_baseline;
    if (s == "ridge_only") return Method::ridge_only;
    if (s == "projection_only") return Method::projection_only;
    throw ConfigError("unknown method: " + s);
}

struct MetaKeParams {
    double eta = 5e-3;
    int T = 15;
    double reg_weight = 0.1;
    bool adam = false;
};

struct BaselineParams {
    double lambda_up = 1e-2;
    int steps = 200;
    double lr = 0.1;
};

/// Fully determines a run: identical configs produce identical results.
struct ExperimentConfig {
    GeometryConfig geometry;
    int n_edits = 10;
    EditDifficulty edit_difficulty = EditDifficulty::hard;
    Method method = Method::metake;
    MetaKeParams metake_params;
    BaselineParams baseline_params;
    int paraphrase_count = 4;
    int locality_count = 4;
    double paraphrase_noise = 0.05;
    std::uint64_t seed = 0;

    void validate() const {
        geometry.validate();
        if (n_edits < 1) throw ConfigError("config: n_edits must be positive");
        if (paraphrase_count < 0 || locality_count < 0)
            throw ConfigError("config: probe counts must be >= 0");
        if (!(paraphrase_noise >= 0.0)) throw ConfigError("config: paraphrase_noise must be >= 0");
        if (paraphrase_count > 0 && paraphrase_noise <= 0.0)
            throw ConfigError("config: paraphrase_noise must be > 0 when paraphrases are requested");
        if (metake_params.T < 1 || !(metake_params.eta > 0.0))
            throw ConfigError("config: metake_params need T >= 1, eta > 0");
        if (!(metake_params.reg_weight >= 0.0))
            throw ConfigError("config: reg_weight must be >= 0");
        if (baseline_params.steps < 1 || !(baseline_params.lr > 0.0) ||
            !(baseline_params.lambda_up >= 0.0))
            throw ConfigError("config: baseline_params need steps >= 1, lr > 0, lambda_up >= 0");
    }
};

inline void to_json(json& j, const MetaKeParams& p) {
    j = json{{"eta", p.eta}, {"T", p.T}, {"reg_weight", p.reg_weight}, {"adam", p.adam}};
}
inline void from_json(const json& j, MetaKeParams& p) {
    p = MetaKeParams{};
    if (j.contains("eta")) j.at("eta").get_to(p.eta);
    if (j.contains("T")) j.at("T").get_to(p.T);
    if (j.contains("reg_weight")) j.at("reg_weight").get_to(p.reg_weight);
    if (j.contains("adam")) j.at("adam").get_to(p.adam);
}
inline void to_json(json& j, const BaselineParams& p) {
    j = json{{"lambda_up", p.lambda_up}, {"steps", p.steps}, {"lr", p.lr}};
}
inline void from_json(const json& j, BaselineParams& p) {
    p = BaselineParams{};
    if (j.contains("lambda_up")) j.at("lambda_up").get_to(p.lambda_up);
    if (j.contains("steps")) j.at("steps").get_to(p.steps);
    if (j.contains("lr")) j.at("lr").get_to(p.lr);
}
inline void to_json(json& j, const ExperimentConfig& cfg) {
    j = json{{"geometry", cfg.geometry},
             {"n_edits", cfg.n_edits},
             {"edit_difficulty", to_string(cfg.edit_difficulty)},
             {"method", to_string(cfg.method)},
             {"metake_params", cfg.metake_params},
             {"baseline_params", cfg.baseline_params},
             {"paraphrase_count", cfg.paraphrase_count},
             {"locality_count", cfg.locality_count},
             {"paraphrase_noise", cfg.paraphrase_noise},
             {"seed", cfg.seed}};
}
inline void from_json(const json& j, ExperimentConfig& cfg) {
    cfg = ExperimentConfig{};
    if (j.contains("geometry")) j.at("geometry").get_to(cfg.geometry);
    if (j.contains("n_edits")) j.at("n_edits").get_to(cfg.n_edits);
    if (j.contains("edit_difficulty"))
        cfg.edit_difficulty = difficulty_from_string(j.at("edit_difficulty").get<std::string>());
    if (j.contains("method")) cfg.method = method_from_string(j.at("method").get<std::string>());
    if (j.contains("metake_params")) j.at("metake_params").get_to(cfg.metake_params);
    if (j.contains("baseline_params")) j.at("baseline_params").get_to(cfg.baseline_params);
    if (j.contains("paraphrase_count")) j.at("paraphrase_count").get_to(cfg.paraphrase_count);
    if (j.contains("locality_count")) j.at("locality_count").get_to(cfg.locality_count);
    if (j.contains("paraphrase_noise")) j.at("paraphrase_noise").get_to(cfg.paraphrase_noise);
    if (j.contains("seed")) j.at("seed").get_to(cfg.seed);
}

struct PerEditRecord {
    int edit_id = 0;
    double beta = 0.0;  // final-layer attenuation of the executed solve
    bool efficacy = false;
    double generalization = 1.0;
    double specificity = 1.0;
    double edit_loss_final = 0.0;
    double loc_loss_final = 0.0;
};

struct ResultsRecord {
    double efficacy = 0.0;
    double generalization = 0.0;
    double specificity = 0.0;
    bool generalization_vacuous = false;
    bool specificity_vacuous = false;
    std::vector<PerEditRecord> per_edit;
};

inline int worker_count_from_env(int n_items) {
    int n = std::max(1, static_cast<int>(std::thread::hardware_concurrency()));
    if (const char* env = std::getenv("MEMEDIT_THREADS")) {
        try {
            n = std::min(n, std::max(1, std::stoi(env)));
        } catch (...) {
            throw ConfigError("MEMEDIT_THREADS is not an integer");
        }
    }
    return std::max(1, std::min(n, n_items));
}

namespace detail {

inline int argmax(const VectorXd& z) {
    Eigen::Index idx = 0;
    z.maxCoeff(&idx);
    return static_cast<int>(idx);
}

// Smallest push along the target readout row that flips the argmax with a
// unit margin, assuming the solver realizes it one-to-one. The open-loop
// comparison point: no iteration, no attenuation awareness.
inline VectorXd naive_semantic_target(const SyntheticModel& model, const EditRequest& request) {
    const VectorXd z = forward(model, request.edit_key);
    const VectorXd u_t = model.readout.row(request.target_class).transpose();
    const double utt = u_t.squaredNorm();
    if (utt <= 0.0) return request.v_init;
    double scale = 0.0;
    for (int j = 0; j < model.num_classes(); ++j) {
        if (j == request.target_class) continue;
        const double denom =
            std::max(utt - model.readout.row(j).dot(u_t.transpose()), 0.05 * utt);
        const double margin = 1.0 + std::max(0.0, z[j] - z[request.target_class]);
        scale = std::max(scale, (z[j] - z[request.target_class] + margin) / denom);
    }
    return request.v_init + scale * u_t;
}

struct EditOutcome {
    PerEditRecord record;
    MetaTrace trace;  // populated for the look-ahead method only
};

inline EditOutcome run_single_edit(const SyntheticModel& base, const MatrixXd& basis_desc,
                                   const ExperimentConfig& cfg, int edit_id) {
    Rng rng(mix_seed(cfg.seed, static_cast<std::uint64_t>(edit_id)));
    const Eigen::Index d0 = base.d0();
    const Eigen::Index n_prot = protected_dim(d0);

    EditDifficulty difficulty = cfg.edit_difficulty;
    if (difficulty == EditDifficulty::mixed)
        difficulty = rng.uniform() < 0.5 ? EditDifficulty::easy : EditDifficulty::hard;

    VectorXd key;
    if (difficulty == EditDifficulty::hard) {
        key = memedit::detail::place_key(rng, basis_desc, n_prot, cfg.geometry.protected_mass);
    } else {
        // all mass in the bottom-eigenvalue quarter, where attenuation is mild
        const MatrixXd basis_asc = basis_desc.rowwise().reverse();
        key = memedit::detail::place_key(rng, basis_asc, n_prot, 1.0);
    }

    SyntheticModel model = with_key(base, key);
    if (cfg.method == Method::projection_only) model = with_null_space_projectors(model);

    const int pre_argmax = argmax(forward(model, key));
    int target = static_cast<int>(rng.below(static_cast<std::uint64_t>(model.num_classes() - 1)));
    if (target >= pre_argmax) ++target;

    EditRequest request;
    request.edit_key = key;
    request.target_class = target;
    request.v_init = model.layers.back().weight * key;
    request.reg_weight = cfg.metake_params.reg_weight;
    const double key_norm = key.norm();
    for (int i = 0; i < cfg.paraphrase_count; ++i) {
        VectorXd p = key + cfg.paraphrase_noise * key_norm * rng.gaussian_vector(d0).normalized();
        request.paraphrase_keys.push_back(key_norm * p.normalized());
    }
    for (int i = 0; i < cfg.locality_count; ++i) {
        for (int attempt = 0; attempt < 1000; ++attempt) {
            const VectorXd g = rng.gaussian_vector(d0).normalized();
            if (std::abs(g.dot(key) / key_norm) < 0.1) {
                request.locality_keys.push_back(key_norm * g);
                break;
            }
        }
    }
    if (static_cast<int>(request.locality_keys.size()) != cfg.locality_count)
        throw ConfigError("edit " + std::to_string(edit_id) + ": could not place locality keys");
    request.validate(model);

    EditOutcome out;
    VectorXd v_meta;
    switch (cfg.method) {
        case Method::metake: {
            MetaKeOptions options;
            options.adam = cfg.metake_params.adam;
            out.trace = metake_run(model, request, cfg.metake_params.eta, cfg.metake_params.T,
                                   options);
            v_meta = out.trace.final_v_star;
            break;
        }
        case Method::static_baseline:
            v_meta = static_target_baseline(model, request, cfg.baseline_params.lambda_up,
                                            cfg.baseline_params.steps, cfg.baseline_params.lr);
            break;
        default:
            v_meta = naive_semantic_target(model, request);
            break;
    }

    // execute on the full stack with the shared uniform-allocation solver
    const std::vector<int> edit_set = all_layers(model);
    const VectorXd v_stack =
        v_meta - model.layers.back().weight * key + stack_pre(model, edit_set);
    const auto results = solve_multilayer(model, allocate_residual(model, v_stack, edit_set));
    const SyntheticModel edited = apply_weight_updates(model, deltas_of(results));

    PerEditRecord& rec = out.record;
    rec.edit_id = edit_id;
    rec.beta = results.at(model.last_layer()).beta;
    rec.efficacy = argmax(forward(edited, key)) == target;
    if (!request.paraphrase_keys.empty()) {
        int hits = 0;
        for (const auto& p : request.paraphrase_keys)
            if (argmax(forward(edited, p)) == target) ++hits;
        rec.generalization =
            static_cast<double>(hits) / static_cast<double>(request.paraphrase_keys.size());
    }
    if (!request.locality_keys.empty()) {
        int kept = 0;
        for (const auto& x : request.locality_keys)
            if (argmax(forward(edited, x)) == argmax(forward(model, x))) ++kept;
        rec.specificity =
            static_cast<double>(kept) / static_cast<double>(request.locality_keys.size());
    }
    // final losses are scored against the pre-edit reference model
    const MetaLossTerms final_terms =
        meta_loss_over(model, overrides_of(model, deltas_of(results)), request, v_meta);
    rec.edit_loss_final = final_terms.edit_loss;
    rec.loc_loss_final = final_terms.loc_loss;
    return out;
}

}  // namespace detail

/// Runs the configured edit suite against fresh copies of one generated
/// model (independent-edit protocol) and aggregates argmax-based success
/// fractions. Deterministic in the config; edits may run on a worker pool
/// capped by MEMEDIT_THREADS without affecting the result.
inline ResultsRecord run_experiment(const ExperimentConfig& cfg,
                                    std::vector<MetaTrace>* traces_out = nullptr) {
    cfg.validate();
    const SyntheticModel base = gen_model(cfg.geometry);

    Eigen::SelfAdjointEigenSolver<MatrixXd> es(base.layers.back().covariance);
    if (es.info() != Eigen::Success) throw DivergenceError("run_experiment: eigensolver failed");
    const MatrixXd basis_desc = es.eigenvectors().rowwise().reverse();

    std::vector<detail::EditOutcome> outcomes(cfg.n_edits);
    std::vector<std::exception_ptr> failures(cfg.n_edits);
    std::atomic<int> next{0};
    const int workers = worker_count_from_env(cfg.n_edits);
    auto work = [&] {
        for (int i = next.fetch_add(1); i < cfg.n_edits; i = next.fetch_add(1)) {
            try {
                outcomes[i] = detail::run_single_edit(base, basis_desc, cfg, i);
            } catch (...) {
                failures[i] = std::current_exception();
            }
        }
    };
    if (workers == 1) {
        work();
    } else {
        std::vector<std::thread> pool;
        for (int w = 0; w < workers; ++w) pool.emplace_back(work);
        for (auto& t : pool) t.join();
    }
    for (int i = 0; i < cfg.n_edits; ++i)
        if (failures[i]) {
            const std::string prefix = "edit " + std::to_string(i) + " failed: ";
            try {
                std::rethrow_exception(failures[i]);
            } catch (const ConfigError& e) {
                throw ConfigError(prefix + e.what());
            } catch (const std::exception& e) {
                throw DivergenceError(prefix + e.what());
            }
        }

    ResultsRecord record;
    record.per_edit.reserve(cfg.n_edits);
    if (traces_out) traces_out->assign(cfg.n_edits, MetaTrace{});
    double eff = 0.0, gen = 0.0, spe = 0.0;
    for (int i = 0; i < cfg.n_edits; ++i) {
        record.per_edit.push_back(outcomes[i].record);
        if (traces_out) (*traces_out)[i] = std::move(outcomes[i].trace);
        eff += outcomes[i].record.efficacy ? 1.0 : 0.0;
        gen += outcomes[i].record.generalization;
        spe += outcomes[i].record.specificity;
    }
    const double n = static_cast<double>(cfg.n_edits);
    record.efficacy = eff / n;
    record.generalization_vacuous = cfg.paraphrase_count == 0;
    record.specificity_vacuous = cfg.locality_count == 0;
    record.generalization = record.generalization_vacuous ? 1.0 : gen / n;
    record.specificity = record.specificity_vacuous ? 1.0 : spe / n;
    return record;
}

inline const char* kResultsCsvHeader =
    "edit_id,method,beta,efficacy,generalization,specificity,edit_loss_final,loc_loss_final";

inline std::string results_to_csv(const ResultsRecord& record, Method method) {
    std::string csv = kResultsCsvHeader;
    csv += "\n";
    for (const auto& pe : record.per_edit) {
        csv += std::to_string(pe.edit_id);
        csv += ",";
        csv += to_string(method);
        csv += ",";
        csv += format_double(pe.beta);
        csv += ",";
        csv += pe.efficacy ? "1" : "0";
        csv += ",";
        csv += format_double(pe.generalization);
        csv += ",";
        csv += format_double(pe.specificity);
        csv += ",";
        csv += format_double(pe.edit_loss_final);
        csv += ",";
        csv += format_double(pe.loc_loss_final);
        csv += "\n";
    }
    return csv;
}

inline json results_summary_json(const ResultsRecord& record, const ExperimentConfig& cfg) {
    return json{{"efficacy", record.efficacy},
                {"generalization", record.generalization},
                {"specificity", record.specificity},
                {"generalization_vacuous", record.generalization_vacuous},
                {"specificity_vacuous", record.specificity_vacuous},
                {"n_edits", record.per_edit.size()},
                {"vacuous", record.per_edit.empty()},
                {"config", cfg}};
}

/// Writes the per-edit CSV and the aggregate summary JSON (which embeds the
/// full config for reproducibility).
inline void emit_results(const ResultsRecord& record, const ExperimentConfig& cfg,
                         const std::string& csv_path, const std::string& summary_path) {
    write_text_file(csv_path, results_to_csv(record, cfg.method));
    write_text_file(summary_path, results_summary_json(record, cfg).dump(2) + "\n");
}

struct CsvAggregates {
    std::size_t rows = 0;
    double efficacy = 0.0;
    double generalization = 0.0;
    double specificity = 0.0;
    std::vector<PerEditRecord> per_edit;
};

/// Parses a results CSV back and recomputes the aggregate fractions; the
/// re-aggregation oracle behind the `report` subcommand.
inline CsvAggregates aggregate_results_csv(const std::string& csv_text) {
    std::istringstream in(csv_text);
    std::string line;
    if (!std::getline(in, line)) throw ConfigError("results csv: empty file");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line != kResultsCsvHeader) throw ConfigError("results csv: unexpected header");

    CsvAggregates agg;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        std::vector<std::string> fields;
        std::size_t start = 0;
        while (true) {
            const std::size_t comma = line.find(',', start);
            fields.push_back(line.substr(start, comma - start));
            if (comma == std::string::npos) break;
            start = comma + 1;
        }
        if (fields.size() != 8) throw ConfigError("results csv: bad row: " + line);
        PerEditRecord pe;
        pe.edit_id = static_cast<int>(parse_double(fields[0]));
        pe.beta = parse_double(fields[2]);
        pe.efficacy = parse_double(fields[3]) != 0.0;
        pe.generalization = parse_double(fields[4]);
        pe.specificity = parse_double(fields[5]);
        pe.edit_loss_final = parse_double(fields[6]);
        pe.loc_loss_final = parse_double(fields[7]);
        agg.per_edit.push_back(pe);
        ++agg.rows;
        agg.efficacy += pe.efficacy ? 1.0 : 0.0;
        agg.generalization += pe.generalization;
        agg.specificity += pe.specificity;
    }
    if (agg.rows > 0) {
        const double n = static_cast<double>(agg.rows);
        agg.efficacy /= n;
        agg.generalization /= n;
        agg.specificity /= n;
    }
    return agg;
}

/// One iteration per line, for post-hoc plotting by external tools.
inline std::string trace_to_jsonl(const MetaTrace& trace) {
    std::string out;
    for (const auto& it : trace.iterations) {
        json j{{"t", it.t},
               {"v_star", vector_to_json(it.v_star)},
               {"edit_loss", it.edit_loss},
               {"loc_loss", it.loc_loss},
               {"reg_loss", it.reg_loss},
               {"grad_norm", it.grad_norm},
               {"beta", it.beta_current}};
        out += j.dump();
        out += "\n";
    }
    return out;
}

}  // namespace memedit
