#pragma once

#include <fstream>
#include <string>

#include <json.hpp>

#include "memedit/memory_model.hpp"

namespace memedit {

using nlohmann::json;

inline json matrix_to_json(const MatrixXd& m) {
    json rows = json::array();
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        json row = json::array();
        for (Eigen::Index j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
        rows.push_back(std::move(row));
    }
    return rows;
}

inline json vector_to_json(const VectorXd& v) {
    json arr = json::array();
    for (Eigen::Index i = 0; i < v.size(); ++i) arr.push_back(v[i]);
    return arr;
}

inline MatrixXd matrix_from_json(const json& j) {
    if (!j.is_array() || j.empty()) throw ConfigError("json: expected non-empty matrix");
    const Eigen::Index rows = static_cast<Eigen::Index>(j.size());
    const Eigen::Index cols = static_cast<Eigen::Index>(j.at(0).size());
    MatrixXd m(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i) {
        const json& row = j.at(i);
        if (static_cast<Eigen::Index>(row.size()) != cols)
            throw ConfigError("json: ragged matrix rows");
        for (Eigen::Index c = 0; c < cols; ++c) {
            if (!row.at(c).is_number()) throw ConfigError("json: non-numeric matrix entry");
            m(i, c) = row.at(c).get<double>();
        }
    }
    return m;
}

inline VectorXd vector_from_json(const json& j) {
    if (!j.is_array()) throw ConfigError("json: expected vector");
    VectorXd v(static_cast<Eigen::Index>(j.size()));
    for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = j.at(i).get<double>();
    return v;
}

inline void to_json(json& j, const GeometryConfig& cfg) {
    j = json{{"d0", cfg.d0},
             {"d1", cfg.d1},
             {"V", cfg.V},
             {"n_layers", cfg.n_layers},
             {"kappa", cfg.kappa},
             {"protected_mass", cfg.protected_mass},
             {"eps_C", cfg.eps_C},
             {"eps_k", cfg.eps_k},
             {"ridge", cfg.ridge},
             {"seed", cfg.seed}};
}

inline void from_json(const json& j, GeometryConfig& cfg) {
    cfg = GeometryConfig{};
    if (j.contains("d0")) j.at("d0").get_to(cfg.d0);
    if (j.contains("d1")) j.at("d1").get_to(cfg.d1);
    if (j.contains("V")) j.at("V").get_to(cfg.V);
    if (j.contains("n_layers")) j.at("n_layers").get_to(cfg.n_layers);
    if (j.contains("kappa")) j.at("kappa").get_to(cfg.kappa);
    if (j.contains("protected_mass")) j.at("protected_mass").get_to(cfg.protected_mass);
    if (j.contains("eps_C")) j.at("eps_C").get_to(cfg.eps_C);
    if (j.contains("eps_k")) j.at("eps_k").get_to(cfg.eps_k);
    if (j.contains("ridge")) j.at("ridge").get_to(cfg.ridge);
    if (j.contains("seed")) j.at("seed").get_to(cfg.seed);
}

/// Model document: dims, per-layer tensors, readout, base hidden state, and
/// the generating config when one is known. Doubles survive a round trip
/// bit-exactly (shortest round-trip decimal encoding on write, exact parse).
inline json model_to_json(const SyntheticModel& model,
                          const GeometryConfig* cfg = nullptr) {
    json layers = json::array();
    for (const auto& layer : model.layers) {
        json jl{{"weight", matrix_to_json(layer.weight)},
                {"key", vector_to_json(layer.key)},
                {"covariance", matrix_to_json(layer.covariance)},
                {"ridge", layer.ridge}};
        if (layer.projector) jl["projector"] = matrix_to_json(*layer.projector);
        layers.push_back(std::move(jl));
    }
    json j{{"dims",
            {{"d0", model.d0()},
             {"d1", model.d1()},
             {"V", model.num_classes()},
             {"n_layers", model.num_layers()}}},
           {"layers", std::move(layers)},
           {"readout", matrix_to_json(model.readout)},
           {"base_hidden", vector_to_json(model.base_hidden)}};
    if (cfg) j["config"] = *cfg;
    return j;
}

inline SyntheticModel model_from_json(const json& j) {
    SyntheticModel model;
    for (const auto& jl : j.at("layers")) {
        LayerMemory layer;
        layer.weight = matrix_from_json(jl.at("weight"));
        layer.key = vector_from_json(jl.at("key"));
        layer.covariance = matrix_from_json(jl.at("covariance"));
        layer.ridge = jl.at("ridge").get<double>();
        if (jl.contains("projector")) layer.projector = matrix_from_json(jl.at("projector"));
        model.layers.push_back(std::move(layer));
    }
    model.readout = matrix_from_json(j.at("readout"));
    model.base_hidden = vector_from_json(j.at("base_hidden"));
    model.validate();
    if (j.contains("dims")) {
        const json& dims = j.at("dims");
        if (dims.at("d0").get<int>() != model.d0() || dims.at("d1").get<int>() != model.d1() ||
            dims.at("V").get<int>() != model.num_classes() ||
            dims.at("n_layers").get<int>() != model.num_layers())
            throw ConfigError("model json: dims disagree with tensors");
    }
    return model;
}

inline void write_text_file(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ConfigError("cannot open for writing: " + path);
    out << text;
    if (!out) throw ConfigError("write failed: " + path);
}

inline std::string read_text_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot open for reading: " + path);
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return text;
}

}  // namespace memedit
