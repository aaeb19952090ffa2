#pragma once

#include <fstream>
#include <json.hpp>
#include <string>

#include "nnarx.hpp"

namespace nnmpc {

using json = nlohmann::json;

namespace io {

/// {"rows": r, "cols": c, "data": [row-major values]}
inline json matrix_to_json(const Mat& M) {
    json data = json::array();
    for (Index i = 0; i < M.rows(); ++i)
        for (Index j = 0; j < M.cols(); ++j) data.push_back(M(i, j));
    return {{"rows", M.rows()}, {"cols", M.cols()}, {"data", std::move(data)}};
}

inline Mat matrix_from_json(const json& j) {
    const Index r = j.at("rows").get<Index>(), c = j.at("cols").get<Index>();
    const auto& data = j.at("data");
    if (static_cast<Index>(data.size()) != r * c) throw ValidationError("matrix: data length != rows*cols");
    Mat M(r, c);
    for (Index i = 0; i < r; ++i)
        for (Index k = 0; k < c; ++k) M(i, k) = data[static_cast<size_t>(i * c + k)].get<double>();
    return M;
}

inline json vector_to_json(const Vec& v) {
    json a = json::array();
    for (Index i = 0; i < v.size(); ++i) a.push_back(v(i));
    return a;
}

inline Vec vector_from_json(const json& j) {
    Vec v(static_cast<Index>(j.size()));
    for (size_t i = 0; i < j.size(); ++i) v(static_cast<Index>(i)) = j[i].get<double>();
    return v;
}

}  // namespace io

/// Self-describing model document. Doubles are written in shortest round-trip form
/// (at most 17 significant digits), so load(save(model)) is bit-exact.
inline json model_to_json(const NnarxModel& model) {
    const auto& f = model.params();
    json layers = json::array();
    for (const auto& l : f.layers) {
        layers.push_back({{"activation", to_string(l.activation)},
                          {"W", io::matrix_to_json(l.W)},
                          {"U", io::matrix_to_json(l.U)},
                          {"b", io::vector_to_json(l.b)}});
    }
    const auto& s = model.scaling();
    return {{"format", "nnarx-model"},
            {"version", 1},
            {"N", model.horizon()},
            {"m", model.input_dim()},
            {"p", model.output_dim()},
            {"layers", std::move(layers)},
            {"U0", io::matrix_to_json(f.U0)},
            {"b0", io::vector_to_json(f.b0)},
            {"scaling",
             {{"u_offset", io::vector_to_json(s.u_offset)},
              {"u_scale", io::vector_to_json(s.u_scale)},
              {"y_offset", io::vector_to_json(s.y_offset)},
              {"y_scale", io::vector_to_json(s.y_scale)}}}};
}

inline NnarxModel model_from_json(const json& j) {
    if (j.value("format", "") != "nnarx-model") throw ValidationError("not an nnarx-model document");
    FfnnParams f;
    for (const auto& lj : j.at("layers")) {
        Layer l;
        l.activation = activation_from_string(lj.at("activation").get<std::string>());
        l.W = io::matrix_from_json(lj.at("W"));
        l.U = io::matrix_from_json(lj.at("U"));
        l.b = io::vector_from_json(lj.at("b"));
        f.layers.push_back(std::move(l));
    }
    f.U0 = io::matrix_from_json(j.at("U0"));
    f.b0 = io::vector_from_json(j.at("b0"));
    const Index N = j.at("N").get<Index>();
    if (f.input_dim() != j.at("m").get<Index>() || f.output_dim() != j.at("p").get<Index>())
        throw DimensionError("model document: m/p disagree with weight shapes");
    Scaling s;
    if (j.contains("scaling")) {
        const auto& sj = j.at("scaling");
        s.u_offset = io::vector_from_json(sj.at("u_offset"));
        s.u_scale = io::vector_from_json(sj.at("u_scale"));
        s.y_offset = io::vector_from_json(sj.at("y_offset"));
        s.y_scale = io::vector_from_json(sj.at("y_scale"));
    }
    return NnarxModel(N, std::move(f), std::move(s));
}

inline void save_model(const NnarxModel& model, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw Error("cannot open '" + path + "' for writing");
    out << model_to_json(model).dump(2) << '\n';
}

inline NnarxModel load_model(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open '" + path + "'");
    return model_from_json(json::parse(in));
}

inline json read_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open '" + path + "'");
    return json::parse(in, nullptr, true, /*ignore_comments=*/true);
}

inline void write_json_file(const json& j, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw Error("cannot open '" + path + "' for writing");
    out << j.dump(2) << '\n';
}

}  // namespace nnmpc
