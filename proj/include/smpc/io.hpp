#pragma once

#include <nlohmann/json.hpp>

#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "socp.hpp"

namespace smpc::io {

using nlohmann::json;

// Matrices are stored row-major with explicit dimensions.
inline json to_json(const Matrix& M) {
    json data = json::array();
    for (Index r = 0; r < M.rows(); ++r)
        for (Index c = 0; c < M.cols(); ++c) data.push_back(M(r, c));
    return {{"rows", M.rows()}, {"cols", M.cols()}, {"data", data}};
}

inline Matrix matrix_from_json(const json& j) {
    const Index rows = j.at("rows").get<Index>(), cols = j.at("cols").get<Index>();
    const auto& data = j.at("data");
    require(static_cast<Index>(data.size()) == rows * cols, "matrix_from_json: data length does not match dimensions");
    Matrix M(rows, cols);
    for (Index r = 0; r < rows; ++r)
        for (Index c = 0; c < cols; ++c) M(r, c) = data.at(static_cast<std::size_t>(r * cols + c)).get<double>();
    return M;
}

inline json vector_to_json(const Vector& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

inline Vector vector_from_json(const json& j) {
    const auto v = j.get<std::vector<double>>();
    return Eigen::Map<const Vector>(v.data(), static_cast<Index>(v.size()));
}

inline json to_json(const StateSpaceModel& m) {
    return {{"n_x", m.nx()}, {"n_u", m.nu()}, {"n_y", m.ny()}, {"n_w", m.nw()},
            {"A", to_json(m.A)}, {"B", to_json(m.B)}, {"C", to_json(m.C)}, {"E", to_json(m.E)}, {"R", to_json(m.R)}};
}

inline StateSpaceModel model_from_json(const json& j) {
    StateSpaceModel m(matrix_from_json(j.at("A")), matrix_from_json(j.at("B")), matrix_from_json(j.at("C")),
                      matrix_from_json(j.at("E")), matrix_from_json(j.at("R")));
    require(m.nx() == j.at("n_x").get<Index>() && m.nu() == j.at("n_u").get<Index>() &&
                m.ny() == j.at("n_y").get<Index>(),
            "model_from_json: declared dimensions do not match the matrices");
    return m;
}

// Per-k blocks plus the lower Cholesky factor of Sigma_theta.
inline json to_json(const MultiStepPredictor& p) {
    Eigen::LLT<Matrix> llt(p.Sigma_theta);
    const Matrix Lc = llt.info() == Eigen::Success ? Matrix(llt.matrixL()) : psd_sqrt(p.Sigma_theta);
    return {{"k", p.k}, {"n_x", p.nx}, {"n_u", p.nu}, {"n_y", p.ny},
            {"G0", to_json(p.G0_hat)}, {"Gu", to_json(p.Gu_hat)}, {"Gw", to_json(p.Gw_hat)}, {"R", to_json(p.R_hat)},
            {"Sigma_theta_chol", to_json(Lc)}};
}

inline MultiStepPredictor predictor_from_json(const json& j) {
    MultiStepPredictor p;
    p.k      = j.at("k").get<int>();
    p.nx     = j.at("n_x").get<Index>();
    p.nu     = j.at("n_u").get<Index>();
    p.ny     = j.at("n_y").get<Index>();
    p.G0_hat = matrix_from_json(j.at("G0"));
    p.Gu_hat = matrix_from_json(j.at("Gu"));
    p.Gw_hat = matrix_from_json(j.at("Gw"));
    p.R_hat  = matrix_from_json(j.at("R"));
    const Matrix Lc = matrix_from_json(j.at("Sigma_theta_chol"));
    p.Sigma_theta   = Lc * Lc.transpose();
    p.theta_hat     = vec_blocks(p.G0_hat, p.Gu_hat);
    return p;
}

inline json to_json(const std::vector<MultiStepPredictor>& ps) {
    json arr = json::array();
    for (const auto& p : ps) arr.push_back(to_json(p));
    return {{"predictors", arr}};
}

inline std::vector<MultiStepPredictor> predictors_from_json(const json& j) {
    std::vector<MultiStepPredictor> out;
    for (const auto& e : j.at("predictors")) out.push_back(predictor_from_json(e));
    return out;
}

inline json to_json(const ConicProgram& p) {
    json lin = json::array(), soc = json::array();
    for (const auto& r : p.lin_rows) lin.push_back({{"a", vector_to_json(r.a)}, {"b", r.b}});
    for (const auto& r : p.soc_rows)
        soc.push_back({{"k", r.k}, {"j", r.j}, {"linear", vector_to_json(r.linear)}, {"offset", r.offset},
                       {"scale", r.scale}, {"cone_matrix", to_json(r.cone_matrix)},
                       {"cone_offset", vector_to_json(r.cone_offset)}, {"rhs", r.rhs}});
    return {{"n_vars", p.n_vars}, {"H", to_json(p.H)}, {"g", vector_to_json(p.g)}, {"c0", p.c0},
            {"lin_rows", lin}, {"soc_rows", soc}};
}

inline ConicProgram program_from_json(const json& j) {
    ConicProgram p;
    p.n_vars = j.at("n_vars").get<Index>();
    p.H      = matrix_from_json(j.at("H"));
    p.g      = vector_from_json(j.at("g"));
    p.c0     = j.at("c0").get<double>();
    for (const auto& r : j.at("lin_rows")) p.lin_rows.push_back({vector_from_json(r.at("a")), r.at("b").get<double>()});
    for (const auto& r : j.at("soc_rows")) {
        SocRow s;
        s.k           = r.at("k").get<int>();
        s.j           = r.at("j").get<int>();
        s.linear      = vector_from_json(r.at("linear"));
        s.offset      = r.at("offset").get<double>();
        s.scale       = r.at("scale").get<double>();
        s.cone_matrix = matrix_from_json(r.at("cone_matrix"));
        s.cone_offset = vector_from_json(r.at("cone_offset"));
        s.rhs         = r.at("rhs").get<double>();
        s.finalize_flags();
        p.soc_rows.push_back(std::move(s));
    }
    p.validate();
    return p;
}

inline json to_json(const Solution& s) {
    return {{"status", to_string(s.status)},
            {"u_star", vector_to_json(s.u_star)},
            {"objective", s.objective},
            {"dual_objective", s.dual_objective},
            {"kkt", {{"primal", s.kkt.primal}, {"dual", s.kkt.dual}, {"gap", s.kkt.gap}}},
            {"certificate_residual", s.certificate_residual},
            {"iterations", s.iterations},
            {"wall_time", s.wall_time}};
}

// Fixed formatting so repeated runs produce byte-identical tables.
inline std::string fmt(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.10g", v);
    return buf;
}

// Round-trip exact formatting for data files.
inline std::string fmt_exact(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

/// CSV with header t,u_0..,y_1..; row t holds u_t and y_{t+1}.
inline std::string trajectory_csv(const Trajectory& tr) {
    std::ostringstream os;
    os << "t";
    for (Index i = 0; i < tr.U.rows(); ++i) os << ",u_" << i;
    for (Index i = 0; i < tr.Y.rows(); ++i) os << ",y_" << i + 1;
    os << "\n";
    for (Index t = 0; t < tr.length(); ++t) {
        os << t;
        for (Index i = 0; i < tr.U.rows(); ++i) os << "," << fmt_exact(tr.U(i, t));
        for (Index i = 0; i < tr.Y.rows(); ++i) os << "," << fmt_exact(tr.Y(i, t));
        os << "\n";
    }
    return os.str();
}

inline Trajectory trajectory_from_csv(const std::string& text) {
    std::istringstream is(text);
    std::string line;
    std::getline(is, line);
    Index nu = 0, ny = 0;
    {
        std::istringstream hs(line);
        std::string cell;
        while (std::getline(hs, cell, ',')) {
            if (cell.rfind("u_", 0) == 0) ++nu;
            else if (cell.rfind("y_", 0) == 0) ++ny;
        }
    }
    std::vector<std::vector<double>> rows;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        std::string cell;
        std::vector<double> vals;
        std::getline(ls, cell, ','); // t
        while (std::getline(ls, cell, ',')) vals.push_back(std::stod(cell));
        require(static_cast<Index>(vals.size()) == nu + ny, "trajectory_from_csv: ragged row");
        rows.push_back(std::move(vals));
    }
    Trajectory tr{Matrix(nu, static_cast<Index>(rows.size())), Matrix(ny, static_cast<Index>(rows.size()))};
    for (std::size_t t = 0; t < rows.size(); ++t) {
        for (Index i = 0; i < nu; ++i) tr.U(i, static_cast<Index>(t)) = rows[t][static_cast<std::size_t>(i)];
        for (Index i = 0; i < ny; ++i) tr.Y(i, static_cast<Index>(t)) = rows[t][static_cast<std::size_t>(nu + i)];
    }
    return tr;
}

inline void write_file(const std::string& path, const std::string& content) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write " + path);
    f << content;
}

inline std::string read_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot read " + path);
    std::ostringstream os;
    os << f.rdbuf();
    return os.str();
}

} // namespace smpc::io
