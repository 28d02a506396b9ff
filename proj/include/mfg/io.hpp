#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "mfg/common.hpp"
#include "mfg/measures.hpp"
#include "mfg/variational.hpp"

namespace mfg {

// ---------------------------------------------------------------------------
// CSV formats (UTF-8, header row, '.'-decimal doubles in shortest round-trip
// form so files are byte-reproducible and parse back exactly).
//
//   PathMeasure / MarginalFlow:  particle_id,weight,t,x1,...,xd
//     rows sorted by (particle_id, t), one row per (particle, node).
//   ValueGrid (+ feedback):      t,x1,...,xd,u,a1,...,ad
//     rows sorted by (t, node index).
// ---------------------------------------------------------------------------

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : line) {
        if (c == ',') {
            out.push_back(cur);
            cur.clear();
        } else if (c != '\r') {
            cur.push_back(c);
        }
    }
    out.push_back(cur);
    return out;
}

inline std::ofstream open_out(const std::string& path) {
    std::ofstream f(path, std::ios::binary);  // binary: no platform newline translation
    if (!f) throw io_error("cannot open for writing: " + path);
    return f;
}

inline std::ifstream open_in(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw io_error("cannot open for reading: " + path);
    return f;
}

}  // namespace detail

inline void write_path_measure_csv(const std::string& path, const PathMeasure& m) {
    auto f = detail::open_out(path);
    int d = m.dim();
    f << "particle_id,weight,t";
    for (int i = 1; i <= d; ++i) f << ",x" << i;
    f << "\n";
    for (int p = 0; p < m.size(); ++p) {
        const auto& part = m.particle(p);
        for (int k = 0; k < m.grid().nodes(); ++k) {
            f << p << ',' << format_double(part.weight) << ',' << format_double(m.grid().node(k));
            for (int i = 0; i < d; ++i) f << ',' << format_double(part.path.point(k)[i]);
            f << "\n";
        }
    }
    if (!f) throw io_error("write failed: " + path);
}

inline PathMeasure read_path_measure_csv(const std::string& path) {
    auto f = detail::open_in(path);
    std::string line;
    require(static_cast<bool>(std::getline(f, line)), "empty CSV: " + path);
    auto header = detail::split_csv_line(line);
    require(header.size() >= 4 && header[0] == "particle_id" && header[1] == "weight" &&
                header[2] == "t",
            "bad PathMeasure header in " + path);
    int d = static_cast<int>(header.size()) - 3;
    struct Row {
        long id;
        double w, t;
        std::vector<double> x;
    };
    std::vector<Row> rows;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        auto cells = detail::split_csv_line(line);
        require(cells.size() == header.size(), "bad row width in " + path);
        Row r;
        r.id = parse_long(cells[0]);
        r.w = parse_double(cells[1]);
        r.t = parse_double(cells[2]);
        r.x.resize(d);
        for (int i = 0; i < d; ++i) r.x[i] = parse_double(cells[3 + i]);
        rows.push_back(std::move(r));
    }
    require(!rows.empty(), "no data rows in " + path);
    // group rows per particle (file is sorted by particle_id, t)
    std::vector<double> times;
    for (const auto& r : rows) {
        if (r.id != rows[0].id) break;
        times.push_back(r.t);
    }
    TimeGrid grid = TimeGrid::from_nodes(times);
    size_t per = times.size();
    require(rows.size() % per == 0, "ragged particle blocks in " + path);
    int n = static_cast<int>(rows.size() / per);
    std::vector<PathParticle> parts(n);
    double wsum = 0.0;
    for (int p = 0; p < n; ++p) {
        Trajectory tr(grid, d);
        for (size_t k = 0; k < per; ++k) {
            const Row& r = rows[p * per + k];
            require(r.id == rows[p * per].id, "rows not sorted by particle in " + path);
            std::copy(r.x.begin(), r.x.end(), tr.point(static_cast<int>(k)));
        }
        parts[p].initial = rows[p * per].x;
        parts[p].path = std::move(tr);
        parts[p].weight = rows[p * per].w;
        wsum += parts[p].weight;
    }
    require(std::abs(wsum - 1.0) <= kWeightTol, "PathMeasure weights must sum to 1 in " + path);
    return PathMeasure(grid, d, std::move(parts));
}

inline void write_marginal_flow_csv(const std::string& path, const MarginalFlow& flow) {
    auto f = detail::open_out(path);
    int d = flow.dim();
    f << "particle_id,weight,t";
    for (int i = 1; i <= d; ++i) f << ",x" << i;
    f << "\n";
    // sorted by (particle_id, t): iterate ids outer so ties follow the contract
    int max_id = 0;
    for (int k = 0; k < flow.slices(); ++k) max_id = std::max(max_id, flow.slice(k).size());
    for (int p = 0; p < max_id; ++p)
        for (int k = 0; k < flow.slices(); ++k) {
            const ParticleMeasure& s = flow.slice(k);
            if (p >= s.size()) continue;
            f << p << ',' << format_double(s.weight(p)) << ','
              << format_double(flow.grid().node(k));
            for (int i = 0; i < d; ++i) f << ',' << format_double(s.point(p)[i]);
            f << "\n";
        }
    if (!f) throw io_error("write failed: " + path);
}

inline MarginalFlow read_marginal_flow_csv(const std::string& path) {
    auto f = detail::open_in(path);
    std::string line;
    require(static_cast<bool>(std::getline(f, line)), "empty CSV: " + path);
    auto header = detail::split_csv_line(line);
    require(header.size() >= 4 && header[0] == "particle_id" && header[1] == "weight" &&
                header[2] == "t",
            "bad MarginalFlow header in " + path);
    int d = static_cast<int>(header.size()) - 3;
    std::map<double, std::vector<std::pair<std::vector<double>, double>>> slices;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        auto cells = detail::split_csv_line(line);
        require(cells.size() == header.size(), "bad row width in " + path);
        double w = parse_double(cells[1]);
        double t = parse_double(cells[2]);
        std::vector<double> x(d);
        for (int i = 0; i < d; ++i) x[i] = parse_double(cells[3 + i]);
        slices[t].emplace_back(std::move(x), w);
    }
    require(!slices.empty(), "no data rows in " + path);
    std::vector<double> times;
    for (const auto& kv : slices) times.push_back(kv.first);
    TimeGrid grid = TimeGrid::from_nodes(times);
    std::vector<ParticleMeasure> out;
    for (const auto& kv : slices) {
        std::vector<double> pts, w;
        for (const auto& pw : kv.second) {
            pts.insert(pts.end(), pw.first.begin(), pw.first.end());
            w.push_back(pw.second);
        }
        double s = 0.0;
        for (double v : w) s += v;
        require(std::abs(s - 1.0) <= kWeightTol,
                "slice at t=" + format_double(kv.first) + " is not normalized in " + path);
        out.emplace_back(d, std::move(pts), std::move(w));
    }
    return MarginalFlow(grid, d, std::move(out));
}

inline void write_value_grid_csv(const std::string& path, const ValueGrid& vg,
                                 const FeedbackGrid& fb) {
    auto f = detail::open_out(path);
    int d = vg.space().dim();
    f << "t";
    for (int i = 1; i <= d; ++i) f << ",x" << i;
    f << ",u";
    for (int i = 1; i <= d; ++i) f << ",a" << i;
    f << "\n";
    std::vector<double> x(d);
    for (int k = 0; k < vg.time().nodes(); ++k)
        for (long id = 0; id < vg.space().size(); ++id) {
            vg.space().node_point(id, x.data());
            f << format_double(vg.time().node(k));
            for (int i = 0; i < d; ++i) f << ',' << format_double(x[i]);
            f << ',' << format_double(vg.at(k, id));
            const double* a = fb.at(k, id);
            for (int i = 0; i < d; ++i) f << ',' << format_double(a[i]);
            f << "\n";
        }
    if (!f) throw io_error("write failed: " + path);
}

// ---------------------------------------------------------------------------
// Run manifests: plain text key = value lines plus the embedded scenario, so
// a report can be reproduced from the manifest alone.
// ---------------------------------------------------------------------------

class Manifest {
public:
    void set(const std::string& key, const std::string& value) {
        rows_.emplace_back(key, value);
    }
    void set(const std::string& key, double value) { set(key, format_double(value)); }
    void set(const std::string& key, long value) { set(key, std::to_string(value)); }
    void set(const std::string& key, int value) { set(key, std::to_string(value)); }

    void set_block(const std::string& key, const std::string& text) {
        blocks_.emplace_back(key, text);
    }

    void write(const std::string& path) const {
        auto f = detail::open_out(path);
        for (const auto& [k, v] : rows_) f << k << " = " << v << "\n";
        for (const auto& [k, text] : blocks_) {
            f << "[" << k << "]\n";
            std::istringstream in(text);
            std::string line;
            while (std::getline(in, line)) f << "  " << line << "\n";
            f << "[/" << k << "]\n";
        }
        if (!f) throw io_error("write failed: " + path);
    }

private:
    std::vector<std::pair<std::string, std::string>> rows_;
    std::vector<std::pair<std::string, std::string>> blocks_;
};

inline void ensure_dir(const std::string& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw io_error("cannot create output directory " + dir + ": " + ec.message());
}

}  // namespace mfg
