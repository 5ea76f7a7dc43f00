#pragma once

#include "magslam/types.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

namespace magslam {

/// Shortest decimal representation that round-trips a double exactly.
inline std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    // try shorter forms first so output stays readable where exact
    for (int prec = 1; prec < 17; ++prec) {
        char probe[40];
        std::snprintf(probe, sizeof(probe), "%.*g", prec, v);
        double back = 0.0;
        std::sscanf(probe, "%lf", &back);
        if (back == v) return probe;
    }
    return buf;
}

namespace csv {

inline std::vector<std::string> split_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : line) {
        if (c == ',') {
            out.push_back(cur);
            cur.clear();
        } else if (c != '\r') {
            cur += c;
        }
    }
    out.push_back(cur);
    return out;
}

inline double parse_double(const std::string& s, const std::string& file, int line_no,
                           const std::string& col) {
    try {
        size_t pos = 0;
        const double v = std::stod(s, &pos);
        while (pos < s.size() && (s[pos] == ' ' || s[pos] == '\t')) ++pos;
        if (pos != s.size()) throw std::invalid_argument("trailing characters");
        return v;
    } catch (const std::exception&) {
        throw InputError(file + ":" + std::to_string(line_no) + ": cannot parse '" + s +
                         "' as number in column " + col);
    }
}

/// Read a CSV file with the given header, returning rows of doubles.
inline std::vector<std::vector<double>> read_table(const std::string& path,
                                                   const std::string& expected_header) {
    std::ifstream in(path);
    if (!in) throw InputError("cannot open file: " + path);
    std::string line;
    if (!std::getline(in, line)) throw InputError(path + ": empty file");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line != expected_header)
        throw InputError(path + ":1: expected header '" + expected_header + "', got '" + line + "'");
    const auto cols = split_line(expected_header);
    std::vector<std::vector<double>> rows;
    int line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty() || line == "\r") continue;
        const auto fields = split_line(line);
        if (fields.size() != cols.size())
            throw InputError(path + ":" + std::to_string(line_no) + ": expected " +
                             std::to_string(cols.size()) + " fields, got " +
                             std::to_string(fields.size()));
        std::vector<double> row(fields.size());
        for (size_t i = 0; i < fields.size(); ++i)
            row[i] = parse_double(fields[i], path, line_no, cols[i]);
        rows.push_back(std::move(row));
    }
    return rows;
}

}  // namespace csv

inline const char* kImuHeader = "t,dq_w,dq_x,dq_y,dq_z,dv_x,dv_y,dv_z,T";
inline const char* kMagHeader = "t,mx,my,mz,sigma";

inline std::vector<ImuRecord> read_imu_csv(const std::string& path) {
    std::vector<ImuRecord> out;
    for (const auto& r : csv::read_table(path, kImuHeader)) {
        ImuRecord rec;
        rec.t = r[0];
        rec.dq = Quaternion{r[1], r[2], r[3], r[4]}.normalized();
        rec.dv = Vec3(r[5], r[6], r[7]);
        rec.T = r[8];
        rec.validate();
        out.push_back(rec);
    }
    return out;
}

inline std::vector<MagRecord> read_mag_csv(const std::string& path) {
    std::vector<MagRecord> out;
    for (const auto& r : csv::read_table(path, kMagHeader)) {
        MagRecord rec;
        rec.t = r[0];
        rec.y = Vec3(r[1], r[2], r[3]);
        rec.sigma = Vec3::Constant(r[4]);
        rec.validate();
        out.push_back(rec);
    }
    return out;
}

inline void write_imu_csv(const std::string& path, const std::vector<ImuRecord>& recs) {
    std::ofstream out(path);
    if (!out) throw InputError("cannot write file: " + path);
    out << kImuHeader << "\n";
    for (const auto& r : recs) {
        out << fmt_double(r.t) << ',' << fmt_double(r.dq.w) << ',' << fmt_double(r.dq.x) << ','
            << fmt_double(r.dq.y) << ',' << fmt_double(r.dq.z) << ',' << fmt_double(r.dv.x())
            << ',' << fmt_double(r.dv.y()) << ',' << fmt_double(r.dv.z()) << ','
            << fmt_double(r.T) << "\n";
    }
}

inline void write_mag_csv(const std::string& path, const std::vector<MagRecord>& recs) {
    std::ofstream out(path);
    if (!out) throw InputError("cannot write file: " + path);
    out << kMagHeader << "\n";
    for (const auto& r : recs) {
        out << fmt_double(r.t) << ',' << fmt_double(r.y.x()) << ',' << fmt_double(r.y.y()) << ','
            << fmt_double(r.y.z()) << ',' << fmt_double(r.sigma.x()) << "\n";
    }
}

}  // namespace magslam
