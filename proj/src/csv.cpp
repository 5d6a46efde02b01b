#include "epical/csv.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>
#include <vector>

namespace epical {

std::string format_real(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

namespace {

void write_series_csv(const std::vector<std::string>& columns, const Matrix& values,
                      const std::string& path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot open '" + path + "' for writing");
    out << "day";
    for (const auto& c : columns) out << ',' << c;
    out << '\n';
    for (Eigen::Index d = 0; d < values.rows(); ++d) {
        out << d;
        for (Eigen::Index c = 0; c < values.cols(); ++c)
            out << ',' << format_real(values(d, c));
        out << '\n';
    }
    if (!out) throw IoError("failed while writing '" + path + "'");
}

} // namespace

void write_trajectory_csv(const Trajectory& traj, const std::string& path) {
    write_series_csv(traj.slots, traj.values, path);
}

void write_dataset_csv(const Dataset& ds, const std::string& path) {
    write_series_csv(ds.columns, ds.values, path);
}

Dataset read_dataset_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open '" + path + "' for reading");

    std::string line;
    if (!std::getline(in, line)) throw ValidationError("empty CSV file '" + path + "'");
    if (!line.empty() && line.back() == '\r') line.pop_back();

    Dataset ds;
    ds.source_id = path;
    {
        std::stringstream header(line);
        std::string cell;
        bool first = true;
        while (std::getline(header, cell, ',')) {
            if (first) {
                if (cell != "day")
                    throw ValidationError("CSV '" + path + "': first column must be 'day'");
                first = false;
            } else {
                ds.columns.push_back(cell);
            }
        }
    }
    if (ds.columns.empty())
        throw ValidationError("CSV '" + path + "' has no data columns");

    std::vector<std::vector<double>> rows;
    int expected_day = 0;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string cell;
        std::vector<double> row;
        bool first = true;
        while (std::getline(ss, cell, ',')) {
            double v;
            try {
                v = std::stod(cell);
            } catch (const std::exception&) {
                throw ValidationError("CSV '" + path + "': bad number '" + cell + "'");
            }
            if (first) {
                if (static_cast<int>(v) != expected_day)
                    throw ValidationError("CSV '" + path + "': days must run 0,1,2,...");
                first = false;
            } else {
                row.push_back(v);
            }
        }
        if (row.size() != ds.columns.size())
            throw ValidationError("CSV '" + path + "': row " + std::to_string(expected_day) +
                                  " has wrong column count");
        rows.push_back(std::move(row));
        ++expected_day;
    }
    if (rows.size() < 2) throw ValidationError("CSV '" + path + "' needs at least 2 days");

    ds.values.resize(static_cast<Eigen::Index>(rows.size()),
                     static_cast<Eigen::Index>(ds.columns.size()));
    for (std::size_t d = 0; d < rows.size(); ++d)
        for (std::size_t c = 0; c < rows[d].size(); ++c)
            ds.values(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(c)) =
                rows[d][c];
    ds.train_cutoff_day = static_cast<int>(rows.size()) - 1;
    return ds;
}

} // namespace epical
