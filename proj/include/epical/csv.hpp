#ifndef EPICAL_CSV_HPP
#define EPICAL_CSV_HPP

#include <string>

#include "epical/simulate.hpp"

namespace epical {

/// Formats a real with 17 significant digits (round-trips a double exactly).
std::string format_real(double v);

/// Time-series CSV: header `day,<col>[,<col>...]`, one row per day.
void write_trajectory_csv(const Trajectory& traj, const std::string& path);
void write_dataset_csv(const Dataset& ds, const std::string& path);

/// Reads a time-series CSV back into a Dataset (all columns observed).
Dataset read_dataset_csv(const std::string& path);

} // namespace epical

#endif
