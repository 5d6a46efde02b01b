#ifndef EPICAL_SIMULATE_HPP
#define EPICAL_SIMULATE_HPP

#include <cstdint>
#include <string>
#include <vector>

#include "epical/model.hpp"

namespace epical {

enum class Stepper { Rk4, Euler };

struct IntegratorSettings {
    int steps_per_day = 10;
    Stepper stepper = Stepper::Rk4;
};

/// Daily compartment counts, day 0 .. horizon inclusive; one column per slot.
struct Trajectory {
    std::vector<std::string> slots;
    Matrix values; ///< (horizon+1) x slots
    double population = 0.0;

    int horizon() const { return static_cast<int>(values.rows()) - 1; }
    int slot_index(const std::string& name) const;
    Vector series(const std::string& slot) const { return values.col(slot_index(slot)); }
};

/// Observed time series for a subset of compartments, possibly noisy.
struct Dataset {
    std::string source_id;
    std::vector<std::string> columns; ///< observed slot names
    Matrix values;                    ///< (horizon+1) x columns
    double noise_sigma = 0.0;
    std::uint64_t seed = 0;
    int train_cutoff_day = 0;
    int clamped_count = 0; ///< entries that went negative pre-clamp

    int days() const { return static_cast<int>(values.rows()); }
    int column_index(const std::string& name) const;
};

/// Training-window split around the infection peak.
struct RegimeSplit {
    int peak_day = 0;
    int low_cutoff = 0;  ///< train days for the pre-peak regime
    int high_cutoff = 0; ///< train days for the post-peak regime
};

/// Fixed-step integration of the model ODEs, sampled at integer days.
/// Euler with steps_per_day = 1 reproduces the plain per-day update
/// X(t+1) = X(t) + f(X(t)). Throws IntegrationError (naming the day) if the
/// state becomes non-finite. Tiny negative excursions are clamped to 0 in the
/// output.
Trajectory integrate(const ModelSpec& spec, const Vector& params, int horizon_days,
                     const IntegratorSettings& settings = {});

/// Adds independent Gaussian(0, sigma) noise to the observed slots of `traj`
/// and clamps negatives to 0. Deterministic per (traj, sigma, seed). The
/// returned dataset's train_cutoff_day defaults to the full horizon.
Dataset add_noise(const Trajectory& traj, double sigma, std::uint64_t seed,
                  const std::vector<std::string>& observed);

/// Locates the argmax day of a compartment series (first index on ties) and
/// derives the training cutoffs: low = peak_day, high = min(horizon,
/// peak_day + high_margin). Throws DegenerateSeriesError for an all-zero
/// series or a peak at the end of the horizon.
RegimeSplit find_peak(const Trajectory& traj, const std::string& slot, int high_margin = 40);
RegimeSplit find_peak(const Vector& series, int high_margin = 40);

} // namespace epical

#endif
