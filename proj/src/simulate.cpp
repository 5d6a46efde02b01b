#include "epical/simulate.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace epical {

int Trajectory::slot_index(const std::string& name) const {
    const auto it = std::find(slots.begin(), slots.end(), name);
    if (it == slots.end()) throw ValidationError("trajectory has no slot '" + name + "'");
    return static_cast<int>(it - slots.begin());
}

int Dataset::column_index(const std::string& name) const {
    const auto it = std::find(columns.begin(), columns.end(), name);
    if (it == columns.end()) throw ValidationError("dataset has no column '" + name + "'");
    return static_cast<int>(it - columns.begin());
}

Trajectory integrate(const ModelSpec& spec, const Vector& params, int horizon_days,
                     const IntegratorSettings& settings) {
    if (horizon_days < 1) throw ValidationError("horizon must be >= 1 day");
    if (settings.steps_per_day < 1) throw ValidationError("steps_per_day must be >= 1");

    Trajectory traj;
    traj.slots = spec.slot_names();
    traj.population = spec.population;
    const int n = spec.compartment_count();
    traj.values.resize(horizon_days + 1, n);

    Matrix mixing;
    const Matrix* mixing_ptr = nullptr;
    if (spec.kind == ModelKind::SirSubgroups) {
        mixing = effective_contact_matrix(*spec.contact);
        mixing_ptr = &mixing;
    }

    Vector state = spec.initial_state();
    Vector k1(n), k2(n), k3(n), k4(n), tmp(n);
    const double dt = 1.0 / settings.steps_per_day;

    // rhs rejects negative inputs; RK4 stage points can dip fractionally below
    // zero near extinction, so stages evaluate on a zero-floored copy.
    auto eval = [&](const Vector& x, Vector& out) {
        tmp = x.cwiseMax(0.0);
        rhs(spec, params, tmp, out, mixing_ptr);
    };

    traj.values.row(0) = state.cwiseMax(0.0).transpose();
    for (int day = 1; day <= horizon_days; ++day) {
        for (int sub = 0; sub < settings.steps_per_day; ++sub) {
            if (settings.stepper == Stepper::Euler) {
                eval(state, k1);
                state += dt * k1;
            } else {
                eval(state, k1);
                tmp = state + 0.5 * dt * k1;
                eval(tmp, k2);
                tmp = state + 0.5 * dt * k2;
                eval(tmp, k3);
                tmp = state + dt * k3;
                eval(tmp, k4);
                state += (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
            }
            if (!state.allFinite())
                throw IntegrationError("integration blew up on day " + std::to_string(day),
                                       day);
        }
        traj.values.row(day) = state.cwiseMax(0.0).transpose();
    }
    return traj;
}

Dataset add_noise(const Trajectory& traj, double sigma, std::uint64_t seed,
                  const std::vector<std::string>& observed) {
    if (sigma < 0.0) throw ValidationError("noise sigma must be >= 0");

    Dataset ds;
    ds.source_id = "trajectory";
    ds.columns = observed;
    ds.noise_sigma = sigma;
    ds.seed = seed;
    ds.train_cutoff_day = traj.horizon();

    const int days = traj.horizon() + 1;
    const int k = static_cast<int>(observed.size());
    ds.values.resize(days, k);
    for (int c = 0; c < k; ++c) ds.values.col(c) = traj.series(observed[c]);

    if (sigma == 0.0) return ds;

    std::mt19937_64 rng(seed);
    std::normal_distribution<double> gauss(0.0, sigma);
    for (int d = 0; d < days; ++d)
        for (int c = 0; c < k; ++c) {
            const double noisy = ds.values(d, c) + gauss(rng);
            if (noisy < 0.0) ++ds.clamped_count;
            ds.values(d, c) = std::max(0.0, noisy);
        }
    return ds;
}

RegimeSplit find_peak(const Vector& series, int high_margin) {
    if (series.size() == 0 || series.maxCoeff() <= 0.0)
        throw DegenerateSeriesError("series is empty or all zero, no peak to locate");

    int peak_day = 0;
    double best = series[0];
    for (Eigen::Index d = 1; d < series.size(); ++d)
        if (series[d] > best) {
            best = series[d];
            peak_day = static_cast<int>(d);
        }

    const int horizon = static_cast<int>(series.size()) - 1;
    if (peak_day == horizon && horizon > 0)
        throw DegenerateSeriesError("peak sits at the end of the horizon; no post-peak data");

    RegimeSplit split;
    split.peak_day = peak_day;
    split.low_cutoff = peak_day;
    split.high_cutoff = std::min(horizon, peak_day + high_margin);
    return split;
}

RegimeSplit find_peak(const Trajectory& traj, const std::string& slot, int high_margin) {
    return find_peak(Vector(traj.series(slot)), high_margin);
}

} // namespace epical
