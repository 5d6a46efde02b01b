#ifndef EPICAL_OBJECTIVE_HPP
#define EPICAL_OBJECTIVE_HPP

#include <atomic>
#include <cstdint>
#include <functional>
#include <memory>

#include "epical/simulate.hpp"

namespace epical {

/// Finite penalty returned instead of an SSR when the simulation blows up;
/// chosen far above any attainable SSR (<= days * N^2) so derivative-free
/// methods can keep moving.
constexpr double kPenaltyLoss = 1e18;

Vector lower_bounds(const ModelSpec& spec);
Vector upper_bounds(const ModelSpec& spec);

/// Binding of a model, a dataset and a loss definition. Copies share the
/// evaluation counter; loss/residuals/mae are pure apart from that counter.
struct CalibrationProblem {
    ModelSpec spec;
    Dataset dataset;
    int train_days = 0;                   ///< loss uses dataset rows [0, train_days)
    std::vector<std::string> fit_columns; ///< dataset columns entering the SSR
    std::string eval_compartment = "I";   ///< compartment scored by mae()
    IntegratorSettings integrator;

    std::shared_ptr<std::atomic<std::int64_t>> evaluations =
        std::make_shared<std::atomic<std::int64_t>>(0);

    std::int64_t evaluation_count() const { return evaluations->load(); }
    /// Dataset columns scored by mae(): `eval_compartment` itself, or every
    /// `<comp>_<group>` column of it for subgroup models.
    std::vector<std::string> eval_columns() const;
};

/// Validates and assembles a problem. `fit_columns` empty means "every
/// observed column of the eval compartment"; an explicitly empty fit set is a
/// ValidationError at loss time.
CalibrationProblem make_problem(const ModelSpec& spec, const Dataset& dataset,
                                int train_days,
                                std::vector<std::string> fit_columns = {},
                                std::string eval_compartment = "I",
                                IntegratorSettings integrator = {});

struct LossValue {
    double ssr = 0.0;
    bool penalty = false; ///< simulation blew up; ssr is kPenaltyLoss
    bool clamped = false; ///< params were clamped into bounds before evaluating
};

/// Sum of squared residuals over fit columns and training days.
LossValue loss(const CalibrationProblem& problem, const Vector& params);

/// Per-(day, column) residuals, day-major and fit-column-minor:
/// r[d*k + c] = simulated(d, c) - observed(d, c) for d < train_days.
Vector residuals(const CalibrationProblem& problem, const Vector& params);

/// Mean absolute error of the eval compartment over every dataset day
/// (training and held out). `train_window_only` restricts to the loss window.
double mae(const CalibrationProblem& problem, const Vector& params,
           bool train_window_only = false);

/// Central-difference gradient of an arbitrary boxed function; one-sided at
/// active bounds (flagged through `one_sided` when given). Step per dimension
/// is rel_step * (1 + |x_i|).
Vector fd_gradient(const std::function<double(const Vector&)>& f, const Vector& x,
                   const Vector& lower, const Vector& upper, double rel_step = 1e-6,
                   std::vector<int>* one_sided = nullptr);

/// Central-difference Jacobian of a vector-valued boxed function.
Matrix fd_jacobian(const std::function<Vector(const Vector&)>& f, const Vector& x,
                   const Vector& lower, const Vector& upper, double rel_step = 1e-6,
                   std::vector<int>* one_sided = nullptr);

Vector finite_difference_gradient(const CalibrationProblem& problem, const Vector& params,
                                  double rel_step = 1e-6,
                                  std::vector<int>* one_sided = nullptr);
Matrix finite_difference_jacobian(const CalibrationProblem& problem, const Vector& params,
                                  double rel_step = 1e-6,
                                  std::vector<int>* one_sided = nullptr);

/// What the optimization engines consume: a scalar loss, optional residuals
/// for the least-squares family, and finite box bounds.
struct BoxedObjective {
    std::function<double(const Vector&)> value;
    std::function<Vector(const Vector&)> residual_fn; ///< may be empty
    Vector lower;
    Vector upper;

    Eigen::Index dim() const { return lower.size(); }
    bool has_residuals() const { return static_cast<bool>(residual_fn); }
    Vector clamp(const Vector& x) const { return x.cwiseMax(lower).cwiseMin(upper); }
};

/// Adapts a calibration problem to the engine interface.
BoxedObjective as_objective(const CalibrationProblem& problem);

} // namespace epical

#endif
