#ifndef EPICAL_OPTIMIZE_HPP
#define EPICAL_OPTIMIZE_HPP

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "epical/objective.hpp"

namespace epical {

enum class Method {
    NelderMead,
    Powell,
    Cg,
    Bfgs,
    Lbfgsb,
    LevenbergMarquardt,
    TrfLeastSquares,
    DifferentialEvolution,
    BasinHopping,
    DualAnnealing,
    BruteForce,
};

/// Registry row. Out-of-scope entries are recognized names that dispatch
/// rejects instead of silently aliasing to a neighboring method.
struct MethodInfo {
    std::string name;         ///< kebab-case config/CLI spelling
    std::string display_name; ///< label used in rendered tables
    bool implemented;
    std::string note;
};

const std::vector<MethodInfo>& method_registry();
std::string to_string(Method method);
std::string display_name(Method method);

/// Parses a registry name. Throws UnimplementedByDesign for recognized but
/// out-of-scope names (amp, shgo, slsqp, tnc), ValidationError for unknowns.
Method method_from_string(const std::string& name);

enum class FitStatus { Converged, BudgetExhausted, Stalled, PenaltyRegion };
std::string to_string(FitStatus status);

struct FitOptions {
    std::int64_t max_evaluations = 20000;
    double tolerance = 1e-10; ///< on loss change
    std::uint64_t seed = 0;
    int max_iterations = 0; ///< 0 = method default
    bool keep_trace = true;

    // Method-specific knobs; defaults are standard literature values.
    int population_size = 0;          ///< DE, 0 = 15 * dim
    double de_mutation = 0.7;         ///< DE F
    double de_crossover = 0.9;        ///< DE CR
    int hop_count = 100;              ///< basin hopping
    double hop_scale = 0.1;           ///< hop sigma as fraction of bound width
    double hop_temperature = 1.0;     ///< Metropolis temperature
    double anneal_initial_temp = 10.0;
    double anneal_cooling = 0.995;    ///< geometric temperature decay per move
    int anneal_polish_interval = 200; ///< moves between local polishes
    int grid_points = 21;             ///< brute force, per dimension
    int lbfgs_memory = 10;
    double lm_lambda0 = 1e-3;
};

struct FitResult {
    Vector params;
    double loss = 0.0;
    double mae_full_horizon = 0.0; ///< NaN when not fit against a dataset
    std::int64_t evaluations = 0;
    int iterations = 0;
    FitStatus status = FitStatus::Converged;
    bool penalty = false;            ///< best point still sits in the blow-up region
    std::vector<int> active_bounds;  ///< parameter indices pinned at a bound
    std::vector<double> trace;       ///< best loss per iteration, nonincreasing
    std::string method;
};

enum class X0Strategy { SeededUniform, Center, Given };

/// Starting point inside the box: uniform per-dimension draw, bound
/// midpoints, or a caller-provided vector (clamped).
Vector make_x0(const Vector& lower, const Vector& upper, X0Strategy strategy,
               std::uint64_t seed, const Vector* given = nullptr);
Vector make_x0(const CalibrationProblem& problem, X0Strategy strategy, std::uint64_t seed,
               const Vector* given = nullptr);

/// Core dispatch over any boxed objective. Global methods ignore x0 (pass
/// nullptr); local and least-squares methods require an in-bounds x0.
FitResult minimize(const BoxedObjective& objective, Method method, const Vector* x0,
                   const FitOptions& options);

/// Derivative-free and gradient-based local search:
/// NelderMead | Powell | Cg | Bfgs | Lbfgsb.
FitResult minimize_local(const CalibrationProblem& problem, Method method, const Vector& x0,
                         const FitOptions& options = {});

/// Residual-based solvers: LevenbergMarquardt | TrfLeastSquares.
FitResult least_squares(const CalibrationProblem& problem, Method method, const Vector& x0,
                        const FitOptions& options = {});

/// Population/stochastic global search:
/// DifferentialEvolution | BasinHopping | DualAnnealing | BruteForce.
FitResult minimize_global(const CalibrationProblem& problem, Method method,
                          const FitOptions& options = {});

/// Family-agnostic entry point used by the CLI and the benchmark harness:
/// routes to the right op, scores full-horizon MAE and audits the loss.
FitResult calibrate(const CalibrationProblem& problem, Method method,
                    const FitOptions& options = {},
                    const std::optional<Vector>& x0 = std::nullopt);

} // namespace epical

#endif
