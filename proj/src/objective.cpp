#include "epical/objective.hpp"

#include <algorithm>
#include <cmath>

namespace epical {

Vector lower_bounds(const ModelSpec& spec) {
    Vector lb(static_cast<Eigen::Index>(spec.params.size()));
    for (std::size_t i = 0; i < spec.params.size(); ++i) lb[i] = spec.params[i].lower;
    return lb;
}

Vector upper_bounds(const ModelSpec& spec) {
    Vector ub(static_cast<Eigen::Index>(spec.params.size()));
    for (std::size_t i = 0; i < spec.params.size(); ++i) ub[i] = spec.params[i].upper;
    return ub;
}

std::vector<std::string> CalibrationProblem::eval_columns() const {
    std::vector<std::string> cols;
    for (const auto& c : dataset.columns)
        if (c == eval_compartment || c.rfind(eval_compartment + "_", 0) == 0)
            cols.push_back(c);
    return cols;
}

CalibrationProblem make_problem(const ModelSpec& spec, const Dataset& dataset,
                                int train_days, std::vector<std::string> fit_columns,
                                std::string eval_compartment,
                                IntegratorSettings integrator) {
    for (const auto& v : validate(spec))
        if (v.severity == Severity::Error)
            throw ValidationError("invalid model spec: " + v.field + ": " + v.message);
    if (train_days < 3 || train_days > dataset.days())
        throw ValidationError("train_days must be in [3, dataset days]; got " +
                              std::to_string(train_days));

    CalibrationProblem p;
    p.spec = spec;
    p.dataset = dataset;
    p.train_days = train_days;
    p.eval_compartment = std::move(eval_compartment);
    p.integrator = integrator;

    const auto slots = spec.slot_names();
    for (const auto& col : dataset.columns)
        if (std::find(slots.begin(), slots.end(), col) == slots.end())
            throw ValidationError("dataset column '" + col +
                                  "' is not a compartment of model " + to_string(spec.kind));

    if (fit_columns.empty()) fit_columns = p.eval_columns();
    for (const auto& col : fit_columns) dataset.column_index(col); // must be observed
    p.fit_columns = std::move(fit_columns);

    if (p.fit_columns.empty())
        throw ValidationError("no fit columns: dataset observes none of '" +
                              p.eval_compartment + "'");
    if (p.eval_columns().empty())
        throw ValidationError("eval compartment '" + p.eval_compartment +
                              "' is not observed by the dataset");
    return p;
}

namespace {

struct SimResult {
    Trajectory traj;
    bool penalty = false;
    bool clamped = false;
};

Vector clamp_params(const CalibrationProblem& p, const Vector& params, bool& clamped) {
    const Vector lb = lower_bounds(p.spec);
    const Vector ub = upper_bounds(p.spec);
    Vector out = params.cwiseMax(lb).cwiseMin(ub);
    clamped = (out - params).cwiseAbs().maxCoeff() > 0.0;
    return out;
}

/// One counted simulation over `horizon` days; penalty flag instead of a
/// throw on blow-up.
SimResult simulate_counted(const CalibrationProblem& p, const Vector& params, int horizon) {
    SimResult r;
    const Vector use = clamp_params(p, params, r.clamped);
    p.evaluations->fetch_add(1, std::memory_order_relaxed);
    try {
        r.traj = integrate(p.spec, use, horizon, p.integrator);
    } catch (const IntegrationError&) {
        r.penalty = true;
    }
    return r;
}

} // namespace

LossValue loss(const CalibrationProblem& problem, const Vector& params) {
    if (problem.fit_columns.empty()) throw ValidationError("problem has no fit columns");
    const SimResult sim = simulate_counted(problem, params, problem.train_days - 1);
    LossValue out;
    out.clamped = sim.clamped;
    if (sim.penalty) {
        out.ssr = kPenaltyLoss;
        out.penalty = true;
        return out;
    }
    double ssr = 0.0;
    for (const auto& col : problem.fit_columns) {
        const int c_obs = problem.dataset.column_index(col);
        const int c_sim = sim.traj.slot_index(col);
        for (int d = 0; d < problem.train_days; ++d) {
            const double r = sim.traj.values(d, c_sim) - problem.dataset.values(d, c_obs);
            ssr += r * r;
        }
    }
    out.ssr = ssr;
    return out;
}

Vector residuals(const CalibrationProblem& problem, const Vector& params) {
    if (problem.fit_columns.empty()) throw ValidationError("problem has no fit columns");
    const int k = static_cast<int>(problem.fit_columns.size());
    Vector r(static_cast<Eigen::Index>(problem.train_days) * k);

    const SimResult sim = simulate_counted(problem, params, problem.train_days - 1);
    if (sim.penalty) {
        // Spread the penalty so that ||r||^2 == kPenaltyLoss.
        r.setConstant(std::sqrt(kPenaltyLoss / static_cast<double>(r.size())));
        return r;
    }
    for (int c = 0; c < k; ++c) {
        const int c_obs = problem.dataset.column_index(problem.fit_columns[c]);
        const int c_sim = sim.traj.slot_index(problem.fit_columns[c]);
        for (int d = 0; d < problem.train_days; ++d)
            r[static_cast<Eigen::Index>(d) * k + c] =
                sim.traj.values(d, c_sim) - problem.dataset.values(d, c_obs);
    }
    return r;
}

double mae(const CalibrationProblem& problem, const Vector& params, bool train_window_only) {
    const auto cols = problem.eval_columns();
    const int days = train_window_only ? problem.train_days : problem.dataset.days();
    const SimResult sim = simulate_counted(problem, params, problem.dataset.days() - 1);
    if (sim.penalty) return kPenaltyLoss;

    double acc = 0.0;
    for (const auto& col : cols) {
        const int c_obs = problem.dataset.column_index(col);
        const int c_sim = sim.traj.slot_index(col);
        for (int d = 0; d < days; ++d)
            acc += std::abs(sim.traj.values(d, c_sim) - problem.dataset.values(d, c_obs));
    }
    return acc / (static_cast<double>(days) * cols.size());
}

Vector fd_gradient(const std::function<double(const Vector&)>& f, const Vector& x,
                   const Vector& lower, const Vector& upper, double rel_step,
                   std::vector<int>* one_sided) {
    const Eigen::Index n = x.size();
    Vector grad(n);
    if (one_sided) one_sided->assign(n, 0);
    for (Eigen::Index i = 0; i < n; ++i) {
        const double h = rel_step * (1.0 + std::abs(x[i]));
        Vector hi = x, lo = x;
        const bool can_up = x[i] + h <= upper[i];
        const bool can_down = x[i] - h >= lower[i];
        if (can_up && can_down) {
            hi[i] += h;
            lo[i] -= h;
            grad[i] = (f(hi) - f(lo)) / (2.0 * h);
        } else if (can_up) {
            hi[i] += h;
            grad[i] = (f(hi) - f(x)) / h;
            if (one_sided) (*one_sided)[i] = 1;
        } else {
            lo[i] -= h;
            grad[i] = (f(x) - f(lo)) / h;
            if (one_sided) (*one_sided)[i] = 1;
        }
    }
    return grad;
}

Matrix fd_jacobian(const std::function<Vector(const Vector&)>& f, const Vector& x,
                   const Vector& lower, const Vector& upper, double rel_step,
                   std::vector<int>* one_sided) {
    const Eigen::Index n = x.size();
    Matrix jac;
    if (one_sided) one_sided->assign(n, 0);
    for (Eigen::Index i = 0; i < n; ++i) {
        const double h = rel_step * (1.0 + std::abs(x[i]));
        Vector hi = x, lo = x;
        Vector column;
        const bool can_up = x[i] + h <= upper[i];
        const bool can_down = x[i] - h >= lower[i];
        if (can_up && can_down) {
            hi[i] += h;
            lo[i] -= h;
            column = (f(hi) - f(lo)) / (2.0 * h);
        } else if (can_up) {
            hi[i] += h;
            column = (f(hi) - f(x)) / h;
            if (one_sided) (*one_sided)[i] = 1;
        } else {
            lo[i] -= h;
            column = (f(x) - f(lo)) / h;
            if (one_sided) (*one_sided)[i] = 1;
        }
        if (jac.size() == 0) jac.resize(column.size(), n);
        jac.col(i) = column;
    }
    return jac;
}

Vector finite_difference_gradient(const CalibrationProblem& problem, const Vector& params,
                                  double rel_step, std::vector<int>* one_sided) {
    return fd_gradient([&](const Vector& x) { return loss(problem, x).ssr; }, params,
                       lower_bounds(problem.spec), upper_bounds(problem.spec), rel_step,
                       one_sided);
}

Matrix finite_difference_jacobian(const CalibrationProblem& problem, const Vector& params,
                                  double rel_step, std::vector<int>* one_sided) {
    return fd_jacobian([&](const Vector& x) { return residuals(problem, x); }, params,
                       lower_bounds(problem.spec), upper_bounds(problem.spec), rel_step,
                       one_sided);
}

BoxedObjective as_objective(const CalibrationProblem& problem) {
    BoxedObjective obj;
    obj.value = [problem](const Vector& x) { return loss(problem, x).ssr; };
    obj.residual_fn = [problem](const Vector& x) { return residuals(problem, x); };
    obj.lower = lower_bounds(problem.spec);
    obj.upper = upper_bounds(problem.spec);
    return obj;
}

} // namespace epical
