#include "epical/optimize.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <limits>
#include <random>

namespace epical {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

const std::vector<MethodInfo> kRegistry = {
    {"nelder-mead", "Nelder-Mead", true, "simplex direct search"},
    {"powell", "Powell", true, "direction-set line searches"},
    {"cg", "CG", true, "nonlinear conjugate gradient (finite-difference gradients)"},
    {"bfgs", "BFGS", true, "quasi-Newton (finite-difference gradients)"},
    {"l-bfgs-b", "L-BFGS-B", true, "limited-memory quasi-Newton, projected bounds"},
    {"levenberg-marquardt", "Least-squares", true, "damped least squares"},
    {"trf-least-squares", "Trust-region least-squares", true,
     "bounded least squares with reflective steps"},
    {"differential-evolution", "Differential Evolution", true, "rand/1/bin"},
    {"basin-hopping", "Basinhopping", true, "random hops + local polish"},
    {"dual-annealing", "Dual Annealing", true, "annealing schedule + local polish"},
    {"brute-force", "Brute force", true, "uniform grid + polish, dim <= 3"},
    {"amp", "AMP", false, "unimplemented by design"},
    {"shgo", "SHGO", false, "unimplemented by design"},
    {"slsqp", "SLSQP", false, "unimplemented by design"},
    {"tnc", "Truncated Newton", false, "unimplemented by design"},
};

const Method kMethodOrder[] = {
    Method::NelderMead,       Method::Powell,        Method::Cg,
    Method::Bfgs,             Method::Lbfgsb,        Method::LevenbergMarquardt,
    Method::TrfLeastSquares,  Method::DifferentialEvolution,
    Method::BasinHopping,     Method::DualAnnealing, Method::BruteForce,
};

bool is_local(Method m) {
    return m == Method::NelderMead || m == Method::Powell || m == Method::Cg ||
           m == Method::Bfgs || m == Method::Lbfgsb;
}
bool is_least_squares(Method m) {
    return m == Method::LevenbergMarquardt || m == Method::TrfLeastSquares;
}
bool is_global(Method m) {
    return m == Method::DifferentialEvolution || m == Method::BasinHopping ||
           m == Method::DualAnnealing || m == Method::BruteForce;
}

} // namespace

const std::vector<MethodInfo>& method_registry() { return kRegistry; }

std::string to_string(Method method) {
    return kRegistry[static_cast<std::size_t>(method)].name;
}

std::string display_name(Method method) {
    return kRegistry[static_cast<std::size_t>(method)].display_name;
}

Method method_from_string(const std::string& name) {
    for (std::size_t i = 0; i < kRegistry.size(); ++i) {
        if (kRegistry[i].name != name) continue;
        if (!kRegistry[i].implemented)
            throw UnimplementedByDesign("method '" + name +
                                        "' is unimplemented by design; it is listed so "
                                        "results are never misattributed to a neighbor");
        return kMethodOrder[i];
    }
    std::string known;
    for (const auto& info : kRegistry)
        known += (known.empty() ? "" : ", ") + info.name + (info.implemented ? "" : " (n/a)");
    throw ValidationError("unknown method '" + name + "'; registry: " + known);
}

std::string to_string(FitStatus status) {
    switch (status) {
    case FitStatus::Converged: return "converged";
    case FitStatus::BudgetExhausted: return "budget-exhausted";
    case FitStatus::Stalled: return "stalled";
    case FitStatus::PenaltyRegion: return "penalty-region";
    }
    return "unknown";
}

Vector make_x0(const Vector& lower, const Vector& upper, X0Strategy strategy,
               std::uint64_t seed, const Vector* given) {
    switch (strategy) {
    case X0Strategy::Center: return 0.5 * (lower + upper);
    case X0Strategy::Given:
        if (!given) throw ValidationError("make_x0(Given) needs a vector");
        return given->cwiseMax(lower).cwiseMin(upper);
    case X0Strategy::SeededUniform: {
        std::mt19937_64 rng(seed);
        Vector x(lower.size());
        for (Eigen::Index i = 0; i < x.size(); ++i) {
            std::uniform_real_distribution<double> u(lower[i], upper[i]);
            x[i] = u(rng);
        }
        return x;
    }
    }
    throw ValidationError("unknown x0 strategy");
}

Vector make_x0(const CalibrationProblem& problem, X0Strategy strategy, std::uint64_t seed,
               const Vector* given) {
    return make_x0(lower_bounds(problem.spec), upper_bounds(problem.spec), strategy, seed,
                   given);
}

// ---------------------------------------------------------------------------
// Engine plumbing
// ---------------------------------------------------------------------------

namespace {

struct BudgetExceeded {}; // internal control flow, caught by run_engine

/// Shared evaluation bookkeeping: budget enforcement, best-so-far tracking and
/// the per-iteration trace. All engines evaluate through this.
struct Engine {
    const BoxedObjective& obj;
    const FitOptions& opts;
    std::mt19937_64 rng;
    std::int64_t count = 0;
    Vector best_x;
    double best_f = kInf;
    std::vector<double> trace;
    bool budget_hit = false;

    Engine(const BoxedObjective& o, const FitOptions& options)
        : obj(o), opts(options), rng(options.seed) {}

    void charge() {
        if (count >= opts.max_evaluations) {
            budget_hit = true;
            throw BudgetExceeded{};
        }
        ++count;
    }

    void record(const Vector& x, double f) {
        if (f < best_f) {
            best_f = f;
            best_x = x;
        }
    }

    /// Raw objective at a feasible point.
    double eval(const Vector& x) {
        charge();
        const double f = obj.value(x);
        record(x, f);
        return f;
    }

    /// Clamp-with-penalty wrapper for the simplex/direction-set methods: the
    /// objective is evaluated at the clamped point and a scaled quadratic
    /// penalty on the violation is added. Inside the box this is the raw loss.
    double eval_penalized(const Vector& x) {
        const Vector c = obj.clamp(x);
        const double viol2 = (x - c).squaredNorm();
        const double f = eval(c);
        if (viol2 == 0.0) return f;
        return f + 1e6 * std::max(1.0, std::abs(f)) * viol2;
    }

    Vector eval_residuals(const Vector& x) {
        charge();
        Vector r = obj.residual_fn(x);
        record(x, r.squaredNorm());
        return r;
    }

    void mark_iteration() {
        if (opts.keep_trace) trace.push_back(best_f);
    }

    double uniform() { return std::uniform_real_distribution<double>(0.0, 1.0)(rng); }
    double normal() { return std::normal_distribution<double>(0.0, 1.0)(rng); }
    std::uint64_t pick(std::uint64_t n) {
        return std::uniform_int_distribution<std::uint64_t>(0, n - 1)(rng);
    }
};

// Brent's 1-D minimizer (golden section + parabolic interpolation) on [a, b].
template <typename F>
double brent_min(F&& f, double a, double b, double rel_tol, int max_iter, double& f_out) {
    constexpr double golden = 0.3819660112501051;
    double x = a + golden * (b - a), w = x, v = x;
    double fx = f(x), fw = fx, fv = fx;
    double d = 0.0, e = 0.0;
    for (int it = 0; it < max_iter; ++it) {
        const double mid = 0.5 * (a + b);
        const double tol1 = rel_tol * std::abs(x) + 1e-14;
        const double tol2 = 2.0 * tol1;
        if (std::abs(x - mid) <= tol2 - 0.5 * (b - a)) break;
        bool use_golden = true;
        if (std::abs(e) > tol1) {
            const double r = (x - w) * (fx - fv);
            double q = (x - v) * (fx - fw);
            double p = (x - v) * q - (x - w) * r;
            q = 2.0 * (q - r);
            if (q > 0.0) p = -p;
            q = std::abs(q);
            const double e_old = e;
            e = d;
            if (std::abs(p) < std::abs(0.5 * q * e_old) && p > q * (a - x) &&
                p < q * (b - x)) {
                d = p / q;
                const double u = x + d;
                if (u - a < tol2 || b - u < tol2) d = x < mid ? tol1 : -tol1;
                use_golden = false;
            }
        }
        if (use_golden) {
            e = (x < mid ? b : a) - x;
            d = golden * e;
        }
        const double u = std::abs(d) >= tol1 ? x + d : x + (d > 0 ? tol1 : -tol1);
        const double fu = f(u);
        if (fu <= fx) {
            if (u < x) b = x; else a = x;
            v = w; fv = fw;
            w = x; fw = fx;
            x = u; fx = fu;
        } else {
            if (u < x) a = u; else b = u;
            if (fu <= fw || w == x) {
                v = w; fv = fw;
                w = u; fw = fu;
            } else if (fu <= fv || v == x || v == w) {
                v = u; fv = fu;
            }
        }
    }
    f_out = fx;
    return x;
}

/// Feasible parameter range of x + t*d within the box.
std::pair<double, double> feasible_range(const Vector& x, const Vector& d, const Vector& lb,
                                         const Vector& ub) {
    double lo = -kInf, hi = kInf;
    for (Eigen::Index i = 0; i < x.size(); ++i) {
        if (d[i] > 1e-300) {
            hi = std::min(hi, (ub[i] - x[i]) / d[i]);
            lo = std::max(lo, (lb[i] - x[i]) / d[i]);
        } else if (d[i] < -1e-300) {
            hi = std::min(hi, (lb[i] - x[i]) / d[i]);
            lo = std::max(lo, (ub[i] - x[i]) / d[i]);
        }
    }
    if (!(lo <= hi)) lo = hi = 0.0;
    return {lo, hi};
}

struct LineResult {
    double t = 0.0;
    double f = kInf;
};

/// 1-D minimization of the penalized objective along x + t*d over [t_lo, t_hi];
/// also probes the endpoints so bound-seated minima are hit exactly.
LineResult line_min(Engine& eng, const Vector& x, const Vector& d, double t_lo,
                    double t_hi) {
    LineResult res;
    if (!(t_hi > t_lo)) return res;
    auto g = [&](double t) { return eng.eval_penalized(x + t * d); };
    double f_brent;
    const double t_best = brent_min(g, t_lo, t_hi, 1e-9, 60, f_brent);
    res.t = t_best;
    res.f = f_brent;
    for (double te : {t_lo, t_hi}) {
        const double fe = g(te);
        if (fe < res.f) {
            res.f = fe;
            res.t = te;
        }
    }
    return res;
}

struct LocalResult {
    Vector x;
    double f = kInf;
    int iterations = 0;
    FitStatus status = FitStatus::Converged;
};

// ---------------------------------------------------------------------------
// Nelder-Mead simplex. Coefficients: reflection 1, expansion 2,
// contraction 0.5, shrink 0.5. Bounds via clamp-with-penalty.
// ---------------------------------------------------------------------------
LocalResult nelder_mead(Engine& eng, const Vector& x0, int max_iter, bool mark_trace) {
    const Eigen::Index n = x0.size();
    const Vector width = eng.obj.upper - eng.obj.lower;
    if (max_iter <= 0) max_iter = 400 * static_cast<int>(n);

    std::vector<Vector> xs;
    std::vector<double> fs;
    xs.push_back(x0);
    fs.push_back(eng.eval_penalized(x0));
    for (Eigen::Index i = 0; i < n; ++i) {
        Vector v = x0;
        double step = 0.05 * width[i];
        if (v[i] + step > eng.obj.upper[i]) step = -step;
        v[i] += step;
        xs.push_back(v);
        fs.push_back(eng.eval_penalized(v));
    }

    std::vector<std::size_t> order(xs.size());
    LocalResult res;
    int it = 0;
    for (; it < max_iter; ++it) {
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        std::sort(order.begin(), order.end(),
                  [&](std::size_t a, std::size_t b) { return fs[a] < fs[b]; });
        const double f_best = fs[order.front()];
        const double f_worst = fs[order.back()];
        if (std::abs(f_worst - f_best) <=
            eng.opts.tolerance + eng.opts.tolerance * std::abs(f_best))
            break;

        Vector centroid = Vector::Zero(n);
        for (std::size_t i = 0; i + 1 < order.size(); ++i) centroid += xs[order[i]];
        centroid /= static_cast<double>(n);

        const std::size_t iw = order.back();
        const std::size_t is = order[order.size() - 2];
        const Vector xr = centroid + (centroid - xs[iw]);
        const double fr = eng.eval_penalized(xr);
        if (fr < fs[order.front()]) {
            const Vector xe = centroid + 2.0 * (centroid - xs[iw]);
            const double fe = eng.eval_penalized(xe);
            if (fe < fr) {
                xs[iw] = xe;
                fs[iw] = fe;
            } else {
                xs[iw] = xr;
                fs[iw] = fr;
            }
        } else if (fr < fs[is]) {
            xs[iw] = xr;
            fs[iw] = fr;
        } else {
            const bool outside = fr < fs[iw];
            const Vector base = outside ? xr : xs[iw];
            const Vector xc = centroid + 0.5 * (base - centroid);
            const double fc = eng.eval_penalized(xc);
            if (fc < std::min(fr, fs[iw])) {
                xs[iw] = xc;
                fs[iw] = fc;
            } else {
                const Vector& xb = xs[order.front()];
                for (std::size_t i = 1; i < order.size(); ++i) {
                    const std::size_t k = order[i];
                    xs[k] = xb + 0.5 * (xs[k] - xb);
                    fs[k] = eng.eval_penalized(xs[k]);
                }
            }
        }
        if (mark_trace) eng.mark_iteration();
    }

    std::size_t ib = 0;
    for (std::size_t i = 1; i < fs.size(); ++i)
        if (fs[i] < fs[ib]) ib = i;
    res.x = eng.obj.clamp(xs[ib]);
    res.f = fs[ib];
    res.iterations = it;
    res.status = it >= max_iter ? FitStatus::Stalled : FitStatus::Converged;
    return res;
}

// ---------------------------------------------------------------------------
// Powell direction-set method with Brent line searches.
// ---------------------------------------------------------------------------
LocalResult powell(Engine& eng, const Vector& x0, int max_iter) {
    const Eigen::Index n = x0.size();
    if (max_iter <= 0) max_iter = 150;
    Matrix dirs = Matrix::Identity(n, n);
    Vector x = x0;
    double fx = eng.eval_penalized(x);

    LocalResult res;
    int it = 0;
    for (; it < max_iter; ++it) {
        const Vector x_start = x;
        const double f_start = fx;
        double biggest_drop = 0.0;
        Eigen::Index drop_idx = 0;

        for (Eigen::Index i = 0; i < n; ++i) {
            const Vector d = dirs.col(i);
            auto [lo, hi] = feasible_range(x, d, eng.obj.lower, eng.obj.upper);
            if (!(hi > lo)) continue;
            const LineResult lr = line_min(eng, x, d, lo, hi);
            if (lr.f < fx) {
                if (fx - lr.f > biggest_drop) {
                    biggest_drop = fx - lr.f;
                    drop_idx = i;
                }
                x += lr.t * d;
                fx = lr.f;
            }
        }
        eng.mark_iteration();

        if (2.0 * (f_start - fx) <=
            eng.opts.tolerance * (std::abs(f_start) + std::abs(fx)) + 1e-25)
            break;

        // Powell's test for replacing the direction of largest decrease with
        // the net displacement of this sweep.
        Vector d_new = x - x_start;
        if (d_new.norm() < 1e-300) continue;
        const Vector x_ext = x + d_new;
        const double f_ext = eng.eval_penalized(x_ext);
        if (f_ext < f_start) {
            const double t = 2.0 * (f_start - 2.0 * fx + f_ext) *
                                 (f_start - fx - biggest_drop) * (f_start - fx - biggest_drop) -
                             biggest_drop * (f_start - f_ext) * (f_start - f_ext);
            if (t < 0.0) {
                auto [lo, hi] = feasible_range(x, d_new, eng.obj.lower, eng.obj.upper);
                if (hi > lo) {
                    const LineResult lr = line_min(eng, x, d_new, lo, hi);
                    if (lr.f < fx) {
                        x += lr.t * d_new;
                        fx = lr.f;
                    }
                    dirs.col(drop_idx) = dirs.col(n - 1);
                    dirs.col(n - 1) = d_new.normalized();
                }
            }
        }
    }
    res.x = eng.obj.clamp(x);
    res.f = fx;
    res.iterations = it;
    res.status = it >= max_iter ? FitStatus::Stalled : FitStatus::Converged;
    return res;
}

// ---------------------------------------------------------------------------
// Gradient family. Gradients are central finite differences through the
// engine (one-sided at bounds), so every gradient costs ~2n evaluations.
// ---------------------------------------------------------------------------
Vector engine_gradient(Engine& eng, const Vector& x) {
    return fd_gradient([&](const Vector& p) { return eng.eval(p); }, x, eng.obj.lower,
                       eng.obj.upper, 1e-6);
}

double projected_gradient_norm(const Engine& eng, const Vector& x, const Vector& g) {
    const Vector stepped = (x - g).cwiseMax(eng.obj.lower).cwiseMin(eng.obj.upper);
    return (x - stepped).lpNorm<Eigen::Infinity>();
}

LocalResult conjugate_gradient(Engine& eng, const Vector& x0, int max_iter) {
    if (max_iter <= 0) max_iter = 500;
    Vector x = x0;
    double fx = eng.eval(x);
    Vector g = engine_gradient(eng, x);
    Vector d = -g;

    LocalResult res;
    const double gtol = 1e-7;
    int stagnant = 0;
    int it = 0;
    for (; it < max_iter; ++it) {
        if (projected_gradient_norm(eng, x, g) <= gtol * (1.0 + std::abs(fx))) break;
        if (d.dot(g) >= 0.0) d = -g; // restart on a non-descent direction
        auto [lo, hi] = feasible_range(x, d, eng.obj.lower, eng.obj.upper);
        (void)lo;
        if (!(hi > 0.0)) {
            d = -g;
            hi = feasible_range(x, d, eng.obj.lower, eng.obj.upper).second;
            if (!(hi > 0.0)) break; // gradient points out of the box everywhere
        }
        const LineResult lr = line_min(eng, x, d, 0.0, hi);
        const double f_prev = fx;
        if (lr.f < fx) {
            x = eng.obj.clamp(x + lr.t * d);
            fx = lr.f;
        }
        const Vector g_new = engine_gradient(eng, x);
        const double denom = g.squaredNorm();
        double beta = denom > 0.0 ? std::max(0.0, g_new.dot(g_new - g) / denom) : 0.0;
        if ((it + 1) % (2 * x.size()) == 0) beta = 0.0; // periodic restart
        d = -g_new + beta * d;
        g = g_new;
        eng.mark_iteration();

        if (f_prev - fx <= eng.opts.tolerance * (std::abs(fx) + eng.opts.tolerance)) {
            if (++stagnant >= 2) break;
        } else {
            stagnant = 0;
        }
    }
    res.x = x;
    res.f = fx;
    res.iterations = it;
    res.status = projected_gradient_norm(eng, x, g) <= 1e-4 * (1.0 + std::abs(fx))
                     ? FitStatus::Converged
                     : (it >= max_iter ? FitStatus::BudgetExhausted : FitStatus::Stalled);
    return res;
}

LocalResult bfgs(Engine& eng, const Vector& x0, int max_iter) {
    if (max_iter <= 0) max_iter = 500;
    const Eigen::Index n = x0.size();
    Vector x = x0;
    double fx = eng.eval(x);
    Vector g = engine_gradient(eng, x);
    Matrix h_inv = Matrix::Identity(n, n);

    LocalResult res;
    const double gtol = 1e-7;
    int stagnant = 0;
    int it = 0;
    for (; it < max_iter; ++it) {
        if (projected_gradient_norm(eng, x, g) <= gtol * (1.0 + std::abs(fx))) break;
        Vector d = -h_inv * g;
        if (d.dot(g) >= 0.0) {
            h_inv = Matrix::Identity(n, n);
            d = -g;
        }
        auto hi = feasible_range(x, d, eng.obj.lower, eng.obj.upper).second;
        if (!(hi > 0.0)) {
            h_inv = Matrix::Identity(n, n);
            d = -g;
            hi = feasible_range(x, d, eng.obj.lower, eng.obj.upper).second;
            if (!(hi > 0.0)) break;
        }
        const LineResult lr = line_min(eng, x, d, 0.0, hi);
        const double f_prev = fx;
        const Vector x_new = eng.obj.clamp(x + lr.t * d);
        if (lr.f < fx) fx = lr.f;
        const Vector g_new = engine_gradient(eng, x_new);
        const Vector s = x_new - x;
        const Vector y = g_new - g;
        const double sy = s.dot(y);
        if (sy > 1e-12 * s.norm() * y.norm()) {
            const double rho = 1.0 / sy;
            const Matrix i_mat = Matrix::Identity(n, n);
            h_inv = (i_mat - rho * s * y.transpose()) * h_inv *
                        (i_mat - rho * y * s.transpose()) +
                    rho * s * s.transpose();
        }
        x = x_new;
        g = g_new;
        eng.mark_iteration();

        if (f_prev - fx <= eng.opts.tolerance * (std::abs(fx) + eng.opts.tolerance)) {
            if (++stagnant >= 2) break;
        } else {
            stagnant = 0;
        }
    }
    res.x = x;
    res.f = fx;
    res.iterations = it;
    res.status = projected_gradient_norm(eng, x, g) <= 1e-4 * (1.0 + std::abs(fx))
                     ? FitStatus::Converged
                     : (it >= max_iter ? FitStatus::BudgetExhausted : FitStatus::Stalled);
    return res;
}

// L-BFGS with box bounds by gradient projection: directions from the two-loop
// recursion, steps along the projected path P(x + alpha d).
LocalResult lbfgsb(Engine& eng, const Vector& x0, int max_iter) {
    if (max_iter <= 0) max_iter = 500;
    const int memory = std::max(1, eng.opts.lbfgs_memory);
    Vector x = x0;
    double fx = eng.eval(x);
    Vector g = engine_gradient(eng, x);

    std::deque<Vector> s_hist, y_hist;
    std::deque<double> rho_hist;

    auto two_loop = [&](const Vector& grad) {
        Vector q = grad;
        std::vector<double> alpha(s_hist.size());
        for (int i = static_cast<int>(s_hist.size()) - 1; i >= 0; --i) {
            alpha[i] = rho_hist[i] * s_hist[i].dot(q);
            q -= alpha[i] * y_hist[i];
        }
        if (!s_hist.empty()) {
            const double gamma =
                s_hist.back().dot(y_hist.back()) / y_hist.back().squaredNorm();
            q *= gamma;
        }
        for (std::size_t i = 0; i < s_hist.size(); ++i) {
            const double beta = rho_hist[i] * y_hist[i].dot(q);
            q += (alpha[i] - beta) * s_hist[i];
        }
        return q;
    };

    LocalResult res;
    const double gtol = 1e-7;
    int stagnant = 0;
    int it = 0;
    for (; it < max_iter; ++it) {
        if (projected_gradient_norm(eng, x, g) <= gtol * (1.0 + std::abs(fx))) break;
        Vector d = -two_loop(g);
        if (d.dot(g) >= 0.0) {
            s_hist.clear();
            y_hist.clear();
            rho_hist.clear();
            d = -g;
        }

        // Projected backtracking with a short expansion phase.
        const double c1 = 1e-4;
        double alpha = 1.0;
        double f_best = fx;
        Vector x_best = x;
        bool moved = false;
        for (int back = 0; back < 40; ++back) {
            const Vector x_try = eng.obj.clamp(x + alpha * d);
            if ((x_try - x).lpNorm<Eigen::Infinity>() == 0.0) break;
            const double f_try = eng.eval(x_try);
            if (f_try <= fx + c1 * g.dot(x_try - x)) {
                f_best = f_try;
                x_best = x_try;
                moved = true;
                break;
            }
            alpha *= 0.5;
        }
        if (moved) {
            for (int ext = 0; ext < 20; ++ext) {
                alpha *= 2.0;
                const Vector x_try = eng.obj.clamp(x + alpha * d);
                if ((x_try - x_best).lpNorm<Eigen::Infinity>() == 0.0) break;
                const double f_try = eng.eval(x_try);
                if (f_try < f_best) {
                    f_best = f_try;
                    x_best = x_try;
                } else {
                    break;
                }
            }
        }

        const double f_prev = fx;
        const Vector g_new = engine_gradient(eng, x_best);
        const Vector s = x_best - x;
        const Vector y = g_new - g;
        const double sy = s.dot(y);
        if (sy > 1e-12 * s.norm() * y.norm()) {
            s_hist.push_back(s);
            y_hist.push_back(y);
            rho_hist.push_back(1.0 / sy);
            if (static_cast<int>(s_hist.size()) > memory) {
                s_hist.pop_front();
                y_hist.pop_front();
                rho_hist.pop_front();
            }
        }
        x = x_best;
        fx = f_best;
        g = g_new;
        eng.mark_iteration();

        if (f_prev - fx <= eng.opts.tolerance * (std::abs(fx) + eng.opts.tolerance)) {
            if (++stagnant >= 2) break;
        } else {
            stagnant = 0;
        }
    }
    res.x = x;
    res.f = fx;
    res.iterations = it;
    res.status = projected_gradient_norm(eng, x, g) <= 1e-4 * (1.0 + std::abs(fx))
                     ? FitStatus::Converged
                     : (it >= max_iter ? FitStatus::BudgetExhausted : FitStatus::Stalled);
    return res;
}

// ---------------------------------------------------------------------------
// Least-squares family.
// ---------------------------------------------------------------------------
Matrix engine_jacobian(Engine& eng, const Vector& x) {
    return fd_jacobian([&](const Vector& p) { return eng.eval_residuals(p); }, x,
                       eng.obj.lower, eng.obj.upper, 1e-6);
}

// Damped normal equations (JtJ + lambda diag(JtJ)) delta = -Jt r; lambda /10
// on accept, x10 on reject; trial points projected into the box.
LocalResult levenberg_marquardt(Engine& eng, const Vector& x0, int max_iter) {
    if (max_iter <= 0) max_iter = 200;
    Vector x = eng.obj.clamp(x0);
    Vector r = eng.eval_residuals(x);
    double ssr = r.squaredNorm();
    double lambda = eng.opts.lm_lambda0;

    LocalResult res;
    int it = 0;
    for (; it < max_iter; ++it) {
        const Matrix jac = engine_jacobian(eng, x);
        const Matrix jtj = jac.transpose() * jac;
        const Vector jtr = jac.transpose() * r;
        if (jtr.lpNorm<Eigen::Infinity>() <= 1e-12 * (1.0 + ssr)) break;

        int failures = 0;
        bool accepted = false;
        double delta_norm = 0.0;
        while (!accepted) {
            Matrix damped = jtj;
            for (Eigen::Index i = 0; i < damped.rows(); ++i)
                damped(i, i) += lambda * std::max(jtj(i, i), 1e-12);
            const Eigen::LDLT<Matrix> solver(damped);
            Vector delta;
            bool bad = solver.info() != Eigen::Success;
            if (!bad) {
                delta = solver.solve(-jtr);
                bad = !delta.allFinite();
            }
            if (bad) {
                lambda *= 10.0;
                if (++failures >= 5) {
                    res.status = FitStatus::Stalled;
                    res.x = x;
                    res.f = ssr;
                    res.iterations = it;
                    return res;
                }
                continue;
            }
            const Vector x_try = eng.obj.clamp(x + delta);
            const Vector r_try = eng.eval_residuals(x_try);
            const double ssr_try = r_try.squaredNorm();
            if (ssr_try < ssr) {
                delta_norm = (x_try - x).norm();
                x = x_try;
                r = r_try;
                ssr = ssr_try;
                lambda = std::max(lambda / 10.0, 1e-14);
                accepted = true;
            } else {
                lambda *= 10.0;
                if (++failures >= 5) {
                    res.status = FitStatus::Stalled;
                    res.x = x;
                    res.f = ssr;
                    res.iterations = it;
                    return res;
                }
            }
        }
        eng.mark_iteration();
        if (delta_norm <= 1e-12 * (1.0 + x.norm())) break;
    }
    res.x = x;
    res.f = ssr;
    res.iterations = it;
    res.status = it >= max_iter ? FitStatus::BudgetExhausted : FitStatus::Converged;
    return res;
}

// Trust-region least squares with reflective handling of box bounds. The
// subproblem min ||r + J delta|| s.t. ||delta|| <= radius is solved by
// Levenberg damping with a bisection on lambda; steps that cross a bound are
// truncated at the boundary and compared against a reflected continuation.
LocalResult trf_least_squares(Engine& eng, const Vector& x0, int max_iter) {
    if (max_iter <= 0) max_iter = 300;
    const Vector width = eng.obj.upper - eng.obj.lower;
    const Vector interior_lo = eng.obj.lower + 1e-12 * width;
    const Vector interior_hi = eng.obj.upper - 1e-12 * width;
    auto interior = [&](const Vector& v) { return v.cwiseMax(interior_lo).cwiseMin(interior_hi); };

    Vector x = interior(x0);
    Vector r = eng.eval_residuals(x);
    double ssr = r.squaredNorm();
    double radius = 0.1 * width.norm();

    auto solve_subproblem = [&](const Matrix& jtj, const Vector& jtr, double rad) {
        auto step_for = [&](double lm) {
            Matrix damped = jtj;
            for (Eigen::Index i = 0; i < damped.rows(); ++i)
                damped(i, i) += lm + 1e-14;
            return Vector(Eigen::LDLT<Matrix>(damped).solve(-jtr));
        };
        Vector delta = step_for(0.0);
        if (delta.allFinite() && delta.norm() <= rad) return delta;
        double lo = 1e-14, hi = 1.0;
        while (step_for(hi).norm() > rad && hi < 1e14) hi *= 10.0;
        for (int i = 0; i < 60; ++i) {
            const double mid = std::sqrt(lo * hi);
            if (step_for(mid).norm() > rad) lo = mid; else hi = mid;
        }
        return step_for(hi);
    };

    LocalResult res;
    int it = 0;
    for (; it < max_iter; ++it) {
        const Matrix jac = engine_jacobian(eng, x);
        const Matrix jtj = jac.transpose() * jac;
        const Vector jtr = jac.transpose() * r;
        if (projected_gradient_norm(eng, x, 2.0 * jtr) <= 1e-10 * (1.0 + ssr)) break;

        bool accepted = false;
        int shrink_guard = 0;
        while (!accepted && shrink_guard++ < 30) {
            const Vector delta = solve_subproblem(jtj, jtr, radius);
            if (!delta.allFinite() || delta.norm() < 1e-300) break;

            // Fraction of the step that stays inside the box, and the bound
            // components it would cross.
            double theta = 1.0;
            std::vector<Eigen::Index> crossing;
            for (Eigen::Index i = 0; i < x.size(); ++i) {
                if (delta[i] > 0.0 && x[i] + delta[i] > eng.obj.upper[i]) {
                    theta = std::min(theta, (eng.obj.upper[i] - x[i]) / delta[i]);
                    crossing.push_back(i);
                } else if (delta[i] < 0.0 && x[i] + delta[i] < eng.obj.lower[i]) {
                    theta = std::min(theta, (eng.obj.lower[i] - x[i]) / delta[i]);
                    crossing.push_back(i);
                }
            }

            Vector cand = interior(x + std::min(1.0, 0.995 * theta) * delta);
            Vector r_cand = eng.eval_residuals(cand);
            double ssr_cand = r_cand.squaredNorm();
            if (theta < 1.0) {
                Vector reflected = delta;
                for (const Eigen::Index i : crossing) reflected[i] = -reflected[i];
                const Vector cand2 = interior(x + theta * delta + (1.0 - theta) * reflected);
                const Vector r2 = eng.eval_residuals(cand2);
                const double ssr2 = r2.squaredNorm();
                if (ssr2 < ssr_cand) {
                    cand = cand2;
                    r_cand = r2;
                    ssr_cand = ssr2;
                }
            }

            const Vector step = cand - x;
            const double predicted = -2.0 * jtr.dot(step) - step.dot(jtj * step);
            const double actual = ssr - ssr_cand;
            const double ratio = predicted > 0.0 ? actual / predicted : 0.0;

            if (actual > 0.0) {
                x = cand;
                r = r_cand;
                ssr = ssr_cand;
                accepted = true;
                if (ratio > 0.75 && step.norm() >= 0.8 * radius) radius *= 2.0;
                else if (ratio < 0.25) radius *= 0.25;
                eng.mark_iteration();
                if (actual <= eng.opts.tolerance * (ssr + eng.opts.tolerance)) {
                    res.x = x;
                    res.f = ssr;
                    res.iterations = it + 1;
                    res.status = FitStatus::Converged;
                    return res;
                }
            } else {
                radius *= 0.25;
                if (radius < 1e-14 * width.norm()) {
                    res.x = x;
                    res.f = ssr;
                    res.iterations = it + 1;
                    res.status = FitStatus::Converged; // radius collapsed at a minimizer
                    return res;
                }
            }
        }
        if (!accepted) break;
    }
    res.x = x;
    res.f = ssr;
    res.iterations = it;
    res.status = it >= max_iter ? FitStatus::BudgetExhausted : FitStatus::Converged;
    return res;
}

// ---------------------------------------------------------------------------
// Global family.
// ---------------------------------------------------------------------------
LocalResult differential_evolution(Engine& eng, int max_iter) {
    const Eigen::Index n = eng.obj.dim();
    const int np = eng.opts.population_size > 0 ? std::max(5, eng.opts.population_size)
                                                : 15 * static_cast<int>(n);
    if (max_iter <= 0) max_iter = 100000; // budget-limited in practice
    const double f_weight = eng.opts.de_mutation;
    const double cr = eng.opts.de_crossover;

    std::vector<Vector> pop(np);
    std::vector<double> fs(np);
    for (int i = 0; i < np; ++i) {
        Vector v(n);
        for (Eigen::Index j = 0; j < n; ++j)
            v[j] = eng.obj.lower[j] + eng.uniform() * (eng.obj.upper[j] - eng.obj.lower[j]);
        pop[i] = v;
        fs[i] = eng.eval(v);
    }

    LocalResult res;
    int gen = 0;
    for (; gen < max_iter; ++gen) {
        for (int i = 0; i < np; ++i) {
            int a, b, c;
            do { a = static_cast<int>(eng.pick(np)); } while (a == i);
            do { b = static_cast<int>(eng.pick(np)); } while (b == i || b == a);
            do { c = static_cast<int>(eng.pick(np)); } while (c == i || c == a || c == b);
            const Vector mutant =
                eng.obj.clamp(pop[a] + f_weight * (pop[b] - pop[c]));
            Vector trial = pop[i];
            const Eigen::Index j_rand = static_cast<Eigen::Index>(eng.pick(n));
            for (Eigen::Index j = 0; j < n; ++j)
                if (j == j_rand || eng.uniform() < cr) trial[j] = mutant[j];
            const double f_trial = eng.eval(trial);
            if (f_trial <= fs[i]) {
                pop[i] = trial;
                fs[i] = f_trial;
            }
        }
        eng.mark_iteration();
        const auto [mn, mx] = std::minmax_element(fs.begin(), fs.end());
        if (*mx - *mn <= eng.opts.tolerance * (std::abs(*mn) + eng.opts.tolerance)) {
            ++gen;
            break;
        }
    }
    const auto best = std::min_element(fs.begin(), fs.end());
    res.x = pop[static_cast<std::size_t>(best - fs.begin())];
    res.f = *best;
    res.iterations = gen;
    res.status = gen >= max_iter ? FitStatus::BudgetExhausted : FitStatus::Converged;
    return res;
}

LocalResult basin_hopping(Engine& eng, int max_iter) {
    const Eigen::Index n = eng.obj.dim();
    const Vector width = eng.obj.upper - eng.obj.lower;
    const int hops = max_iter > 0 ? max_iter : eng.opts.hop_count;
    const double temperature = std::max(1e-12, eng.opts.hop_temperature);

    Vector x0(n);
    for (Eigen::Index j = 0; j < n; ++j)
        x0[j] = eng.obj.lower[j] + eng.uniform() * width[j];
    LocalResult cur = nelder_mead(eng, x0, 100 * static_cast<int>(n), false);
    eng.mark_iteration();

    int hop = 0;
    for (; hop < hops; ++hop) {
        Vector cand = cur.x;
        for (Eigen::Index j = 0; j < n; ++j)
            cand[j] += eng.opts.hop_scale * width[j] * eng.normal();
        cand = eng.obj.clamp(cand);
        const LocalResult polished = nelder_mead(eng, cand, 100 * static_cast<int>(n), false);
        const double drop = cur.f - polished.f;
        if (drop > 0.0 || eng.uniform() < std::exp(drop / temperature)) {
            cur.x = polished.x;
            cur.f = polished.f;
        }
        eng.mark_iteration();
    }
    cur.iterations = hop;
    cur.status = FitStatus::Converged;
    return cur;
}

// Annealing schedule with heavy-tailed (Cauchy) visits scaled by the current
// temperature, Metropolis acceptance, periodic local polish and reheating.
LocalResult dual_annealing(Engine& eng, int max_iter) {
    const Eigen::Index n = eng.obj.dim();
    const Vector width = eng.obj.upper - eng.obj.lower;
    const double t0 = std::max(1e-9, eng.opts.anneal_initial_temp);
    const int moves = max_iter > 0 ? max_iter : 5000;
    const int polish_every = std::max(1, eng.opts.anneal_polish_interval);

    Vector x(n);
    for (Eigen::Index j = 0; j < n; ++j)
        x[j] = eng.obj.lower[j] + eng.uniform() * width[j];
    double fx = eng.eval(x);
    double temp = t0;
    double best_seen = fx;
    int since_improvement = 0;

    int move = 0;
    for (; move < moves; ++move) {
        const double scale = std::max(1e-7, temp / t0);
        Vector cand = x;
        for (Eigen::Index j = 0; j < n; ++j) {
            const double u = eng.uniform();
            cand[j] += width[j] * scale * std::tan(M_PI * (u - 0.5));
        }
        cand = eng.obj.clamp(cand);
        const double f_cand = eng.eval(cand);
        const double delta = f_cand - fx;
        if (delta < 0.0 || eng.uniform() < std::exp(-delta / std::max(temp, 1e-12))) {
            x = cand;
            fx = f_cand;
        }
        temp *= eng.opts.anneal_cooling;

        if (eng.best_f < best_seen - 1e-15) {
            best_seen = eng.best_f;
            since_improvement = 0;
        } else if (++since_improvement >= 4 * polish_every) {
            temp = t0; // reheat and restart the walk from the best point
            x = eng.best_x;
            fx = eng.best_f;
            since_improvement = 0;
        }

        if ((move + 1) % polish_every == 0) {
            const LocalResult polished =
                nelder_mead(eng, eng.best_x, 100 * static_cast<int>(n), false);
            if (polished.f < fx) {
                x = polished.x;
                fx = polished.f;
            }
            eng.mark_iteration();
        }
    }
    const LocalResult final_polish =
        nelder_mead(eng, eng.best_x, 200 * static_cast<int>(n), false);
    LocalResult res;
    res.x = final_polish.f <= eng.best_f ? final_polish.x : eng.best_x;
    res.f = std::min(final_polish.f, eng.best_f);
    res.iterations = move;
    res.status = FitStatus::Converged;
    return res;
}

LocalResult brute_force(Engine& eng) {
    const Eigen::Index n = eng.obj.dim();
    if (n > 3)
        throw ValidationError(
            "brute-force refused: grid over " + std::to_string(n) +
            " dimensions explodes the evaluation budget (limit is 3)");
    const int gp = std::max(2, eng.opts.grid_points);

    Vector best_x;
    double best_f = kInf;
    std::vector<int> idx(static_cast<std::size_t>(n), 0);
    const auto total = static_cast<std::int64_t>(std::pow(gp, static_cast<int>(n)));
    for (std::int64_t flat = 0; flat < total; ++flat) {
        std::int64_t rem = flat;
        Vector x(n);
        for (Eigen::Index j = 0; j < n; ++j) {
            const int k = static_cast<int>(rem % gp);
            rem /= gp;
            x[j] = eng.obj.lower[j] +
                   (eng.obj.upper[j] - eng.obj.lower[j]) * k / static_cast<double>(gp - 1);
        }
        const double f = eng.eval(x);
        if (f < best_f) {
            best_f = f;
            best_x = x;
        }
    }
    eng.mark_iteration();
    LocalResult res = nelder_mead(eng, best_x, 0, false);
    if (best_f < res.f) {
        res.x = best_x;
        res.f = best_f;
    }
    res.iterations = static_cast<int>(total);
    res.status = FitStatus::Converged;
    return res;
}

} // namespace

FitResult minimize(const BoxedObjective& objective, Method method, const Vector* x0,
                   const FitOptions& options) {
    if (objective.dim() == 0) throw ValidationError("objective has no parameters");
    for (Eigen::Index i = 0; i < objective.dim(); ++i)
        if (!std::isfinite(objective.lower[i]) || !std::isfinite(objective.upper[i]) ||
            !(objective.lower[i] < objective.upper[i]))
            throw ValidationError("bounds must be finite with lower < upper");
    if (options.max_evaluations < 10)
        throw ValidationError("max_evaluations must be >= 10");

    if (!is_global(method)) {
        if (!x0) throw ValidationError(to_string(method) + " requires a starting point");
        if (x0->size() != objective.dim())
            throw ValidationError("x0 dimension does not match the objective");
        for (Eigen::Index i = 0; i < x0->size(); ++i)
            if ((*x0)[i] < objective.lower[i] || (*x0)[i] > objective.upper[i])
                throw ValidationError("x0 is outside the bounds at index " +
                                      std::to_string(i));
    }
    if (is_least_squares(method) && !objective.has_residuals())
        throw ValidationError(to_string(method) + " needs a residual vector");

    Engine eng(objective, options);
    LocalResult lr;
    bool finished = false;
    try {
        switch (method) {
        case Method::NelderMead: lr = nelder_mead(eng, *x0, options.max_iterations, true); break;
        case Method::Powell: lr = powell(eng, *x0, options.max_iterations); break;
        case Method::Cg: lr = conjugate_gradient(eng, *x0, options.max_iterations); break;
        case Method::Bfgs: lr = bfgs(eng, *x0, options.max_iterations); break;
        case Method::Lbfgsb: lr = lbfgsb(eng, *x0, options.max_iterations); break;
        case Method::LevenbergMarquardt:
            lr = levenberg_marquardt(eng, *x0, options.max_iterations);
            break;
        case Method::TrfLeastSquares:
            lr = trf_least_squares(eng, *x0, options.max_iterations);
            break;
        case Method::DifferentialEvolution:
            lr = differential_evolution(eng, options.max_iterations);
            break;
        case Method::BasinHopping: lr = basin_hopping(eng, options.max_iterations); break;
        case Method::DualAnnealing: lr = dual_annealing(eng, options.max_iterations); break;
        case Method::BruteForce: lr = brute_force(eng); break;
        }
        finished = true;
    } catch (const BudgetExceeded&) {
        lr.status = FitStatus::BudgetExhausted;
        lr.iterations = static_cast<int>(eng.trace.size());
    }

    FitResult result;
    result.method = to_string(method);
    result.params = eng.best_f <= lr.f || !finished ? eng.best_x : lr.x;
    if (result.params.size() == 0) result.params = objective.clamp(x0 ? *x0 : Vector::Zero(objective.dim()));
    result.params = objective.clamp(result.params);
    result.iterations = lr.iterations;
    result.status = finished ? lr.status : FitStatus::BudgetExhausted;
    result.trace = std::move(eng.trace);

    // One audit evaluation beyond the budget pins the reported loss to a
    // fresh objective recomputation at the returned point.
    result.loss = objective.value(result.params);
    result.evaluations = eng.count + 1;
    result.mae_full_horizon = std::numeric_limits<double>::quiet_NaN();
    if (result.loss >= 0.99 * kPenaltyLoss) {
        result.penalty = true;
        result.status = FitStatus::PenaltyRegion;
    }
    const Vector w = objective.upper - objective.lower;
    for (Eigen::Index i = 0; i < result.params.size(); ++i)
        if (result.params[i] - objective.lower[i] <= 1e-9 * w[i] ||
            objective.upper[i] - result.params[i] <= 1e-9 * w[i])
            result.active_bounds.push_back(static_cast<int>(i));
    return result;
}

namespace {

FitResult run_on_problem(const CalibrationProblem& problem, Method method, const Vector* x0,
                         const FitOptions& options) {
    const BoxedObjective obj = as_objective(problem);
    FitResult result = minimize(obj, method, x0, options);
    result.mae_full_horizon = mae(problem, result.params);
    return result;
}

} // namespace

FitResult minimize_local(const CalibrationProblem& problem, Method method, const Vector& x0,
                         const FitOptions& options) {
    if (!is_local(method))
        throw ValidationError(to_string(method) + " is not a local method");
    return run_on_problem(problem, method, &x0, options);
}

FitResult least_squares(const CalibrationProblem& problem, Method method, const Vector& x0,
                        const FitOptions& options) {
    if (!is_least_squares(method))
        throw ValidationError(to_string(method) + " is not a least-squares method");
    return run_on_problem(problem, method, &x0, options);
}

FitResult minimize_global(const CalibrationProblem& problem, Method method,
                          const FitOptions& options) {
    if (!is_global(method))
        throw ValidationError(to_string(method) + " is not a global method");
    return run_on_problem(problem, method, nullptr, options);
}

FitResult calibrate(const CalibrationProblem& problem, Method method,
                    const FitOptions& options, const std::optional<Vector>& x0) {
    if (is_global(method)) return minimize_global(problem, method, options);
    const Vector start =
        x0 ? make_x0(problem, X0Strategy::Given, options.seed, &*x0)
           : make_x0(problem, X0Strategy::SeededUniform, options.seed);
    if (is_least_squares(method)) return least_squares(problem, method, start, options);
    return minimize_local(problem, method, start, options);
}

} // namespace epical
