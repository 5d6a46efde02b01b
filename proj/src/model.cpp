#include "epical/model.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace epical {

namespace {

const std::vector<std::string>& base_compartments(ModelKind kind) {
    static const std::vector<std::string> sir{"S", "I", "R"};
    static const std::vector<std::string> sird{"S", "I", "R", "D"};
    static const std::vector<std::string> sirvd{"S", "I", "R", "V", "D"};
    switch (kind) {
    case ModelKind::Sird: return sird;
    case ModelKind::Sirvd: return sirvd;
    default: return sir; // Sir and SirSubgroups share {S, I, R}
    }
}

constexpr double kRowSumSlack = 0.02;  // accepted deviation of table sums from 1
constexpr double kRowSumExact = 1e-9;  // below this a sum counts as exactly 1

} // namespace

std::string to_string(ModelKind kind) {
    switch (kind) {
    case ModelKind::Sir: return "sir";
    case ModelKind::Sird: return "sird";
    case ModelKind::Sirvd: return "sirvd";
    case ModelKind::SirSubgroups: return "sir-subgroups";
    }
    return "sir";
}

ModelKind model_kind_from_string(const std::string& name) {
    if (name == "sir") return ModelKind::Sir;
    if (name == "sird") return ModelKind::Sird;
    if (name == "sirvd") return ModelKind::Sirvd;
    if (name == "sir-subgroups") return ModelKind::SirSubgroups;
    throw ValidationError("unknown model kind '" + name +
                          "' (expected sir|sird|sirvd|sir-subgroups)");
}

int ModelSpec::compartment_count() const {
    const int base = static_cast<int>(base_compartments(kind).size());
    return kind == ModelKind::SirSubgroups ? base * group_count() : base;
}

std::vector<std::string> ModelSpec::slot_names() const {
    const auto& base = base_compartments(kind);
    if (kind != ModelKind::SirSubgroups) return base;
    if (!contact) throw ValidationError("sir-subgroups spec has no contact config");
    std::vector<std::string> names;
    names.reserve(base.size() * contact->groups.size());
    for (const auto& comp : base)
        for (const auto& group : contact->groups) names.push_back(comp + "_" + group);
    return names;
}

int ModelSpec::slot_index(const std::string& name) const {
    const auto names = slot_names();
    const auto it = std::find(names.begin(), names.end(), name);
    if (it == names.end())
        throw ValidationError("unknown compartment slot '" + name + "' for model " +
                              to_string(kind));
    return static_cast<int>(it - names.begin());
}

Vector ModelSpec::initial_state() const {
    const auto names = slot_names();
    Vector state = Vector::Zero(static_cast<Eigen::Index>(names.size()));
    for (const auto& [slot, count] : initial_conditions) {
        state[slot_index(slot)] = count;
    }
    return state;
}

std::vector<ParamSpec> default_params(ModelKind kind) {
    std::vector<ParamSpec> params{
        {"beta", 0.0, 1.0, "transmission rate (1/day)"},
        {"gamma", 0.0, 1.0, "recovery rate (1/day)"},
    };
    if (kind == ModelKind::Sird || kind == ModelKind::Sirvd)
        params.push_back({"mu", 0.0, 1.0, "mortality rate (1/day)"});
    if (kind == ModelKind::Sirvd)
        params.push_back({"nu", 0.0, 1.0, "vaccination rate (1/day)"});
    return params;
}

ModelSpec make_spec(ModelKind kind, double population, double i0) {
    if (kind == ModelKind::SirSubgroups)
        return make_subgroup_spec(builtin_age_contact(), population, i0);
    ModelSpec spec;
    spec.kind = kind;
    spec.params = default_params(kind);
    spec.population = population;
    spec.initial_conditions["S"] = population - i0;
    spec.initial_conditions["I"] = i0;
    return spec;
}

ModelSpec make_subgroup_spec(const ContactConfig& contact, double population, double i0) {
    ModelSpec spec;
    spec.kind = ModelKind::SirSubgroups;
    spec.params = default_params(ModelKind::SirSubgroups);
    spec.population = population;
    spec.contact = contact;

    std::size_t seed_group = 0;
    for (std::size_t g = 1; g < contact.fractions.size(); ++g)
        if (contact.fractions[g] > contact.fractions[seed_group]) seed_group = g;

    for (std::size_t g = 0; g < contact.groups.size(); ++g) {
        const double n_g = contact.fractions[g] * population;
        const double infected = g == seed_group ? i0 : 0.0;
        spec.initial_conditions["S_" + contact.groups[g]] = n_g - infected;
        spec.initial_conditions["I_" + contact.groups[g]] = infected;
    }
    return spec;
}

ContactConfig builtin_age_contact() {
    ContactConfig c;
    c.groups = {"children", "adults", "seniors"};
    c.fractions = {0.25, 0.55, 0.20};
    c.facilities = {"household", "school", "workplace", "community"};
    c.facility_time = Matrix(4, 3);
    c.facility_time << 0.40, 0.40, 0.54, //
        0.31, 0.08, 0.01,                //
        0.08, 0.32, 0.18,                //
        0.20, 0.20, 0.27;
    Matrix household(3, 3), school(3, 3), workplace(3, 3), community(3, 3);
    household << 0.37, 0.53, 0.10, //
        0.32, 0.60, 0.07,          //
        0.27, 0.36, 0.37;
    school << 0.92, 0.08, 0.00, //
        0.67, 0.33, 0.00,       //
        0.75, 0.25, 0.00;
    workplace << 0.00, 0.89, 0.11, //
        0.03, 0.92, 0.05,          //
        0.04, 0.94, 0.02;
    community << 0.54, 0.40, 0.06, //
        0.10, 0.57, 0.34,          //
        0.10, 0.57, 0.34;
    c.within_facility = {household, school, workplace, community};
    return c;
}

namespace {

void validate_contact(const ContactConfig& c, std::vector<Violation>& out) {
    const auto n_groups = static_cast<Eigen::Index>(c.groups.size());
    const auto n_fac = static_cast<Eigen::Index>(c.facilities.size());
    if (n_groups == 0) {
        out.push_back({Severity::Error, "contact.groups", "no groups defined"});
        return;
    }
    if (c.fractions.size() != c.groups.size()) {
        out.push_back({Severity::Error, "contact.fractions",
                       "fraction count does not match group count"});
        return;
    }
    double frac_sum = 0.0;
    for (double f : c.fractions) frac_sum += f;
    if (std::abs(frac_sum - 1.0) > 1e-9)
        out.push_back({Severity::Error, "contact.fractions",
                       "population fractions sum to " + std::to_string(frac_sum) +
                           ", expected 1"});

    if (c.facility_time.rows() != n_fac || c.facility_time.cols() != n_groups) {
        out.push_back({Severity::Error, "contact.facility_time",
                       "matrix must be facilities x groups"});
        return;
    }
    if (static_cast<Eigen::Index>(c.within_facility.size()) != n_fac) {
        out.push_back({Severity::Error, "contact.within_facility",
                       "need one contact matrix per facility"});
        return;
    }

    auto check_unit = [](double v) { return v >= 0.0 && v <= 1.0; };

    for (Eigen::Index g = 0; g < n_groups; ++g) {
        for (Eigen::Index f = 0; f < n_fac; ++f)
            if (!check_unit(c.facility_time(f, g)))
                out.push_back({Severity::Error, "contact.facility_time",
                               "entry (" + c.facilities[f] + ", " + c.groups[g] +
                                   ") outside [0, 1]"});
        const double col_sum = c.facility_time.col(g).sum();
        if (std::abs(col_sum - 1.0) > kRowSumSlack) {
            std::ostringstream msg;
            msg << "time shares for group " << c.groups[g] << " sum to " << col_sum
                << ", outside [0.98, 1.02]";
            out.push_back({Severity::Error, "contact.facility_time", msg.str()});
        } else if (std::abs(col_sum - 1.0) > kRowSumExact) {
            std::ostringstream msg;
            msg << "column sum " << col_sum << " for group " << c.groups[g]
                << ", will renormalize";
            out.push_back({Severity::Warning, "contact.facility_time", msg.str()});
        }
    }

    for (Eigen::Index f = 0; f < n_fac; ++f) {
        const Matrix& m = c.within_facility[f];
        if (m.rows() != n_groups || m.cols() != n_groups) {
            out.push_back({Severity::Error, "contact.within_facility",
                           "matrix for " + c.facilities[f] + " must be groups x groups"});
            continue;
        }
        for (Eigen::Index i = 0; i < n_groups; ++i) {
            for (Eigen::Index j = 0; j < n_groups; ++j)
                if (!check_unit(m(i, j)))
                    out.push_back({Severity::Error, "contact.within_facility",
                                   "entry (" + c.facilities[f] + ", " + c.groups[i] + ", " +
                                       c.groups[j] + ") outside [0, 1]"});
            const double row_sum = m.row(i).sum();
            if (std::abs(row_sum - 1.0) > kRowSumSlack) {
                std::ostringstream msg;
                msg << "contact row (" << c.facilities[f] << ", " << c.groups[i]
                    << ") sums to " << row_sum << ", outside [0.98, 1.02]";
                out.push_back({Severity::Error, "contact.within_facility", msg.str()});
            } else if (std::abs(row_sum - 1.0) > kRowSumExact) {
                std::ostringstream msg;
                msg << "row sum " << row_sum << " for (" << c.facilities[f] << ", "
                    << c.groups[i] << "), will renormalize";
                out.push_back({Severity::Warning, "contact.within_facility", msg.str()});
            }
        }
    }
}

} // namespace

std::vector<Violation> validate(const ModelSpec& spec) {
    std::vector<Violation> out;

    if (spec.population <= 0)
        out.push_back({Severity::Error, "population", "population must be positive"});

    const auto expected = default_params(spec.kind);
    if (spec.params.size() != expected.size())
        out.push_back({Severity::Error, "params",
                       "expected " + std::to_string(expected.size()) + " parameters for " +
                           to_string(spec.kind)});
    for (const auto& p : spec.params) {
        if (!(p.lower < p.upper))
            out.push_back({Severity::Error, "params." + p.name, "lower must be < upper"});
        if (p.lower < 0)
            out.push_back({Severity::Error, "params." + p.name, "rates must be >= 0"});
    }

    if (spec.kind == ModelKind::SirSubgroups && !spec.contact) {
        out.push_back({Severity::Error, "contact", "sir-subgroups requires a contact config"});
        return out;
    }
    if (spec.contact) validate_contact(*spec.contact, out);
    for (const auto& v : out)
        if (v.severity == Severity::Error) return out; // layout may be unusable below

    const auto names = spec.slot_names();
    double total = 0.0;
    for (const auto& [slot, count] : spec.initial_conditions) {
        if (std::find(names.begin(), names.end(), slot) == names.end())
            out.push_back({Severity::Error, "initial_conditions",
                           "unknown compartment slot '" + slot + "'"});
        else if (count < 0)
            out.push_back({Severity::Error, "initial_conditions",
                           "negative count for '" + slot + "'"});
        else
            total += count;
    }
    if (std::abs(total - spec.population) > 1e-6 * std::max(1.0, spec.population)) {
        std::ostringstream msg;
        msg << "initial counts sum to " << total << ", expected population "
            << spec.population;
        out.push_back({Severity::Error, "initial_conditions", msg.str()});
    }

    if (spec.kind == ModelKind::SirSubgroups) {
        const auto& c = *spec.contact;
        for (std::size_t g = 0; g < c.groups.size(); ++g) {
            double group_total = 0.0;
            for (const auto& comp : {"S", "I", "R"}) {
                const auto it =
                    spec.initial_conditions.find(std::string(comp) + "_" + c.groups[g]);
                if (it != spec.initial_conditions.end()) group_total += it->second;
            }
            const double target = c.fractions[g] * spec.population;
            if (std::abs(group_total - target) > 1.0) {
                std::ostringstream msg;
                msg << "group " << c.groups[g] << " counts sum to " << group_total
                    << ", expected fraction*N = " << target;
                out.push_back({Severity::Error, "initial_conditions", msg.str()});
            }
        }
    }
    return out;
}

Matrix mixing_matrix_raw(const ContactConfig& contact) {
    const auto n_groups = static_cast<Eigen::Index>(contact.groups.size());
    const auto n_fac = static_cast<Eigen::Index>(contact.facilities.size());
    Matrix mix = Matrix::Zero(n_groups, n_groups);
    for (Eigen::Index f = 0; f < n_fac; ++f)
        for (Eigen::Index i = 0; i < n_groups; ++i)
            mix.row(i) += contact.facility_time(f, i) * contact.within_facility[f].row(i);
    return mix;
}

Matrix effective_contact_matrix(const ContactConfig& contact) {
    std::vector<Violation> findings;
    validate_contact(contact, findings);
    for (const auto& v : findings)
        if (v.severity == Severity::Error)
            throw ValidationError("invalid contact config: " + v.field + ": " + v.message);

    // Renormalize the inputs (facility-time columns, contact rows), then combine.
    ContactConfig c = contact;
    for (Eigen::Index g = 0; g < c.facility_time.cols(); ++g) {
        const double s = c.facility_time.col(g).sum();
        if (s <= 0.0)
            throw ValidationError("facility time column for group " + c.groups[g] +
                                  " is all zero");
        c.facility_time.col(g) /= s;
    }
    for (auto& m : c.within_facility)
        for (Eigen::Index i = 0; i < m.rows(); ++i) {
            const double s = m.row(i).sum();
            if (s > 0.0) m.row(i) /= s; // all-zero rows drop out of the mix below
        }

    Matrix mix = mixing_matrix_raw(c);
    for (Eigen::Index i = 0; i < mix.rows(); ++i) {
        const double s = mix.row(i).sum();
        if (s <= 0.0)
            throw ValidationError("mixing row for group " + c.groups[i] +
                                  " is all zero and cannot be normalized");
        mix.row(i) /= s;
    }
    return mix;
}

void rhs(const ModelSpec& spec, const Vector& params, const Vector& state,
         Eigen::Ref<Vector> deriv, const Matrix* mixing) {
    const int n = spec.compartment_count();
    if (state.size() != n || deriv.size() != n)
        throw DimensionError("state/derivative length " + std::to_string(state.size()) +
                             " does not match model layout (" + std::to_string(n) + ")");
    if (params.size() != static_cast<Eigen::Index>(spec.params.size()))
        throw DimensionError("parameter vector length does not match spec");
    for (Eigen::Index i = 0; i < state.size(); ++i) {
        if (!std::isfinite(state[i]))
            throw DomainError("non-finite state entry at slot " + std::to_string(i));
        if (state[i] < 0.0)
            throw DomainError("negative state entry at slot " + std::to_string(i));
    }

    const double beta = params[0];
    const double gamma = params[1];

    if (spec.kind == ModelKind::SirSubgroups) {
        Matrix local;
        if (!mixing) {
            local = effective_contact_matrix(*spec.contact);
            mixing = &local;
        }
        const auto n_groups = static_cast<Eigen::Index>(spec.contact->groups.size());
        for (Eigen::Index i = 0; i < n_groups; ++i) {
            double force = 0.0; // per-capita infection pressure on group i
            for (Eigen::Index j = 0; j < n_groups; ++j) {
                const double n_j = spec.contact->fractions[j] * spec.population;
                force += (*mixing)(i, j) * state[n_groups + j] / n_j;
            }
            const double new_inf = beta * state[i] * force;
            const double recov = gamma * state[n_groups + i];
            deriv[i] = -new_inf;
            deriv[n_groups + i] = new_inf - recov;
            deriv[2 * n_groups + i] = recov;
        }
        return;
    }

    const double s = state[0];
    const double i = state[1];
    const double contact_scale = spec.mass_action ? 1.0 : 1.0 / spec.population;
    const double new_inf = beta * s * i * contact_scale;
    const double recov = gamma * i;

    deriv[0] = -new_inf;
    deriv[1] = new_inf - recov;
    deriv[2] = recov;
    if (spec.kind == ModelKind::Sird) {
        const double deaths = params[2] * i;
        deriv[1] -= deaths;
        deriv[3] = deaths;
    } else if (spec.kind == ModelKind::Sirvd) {
        const double deaths = params[2] * i;
        const double vacc = params[3] * s;
        deriv[0] -= vacc;
        deriv[1] -= deaths;
        deriv[3] = vacc;
        deriv[4] = deaths;
    }
}

Vector rhs(const ModelSpec& spec, const Vector& params, const Vector& state) {
    Vector deriv(state.size());
    rhs(spec, params, state, deriv);
    return deriv;
}

} // namespace epical
