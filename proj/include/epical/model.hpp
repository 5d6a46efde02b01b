#ifndef EPICAL_MODEL_HPP
#define EPICAL_MODEL_HPP

#include <Eigen/Dense>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "epical/errors.hpp"

namespace epical {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

/// Compartment structure of a model.
///
/// Sir           {S, I, R}
/// Sird          {S, I, R, D}
/// Sirvd         {S, I, R, V, D}
/// SirSubgroups  {S, I, R} replicated per population group
enum class ModelKind { Sir, Sird, Sirvd, SirSubgroups };

std::string to_string(ModelKind kind);
ModelKind model_kind_from_string(const std::string& name);

/// One calibratable rate. Rates are per day; default bounds are [0, 1].
struct ParamSpec {
    std::string name;
    double lower = 0.0;
    double upper = 1.0;
    std::string description;
};

/// Group structure plus the two tables that define who mixes with whom:
/// time shares per facility (column per group) and per-facility contact
/// shares (row per group).
struct ContactConfig {
    std::vector<std::string> groups;
    std::vector<double> fractions;       ///< population share per group, sums to 1
    std::vector<std::string> facilities;
    Matrix facility_time;                ///< [facility][group] time share
    std::vector<Matrix> within_facility; ///< per facility, [group][group] contact share
};

/// Declarative model description. Immutable by convention once built.
struct ModelSpec {
    ModelKind kind = ModelKind::Sir;
    std::vector<ParamSpec> params;
    double population = 10000.0;
    std::map<std::string, double> initial_conditions; ///< slot name -> count
    std::optional<ContactConfig> contact;             ///< required iff SirSubgroups
    bool mass_action = false; ///< use the literal beta*S*I form instead of beta*S*I/N

    int compartment_count() const;
    /// Slot names in state order, e.g. {"S","I","R"} or
    /// {"S_children",...,"I_children",...} (compartment-major).
    std::vector<std::string> slot_names() const;
    /// Index of a slot name in the state layout; throws ValidationError if absent.
    int slot_index(const std::string& name) const;
    /// Initial state vector in slot order (missing slots default to 0).
    Vector initial_state() const;
    int group_count() const { return contact ? static_cast<int>(contact->groups.size()) : 1; }
};

/// Severity of a validation finding. Warnings describe data the library will
/// repair (renormalize); errors make the spec unusable.
enum class Severity { Warning, Error };

struct Violation {
    Severity severity;
    std::string field;
    std::string message;
};

/// Parameter order per kind: beta, gamma[, mu[, nu]]. Subgroup models share
/// one beta/gamma across groups.
std::vector<ParamSpec> default_params(ModelKind kind);

/// Canonical single-outbreak spec: S = N - i0, I = i0, every other slot 0.
ModelSpec make_spec(ModelKind kind, double population = 10000.0, double i0 = 1.0);

/// Subgroup spec over a contact configuration. Initial infections are placed
/// in the group with the largest population share.
ModelSpec make_subgroup_spec(const ContactConfig& contact, double population = 10000.0,
                             double i0 = 1.0);

/// Built-in three-group (children/adults/seniors), four-facility demo contact
/// structure used by the CLI and the benchmark defaults.
ContactConfig builtin_age_contact();

/// Checks every structural invariant of the spec (and its contact config, if
/// any). Violations are returned as data; nothing throws.
std::vector<Violation> validate(const ModelSpec& spec);

/// Raw facility/contact combination before row normalization:
/// mix[i][j] = sum_f facility_time[f][i] * within_facility[f][i][j].
Matrix mixing_matrix_raw(const ContactConfig& contact);

/// Group-to-group mixing matrix with rows normalized to sum to 1. Inputs are
/// accepted if their raw sums fall within [0.98, 1.02] per row/column and are
/// renormalized first; a row that sums to zero is a ValidationError.
Matrix effective_contact_matrix(const ContactConfig& contact);

/// Right-hand side dX/dt of the model ODEs, written into `deriv`.
/// Flat models:  dS = -beta*S*I/N (+ -nu*S for SIRVD), dI = beta*S*I/N
/// - gamma*I (- mu*I), dR = gamma*I, dD = mu*I, dV = nu*S. Subgroup SIR:
/// dS_i = -beta * S_i * sum_j M[i][j] * I_j / N_j. Derivatives sum to zero.
///
/// `mixing` may pass a precomputed effective_contact_matrix to avoid
/// rebuilding it on every call; ignored for flat kinds.
void rhs(const ModelSpec& spec, const Vector& params, const Vector& state,
         Eigen::Ref<Vector> deriv, const Matrix* mixing = nullptr);

/// Allocating convenience overload.
Vector rhs(const ModelSpec& spec, const Vector& params, const Vector& state);

} // namespace epical

#endif
