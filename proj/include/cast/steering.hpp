#ifndef CAST_STEERING_HPP
#define CAST_STEERING_HPP

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "cast/model.hpp"
#include "cast/plan.hpp"
#include "cast/probing.hpp"
#include "cast/shiftvec.hpp"

namespace cast {

// Binds the ranking's Top-K heads to their shift vectors. Negative steering
// is expressed by negating shift files explicitly, never by a negative
// alpha. Provenance digests bind the plan to the probe and shift artifacts
// that produced it.
inline SteeringPlan build_plan(const HeadRanking& ranking, const ShiftVectorSet& shifts,
                               double alpha, int k, const std::string& probe_digest,
                               const std::string& shift_digest) {
    if (!(alpha >= 0.0) || !std::isfinite(alpha)) {
        throw ArgumentError("build_plan: alpha must be finite and >= 0");
    }
    const int total = static_cast<int>(ranking.ordered.size());
    if (k < 0 || k > total) {
        throw ShapeError("build_plan: K out of range [0, " + std::to_string(total) + "]");
    }
    SteeringPlan plan;
    plan.alpha = alpha;
    plan.probe_digest = probe_digest;
    plan.shift_digest = shift_digest;
    plan.heads.assign(ranking.ordered.begin(),
                      ranking.ordered.begin() + static_cast<std::size_t>(k));
    std::sort(plan.heads.begin(), plan.heads.end());
    for (const HeadId& id : plan.heads) {
        auto it = shifts.vectors.find(id);
        if (it == shifts.vectors.end()) {
            throw ValidationError("build_plan: no shift vector for selected head " +
                                  to_string(id));
        }
        plan.shifts[id] = it->second;
    }
    return plan;
}

struct PlanValidation {
    bool ok = true;
    std::vector<std::string> violations;
};

// Pure structural check of a plan against a model spec; reports every
// violation instead of stopping at the first.
inline PlanValidation validate_plan(const SteeringPlan& plan, const ModelSpec& spec) {
    PlanValidation report;
    auto violation = [&report](const std::string& msg) {
        report.ok = false;
        report.violations.push_back(msg);
    };
    if (!std::isfinite(plan.alpha)) {
        violation("alpha is not finite");
    } else if (plan.alpha < 0.0) {
        violation("alpha is negative");
    }
    for (const HeadId& id : plan.heads) {
        if (id.layer < 0 || id.layer >= spec.layers || id.head < 0 ||
            id.head >= spec.heads) {
            violation("head out of grid: " + to_string(id));
        }
        auto it = plan.shifts.find(id);
        if (it == plan.shifts.end()) {
            violation("missing shift vector: " + to_string(id));
        } else {
            if (it->second.size() != static_cast<std::size_t>(spec.head_dim)) {
                violation("shift length mismatch: " + to_string(id) + " has " +
                          std::to_string(it->second.size()) + ", expected " +
                          std::to_string(spec.head_dim));
            }
            for (double x : it->second) {
                if (!std::isfinite(x)) {
                    violation("non-finite shift entry: " + to_string(id));
                    break;
                }
            }
        }
    }
    return report;
}

} // namespace cast

#endif
