#ifndef CAST_PLAN_HPP
#define CAST_PLAN_HPP

#include <algorithm>
#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "cast/numerics.hpp"

namespace cast {

// Runtime steering object: the gated additive intervention injected into
// forward passes. Heads in `heads` receive `alpha` times their bound shift
// vector added to every position's attention output.
struct SteeringPlan {
    std::vector<HeadId> heads;               // sorted ascending
    double alpha = 0.0;
    std::map<HeadId, RealVector> shifts;     // one entry per head in `heads`
    std::string probe_digest;
    std::string shift_digest;

    bool contains(const HeadId& id) const {
        return std::binary_search(heads.begin(), heads.end(), id);
    }

    // An empty plan (or zero intensity) is the identity intervention.
    bool is_identity() const { return heads.empty() || alpha == 0.0; }
};

// Adds alpha * S to every row of `outputs` when `id` is in the plan's head
// set; returns the input unchanged (bit-exact) otherwise.
inline RealMatrix apply_head_steering(const RealMatrix& outputs,
                                      const SteeringPlan& plan,
                                      const HeadId& id) {
    if (!plan.contains(id)) {
        return outputs;
    }
    auto it = plan.shifts.find(id);
    if (it == plan.shifts.end()) {
        throw ValidationError("apply_head_steering: head " + to_string(id) +
                              " has no bound shift vector");
    }
    const RealVector& s = it->second;
    if (s.size() != outputs.cols) {
        throw ShapeError("apply_head_steering: shift length " +
                         std::to_string(s.size()) + " != head width " +
                         std::to_string(outputs.cols));
    }
    RealMatrix steered = outputs;
    for (std::size_t r = 0; r < steered.rows; ++r) {
        double* row = steered.row(r);
        for (std::size_t c = 0; c < steered.cols; ++c) {
            row[c] += plan.alpha * s[c];
        }
    }
    return steered;
}

} // namespace cast

#endif
