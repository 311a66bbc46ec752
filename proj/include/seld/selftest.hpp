// Fast invariant suite behind the `selftest` CLI subcommand: exercises the
// fold/unfold identity, gradient spot checks, softmax properties, the metric
// oracle, and schedule continuity in a few seconds. `inject_gradient_fault`
// perturbs one backward kernel so the corresponding check must fail (negative
// control for the harness itself).
#pragma once

#include <iosfwd>

namespace seld {

// returns the number of failed checks
int run_selftest(std::ostream& os, bool inject_gradient_fault = false);

}  // namespace seld
