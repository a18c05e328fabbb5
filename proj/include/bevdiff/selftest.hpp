#pragma once

#include <ostream>

namespace bevdiff {

struct SelftestResult {
    int passed = 0;
    int failed = 0;
};

/// Fast invariant checks of every module; one line per check on `log`.
SelftestResult run_selftest(std::ostream& log);

}  // namespace bevdiff
