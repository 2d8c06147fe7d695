#pragma once

#include <iosfwd>

namespace loraxs {

// Runs one `loraxs` command line. Exit codes: 0 success, 1 runtime or
// integrity failure, 2 usage error.
int dispatch(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace loraxs
