#pragma once

#include <ostream>

namespace gotcha {

/// Entry point of the command line tool. Exit codes: 0 success, 1 usage
/// error, 2 data or validation error. Machine-readable output goes to `out`,
/// logs and summaries to `err`.
int dispatch(int argc, const char* const argv[], std::ostream& out, std::ostream& err);

}  // namespace gotcha
