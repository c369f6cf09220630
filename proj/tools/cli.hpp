#pragma once

#include <ostream>

namespace mflow::cli {

// Exit status: 0 success, 1 user error (flags, paths, bad files), 2 internal.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace mflow::cli
