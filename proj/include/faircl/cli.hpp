#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace faircl::cli {

// args excludes the program name. Returns 0 on success, 1 on invalid
// input (bad flags, keys, files), 2 when a computation fails.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace faircl::cli
