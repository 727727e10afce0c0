#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace choose {

// Full command-line driver; argv-style args without the program name.
// Returns the process exit code. Errors print a one-line diagnostic to `err`.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

// "0..10", "5", or "0,3,7"
std::vector<int> parse_pilot_spec(const std::string& spec);

}  // namespace choose
