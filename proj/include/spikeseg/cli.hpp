// spikeseg/cli.hpp
#pragma once

#include <iosfwd>
#include <string_view>

namespace spikeseg::cli {

inline constexpr std::string_view kVersion = "0.3.0";

// Entry point of the spikeseg executable. Exit codes: 0 success, 1 I/O or
// runtime failure, 2 usage or contract violation.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace spikeseg::cli
