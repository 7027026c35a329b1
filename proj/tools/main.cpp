// spikeseg command-line entry point.
#include <iostream>

#include "spikeseg/cli.hpp"

int main(int argc, char** argv) { return spikeseg::cli::run_cli(argc, argv, std::cout, std::cerr); }
