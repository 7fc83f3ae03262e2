#include <iostream>

#include "kws/cli.hpp"

int main(int argc, char** argv) { return kws::cli::run_cli(argc, argv, std::cout, std::cerr); }
