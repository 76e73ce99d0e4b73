#include <iostream>

#include "microtune/cli.hpp"

int main(int argc, char** argv) { return microtune::cli::run(argc, argv, std::cout, std::cerr); }
