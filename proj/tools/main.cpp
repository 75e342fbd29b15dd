#include <iostream>

#include "stiffnode/cli.hpp"

int main(int argc, char** argv) { return stiffnode::cli::run(argc, argv, std::cout, std::cerr); }
