#include <iostream>

#include "hcseg/cli.hpp"

int main(int argc, char** argv) { return hcseg::cli::run(argc, argv, std::cout, std::cerr); }
