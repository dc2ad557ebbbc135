#include <iostream>

#include "pformer/cli.hpp"

int main(int argc, char** argv) { return pformer::cli::run(argc, argv, std::cout, std::cerr); }
