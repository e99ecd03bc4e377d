#include <iostream>

#include "geodistill/cli.hpp"

int main(int argc, char** argv) { return geodistill::cli::run(argc, argv, std::cout, std::cerr); }
