#include <iostream>

#include "runner.h"

int main(int argc, char** argv) { return chom::cli::run_cli(argc, argv, std::cout, std::cerr); }
