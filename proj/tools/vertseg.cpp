#include <iostream>

#include "vertseg/cli.hpp"

int main(int argc, char** argv) { return vertseg::run_cli(argc, argv, std::cout, std::cerr); }
