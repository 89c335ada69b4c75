#include <iostream>

#include "mobileone/cli.hpp"

int main(int argc, char** argv) { return mobileone::run_cli(argc, argv, std::cout, std::cerr); }
