#include <iostream>

#include "ebyd/cli/commands.hpp"

int main(int argc, char** argv) { return ebyd::run_cli(argc, argv, std::cout, std::cerr); }
