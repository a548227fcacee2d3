#include "fmash/cli.hpp"

#include <iostream>

int main(int argc, char** argv) {
  std::vector<std::string> args(argv, argv + argc);
  return fmash::cli::execute_command(args, std::cout, std::cerr);
}
