#include <iostream>
#include <string>
#include <vector>

#include "forkscope/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return forkscope::cli::run(args, std::cout, std::cerr);
}
