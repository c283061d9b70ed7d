#include <iostream>
#include <string>
#include <vector>

#include "circuitlab/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv, argv + argc);
  return circuitlab::cli_dispatch(args, std::cout, std::cerr);
}
