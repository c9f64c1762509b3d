#include <iostream>

#include "xnet/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return xnet::cli::run(args, std::cout, std::cerr);
}
