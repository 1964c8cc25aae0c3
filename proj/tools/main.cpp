#include <iostream>

#include "cai/cli/commands.hpp"

int main(int argc, char** argv) {
  return cai::cli::run_cli(argc, argv, std::cout, std::cerr);
}
