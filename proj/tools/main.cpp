#include <iostream>

#include "cli.hpp"
#include "csformer/runtime.hpp"

int main(int argc, char** argv) {
  csformer::tune_allocator();
  return csformer::cli::run_cli(std::vector<std::string>(argv, argv + argc), std::cout, std::cerr);
}
