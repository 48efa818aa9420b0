#include <iostream>
#include <string>
#include <vector>

#include "patchlens/cli.hpp"
#include "patchlens/runtime.hpp"

int main(int argc, char** argv) {
  patchlens::tune_allocator();
  return patchlens::run_cli(std::vector<std::string>(argv, argv + argc), std::cout, std::cerr);
}
