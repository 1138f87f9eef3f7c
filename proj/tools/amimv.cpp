#include <iostream>

#include "amimv/cli.hpp"

int main(int argc, char** argv) {
  return amimv::run_cli(std::vector<std::string>(argv + 1, argv + argc), std::cout, std::cerr);
}
