#include <iostream>

#include "vsur/cli.hpp"

int main(int argc, char** argv) {
  return vsur::run_cli(std::vector<std::string>(argv + 1, argv + argc), std::cout, std::cerr);
}
