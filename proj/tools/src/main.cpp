#include <iostream>

#include "orthodiff/cli.hpp"

int main(int argc, char** argv) {
  return orthodiff::cli::run(std::vector<std::string>(argv, argv + argc), std::cout, std::cerr);
}
