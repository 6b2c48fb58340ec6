#include <iostream>

#include "vitscope/cli/app.hpp"

int main(int argc, char** argv) {
  return vitscope::cli::run_cli({argv + 1, argv + argc}, std::cout, std::cerr);
}
