#include <iostream>
#include <string>
#include <vector>

#include "stressprompt/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return stressprompt::cli::dispatch(args, std::cout, std::cerr);
}
