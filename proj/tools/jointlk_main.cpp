#include <string>
#include <vector>

#include "jointlk/harness.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return jointlk::run_cli(args);
}
