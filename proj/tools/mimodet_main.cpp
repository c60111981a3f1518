#include <vector>

#include "mimodet/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return mimodet::cli::run(args);
}
