#include <string>
#include <vector>

#include "pslu/pipeline.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return pslu::run_cli(args);
}
