#define DOCTEST_CONFIG_IMPLEMENT
#include <doctest.h>

#include "poisonforge/common.hpp"

int main(int argc, char** argv) {
  poisonforge::init_logging("error");
  doctest::Context context(argc, argv);
  return context.run();
}
