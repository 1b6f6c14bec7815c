#define DOCTEST_CONFIG_IMPLEMENT
#include <doctest.h>

#include "tally/logging.hpp"

int main(int argc, char** argv) {
  tally::init_logging("tests");
  doctest::Context ctx(argc, argv);
  return ctx.run();
}
