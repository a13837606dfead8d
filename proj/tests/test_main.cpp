#define DOCTEST_CONFIG_IMPLEMENT
#include "doctest.h"
#include "spikesr/tensor.hpp"

int main(int argc, char** argv) {
  spikesr::StrictModeGuard strict;
  return doctest::Context(argc, argv).run();
}
