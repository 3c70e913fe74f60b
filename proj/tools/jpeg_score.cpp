// SPDX-License-Identifier: Apache-2.0
// Reference external scorer: prints the JPEG size (kB) of the PNG in $1.

#include <cstdio>
#include <iostream>

#include "texforce/rewards.hpp"

int main(int argc, char** argv) {
  if (argc < 2) {
    std::cerr << "usage: texforce-jpeg-score IMAGE.png [PROMPT]\n";
    return 2;
  }
  try {
    std::printf("%.17g\n", texforce::incompressibility(texforce::read_png(argv[1])));
  } catch (const std::exception& e) {
    std::cerr << e.what() << "\n";
    return 1;
  }
  return 0;
}
