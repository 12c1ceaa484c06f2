// Prints the query-count schedule produced by hierarchical query fusion for
// the full-scale configuration (6 layers, 400 queries, keep 40 over the last
// 3 transitions) and a small desk-scale variant.
#include <iostream>

#include "qseg/decoder.hpp"

static void show(const char* label, int layers, int s0, int d1, int d2, bool enabled) {
  std::cout << label << ": ";
  for (int c : qseg::fusion_schedule(layers, s0, d1, d2, enabled)) std::cout << c << ' ';
  std::cout << '\n';
}

int main() {
  show("full scale, fusion on ", 6, 400, 40, 3, true);
  show("full scale, fusion off", 6, 400, 40, 3, false);
  show("desk scale, fusion on ", 4, 16, 2, 2, true);
  return 0;
}
