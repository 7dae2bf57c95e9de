#include <cstdio>

int main() {
  std::printf("segada: CLI wiring pending\n");
  return 0;
}
