#include <iostream>

int main() {
  std::cout << "bsi: placeholder\n";
  return 0;
}
