#include "farann/farann.hpp"

int main() { return 0; }
