#include "mcrm/harness.hpp"
int main() { return 0; }
