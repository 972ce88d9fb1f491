#include "srlkit/checkpoint.hpp"
int main() { return 0; }
