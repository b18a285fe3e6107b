#include <iostream>

#include "gotcha/cli.hpp"

int main(int argc, char** argv) { return gotcha::dispatch(argc, argv, std::cout, std::cerr); }
