#include <iostream>

#include "loraxs/cli.hpp"

int main(int argc, char** argv) { return loraxs::dispatch(argc, argv, std::cout, std::cerr); }
