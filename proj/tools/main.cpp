#include "stamp/cli.hpp"

#include <iostream>

int main(int argc, char** argv) { return stamp::cli::run(argc, argv, std::cout, std::cerr); }
