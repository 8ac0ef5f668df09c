#include <iostream>

#include "audiosae/cli.hpp"

int main(int argc, char** argv) { return audiosae::cli::run(argc, argv, std::cout, std::cerr); }
