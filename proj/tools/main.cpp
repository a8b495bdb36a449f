#include <iostream>
#include <string>
#include <vector>

#include "stepsep/cli.hpp"

int main(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    return stepsep::cli::run(args, std::cout, std::cerr);
}
