#include <string>
#include <vector>

#include "gdfd/cli.hpp"

int main(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    return gdfd::run_cli(args);
}
