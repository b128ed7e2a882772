#include <vector>

#include "regionroute/cli.hpp"

int main(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    return rr::run_cli(args);
}
