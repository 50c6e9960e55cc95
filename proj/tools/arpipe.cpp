#include "arpipe/cli.hpp"

int main(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    return arpipe::cli::run_cli(args);
}
