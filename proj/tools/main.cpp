#include "epsilon/cli.hpp"

int main(int argc, char** argv) { return epsilon::cli::run(argc, argv); }
