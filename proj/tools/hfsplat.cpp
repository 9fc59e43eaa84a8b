#include "hfsplat/cli.hpp"

int main(int argc, char** argv) { return hfsplat::cli::run(argc, argv); }
