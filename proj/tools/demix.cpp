#include "demix/cli.hpp"

int main(int argc, char** argv) { return demix::cli::run(argc, argv); }
