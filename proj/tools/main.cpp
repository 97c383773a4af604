#include "ugcem/cli.hpp"

int main(int argc, char** argv) { return ugcem::cli::run(argc, argv); }
