#include "dypo/cli.hpp"

int main(int argc, char** argv) { return dypo::run_cli(argc, argv); }
