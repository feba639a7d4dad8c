#include "raddpo/cli.hpp"

int main(int argc, char** argv) { return raddpo::cli::run_cli(argc, argv); }
