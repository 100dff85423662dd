// CLI entry point; subcommand dispatch lives in rllr/cli.hpp.

#include "rllr/cli.hpp"

int main(int argc, char** argv) { return rllr::cli_main(argc, argv); }
