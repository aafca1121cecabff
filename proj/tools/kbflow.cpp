#include "kbflow/cli.hpp"

int main(int argc, char** argv) { return kbflow::cli::run_cli(argc, argv); }
