#include "sinebeta/cli.hpp"

int main(int argc, char** argv) { return sinebeta::cli::run_cli(argc, argv); }
