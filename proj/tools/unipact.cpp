#include "unipact/cli.hpp"

int main(int argc, char** argv) { return unipact::run_cli(argc, argv); }
