#include "dlab/cli.hpp"

int main(int argc, char** argv) { return dlab::run_command(argc, argv); }
