#include "groupreg/cli.hpp"

int main(int argc, char** argv) { return groupreg::run_cli(argc, argv); }
