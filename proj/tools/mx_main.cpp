#include "mx/cli.hpp"

int main(int argc, char** argv) { return mx::run_cli(argc, argv); }
