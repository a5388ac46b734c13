#include "ckd/cli.hpp"

int main(int argc, char** argv) { return ckd::run_cli(argc, argv); }
