#include "contextflow/cli/run.hpp"

int main(int argc, char** argv) { return contextflow::cli_main(argc, argv); }
