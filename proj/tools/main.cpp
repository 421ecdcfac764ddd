#include "cli.hpp"

int main(int argc, char** argv) { return promptct::cli::run(argc, argv); }
