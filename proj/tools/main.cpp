#include "cli.hpp"

int main(int argc, char** argv) { return keycache::cli::run(argc, argv); }
