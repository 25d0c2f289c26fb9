#include "capsworld/cli.hpp"

int main(int argc, char** argv) { return capsworld::cli::run(argc, argv); }
