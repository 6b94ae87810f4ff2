#include "gwmoe/cli.hpp"

int main(int argc, char** argv) { return gwmoe::cli::run(argc, argv); }
