#include "deqfuse/cli.hpp"

int main(int argc, char** argv) { return deqfuse::cli::run(argc, argv); }
