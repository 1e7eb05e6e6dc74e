#include "metadiff/cli.hpp"

int main(int argc, char** argv) { return metadiff::cli::run(argc, argv); }
