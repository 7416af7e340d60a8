#include "plntree/cli.hpp"

int main(int argc, char** argv) { return plntree::cli::run(argc, argv); }
