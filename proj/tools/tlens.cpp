#include "tlens/cli.hpp"

int main(int argc, char** argv) { return tlens::cli::run(argc, argv); }
