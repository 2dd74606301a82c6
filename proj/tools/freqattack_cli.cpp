#include "freqattack/cli.hpp"

int main(int argc, char** argv) { return freqattack::cli::run(argc, argv); }
