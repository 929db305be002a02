#include "cli.hpp"

int main(int argc, char** argv) { return drmm::cli::run(argc, argv); }
