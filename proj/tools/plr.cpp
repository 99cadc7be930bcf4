#include "plr/cli.hpp"

int main(int argc, char** argv) { return plr::cli::main_entry(argc, argv); }
