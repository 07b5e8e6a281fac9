#include "commands.hpp"

int main(int argc, char** argv) { return mnarflow::cli::run(argc, argv); }
