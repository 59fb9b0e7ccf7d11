#include "sgdfuse/cli.hpp"

int main(int argc, char** argv) { return sgdfuse::cli::dispatch(argc, argv); }
