#include "cotr/cli.hpp"

int main(int argc, char** argv) { return cotr::cli::dispatch(argc, argv); }
