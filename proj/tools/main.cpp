#include "saan/cli.hpp"

int main(int argc, char** argv) { return saan::dispatch(argc, argv); }
