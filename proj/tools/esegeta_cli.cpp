#include <esegeta/cli.hpp>

int main(int argc, char** argv) { return esegeta::cli_main(argc, argv); }
