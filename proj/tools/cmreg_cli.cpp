#include "cmreg/evalcli.hpp"

int main(int argc, char** argv) { return cmreg::cli_main(argc, argv); }
