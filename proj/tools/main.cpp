#include "airfeel/harness.hpp"

int main(int argc, char** argv) { return airfeel::run_cli(argc, argv); }
