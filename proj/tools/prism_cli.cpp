#include "prism/app.hpp"

int main(int argc, char** argv) { return prism::app::run_cli(argc, argv); }
