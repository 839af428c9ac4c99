// SPDX-License-Identifier: Apache-2.0
#include <iostream>

#include "selcopy/cli.hpp"

int main(int argc, char** argv) { return selcopy::cli_main(argc, argv, std::cout, std::cerr); }
