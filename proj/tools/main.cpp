#include "logitshift/cli.hpp"

#include <iostream>

int main(int argc, char** argv)
{
    return logitshift::cli::run(argc, argv, std::cout, std::cerr);
}
