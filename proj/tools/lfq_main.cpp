#include <iostream>

#include "lfq/cli.hpp"
#include "lfq/tensor.hpp"

int main(int argc, char** argv) {
    lfq::tune_allocator();
    return lfq::cli::run(argc, argv, std::cout, std::cerr);
}
