#include <catch_amalgamated.hpp>

#include "semail/runtime.hpp"

int main(int argc, char** argv) {
    semail::boost_blas_kernel(argc, argv);
    semail::set_compute_threads(2);
    return Catch::Session().run(argc, argv);
}
