#define DOCTEST_CONFIG_IMPLEMENT
#include "testing.hpp"

int main(int argc, char** argv) {
    // One deterministic thread regardless of the host's core count.
    torch::set_num_threads(1);
    return doctest::Context(argc, argv).run();
}
