#pragma once

#include <torch/torch.h>

#include <cstdint>

namespace echosynth {

// All randomness flows through explicit generators; nothing reads torch's
// global RNG at runtime. Sub-streams are derived with splitmix64 so that
// (seed, stream_id) pairs give independent, reproducible streams.
inline uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline uint64_t derive_seed(uint64_t base_seed, uint64_t stream_id) {
    return splitmix64(base_seed ^ splitmix64(stream_id));
}

inline torch::Generator make_generator(uint64_t seed) {
    auto gen = at::detail::createCPUGenerator(seed);
    return gen;
}

}  // namespace echosynth
