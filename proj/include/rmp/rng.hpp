#pragma once

#include <cstdint>

namespace rmp {

// 64-bit finalizer used for stream derivation and content hashing.
std::uint64_t splitmix64(std::uint64_t x);

// Counter-based generator (Philox 4x32-10).
//
// A stream is identified by a 64-bit key; the k-th output block is a pure
// function of (key, block index). Trajectory t of a run with master seed S
// uses the stream derive_stream(S, t), so the generated sequence depends
// only on (S, t) and never on thread scheduling or execution order.
class CounterRng {
public:
    explicit CounterRng(std::uint64_t stream_key);

    static std::uint64_t derive_stream(std::uint64_t master_seed,
                                       std::uint64_t stream_index);

    std::uint32_t next_u32();
    std::uint64_t next_u64();

    // Uniform on [0,1) with 53 random bits.
    double next_double();

    // Uniform on (0,1]; never returns 0, safe to take logs of.
    double next_double_pos();

    // Standard normal via Box-Muller (pair cached).
    double next_gaussian();

    std::uint64_t stream_key() const { return stream_key_; }

private:
    void refill();

    std::uint64_t stream_key_;
    std::uint32_t key_[2];
    std::uint64_t counter_ = 0;
    std::uint32_t block_[4] = {0, 0, 0, 0};
    int pos_ = 4;
    bool have_gauss_ = false;
    double gauss_cache_ = 0.0;
};

}  // namespace rmp
