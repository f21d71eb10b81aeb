#pragma once

#include <cstdint>
#include <string_view>
#include <vector>

namespace conceptlm {

// 64-bit FNV-1a. Used for deriving per-sentence / per-purpose seeds so that
// results do not depend on processing order or thread count.
inline uint64_t fnv1a(std::string_view s, uint64_t h = 0xcbf29ce484222325ull) {
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

inline uint64_t hash_mix(uint64_t a, uint64_t b) {
    uint64_t x = a + 0x9e3779b97f4a7c15ull + (b << 6) + (b >> 2);
    x ^= b;
    x *= 0xff51afd7ed558ccdull;
    x ^= x >> 33;
    return x;
}

// Seed for one sentence: hash(global_seed, source_id, index).
inline uint64_t sentence_seed(uint64_t global_seed, std::string_view source_id, int64_t index) {
    uint64_t h = fnv1a(source_id);
    h = hash_mix(h, static_cast<uint64_t>(index));
    return hash_mix(global_seed, h);
}

// Seed for a named purpose ("c2s", "mix_batch", ...) within a parent stream.
inline uint64_t derive_seed(uint64_t parent, std::string_view purpose) {
    return hash_mix(parent, fnv1a(purpose));
}

inline uint64_t derive_seed(uint64_t parent, std::string_view purpose, int64_t n) {
    return hash_mix(derive_seed(parent, purpose), static_cast<uint64_t>(n));
}

// Deterministic counter-free PRNG (splitmix64). Identical seed gives an
// identical draw sequence on every platform; instances are never shared
// across sentences.
class SeededRng {
public:
    explicit SeededRng(uint64_t seed) : state_(seed) {}

    uint64_t next_u64() {
        uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    // Unbiased draw in [0, bound). bound must be positive.
    uint64_t next_below(uint64_t bound) {
        uint64_t threshold = (0 - bound) % bound;
        for (;;) {
            uint64_t r = next_u64();
            if (r >= threshold) return r % bound;
        }
    }

    // Uniform in [0, 1).
    double next_real() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    bool next_bool() { return (next_u64() & 1u) != 0; }

    // Standard normal via Box-Muller (no cached spare: keeps the stream
    // position a pure function of the number of calls).
    double next_gauss();

    // Normal(0, std) re-drawn until |z| <= 2*std.
    double next_trunc_normal(double stddev);

    // In-place Fisher-Yates.
    template <typename T>
    void shuffle(std::vector<T>& items) {
        for (size_t i = items.size(); i > 1; --i) {
            size_t j = static_cast<size_t>(next_below(i));
            std::swap(items[i - 1], items[j]);
        }
    }

    // Uniform permutation of {0..n-1}. With forbid_identity and n >= 2 the
    // identity mapping is resampled away; the flag constrains the index
    // mapping, not the permuted values.
    std::vector<int> permutation(int n, bool forbid_identity = false);

private:
    uint64_t state_;
};

// Uniform reshuffle of a list. forbid_identity as in SeededRng::permutation;
// lists shorter than 2 come back unchanged regardless of the flag.
template <typename T>
std::vector<T> permute(const std::vector<T>& items, SeededRng& rng, bool forbid_identity = false) {
    if (items.size() < 2) return items;
    std::vector<int> p = rng.permutation(static_cast<int>(items.size()), forbid_identity);
    std::vector<T> out;
    out.reserve(items.size());
    for (int i : p) out.push_back(items[static_cast<size_t>(i)]);
    return out;
}

}  // namespace conceptlm
