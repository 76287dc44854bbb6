#include "trajmae/rng.hpp"

#include <cmath>
#include <numeric>
#include <numbers>

namespace trajmae {

std::uint64_t mix64(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t hash_tag(std::string_view tag) noexcept {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : tag) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t RngStream::next_u64() noexcept {
  ++counter_;
  return mix64(key_ + counter_ * 0x9e3779b97f4a7c15ULL);
}

double RngStream::uniform() noexcept {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

std::size_t RngStream::below(std::size_t n) noexcept {
  // Lemire's multiply-shift with rejection; unbiased.
  std::uint64_t bound = n;
  std::uint64_t threshold = (0 - bound) % bound;
  for (;;) {
    unsigned __int128 m = static_cast<unsigned __int128>(next_u64()) * bound;
    if (static_cast<std::uint64_t>(m) >= threshold) {
      return static_cast<std::size_t>(m >> 64);
    }
  }
}

double RngStream::normal() noexcept {
  // Box-Muller, one value per call so the state is just (key, counter).
  double u1 = uniform();
  double u2 = uniform();
  if (u1 < 1e-300) u1 = 1e-300;
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::vector<std::size_t> RngStream::sample_without_replacement(std::size_t n, std::size_t k) {
  std::vector<std::size_t> pool(n);
  std::iota(pool.begin(), pool.end(), std::size_t{0});
  if (k > n) k = n;
  for (std::size_t i = 0; i < k; ++i) {
    std::size_t j = i + below(n - i);
    std::swap(pool[i], pool[j]);
  }
  pool.resize(k);
  return pool;
}

}  // namespace trajmae
