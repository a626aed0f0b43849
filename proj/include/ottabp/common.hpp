#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>

namespace ottabp {

// Bad configuration values, unreadable inputs, malformed files.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// CSV parse failure. Lines are 1-based; the header is line 1.
class ParseError : public ConfigError {
 public:
  ParseError(const std::string& msg, long line)
      : ConfigError(msg + " (line " + std::to_string(line) + ")"), line_(line) {}
  long line() const { return line_; }

 private:
  long line_;
};

// Degenerate input data, e.g. zero variance where spread is required.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Non-finite loss or parameter encountered during optimization.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Divergence during pretraining or fine-tuning; message carries epoch/batch.
class TrainingError : public NumericError {
 public:
  using NumericError::NumericError;
};

using Rng = std::mt19937_64;

inline std::uint64_t splitmix64(std::uint64_t& state) {
  state += 0x9e3779b97f4a7c15ull;
  std::uint64_t z = state;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

// Order-sensitive seed combinator; used to derive independent rng streams.
inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  std::uint64_t s = a ^ (b + 0x9e3779b97f4a7c15ull + (a << 6) + (a >> 2));
  return splitmix64(s);
}

template <typename... Rest>
std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b, Rest... rest) {
  return mix_seed(mix_seed(a, b), static_cast<std::uint64_t>(rest)...);
}

inline std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

}  // namespace ottabp
