#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace fusenmt {

// Error taxonomy. Everything user-visible derives from Error so the CLI can
// map failures onto exit codes.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Violated precondition or malformed argument.
class ContractError : public Error {
 public:
  explicit ContractError(const std::string& msg) : Error(msg) {}
};

// Tensor dimension mismatch; message names both shapes.
class ShapeError : public Error {
 public:
  explicit ShapeError(const std::string& msg) : Error(msg) {}
};

// NaN/Inf escaped an operation that had finite inputs.
class NumericError : public Error {
 public:
  explicit NumericError(const std::string& msg) : Error(msg) {}
};

// A softmax slice with every position masked out.
class DegenerateDistributionError : public Error {
 public:
  explicit DegenerateDistributionError(const std::string& msg) : Error(msg) {}
};

// Token id outside the vocabulary, or two components disagree on vocabulary.
class VocabError : public Error {
 public:
  explicit VocabError(const std::string& msg) : Error(msg) {}
};

class TrainingDivergenceError : public Error {
 public:
  explicit TrainingDivergenceError(const std::string& msg) : Error(msg) {}
};

// finite_diff_check detected a non-deterministic objective.
class OracleInvalidError : public Error {
 public:
  explicit OracleInvalidError(const std::string& msg) : Error(msg) {}
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& msg) : Error(msg) {}
};

// Single RNG type used everywhere; every run owns exactly one, seeded once.
using Rng = std::mt19937_64;

// FNV-1a 64-bit. Used for vocabulary hashes and sentence cache keys.
inline std::uint64_t fnv1a(const void* data, std::size_t len,
                           std::uint64_t seed = 0xcbf29ce484222325ULL) {
  const auto* p = static_cast<const unsigned char*>(data);
  std::uint64_t h = seed;
  for (std::size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::uint64_t fnv1a(const std::string& s,
                           std::uint64_t seed = 0xcbf29ce484222325ULL) {
  return fnv1a(s.data(), s.size(), seed);
}

inline std::uint64_t hash_ids(const std::vector<int>& ids) {
  return fnv1a(ids.data(), ids.size() * sizeof(int));
}

inline std::string to_hex(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[static_cast<std::size_t>(i)] = digits[v & 0xf];
    v >>= 4;
  }
  return out;
}

}  // namespace fusenmt
