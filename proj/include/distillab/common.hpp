// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

namespace distillab {

// Base of the library's error hierarchy. Every failure mode that the
// library reports deliberately (as opposed to programming errors caught
// by assertions) derives from this.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

// Shape rule violated by an op (names the op and the offending dims).
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Bad numeric input: non-finite values, unnormalized rows, out-of-range ids.
class ValueError : public Error {
 public:
  using Error::Error;
};

// Invalid model / train / experiment configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Filesystem-level failure (unreadable, unwritable, truncated).
class IoError : public Error {
 public:
  using Error::Error;
};

// Well-formed file with internally inconsistent content.
class FormatError : public Error {
 public:
  using Error::Error;
};

// Checkpoint written by an unsupported format version.
class VersionError : public Error {
 public:
  using Error::Error;
};

// Training produced a non-finite loss or gradient.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

using Rng = std::mt19937_64;

// splitmix64 finalizer; decorrelates sequential seeds.
inline uint64_t mix_seed(uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

// Per-item seed derived from a master seed, stable across runs.
inline uint64_t derive_seed(uint64_t master, uint64_t index) {
  return mix_seed(master * 0x100000001b3ull + index);
}

}  // namespace distillab
