#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <istream>
#include <ostream>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace iclmt {

/// Base class of every error the toolkit raises on purpose.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Input violates a documented precondition or invariant.
class ValidationError : public Error {
public:
    using Error::Error;
};

/// Malformed record in a line-oriented file.
class ParseError : public ValidationError {
public:
    ParseError(std::size_t line, const std::string& what)
        : ValidationError("line " + std::to_string(line) + ": " + what), line_(line) {}

    std::size_t line() const noexcept { return line_; }

private:
    std::size_t line_;
};

/// Operation is not allowed in the object's current state (e.g. double adapter injection).
class StateError : public Error {
public:
    using Error::Error;
};

/// A sequence cannot be made to fit its length budget.
class OverflowError : public ValidationError {
public:
    using ValidationError::ValidationError;
};

/// A pipeline step is missing an upstream artifact.
class DependencyError : public Error {
public:
    using Error::Error;
};

/// mt19937_64 with hand-rolled distributions; the std distributions are
/// implementation-defined and would break cross-platform reproducibility.
class Rng {
public:
    explicit Rng(std::uint64_t seed);

    std::uint64_t next_u64();
    /// Uniform in [0, 1).
    double uniform();
    /// Uniform integer in [0, n). n must be positive.
    std::uint64_t below(std::uint64_t n);
    /// Standard normal (Box-Muller, no cached spare).
    double normal();

    template <class T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::size_t j = static_cast<std::size_t>(below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    std::mt19937_64 engine_;
};

constexpr std::uint64_t kFnvOffset = 14695981039346656037ull;
constexpr std::uint64_t kFnvPrime = 1099511628211ull;

/// 64-bit FNV-1a, continuing from `h`.
std::uint64_t fnv1a(std::span<const std::byte> bytes, std::uint64_t h = kFnvOffset);
std::uint64_t fnv1a(std::string_view s, std::uint64_t h = kFnvOffset);

std::string hex64(std::uint64_t v);

/// FNV-1a over a file's bytes, rendered as 16 hex digits.
std::string hash_file(const std::filesystem::path& path);

std::string trim(std::string_view s);
std::vector<std::string> split_whitespace(std::string_view s);

std::string read_file(const std::filesystem::path& path);
/// Writes to a sibling temp file then renames over `path`.
void write_file_atomic(const std::filesystem::path& path, std::string_view contents);

// Little-endian binary helpers.
void write_u8(std::ostream& os, std::uint8_t v);
void write_u32(std::ostream& os, std::uint32_t v);
void write_u64(std::ostream& os, std::uint64_t v);
void write_f32(std::ostream& os, float v);
std::uint8_t read_u8(std::istream& is);
std::uint32_t read_u32(std::istream& is);
std::uint64_t read_u64(std::istream& is);
float read_f32(std::istream& is);

}  // namespace iclmt
