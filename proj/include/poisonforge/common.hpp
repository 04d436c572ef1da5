#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>

namespace poisonforge {

using UserId = std::int32_t;
using ItemId = std::int32_t;

// Controlled (injected) users have no row in a trained model's parameters.
inline constexpr UserId kControlledUser = -1;
inline constexpr ItemId kNoItem = -1;

enum class ErrorCode {
  kInvalidArgument = 1,
  kIo = 2,
  kParse = 3,
  kNumeric = 4,
  kEmpty = 5,
  kRuntime = 6,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message) : std::runtime_error(message), code_(code) {}
  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

using Rng = std::mt19937_64;

/// Seed for a named substream of a master seed. Stable across runs and platforms.
std::uint64_t derive_seed(std::uint64_t master, std::string_view stream);

inline Rng make_rng(std::uint64_t master, std::string_view stream) {
  return Rng(derive_seed(master, stream));
}

std::uint64_t mix64(std::uint64_t x);

/// Configures the default logger from POISONFORGE_LOG (trace|debug|info|warn|error|off).
/// `fallback` is used when the variable is unset.
void init_logging(std::string_view fallback = "warn");

}  // namespace poisonforge
