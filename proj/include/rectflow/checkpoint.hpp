#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <string>

#include "rectflow/config.hpp"
#include "rectflow/errors.hpp"

namespace rectflow::app {

constexpr std::uint32_t kCheckpointVersion = 1;

class VersionError : public Error {
 public:
  VersionError(const std::string& what, std::uint32_t found) : Error(what), found_(found) {}
  std::uint32_t found() const { return found_; }

 private:
  std::uint32_t found_;
};

struct Checkpoint {
  ExperimentConfig config;
  rect::RectangularFlow model;
  std::optional<data::Standardization> standardization;
  std::mt19937_64 rng;
};

// Layout (little-endian): 8 magic bytes, uint32 version, uint64 length and
// bytes of a JSON blob (config and RNG state), uint64 tensor count, then per
// tensor: uint64 name length, name, uint32 rank, uint64 dims, float64 values.
void save_checkpoint(const std::string& path, const ExperimentConfig& cfg,
                     const rect::RectangularFlow& model,
                     const std::optional<data::Standardization>& standardization,
                     const std::mt19937_64& rng);

// FileError when missing or malformed, VersionError on a version mismatch.
Checkpoint load_checkpoint(const std::string& path);

}  // namespace rectflow::app
