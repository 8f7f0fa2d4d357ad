#pragma once

// The `pragmatix` command line. Exit codes: 0 success, 2 usage or config
// error, 1 runtime error.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

#include "pragmatix/core.hpp"

namespace pragmatix::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;
inline constexpr int kExitConfig = 2;

// 64-bit FNV-1a, written as 16 hex digits.
std::string fnv1a_hex(std::string_view bytes);

// Data directory written by `synth`.
struct DataFiles {
  std::filesystem::path vocabulary;
  std::filesystem::path train;
  std::filesystem::path val;
};
DataFiles data_files(const std::filesystem::path& dir);

// Returns the exit code; all text goes to `out` and `err`.
int run_command(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

std::string version();

}  // namespace pragmatix::cli
