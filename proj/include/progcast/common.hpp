/*
 * Copyright 2026 The Progcast Authors.
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     https://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#ifndef PROGCAST_COMMON_HPP_
#define PROGCAST_COMMON_HPP_

#include <cstddef>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <string_view>

namespace progcast {

// Diagnostic stage. The underlying values define the progression order.
enum class Diagnosis : int { kCN = 0, kMCI = 1, kAD = 2 };

inline constexpr int kNumClasses = 3;

std::string_view to_string(Diagnosis dx);

// Accepts "CN", "MCI", "AD" (case-sensitive). Throws Error otherwise.
Diagnosis parse_diagnosis(std::string_view text);

inline constexpr int to_index(Diagnosis dx) { return static_cast<int>(dx); }

using SubjectId = std::string;

// All recoverable failures (bad config, bad input file, violated
// preconditions) are reported by throwing this type.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Warnings are routed through a single sink so tests and the CLI can
// silence or capture them.
enum class LogLevel { kQuiet = 0, kWarning = 1, kInfo = 2 };
void set_log_level(LogLevel level);
LogLevel log_level();
void log_warning(std::string_view message);
void log_info(std::string_view message);

// 64-bit FNV-1a. Used for schema hashes and content fingerprints.
std::uint64_t fnv1a64(std::string_view bytes,
                      std::uint64_t seed = 0xcbf29ce484222325ULL);
std::string hex64(std::uint64_t value);

// Worker threads for independent work units, from PROGCAST_WORKERS (default
// 1). Results never depend on this value.
int worker_count();

// Runs fn(i) for i in [0, n) on up to `workers` threads. Each index is run
// exactly once; the first exception thrown is rethrown after all threads
// have joined.
void parallel_for(std::size_t n, int workers, const std::function<void(std::size_t)>& fn);

}  // namespace progcast

#endif  // PROGCAST_COMMON_HPP_
