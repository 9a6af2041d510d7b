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

#include "progcast/common.hpp"

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <iostream>
#include <mutex>
#include <thread>
#include <vector>

namespace progcast {
namespace {

std::atomic<LogLevel> g_level{LogLevel::kWarning};
std::mutex g_log_mutex;

}  // namespace

std::string_view to_string(Diagnosis dx) {
  switch (dx) {
    case Diagnosis::kCN:
      return "CN";
    case Diagnosis::kMCI:
      return "MCI";
    case Diagnosis::kAD:
      return "AD";
  }
  return "?";
}

Diagnosis parse_diagnosis(std::string_view text) {
  if (text == "CN") return Diagnosis::kCN;
  if (text == "MCI") return Diagnosis::kMCI;
  if (text == "AD") return Diagnosis::kAD;
  throw Error("unknown diagnosis '" + std::string(text) + "'");
}

void set_log_level(LogLevel level) { g_level = level; }
LogLevel log_level() { return g_level; }

void log_warning(std::string_view message) {
  if (g_level < LogLevel::kWarning) return;
  std::lock_guard lock(g_log_mutex);
  std::cerr << "[warning] " << message << '\n';
}

void log_info(std::string_view message) {
  if (g_level < LogLevel::kInfo) return;
  std::lock_guard lock(g_log_mutex);
  std::cerr << "[info] " << message << '\n';
}

std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t seed) {
  std::uint64_t h = seed;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hex64(std::uint64_t value) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(value));
  return buf;
}

int worker_count() {
  const char* env = std::getenv("PROGCAST_WORKERS");
  if (!env || !*env) return 1;
  char* end = nullptr;
  const long n = std::strtol(env, &end, 10);
  if (*end != '\0' || n < 1 || n > 1024) {
    throw Error("PROGCAST_WORKERS must be an integer in [1, 1024], got '" + std::string(env) + "'");
  }
  return static_cast<int>(n);
}

void parallel_for(std::size_t n, int workers, const std::function<void(std::size_t)>& fn) {
  const std::size_t threads = std::min<std::size_t>(std::max(workers, 1), n);
  if (threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  auto work = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        fn(i);
      } catch (...) {
        std::lock_guard lock(error_mutex);
        if (!error) error = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(work);
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

}  // namespace progcast
