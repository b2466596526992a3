#pragma once

#include <cstddef>
#include <span>
#include <string>

#include "dypo/error.hpp"
#include "dypo/task_env.hpp"

namespace dypo {

enum class Grade { kEasy, kHard, kMid };
enum class Route { kDiscard, kSft, kMixedRl };

inline const char* to_string(Grade g) {
  switch (g) {
    case Grade::kEasy:
      return "easy";
    case Grade::kHard:
      return "hard";
    case Grade::kMid:
      return "mid";
  }
  return "?";
}

inline const char* to_string(Route r) {
  switch (r) {
    case Route::kDiscard:
      return "discard";
    case Route::kSft:
      return "sft";
    case Route::kMixedRl:
      return "mixed_rl";
  }
  return "?";
}

// All rewards 1 -> Easy, all 0 -> Hard, anything else -> Mid.
inline Grade grade(std::span<const RewardValue> rewards) {
  if (rewards.size() < 2)
    throw InputError("grading needs a group of at least 2 rewards, got " + std::to_string(rewards.size()));
  std::size_t passed = 0;
  for (RewardValue r : rewards) {
    if (r != 0 && r != 1) throw InputError("reward values must be 0 or 1");
    passed += static_cast<std::size_t>(r);
  }
  if (passed == rewards.size()) return Grade::kEasy;
  if (passed == 0) return Grade::kHard;
  return Grade::kMid;
}

inline Route route(Grade g) {
  switch (g) {
    case Grade::kEasy:
      return Route::kDiscard;
    case Grade::kHard:
      return Route::kSft;
    case Grade::kMid:
      return Route::kMixedRl;
  }
  return Route::kDiscard;
}

struct GradeCounts {
  std::size_t easy = 0;
  std::size_t hard = 0;
  std::size_t mid = 0;

  void add(Grade g) {
    switch (g) {
      case Grade::kEasy:
        ++easy;
        break;
      case Grade::kHard:
        ++hard;
        break;
      case Grade::kMid:
        ++mid;
        break;
    }
  }
  std::size_t total() const { return easy + hard + mid; }
  bool operator==(const GradeCounts&) const = default;
};

}  // namespace dypo
