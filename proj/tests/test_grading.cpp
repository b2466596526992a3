#include <gtest/gtest.h>

#include <vector>

#include "dypo/grading.hpp"

using namespace dypo;

namespace {

TEST(Grade, Examples) {
  EXPECT_EQ(grade(std::vector<RewardValue>{1, 1, 1, 1, 1, 1, 1, 1}), Grade::kEasy);
  EXPECT_EQ(grade(std::vector<RewardValue>{0, 0, 0, 0, 0, 0, 0, 0}), Grade::kHard);
  EXPECT_EQ(grade(std::vector<RewardValue>{1, 0, 1, 0, 0, 0, 1, 0}), Grade::kMid);
}

TEST(Grade, Errors) {
  EXPECT_THROW(grade(std::vector<RewardValue>{}), InputError);
  EXPECT_THROW(grade(std::vector<RewardValue>{1}), InputError);
  EXPECT_THROW(grade(std::vector<RewardValue>{1, 2}), InputError);
}

TEST(Grade, PartitionsAllPatterns) {
  for (std::size_t k = 2; k <= 10; ++k) {
    GradeCounts counts;
    for (std::uint32_t bits = 0; bits < (1u << k); ++bits) {
      std::vector<RewardValue> r(k);
      std::size_t sum = 0;
      for (std::size_t i = 0; i < k; ++i) sum += r[i] = (bits >> i) & 1u;
      const Grade g = grade(r);
      counts.add(g);
      EXPECT_EQ(g == Grade::kMid, sum > 0 && sum < k);
      EXPECT_EQ(g == Grade::kEasy, sum == k);
      EXPECT_EQ(g == Grade::kHard, sum == 0);
    }
    EXPECT_EQ(counts.easy, 1u);
    EXPECT_EQ(counts.hard, 1u);
    EXPECT_EQ(counts.mid, (1u << k) - 2);
  }
}

TEST(Route, Mapping) {
  EXPECT_EQ(route(Grade::kEasy), Route::kDiscard);
  EXPECT_EQ(route(Grade::kHard), Route::kSft);
  EXPECT_EQ(route(Grade::kMid), Route::kMixedRl);
  EXPECT_STREQ(to_string(Grade::kMid), "mid");
  EXPECT_STREQ(to_string(Route::kMixedRl), "mixed_rl");
}

}  // namespace
