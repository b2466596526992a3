#pragma once

#include <cmath>
#include <compare>
#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <vector>

namespace dypo {

using Token = std::uint32_t;
using QueryId = std::uint64_t;

// Conditioning state of the tabular policy: the query plus an encoding of the
// last n generated tokens.
struct ContextKey {
  QueryId query = 0;
  std::uint64_t history = 0;

  auto operator<=>(const ContextKey&) const = default;
};

// Sparse vector over the logit table. Only contexts that were touched carry a
// row; absent rows are exactly zero. Rows are kept ordered so every reduction
// runs in the same order on every run.
class SparseGradient {
 public:
  using Table = std::map<ContextKey, std::vector<double>>;

  SparseGradient() = default;
  explicit SparseGradient(std::size_t vocab) : vocab_(vocab) {}

  std::size_t vocab() const { return vocab_; }
  const Table& rows() const { return rows_; }
  bool empty() const { return rows_.empty(); }

  std::span<double> row(const ContextKey& ctx) {
    auto [it, inserted] = rows_.try_emplace(ctx);
    if (inserted) it->second.assign(vocab_, 0.0);
    return it->second;
  }

  // Entry lookup without insertion.
  double at(const ContextKey& ctx, Token a) const {
    auto it = rows_.find(ctx);
    return it == rows_.end() ? 0.0 : it->second[a];
  }

  void add_scaled(const SparseGradient& other, double scale) {
    if (vocab_ == 0) vocab_ = other.vocab_;
    for (const auto& [ctx, values] : other.rows_) {
      auto dst = row(ctx);
      for (std::size_t a = 0; a < values.size(); ++a) dst[a] += scale * values[a];
    }
  }

  void scale(double s) {
    for (auto& [ctx, values] : rows_)
      for (double& v : values) v *= s;
  }

  double squared_norm() const {
    double acc = 0.0;
    for (const auto& [ctx, values] : rows_)
      for (double v : values) acc += v * v;
    return acc;
  }

  double norm() const { return std::sqrt(squared_norm()); }

  double dot(const SparseGradient& other) const {
    double acc = 0.0;
    for (const auto& [ctx, values] : rows_) {
      auto it = other.rows_.find(ctx);
      if (it == other.rows_.end()) continue;
      for (std::size_t a = 0; a < values.size(); ++a) acc += values[a] * it->second[a];
    }
    return acc;
  }

  bool all_finite() const {
    for (const auto& [ctx, values] : rows_)
      for (double v : values)
        if (!std::isfinite(v)) return false;
    return true;
  }

  // Largest absolute entry.
  double max_abs() const {
    double m = 0.0;
    for (const auto& [ctx, values] : rows_)
      for (double v : values) m = std::max(m, std::abs(v));
    return m;
  }

  bool operator==(const SparseGradient&) const = default;

 private:
  std::size_t vocab_ = 0;
  Table rows_;
};

inline SparseGradient scaled(SparseGradient g, double s) {
  g.scale(s);
  return g;
}

inline double squared_distance(const SparseGradient& a, const SparseGradient& b) {
  SparseGradient d = a;
  d.add_scaled(b, -1.0);
  return d.squared_norm();
}

}  // namespace dypo
