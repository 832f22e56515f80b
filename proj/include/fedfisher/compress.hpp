// Copyright 2026 The FedFisher Simulator Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.
// =============================================================================

// Communication codecs: uniform quantisation with a packed bitstream,
// truncated-SVD compression, exact bit accounting and the K-FAC budget
// planner.
//
// Quantised stream layout (byte-exact):
//   u32 element count (little-endian)
//   f64 max_abs      (little-endian IEEE-754)
//   ceil(count * floor(32/s_q) / 8) payload bytes: for each element, one
//   sign bit (1 = negative) followed by floor(32/s_q) - 1 level bits, least
//   significant bit first; bits fill each byte from bit 0 upwards.
// The logical cost charged by bit_cost() is count * floor(32/s_q) + 32 (the
// scale travels as a 32-bit float in the cost model).

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "fedfisher/fisher.hpp"
#include "fedfisher/numerics.hpp"

namespace fedfisher {

inline unsigned bits_per_element(unsigned s_q) { return 32u / s_q; }

inline std::uint64_t quantization_levels(unsigned s_q) {
  return (std::uint64_t{1} << (bits_per_element(s_q) - 1)) - 1;
}

inline void check_sq(unsigned s_q) {
  if (s_q < 1 || s_q > 16) throw std::invalid_argument("quantize: s_q must be in [1, 16], got " + std::to_string(s_q));
}

struct QuantizedVector {
  unsigned s_q = 1;
  std::uint32_t count = 0;
  double max_abs = 0.0;
  std::vector<std::uint8_t> packed;

  unsigned level_bits() const { return bits_per_element(s_q) - 1; }
  std::uint64_t levels() const { return quantization_levels(s_q); }
  std::uint64_t bit_cost() const { return std::uint64_t{count} * bits_per_element(s_q) + 32; }

  friend bool operator==(const QuantizedVector&, const QuantizedVector&) = default;
};

namespace detail {

class BitWriter {
 public:
  explicit BitWriter(std::vector<std::uint8_t>& out) : out_(out) {}
  void put(std::uint64_t value, unsigned nbits) {
    for (unsigned b = 0; b < nbits; ++b) {
      if (bit_ % 8 == 0) out_.push_back(0);
      if ((value >> b) & 1u) out_.back() |= static_cast<std::uint8_t>(1u << (bit_ % 8));
      ++bit_;
    }
  }

 private:
  std::vector<std::uint8_t>& out_;
  std::uint64_t bit_ = 0;
};

class BitReader {
 public:
  explicit BitReader(std::span<const std::uint8_t> in) : in_(in) {}
  std::uint64_t get(unsigned nbits) {
    std::uint64_t v = 0;
    for (unsigned b = 0; b < nbits; ++b) {
      const std::size_t byte = bit_ / 8;
      if (byte >= in_.size()) throw std::runtime_error("quantized stream truncated");
      if ((in_[byte] >> (bit_ % 8)) & 1u) v |= std::uint64_t{1} << b;
      ++bit_;
    }
    return v;
  }

 private:
  std::span<const std::uint8_t> in_;
  std::uint64_t bit_ = 0;
};

// Level index ceil(l_q |x| / max_abs), with a 1e-4 level slack so that
// re-quantising a dequantised value lands on the same level.
inline std::uint64_t level_index(double ratio, std::uint64_t lq) {
  const double t = ratio * static_cast<double>(lq);
  const double k = std::ceil(t - 1e-4);
  return std::min<std::uint64_t>(lq, static_cast<std::uint64_t>(std::max(0.0, k)));
}

}  // namespace detail

/// [Q(x)]_i = max_abs * sign(x_i) * ceil(l_q |x_i| / max_abs) / l_q with
/// l_q = 2^(floor(32/s_q) - 1) - 1.
inline QuantizedVector quantize(std::span<const double> x, unsigned s_q) {
  check_sq(s_q);
  if (x.size() > UINT32_MAX) throw std::invalid_argument("quantize: vector too long");
  QuantizedVector q;
  q.s_q = s_q;
  q.count = static_cast<std::uint32_t>(x.size());
  q.max_abs = norm_inf(x);
  const std::uint64_t lq = q.levels();
  detail::BitWriter writer(q.packed);
  for (double v : x) {
    const std::uint64_t k = q.max_abs > 0.0 ? detail::level_index(std::abs(v) / q.max_abs, lq) : 0;
    writer.put(v < 0.0 && k > 0 ? 1u : 0u, 1);
    writer.put(k, q.level_bits());
  }
  return q;
}

inline Vector dequantize(const QuantizedVector& q) {
  check_sq(q.s_q);
  detail::BitReader reader(q.packed);
  const double lq = static_cast<double>(q.levels());
  Vector out(q.count);
  for (double& v : out) {
    const bool negative = reader.get(1) != 0;
    const auto k = static_cast<double>(reader.get(q.level_bits()));
    v = q.max_abs * (k / lq);
    if (negative) v = -v;
  }
  return out;
}

inline std::vector<std::uint8_t> to_bytes(const QuantizedVector& q) {
  std::vector<std::uint8_t> out(12);
  for (int b = 0; b < 4; ++b) out[b] = static_cast<std::uint8_t>(q.count >> (8 * b));
  std::uint64_t bits;
  std::memcpy(&bits, &q.max_abs, sizeof bits);
  for (int b = 0; b < 8; ++b) out[4 + b] = static_cast<std::uint8_t>(bits >> (8 * b));
  out.insert(out.end(), q.packed.begin(), q.packed.end());
  return out;
}

inline QuantizedVector quantized_from_bytes(std::span<const std::uint8_t> bytes, unsigned s_q) {
  check_sq(s_q);
  if (bytes.size() < 12) throw std::runtime_error("quantized stream: header truncated");
  QuantizedVector q;
  q.s_q = s_q;
  for (int b = 0; b < 4; ++b) q.count |= static_cast<std::uint32_t>(bytes[b]) << (8 * b);
  std::uint64_t bits = 0;
  for (int b = 0; b < 8; ++b) bits |= static_cast<std::uint64_t>(bytes[4 + b]) << (8 * b);
  std::memcpy(&q.max_abs, &bits, sizeof bits);
  const std::uint64_t payload = (std::uint64_t{q.count} * bits_per_element(s_q) + 7) / 8;
  if (bytes.size() != 12 + payload) throw std::runtime_error("quantized stream: payload length mismatch");
  q.packed.assign(bytes.begin() + 12, bytes.end());
  return q;
}

// ---------------------------------------------------------------------------
// Truncated SVD compression

inline std::size_t svd_rank_for(std::size_t m, double s_v) {
  if (!(s_v >= 1.0)) throw std::invalid_argument("svd_compress: s_v must be >= 1");
  return static_cast<std::size_t>(std::floor(static_cast<double>(m) / (2.0 * s_v)));
}

/// Keeps the top l_v = floor(m / (2 s_v)) singular triples of a square matrix.
inline LowRankFactors svd_compress(const DenseMatrix& a, double s_v) {
  if (!a.is_square()) throw std::invalid_argument("svd_compress: matrix must be square");
  const std::size_t lv = svd_rank_for(a.rows(), s_v);
  if (lv == 0) throw std::invalid_argument("svd_compress: l_v = floor(m / 2 s_v) is zero");
  return top_k_svd(a, lv);
}

inline DenseMatrix reconstruct(const LowRankFactors& f) { return f.reconstruct(); }

/// 32 (2 m l_v + l_v): both singular-vector blocks plus the singular values.
inline std::uint64_t svd_bit_cost(const LowRankFactors& f) {
  return 32ull * (f.u.size() + f.v.size() + f.sigma.size());
}

// ---------------------------------------------------------------------------
// Quantised low-rank K-FAC payloads

struct QuantizedLowRank {
  std::size_t rows = 0;
  std::size_t rank = 0;
  QuantizedVector u, sigma, v;  // each factor carries its own scale

  std::uint64_t bit_cost() const { return u.bit_cost() + sigma.bit_cost() + v.bit_cost(); }
};

inline QuantizedLowRank quantize_factors(const LowRankFactors& f, unsigned s_q) {
  return {f.u.rows(), f.rank(), quantize(f.u.entries(), s_q), quantize(f.sigma, s_q), quantize(f.v.entries(), s_q)};
}

inline LowRankFactors dequantize_factors(const QuantizedLowRank& q) {
  return {DenseMatrix(q.rows, q.rank, dequantize(q.u)), dequantize(q.sigma), DenseMatrix(q.rows, q.rank, dequantize(q.v))};
}

struct CompressedKfacBlock {
  QuantizedLowRank a;
  QuantizedLowRank b;
};

struct CompressedKFAC {
  unsigned s_q = 1;
  std::vector<CompressedKfacBlock> blocks;
};

/// Exact cost of a quantised low-rank factor of an m x m matrix at rank l.
inline std::uint64_t quantized_lowrank_cost(std::size_t m, std::size_t l, unsigned s_q) {
  return std::uint64_t{bits_per_element(s_q)} * (2 * m * l + l) + 3 * 32;
}

inline std::size_t capped_rank(std::size_t lv, std::size_t m) { return std::min(lv, m); }

inline CompressedKFAC compress_kfac(const KfacFisher& f, const std::vector<std::size_t>& ranks, unsigned s_q) {
  check_sq(s_q);
  if (ranks.size() != f.blocks.size()) throw std::invalid_argument("compress_kfac: one rank per layer required");
  CompressedKFAC out{s_q, {}};
  for (std::size_t l = 0; l < f.blocks.size(); ++l) {
    const auto& blk = f.blocks[l];
    const std::size_t la = capped_rank(ranks[l], blk.a.rows());
    const std::size_t lb = capped_rank(ranks[l], blk.b.rows());
    out.blocks.push_back({quantize_factors(top_k_svd(blk.a, la), s_q), quantize_factors(top_k_svd(blk.b, lb), s_q)});
  }
  return out;
}

inline KfacFisher decompress_kfac(const CompressedKFAC& c) {
  KfacFisher f;
  for (const auto& blk : c.blocks) {
    DenseMatrix a = dequantize_factors(blk.a).reconstruct();
    DenseMatrix b = dequantize_factors(blk.b).reconstruct();
    // Re-symmetrise: quantisation perturbs U and V independently.
    for (DenseMatrix* m : {&a, &b}) {
      for (std::size_t i = 0; i < m->rows(); ++i)
        for (std::size_t j = 0; j < i; ++j) (*m)(i, j) = (*m)(j, i) = 0.5 * ((*m)(i, j) + (*m)(j, i));
    }
    f.blocks.push_back({std::move(a), std::move(b)});
  }
  return f;
}

// ---------------------------------------------------------------------------
// Bit accounting

struct RawVector {
  std::size_t length = 0;
};

using Payload = std::variant<RawVector, QuantizedVector, CompressedKFAC, LowRankFactors>;

inline std::uint64_t bit_cost(const RawVector& r) { return 32ull * r.length; }
inline std::uint64_t bit_cost(const QuantizedVector& q) { return q.bit_cost(); }
inline std::uint64_t bit_cost(const LowRankFactors& f) { return svd_bit_cost(f); }
inline std::uint64_t bit_cost(const CompressedKFAC& c) {
  std::uint64_t total = 0;
  for (const auto& blk : c.blocks) total += blk.a.bit_cost() + blk.b.bit_cost();
  return total;
}
inline std::uint64_t bit_cost(const Payload& p) {
  return std::visit([](const auto& x) { return bit_cost(x); }, p);
}

// ---------------------------------------------------------------------------
// K-FAC budget planner

struct KfacFactorDims {
  std::size_t a = 0;  // A_l is a x a
  std::size_t b = 0;  // B_l is b x b
};

struct KfacBudgetPlan {
  bool feasible = false;
  std::size_t rank = 0;              // uniform l_v before per-factor capping
  std::vector<std::size_t> layer_ranks;
  std::vector<double> s_v_a, s_v_b;  // ceil(m / 2 l) per factor
  std::uint64_t fisher_bits = 0;
  std::uint64_t budget_bits = 0;
  std::string reason;
};

inline std::uint64_t kfac_plan_cost(const std::vector<KfacFactorDims>& dims, std::size_t lv, unsigned s_q) {
  std::uint64_t total = 0;
  for (const auto& fd : dims) {
    total += quantized_lowrank_cost(fd.a, capped_rank(lv, fd.a), s_q);
    total += quantized_lowrank_cost(fd.b, capped_rank(lv, fd.b), s_q);
  }
  return total;
}

/// Largest uniform rank l_v (capped at each factor's size) whose exact
/// quantised cost fits `budget_bits`.
inline KfacBudgetPlan kfac_budget_plan_bits(const std::vector<KfacFactorDims>& dims, std::uint64_t budget_bits,
                                            unsigned s_q) {
  check_sq(s_q);
  if (dims.empty()) throw std::invalid_argument("kfac_budget_plan: no layers");
  KfacBudgetPlan plan;
  plan.budget_bits = budget_bits;
  std::size_t max_rank = 0;
  for (const auto& fd : dims) max_rank = std::max({max_rank, fd.a, fd.b});
  if (kfac_plan_cost(dims, 1, s_q) > budget_bits) {
    plan.reason = "infeasible: rank-1 factors need " + std::to_string(kfac_plan_cost(dims, 1, s_q)) +
                  " bits, budget is " + std::to_string(budget_bits);
    return plan;
  }
  std::size_t lo = 1, hi = max_rank;
  while (lo < hi) {
    const std::size_t mid = lo + (hi - lo + 1) / 2;
    if (kfac_plan_cost(dims, mid, s_q) <= budget_bits) lo = mid;
    else hi = mid - 1;
  }
  plan.feasible = true;
  plan.rank = lo;
  plan.fisher_bits = kfac_plan_cost(dims, lo, s_q);
  for (const auto& fd : dims) {
    plan.layer_ranks.push_back(lo);
    const std::size_t la = capped_rank(lo, fd.a), lb = capped_rank(lo, fd.b);
    plan.s_v_a.push_back(std::ceil(static_cast<double>(fd.a) / (2.0 * static_cast<double>(la))));
    plan.s_v_b.push_back(std::ceil(static_cast<double>(fd.b) / (2.0 * static_cast<double>(lb))));
  }
  return plan;
}

/// Fisher budget when weights travel at s_q = 2 per layer: the Fisher may
/// use 16 d - 32 L bits so that weights plus Fisher stay within 32 d.
inline std::uint64_t kfac_fisher_budget(std::size_t d, std::size_t num_layers) {
  const std::uint64_t full = 16ull * d;
  const std::uint64_t headers = 32ull * num_layers;
  return full > headers ? full - headers : 0;
}

/// Planner against the parameter count `d`; the Fisher budget reserves the
/// per-layer quantisation headers of the s_q = 2 weights.
inline KfacBudgetPlan kfac_budget_plan(const std::vector<KfacFactorDims>& dims, std::size_t d, unsigned s_q) {
  return kfac_budget_plan_bits(dims, kfac_fisher_budget(d, dims.size()), s_q);
}

}  // namespace fedfisher
