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

#pragma once

#include <cstdint>
#include <random>

namespace fedfisher {

using Rng = std::mt19937_64;

// splitmix64 finaliser; used to derive independent substream seeds.
constexpr std::uint64_t mix64(std::uint64_t z) noexcept {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

/// Seed of the substream `index` spawned from `master`.
constexpr std::uint64_t substream_seed(std::uint64_t master, std::uint64_t index) noexcept {
  return mix64(mix64(master) ^ mix64(index + 0x51afd7ed558ccd01ULL));
}

inline Rng substream(std::uint64_t master, std::uint64_t index) { return Rng(substream_seed(master, index)); }

// Well-known substream indices for draws that are not per-client.
namespace stream {
inline constexpr std::uint64_t kModelInit = 1ULL << 32;
inline constexpr std::uint64_t kPartition = (1ULL << 32) + 1;
inline constexpr std::uint64_t kFisherSampling = (1ULL << 32) + 2;
inline constexpr std::uint64_t kDataset = (1ULL << 32) + 3;
inline constexpr std::uint64_t kTraining = (1ULL << 33);
}  // namespace stream

}  // namespace fedfisher
