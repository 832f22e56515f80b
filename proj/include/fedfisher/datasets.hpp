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

// Dataset generation, ingestion and client partitioning.

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "fedfisher/numerics.hpp"
#include "fedfisher/random.hpp"

namespace fedfisher {

/// One input/label pair. For classification `y` holds the class index.
struct Example {
  Vector x;
  double y = 0.0;

  std::size_t label() const { return static_cast<std::size_t>(y); }
  friend bool operator==(const Example&, const Example&) = default;
};

using Partition = std::vector<std::vector<std::size_t>>;

struct FederatedDataset {
  std::vector<Example> examples;
  Partition partition;
  std::size_t num_classes = 0;  // 0 for regression

  std::size_t num_clients() const noexcept { return partition.size(); }

  std::vector<Example> client_examples(std::size_t client) const {
    std::vector<Example> out;
    out.reserve(partition.at(client).size());
    for (std::size_t idx : partition[client]) out.push_back(examples.at(idx));
    return out;
  }
};

/// Parse/format failure while reading dataset files. `field()` names the
/// offending header field or section.
class DatasetError : public std::runtime_error {
 public:
  DatasetError(std::string field, const std::string& what)
      : std::runtime_error(field + ": " + what), field_(std::move(field)) {}
  const std::string& field() const noexcept { return field_; }

 private:
  std::string field_;
};

// ---------------------------------------------------------------------------
// Synthetic regression data for the two-layer experiments.

struct SyntheticData {
  FederatedDataset dataset;
  std::vector<Vector> client_weights;  // the per-client label generators
};

/// Per client i: scalars w_i, b_i ~ N(0,1); vectors W_i ~ N(w_i 1, I),
/// B_i ~ N(b_i 1, I); inputs x = x~/|x~| with x~ ~ N(B_i, diag(k^-1.2)),
/// labels y = W_i^T x. Each client draws from its own substream.
inline SyntheticData gen_synthetic(std::uint64_t seed, std::size_t m_clients, std::size_t n_per_client,
                                   std::size_t p) {
  if (m_clients == 0) throw std::invalid_argument("gen_synthetic: need at least one client");
  if (n_per_client == 0) throw std::invalid_argument("gen_synthetic: n_per_client must be >= 1");
  if (p == 0) throw std::invalid_argument("gen_synthetic: p must be >= 1");

  SyntheticData out;
  out.dataset.examples.reserve(m_clients * n_per_client);
  out.dataset.partition.resize(m_clients);
  Vector stddev(p);
  for (std::size_t k = 0; k < p; ++k) stddev[k] = std::pow(static_cast<double>(k + 1), -0.6);

  for (std::size_t i = 0; i < m_clients; ++i) {
    Rng rng = substream(seed, i);
    std::normal_distribution<double> normal;
    const double w_mean = normal(rng);
    const double b_mean = normal(rng);
    Vector w(p), b(p);
    for (std::size_t k = 0; k < p; ++k) w[k] = w_mean + normal(rng);
    for (std::size_t k = 0; k < p; ++k) b[k] = b_mean + normal(rng);
    out.client_weights.push_back(w);

    for (std::size_t j = 0; j < n_per_client; ++j) {
      Vector x(p);
      double nx = 0.0;
      while (nx == 0.0) {
        for (std::size_t k = 0; k < p; ++k) x[k] = b[k] + stddev[k] * normal(rng);
        nx = norm2(x);
      }
      for (double& v : x) v /= nx;
      const double y = dot(w, x);
      out.dataset.partition[i].push_back(out.dataset.examples.size());
      out.dataset.examples.push_back({std::move(x), y});
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Normalisation

inline std::vector<Example> normalize_unit(std::vector<Example> examples) {
  for (std::size_t i = 0; i < examples.size(); ++i) {
    const double n = norm2(examples[i].x);
    if (n == 0.0) throw std::invalid_argument("normalize_unit: zero feature vector at index " + std::to_string(i));
    for (double& v : examples[i].x) v /= n;
  }
  return examples;
}

// ---------------------------------------------------------------------------
// Dirichlet partitioning

namespace detail {

inline Partition dirichlet_draw(const std::vector<std::vector<std::size_t>>& by_class, std::size_t m_clients,
                                double alpha, Rng& rng) {
  Partition part(m_clients);
  std::gamma_distribution<double> gamma(alpha, 1.0);
  for (const auto& members : by_class) {
    if (members.empty()) continue;
    Vector props(m_clients);
    double total = 0.0;
    for (double& v : props) {
      v = gamma(rng);
      total += v;
    }
    if (!(total > 0.0)) {
      // Every gamma draw underflowed: all mass on one uniformly chosen client.
      std::uniform_int_distribution<std::size_t> pick(0, m_clients - 1);
      std::fill(props.begin(), props.end(), 0.0);
      props[pick(rng)] = 1.0;
      total = 1.0;
    }
    std::vector<std::size_t> shuffled = members;
    std::shuffle(shuffled.begin(), shuffled.end(), rng);
    const auto count = static_cast<double>(shuffled.size());
    double cum = 0.0;
    std::size_t start = 0;
    for (std::size_t c = 0; c < m_clients; ++c) {
      cum += props[c] / total;
      std::size_t stop = c + 1 == m_clients ? shuffled.size()
                                             : std::min(shuffled.size(), static_cast<std::size_t>(cum * count));
      stop = std::max(stop, start);
      part[c].insert(part[c].end(), shuffled.begin() + static_cast<std::ptrdiff_t>(start),
                     shuffled.begin() + static_cast<std::ptrdiff_t>(stop));
      start = stop;
    }
  }
  for (auto& p : part) std::sort(p.begin(), p.end());
  return part;
}

}  // namespace detail

/// Splits labelled examples over `m_clients` with per-class client
/// proportions drawn from Dirichlet(alpha). Draws that leave a client empty
/// are resampled up to 100 times; after that one example moves from the
/// largest client to each empty one.
inline Partition dirichlet_partition(const std::vector<Example>& examples, std::size_t m_clients, double alpha,
                                     std::uint64_t seed) {
  if (m_clients == 0) throw std::invalid_argument("dirichlet_partition: need at least one client");
  if (!(alpha > 0.0)) throw std::invalid_argument("dirichlet_partition: alpha must be positive");
  if (examples.size() < m_clients) {
    throw std::invalid_argument("dirichlet_partition: fewer examples (" + std::to_string(examples.size()) +
                                ") than clients (" + std::to_string(m_clients) + ")");
  }
  std::size_t num_classes = 0;
  for (const auto& e : examples) {
    if (e.y < 0.0 || e.y != std::floor(e.y)) throw std::invalid_argument("dirichlet_partition: labels must be class indices");
    num_classes = std::max(num_classes, e.label() + 1);
  }
  std::vector<std::vector<std::size_t>> by_class(num_classes);
  for (std::size_t i = 0; i < examples.size(); ++i) by_class[examples[i].label()].push_back(i);

  Rng rng = substream(seed, stream::kPartition);
  Partition part;
  for (int attempt = 0; attempt < 100; ++attempt) {
    part = detail::dirichlet_draw(by_class, m_clients, alpha, rng);
    if (std::none_of(part.begin(), part.end(), [](const auto& p) { return p.empty(); })) return part;
  }
  for (auto& client : part) {
    if (!client.empty()) continue;
    auto largest = std::max_element(part.begin(), part.end(),
                                    [](const auto& a, const auto& b) { return a.size() < b.size(); });
    client.push_back(largest->back());
    largest->pop_back();
  }
  return part;
}

// ---------------------------------------------------------------------------
// IDX files (big-endian magic + dims + raw unsigned bytes)

inline constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;

namespace detail {

inline std::vector<unsigned char> read_file(const std::string& path, const std::string& field) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DatasetError(field, "cannot open '" + path + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline std::uint32_t read_be32(const std::vector<unsigned char>& buf, std::size_t offset, const std::string& field) {
  if (buf.size() < offset + 4) throw DatasetError(field, "file truncated inside header");
  return (std::uint32_t{buf[offset]} << 24) | (std::uint32_t{buf[offset + 1]} << 16) |
         (std::uint32_t{buf[offset + 2]} << 8) | std::uint32_t{buf[offset + 3]};
}

inline void put_be32(std::ostream& out, std::uint32_t v) {
  const unsigned char bytes[4] = {static_cast<unsigned char>(v >> 24), static_cast<unsigned char>(v >> 16),
                                  static_cast<unsigned char>(v >> 8), static_cast<unsigned char>(v)};
  out.write(reinterpret_cast<const char*>(bytes), 4);
}

}  // namespace detail

/// Reads an IDX image file (magic 0x803, dims N x rows x cols) and its
/// label file (magic 0x801, dim N). Pixels are scaled to [0, 1].
inline std::vector<Example> load_idx(const std::string& images_path, const std::string& labels_path) {
  const auto img = detail::read_file(images_path, "images");
  const auto lab = detail::read_file(labels_path, "labels");

  if (detail::read_be32(img, 0, "images.magic") != kIdxImagesMagic)
    throw DatasetError("images.magic", "expected 0x00000803");
  if (detail::read_be32(lab, 0, "labels.magic") != kIdxLabelsMagic)
    throw DatasetError("labels.magic", "expected 0x00000801");

  const std::size_t n = detail::read_be32(img, 4, "images.count");
  const std::size_t rows = detail::read_be32(img, 8, "images.rows");
  const std::size_t cols = detail::read_be32(img, 12, "images.cols");
  const std::size_t n_labels = detail::read_be32(lab, 4, "labels.count");
  if (n != n_labels) {
    throw DatasetError("labels.count", "label count " + std::to_string(n_labels) + " != image count " +
                                           std::to_string(n));
  }
  const std::size_t dim = rows * cols;
  if (img.size() != 16 + n * dim) {
    throw DatasetError("images.pixels", "expected " + std::to_string(n * dim) + " pixel bytes, found " +
                                            std::to_string(img.size() < 16 ? 0 : img.size() - 16));
  }
  if (lab.size() != 8 + n) {
    throw DatasetError("labels.values", "expected " + std::to_string(n) + " label bytes, found " +
                                            std::to_string(lab.size() < 8 ? 0 : lab.size() - 8));
  }

  std::vector<Example> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    out[i].x.resize(dim);
    for (std::size_t k = 0; k < dim; ++k) out[i].x[k] = static_cast<double>(img[16 + i * dim + k]) / 255.0;
    out[i].y = static_cast<double>(lab[8 + i]);
  }
  return out;
}

/// Writes examples whose features are multiples of 1/255 in [0,1] as an IDX
/// image/label pair. `rows * cols` must equal the feature length.
inline void write_idx(const std::vector<Example>& examples, std::size_t rows, std::size_t cols,
                      const std::string& images_path, const std::string& labels_path) {
  std::ofstream img(images_path, std::ios::binary);
  std::ofstream lab(labels_path, std::ios::binary);
  if (!img || !lab) throw DatasetError("output", "cannot open IDX output files");
  detail::put_be32(img, kIdxImagesMagic);
  detail::put_be32(img, static_cast<std::uint32_t>(examples.size()));
  detail::put_be32(img, static_cast<std::uint32_t>(rows));
  detail::put_be32(img, static_cast<std::uint32_t>(cols));
  detail::put_be32(lab, kIdxLabelsMagic);
  detail::put_be32(lab, static_cast<std::uint32_t>(examples.size()));
  for (const auto& e : examples) {
    if (e.x.size() != rows * cols) throw std::invalid_argument("write_idx: feature length != rows*cols");
    for (double v : e.x) {
      const long q = std::lround(std::clamp(v, 0.0, 1.0) * 255.0);
      img.put(static_cast<char>(static_cast<unsigned char>(q)));
    }
    if (e.y < 0.0 || e.y > 255.0) throw std::invalid_argument("write_idx: label outside byte range");
    lab.put(static_cast<char>(static_cast<unsigned char>(e.label())));
  }
}

// ---------------------------------------------------------------------------
// CSV: header row, numeric columns, last column is the label.

inline std::vector<Example> load_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DatasetError("csv", "cannot open '" + path + "'");
  std::string line;
  if (!std::getline(in, line)) throw DatasetError("csv.header", "missing header row");
  const auto columns = static_cast<std::size_t>(std::count(line.begin(), line.end(), ',')) + 1;
  if (columns < 2) throw DatasetError("csv.header", "need at least one feature and a label column");

  std::vector<Example> out;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line == "\r") continue;
    std::stringstream ss(line);
    std::string cell;
    Vector values;
    while (std::getline(ss, cell, ',')) {
      try {
        values.push_back(std::stod(cell));
      } catch (const std::exception&) {
        throw DatasetError("csv.row" + std::to_string(lineno), "non-numeric cell '" + cell + "'");
      }
    }
    if (values.size() != columns) {
      throw DatasetError("csv.row" + std::to_string(lineno),
                         "expected " + std::to_string(columns) + " cells, found " + std::to_string(values.size()));
    }
    const double y = values.back();
    values.pop_back();
    out.push_back({std::move(values), y});
  }
  return out;
}

// ---------------------------------------------------------------------------
// 28x28 ten-class image-like data used when no IDX files are supplied.

struct ImageStyle {
  std::size_t side = 28;
  std::size_t num_classes = 10;
  std::size_t parts_pool = 16;
  std::size_t parts_per_class = 4;
  int max_shift = 2;
  double noise = 0.15;
  std::uint64_t prototype_seed = 0x5eedf00dULL;
};

namespace detail {

struct Blob {
  double cx, cy, sx, sy, angle, weight;
};

inline std::vector<std::vector<Blob>> image_prototypes(const ImageStyle& style) {
  Rng rng(mix64(style.prototype_seed));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double side = static_cast<double>(style.side);
  std::vector<Blob> pool(style.parts_pool);
  for (auto& b : pool) {
    b.cx = side * (0.2 + 0.6 * unit(rng));
    b.cy = side * (0.2 + 0.6 * unit(rng));
    b.sx = side * (0.04 + 0.18 * unit(rng));
    b.sy = side * (0.04 + 0.18 * unit(rng));
    b.angle = 3.14159265358979 * unit(rng);
    b.weight = 1.0;
  }
  std::vector<std::vector<Blob>> classes(style.num_classes);
  std::vector<std::size_t> ids(style.parts_pool);
  std::iota(ids.begin(), ids.end(), 0);
  for (auto& parts : classes) {
    std::shuffle(ids.begin(), ids.end(), rng);
    for (std::size_t k = 0; k < style.parts_per_class; ++k) {
      Blob b = pool[ids[k]];
      b.weight = 0.5 + 0.5 * unit(rng);
      parts.push_back(b);
    }
  }
  return classes;
}

}  // namespace detail

/// Byte-quantised grey-scale images: every class is a fixed mixture of
/// elliptical strokes drawn from a shared pool, so classes overlap. Samples
/// add a random translation, per-stroke intensity jitter and pixel noise.
/// Samples with different `seed` share prototypes (same `style`).
inline std::vector<Example> gen_image_like(std::uint64_t seed, std::size_t count, const ImageStyle& style = {}) {
  const auto prototypes = detail::image_prototypes(style);
  Rng rng = substream(seed, stream::kDataset);
  std::uniform_int_distribution<std::size_t> pick_class(0, style.num_classes - 1);
  std::uniform_int_distribution<int> shift(-style.max_shift, style.max_shift);
  std::uniform_real_distribution<double> jitter(0.6, 1.2);
  std::normal_distribution<double> normal;
  const std::size_t side = style.side;

  std::vector<Example> out(count);
  for (auto& ex : out) {
    const std::size_t c = pick_class(rng);
    const double dx = shift(rng), dy = shift(rng);
    std::vector<double> gains;
    for (std::size_t k = 0; k < prototypes[c].size(); ++k) gains.push_back(jitter(rng));
    ex.x.assign(side * side, 0.0);
    for (std::size_t r = 0; r < side; ++r) {
      for (std::size_t col = 0; col < side; ++col) {
        double v = 0.0;
        for (std::size_t k = 0; k < prototypes[c].size(); ++k) {
          const auto& b = prototypes[c][k];
          const double u = static_cast<double>(col) - b.cx - dx;
          const double w = static_cast<double>(r) - b.cy - dy;
          const double ca = std::cos(b.angle), sa = std::sin(b.angle);
          const double a1 = (ca * u + sa * w) / b.sx;
          const double a2 = (-sa * u + ca * w) / b.sy;
          v += gains[k] * b.weight * std::exp(-0.5 * (a1 * a1 + a2 * a2));
        }
        v += style.noise * normal(rng);
        ex.x[r * side + col] = static_cast<double>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)) / 255.0;
      }
    }
    ex.y = static_cast<double>(c);
  }
  return out;
}

}  // namespace fedfisher
