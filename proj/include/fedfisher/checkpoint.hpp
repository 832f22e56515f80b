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

// Binary checkpoints: a length-prefixed text descriptor followed by
// little-endian float64 payload. Models and Fisher approximations share the
// layout; Fisher payloads add a variant tag byte and per-layer dimensions.

#pragma once

#include <bit>
#include <cstdint>
#include <fstream>
#include <iterator>
#include <sstream>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "fedfisher/fisher.hpp"
#include "fedfisher/models.hpp"

namespace fedfisher {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace ckpt {

using Bytes = std::vector<std::uint8_t>;

inline void put_u32(Bytes& out, std::uint32_t v) {
  for (int k = 0; k < 4; ++k) out.push_back(static_cast<std::uint8_t>(v >> (8 * k)));
}

inline void put_f64(Bytes& out, double v) {
  const auto bits = std::bit_cast<std::uint64_t>(v);
  for (int k = 0; k < 8; ++k) out.push_back(static_cast<std::uint8_t>(bits >> (8 * k)));
}

inline void put_text(Bytes& out, const std::string& s) {
  put_u32(out, static_cast<std::uint32_t>(s.size()));
  out.insert(out.end(), s.begin(), s.end());
}

class Reader {
 public:
  explicit Reader(const Bytes& b) : buf_(b) {}

  std::uint8_t u8() {
    need(1);
    return buf_[pos_++];
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int k = 0; k < 4; ++k) v |= std::uint32_t{buf_[pos_++]} << (8 * k);
    return v;
  }
  double f64() {
    need(8);
    std::uint64_t v = 0;
    for (int k = 0; k < 8; ++k) v |= std::uint64_t{buf_[pos_++]} << (8 * k);
    return std::bit_cast<double>(v);
  }
  std::string text() {
    const std::uint32_t n = u32();
    need(n);
    std::string s(buf_.begin() + static_cast<std::ptrdiff_t>(pos_), buf_.begin() + static_cast<std::ptrdiff_t>(pos_ + n));
    pos_ += n;
    return s;
  }
  Vector f64s(std::size_t n) {
    if (n > (buf_.size() - pos_) / 8) throw CheckpointError("checkpoint: truncated payload");
    Vector v(n);
    for (double& x : v) x = f64();
    return v;
  }
  bool done() const { return pos_ == buf_.size(); }

 private:
  void need(std::size_t n) const {
    if (buf_.size() - pos_ < n) throw CheckpointError("checkpoint: truncated payload");
  }
  const Bytes& buf_;
  std::size_t pos_ = 0;
};

inline std::vector<std::string> words(const std::string& s) {
  std::istringstream in(s);
  return {std::istream_iterator<std::string>(in), std::istream_iterator<std::string>()};
}

inline std::string value_of(const std::vector<std::string>& w, const std::string& key) {
  for (const auto& t : w)
    if (t.rfind(key + "=", 0) == 0) return t.substr(key.size() + 1);
  throw CheckpointError("checkpoint: descriptor lacks '" + key + "'");
}

inline std::size_t size_of(const std::vector<std::string>& w, const std::string& key) {
  const std::string v = value_of(w, key);
  try {
    std::size_t used = 0;
    const unsigned long long n = std::stoull(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return static_cast<std::size_t>(n);
  } catch (const std::exception&) {
    throw CheckpointError("checkpoint: bad value for '" + key + "': " + v);
  }
}

}  // namespace ckpt

// ---------------------------------------------------------------------------
// Models

inline std::string describe(const TwoLayerReLU& net) {
  std::string signs;
  for (double a : net.second_layer) signs += a > 0 ? '+' : '-';
  return "two-layer-relu m=" + std::to_string(net.m) + " p=" + std::to_string(net.p) + " signs=" + signs;
}

inline std::string describe(const MLP& net) {
  std::string dims;
  for (std::size_t k = 0; k < net.dims().size(); ++k) dims += (k ? "," : "") + std::to_string(net.dims()[k]);
  return std::string("mlp dims=") + dims + " head=" + (net.head() == Head::softmax ? "softmax" : "regression");
}

template <class Model>
ckpt::Bytes to_checkpoint(const Model& net) {
  ckpt::Bytes out;
  ckpt::put_text(out, describe(net));
  const Vector p = net.parameters();
  for (double v : p) ckpt::put_f64(out, v);
  return out;
}

/// Reads either model kind; the descriptor decides which.
inline std::variant<TwoLayerReLU, MLP> model_from_checkpoint(const ckpt::Bytes& bytes) {
  ckpt::Reader in(bytes);
  const auto w = ckpt::words(in.text());
  if (w.empty()) throw CheckpointError("checkpoint: empty descriptor");
  std::variant<TwoLayerReLU, MLP> out;
  if (w[0] == "two-layer-relu") {
    TwoLayerReLU net;
    net.m = ckpt::size_of(w, "m");
    net.p = ckpt::size_of(w, "p");
    const std::string signs = ckpt::value_of(w, "signs");
    if (signs.size() != net.m) throw CheckpointError("checkpoint: sign count != m");
    for (char c : signs) {
      if (c != '+' && c != '-') throw CheckpointError("checkpoint: bad sign character");
      net.second_layer.push_back(c == '+' ? 1.0 : -1.0);
    }
    net.first_layer = in.f64s(net.m * net.p);
    out = std::move(net);
  } else if (w[0] == "mlp") {
    std::vector<std::size_t> dims;
    std::stringstream ss(ckpt::value_of(w, "dims"));
    for (std::string tok; std::getline(ss, tok, ',');) {
      try {
        dims.push_back(static_cast<std::size_t>(std::stoull(tok)));
      } catch (const std::exception&) {
        throw CheckpointError("checkpoint: bad layer dimension '" + tok + "'");
      }
    }
    const std::string head = ckpt::value_of(w, "head");
    if (head != "softmax" && head != "regression") throw CheckpointError("checkpoint: unknown head " + head);
    MLP net(dims, head == "softmax" ? Head::softmax : Head::regression);
    out = net.with_parameters(in.f64s(net.num_params()));
  } else {
    throw CheckpointError("checkpoint: unknown model kind " + w[0]);
  }
  if (!in.done()) throw CheckpointError("checkpoint: trailing bytes");
  return out;
}

// ---------------------------------------------------------------------------
// Fisher payloads

enum class FisherTag : std::uint8_t { full = 0, diag = 1, kfac = 2 };

inline ckpt::Bytes to_checkpoint(const FisherApprox& f) {
  ckpt::Bytes out;
  ckpt::put_text(out, std::string("fisher kind=") + fisher_kind_name(f) + " d=" + std::to_string(fisher_dim(f)));
  auto put_matrix = [&out](const DenseMatrix& m) {
    ckpt::put_u32(out, static_cast<std::uint32_t>(m.rows()));
    for (double v : m.entries()) ckpt::put_f64(out, v);
  };
  std::visit(Overloaded{[&](const FullFisher& x) {
                          out.push_back(static_cast<std::uint8_t>(FisherTag::full));
                          put_matrix(x.matrix);
                        },
                        [&](const DiagFisher& x) {
                          out.push_back(static_cast<std::uint8_t>(FisherTag::diag));
                          ckpt::put_u32(out, static_cast<std::uint32_t>(x.diagonal.size()));
                          for (double v : x.diagonal) ckpt::put_f64(out, v);
                        },
                        [&](const KfacFisher& x) {
                          out.push_back(static_cast<std::uint8_t>(FisherTag::kfac));
                          ckpt::put_u32(out, static_cast<std::uint32_t>(x.blocks.size()));
                          for (const auto& b : x.blocks) {
                            put_matrix(b.a);
                            put_matrix(b.b);
                          }
                        }},
             f);
  return out;
}

inline FisherApprox fisher_from_checkpoint(const ckpt::Bytes& bytes) {
  ckpt::Reader in(bytes);
  const auto w = ckpt::words(in.text());
  if (w.empty() || w[0] != "fisher") throw CheckpointError("checkpoint: not a Fisher payload");
  auto get_matrix = [&in]() {
    const std::size_t n = in.u32();
    return DenseMatrix(n, n, in.f64s(n * n));
  };
  FisherApprox out;
  switch (static_cast<FisherTag>(in.u8())) {
    case FisherTag::full: out = FullFisher{get_matrix()}; break;
    case FisherTag::diag: out = DiagFisher{in.f64s(in.u32())}; break;
    case FisherTag::kfac: {
      KfacFisher k;
      const std::uint32_t layers = in.u32();
      for (std::uint32_t l = 0; l < layers; ++l) {
        DenseMatrix a = get_matrix();
        DenseMatrix b = get_matrix();
        k.blocks.push_back({std::move(a), std::move(b)});
      }
      out = std::move(k);
      break;
    }
    default: throw CheckpointError("checkpoint: unknown Fisher tag");
  }
  if (!in.done()) throw CheckpointError("checkpoint: trailing bytes");
  if (fisher_dim(out) != ckpt::size_of(w, "d")) throw CheckpointError("checkpoint: Fisher dimension disagrees with descriptor");
  return out;
}

inline void write_file(const std::string& path, const ckpt::Bytes& bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw CheckpointError("cannot open " + path + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw CheckpointError("write failed: " + path);
}

inline ckpt::Bytes read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace fedfisher
