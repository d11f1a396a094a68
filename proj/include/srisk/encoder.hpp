#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "srisk/errors.hpp"
#include "srisk/graph.hpp"
#include "srisk/rng.hpp"
#include "srisk/volume.hpp"

namespace srisk {

// Plain 4-stage CNN: per stage 3x3 conv (stride 1, pad 1) -> ReLU ->
// 2x2 max pool, then global average pooling to an embedding of length
// widths.back().
struct EncoderConfig {
  std::vector<int> widths = {8, 16, 32, 64};

  int embed_dim() const { return widths.back(); }
  std::size_t min_spatial() const { return std::size_t{1} << widths.size(); }

  void validate() const {
    if (widths.empty()) throw ConfigError("encoder: no stage widths");
    for (int w : widths)
      if (w < 1) throw ConfigError("encoder: stage width must be positive");
  }
};

struct EncoderParams {
  struct Stage {
    Tensor kernel;  // [cout x cin x 3 x 3]
    Tensor bias;    // [cout]
  };
  std::vector<Stage> stages;
};

// Kaiming fan-in initialization: kernel ~ N(0, 2/fan_in), biases zero.
inline EncoderParams encoder_init(const EncoderConfig& cfg, Xoshiro256pp& rng) {
  cfg.validate();
  EncoderParams p;
  int cin = 3;
  for (int cout : cfg.widths) {
    EncoderParams::Stage s;
    s.kernel = Tensor::zeros({static_cast<std::size_t>(cout),
                              static_cast<std::size_t>(cin), 3, 3});
    const double stddev = std::sqrt(2.0 / (9.0 * cin));
    for (double& v : s.kernel.data) v = rng.normal(0.0, stddev);
    s.bias = Tensor::zeros({static_cast<std::size_t>(cout)});
    p.stages.push_back(std::move(s));
    cin = cout;
  }
  return p;
}

struct EncoderBound {
  struct Stage {
    Value kernel, bias;
  };
  std::vector<Stage> stages;
};

inline EncoderBound bind_encoder(Graph& g, EncoderParams& p, Binding& b,
                                 const std::string& prefix) {
  EncoderBound eb;
  for (std::size_t i = 0; i < p.stages.size(); ++i) {
    EncoderBound::Stage s;
    s.kernel = b.bind(g, p.stages[i].kernel,
                      prefix + "enc.stage" + std::to_string(i) + ".kernel");
    s.bias = b.bind(g, p.stages[i].bias,
                    prefix + "enc.stage" + std::to_string(i) + ".bias");
    eb.stages.push_back(s);
  }
  return eb;
}

// x [3 x s1 x s2] -> embedding [C].
inline Value encode_slice(Graph& g, const EncoderBound& enc, Value x) {
  const Tensor& tx = g.value(x);
  if (tx.rank() != 3 || tx.dims[0] != 3)
    throw ContractError("encode_slice: input must be [3 x h x w], got " +
                        tx.dims_str());
  const std::size_t min_sp = std::size_t{1} << enc.stages.size();
  if (tx.dims[1] < min_sp || tx.dims[2] < min_sp)
    throw ContractError("encode_slice: spatial dims " + tx.dims_str() +
                        " below minimum " + std::to_string(min_sp) + "x" +
                        std::to_string(min_sp));
  Value h = x;
  for (const auto& st : enc.stages) {
    h = g.conv2d(h, st.kernel, st.bias);
    h = g.relu(h);
    h = g.maxpool2(h);
  }
  const Tensor& th = g.value(h);
  const std::size_t c = th.dims[0], sp = th.dims[1] * th.dims[2];
  h = g.reshape(h, {c, sp});
  return g.mean(h, 1);
}

// Stacks per-slice embeddings into [L x C], order preserved.
inline Value encode_bag(Graph& g, const EncoderBound& enc, const SliceBag& bag) {
  if (bag.slices.empty()) throw ContractError("encode_bag: empty bag");
  std::vector<Value> rows;
  rows.reserve(bag.slices.size());
  for (const Tensor& slice : bag.slices) {
    Value e = encode_slice(g, enc, g.input(slice));
    rows.push_back(g.reshape(e, {1, g.value(e).dims[0]}));
  }
  return g.concat(rows, 0);
}

}  // namespace srisk
