#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "srisk/encoder.hpp"
#include "srisk/errors.hpp"
#include "srisk/graph.hpp"
#include "srisk/rng.hpp"

namespace srisk {

// Bag aggregation modes. kLogo is the full pipeline (positional
// encoding + transformer + attention pooling); the others strip parts
// of it for ablations and baselines.
enum class AggMode { kLogo, kNoPe, kAbmil, kMean };

inline const char* agg_mode_name(AggMode m) {
  switch (m) {
    case AggMode::kLogo: return "logo";
    case AggMode::kNoPe: return "no_pe";
    case AggMode::kAbmil: return "abmil";
    case AggMode::kMean: return "mean";
  }
  return "?";
}

inline AggMode agg_mode_from(const std::string& s) {
  if (s == "logo") return AggMode::kLogo;
  if (s == "no_pe") return AggMode::kNoPe;
  if (s == "abmil") return AggMode::kAbmil;
  if (s == "mean") return AggMode::kMean;
  throw ConfigError("unknown mode '" + s + "' (logo|no_pe|abmil|mean)");
}

struct AggregatorConfig {
  int embed_dim = 64;  // C, must equal the encoder's final width
  int layers = 2;
  int heads = 8;
  int ffn_dim = 0;   // 0 -> 4*C
  int attn_dim = 0;  // MIL attention hidden size; 0 -> C
  int horizons = 5;  // n
  AggMode mode = AggMode::kLogo;

  int ffn() const { return ffn_dim > 0 ? ffn_dim : 4 * embed_dim; }
  int attn() const { return attn_dim > 0 ? attn_dim : embed_dim; }

  void validate() const {
    if (embed_dim < 1 || layers < 1 || heads < 1 || horizons < 1)
      throw ConfigError("aggregator: non-positive config field");
    if (embed_dim % heads != 0)
      throw ConfigError("aggregator: embed dim " + std::to_string(embed_dim) +
                        " not divisible by head count " +
                        std::to_string(heads));
    if (embed_dim % 2 != 0)
      throw ConfigError("aggregator: embed dim must be even for the "
                        "sinusoidal positional encoding");
  }
};

// PE[pos][2k]   = sin(pos / 10000^(2k/C))
// PE[pos][2k+1] = cos(pos / 10000^(2k/C)), pos 0-based.
inline Tensor positional_encoding(std::size_t L, std::size_t C) {
  if (L < 1) throw ContractError("positional_encoding: L must be >= 1");
  if (C % 2 != 0)
    throw ConfigError("positional_encoding: odd embedding dim " +
                      std::to_string(C));
  Tensor pe = Tensor::zeros({L, C});
  for (std::size_t pos = 0; pos < L; ++pos) {
    for (std::size_t k = 0; 2 * k < C; ++k) {
      const double freq =
          std::pow(10000.0, -static_cast<double>(2 * k) / static_cast<double>(C));
      const double angle = static_cast<double>(pos) * freq;
      pe.at2(pos, 2 * k) = std::sin(angle);
      pe.at2(pos, 2 * k + 1) = std::cos(angle);
    }
  }
  return pe;
}

struct AggParams {
  struct Layer {
    Tensor ln1_g, ln1_b;
    Tensor wq, bq, wk, bk, wv, bv, wo, bo;
    Tensor ln2_g, ln2_b;
    Tensor w1, b1, w2, b2;
  };
  std::vector<Layer> layers;
  Tensor mil_v;   // [C x A]
  Tensor mil_w;   // [A x 1]
  Tensor head_w;  // [(n+1) x C]
  Tensor head_b;  // [n+1]
};

inline AggParams aggregator_init(const AggregatorConfig& cfg, Xoshiro256pp& rng) {
  cfg.validate();
  const std::size_t c = static_cast<std::size_t>(cfg.embed_dim);
  const std::size_t ff = static_cast<std::size_t>(cfg.ffn());
  const std::size_t a = static_cast<std::size_t>(cfg.attn());
  const std::size_t np1 = static_cast<std::size_t>(cfg.horizons) + 1;
  auto randn = [&rng](Tensor& t, double stddev) {
    for (double& v : t.data) v = rng.normal(0.0, stddev);
  };
  AggParams p;
  for (int l = 0; l < cfg.layers; ++l) {
    AggParams::Layer ly;
    ly.ln1_g = Tensor::full({c}, 1.0);
    ly.ln1_b = Tensor::zeros({c});
    ly.wq = Tensor::zeros({c, c});
    ly.wk = Tensor::zeros({c, c});
    ly.wv = Tensor::zeros({c, c});
    ly.wo = Tensor::zeros({c, c});
    const double sc = std::sqrt(1.0 / static_cast<double>(c));
    randn(ly.wq, sc);
    randn(ly.wk, sc);
    randn(ly.wv, sc);
    randn(ly.wo, sc);
    ly.bq = Tensor::zeros({c});
    ly.bk = Tensor::zeros({c});
    ly.bv = Tensor::zeros({c});
    ly.bo = Tensor::zeros({c});
    ly.ln2_g = Tensor::full({c}, 1.0);
    ly.ln2_b = Tensor::zeros({c});
    ly.w1 = Tensor::zeros({ff, c});
    randn(ly.w1, std::sqrt(2.0 / static_cast<double>(c)));
    ly.b1 = Tensor::zeros({ff});
    ly.w2 = Tensor::zeros({c, ff});
    randn(ly.w2, std::sqrt(1.0 / static_cast<double>(ff)));
    ly.b2 = Tensor::zeros({c});
    p.layers.push_back(std::move(ly));
  }
  p.mil_v = Tensor::zeros({c, a});
  randn(p.mil_v, std::sqrt(1.0 / static_cast<double>(c)));
  p.mil_w = Tensor::zeros({a, 1});
  randn(p.mil_w, std::sqrt(1.0 / static_cast<double>(a)));
  p.head_w = Tensor::zeros({np1, c});
  randn(p.head_w, std::sqrt(1.0 / static_cast<double>(c)));
  p.head_b = Tensor::zeros({np1});
  return p;
}

struct AggBound {
  struct Layer {
    Value ln1_g, ln1_b;
    Value wq, bq, wk, bk, wv, bv, wo, bo;
    Value ln2_g, ln2_b;
    Value w1, b1, w2, b2;
  };
  std::vector<Layer> layers;
  Value mil_v, mil_w, head_w, head_b;
};

inline AggBound bind_aggregator(Graph& g, AggParams& p, Binding& b,
                                const std::string& prefix) {
  AggBound ab;
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    const std::string lp = prefix + "agg.layer" + std::to_string(l) + ".";
    AggParams::Layer& src = p.layers[l];
    AggBound::Layer ly;
    ly.ln1_g = b.bind(g, src.ln1_g, lp + "ln1.gamma");
    ly.ln1_b = b.bind(g, src.ln1_b, lp + "ln1.beta");
    ly.wq = b.bind(g, src.wq, lp + "attn.wq");
    ly.bq = b.bind(g, src.bq, lp + "attn.bq");
    ly.wk = b.bind(g, src.wk, lp + "attn.wk");
    ly.bk = b.bind(g, src.bk, lp + "attn.bk");
    ly.wv = b.bind(g, src.wv, lp + "attn.wv");
    ly.bv = b.bind(g, src.bv, lp + "attn.bv");
    ly.wo = b.bind(g, src.wo, lp + "attn.wo");
    ly.bo = b.bind(g, src.bo, lp + "attn.bo");
    ly.ln2_g = b.bind(g, src.ln2_g, lp + "ln2.gamma");
    ly.ln2_b = b.bind(g, src.ln2_b, lp + "ln2.beta");
    ly.w1 = b.bind(g, src.w1, lp + "ffn.w1");
    ly.b1 = b.bind(g, src.b1, lp + "ffn.b1");
    ly.w2 = b.bind(g, src.w2, lp + "ffn.w2");
    ly.b2 = b.bind(g, src.b2, lp + "ffn.b2");
    ab.layers.push_back(ly);
  }
  ab.mil_v = b.bind(g, p.mil_v, prefix + "agg.mil.v");
  ab.mil_w = b.bind(g, p.mil_w, prefix + "agg.mil.w");
  ab.head_w = b.bind(g, p.head_w, prefix + "agg.head.w");
  ab.head_b = b.bind(g, p.head_b, prefix + "agg.head.b");
  return ab;
}

// Attention matrices recorded during a forward pass, one per
// (layer, head); useful for diagnostics and tests.
struct AttnTrace {
  std::vector<Value> attention;
};

// Pre-norm transformer encoder over [L x C] with full (non-causal)
// self-attention: x += MHSA(LN(x)); x += FFN(LN(x)) with GELU.
inline Value transformer_encode(Graph& g, const AggBound& agg,
                                const AggregatorConfig& cfg, Value x,
                                AttnTrace* trace = nullptr) {
  const Tensor& tx = g.value(x);
  if (tx.rank() != 2 || tx.dims[1] != static_cast<std::size_t>(cfg.embed_dim))
    throw ContractError("transformer_encode: input " + tx.dims_str() +
                        " vs embed dim " + std::to_string(cfg.embed_dim));
  const std::size_t dh =
      static_cast<std::size_t>(cfg.embed_dim / cfg.heads);
  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
  for (const auto& ly : agg.layers) {
    Value ln1 = g.layer_norm(x, ly.ln1_g, ly.ln1_b, 1);
    Value q = g.linear(ln1, ly.wq, ly.bq);
    Value k = g.linear(ln1, ly.wk, ly.bk);
    Value v = g.linear(ln1, ly.wv, ly.bv);
    std::vector<Value> ctx;
    ctx.reserve(static_cast<std::size_t>(cfg.heads));
    for (int hd = 0; hd < cfg.heads; ++hd) {
      const std::size_t off = static_cast<std::size_t>(hd) * dh;
      Value qi = g.slice_cols(q, off, dh);
      Value ki = g.slice_cols(k, off, dh);
      Value vi = g.slice_cols(v, off, dh);
      Value scores = g.scale(g.matmul(qi, g.transpose(ki)), inv_sqrt_dh);
      Value attn = g.softmax(scores, 1);
      if (trace) trace->attention.push_back(attn);
      ctx.push_back(g.matmul(attn, vi));
    }
    Value merged = g.concat(ctx, 1);
    Value attn_out = g.linear(merged, ly.wo, ly.bo);
    x = g.add(x, attn_out);
    Value ln2 = g.layer_norm(x, ly.ln2_g, ly.ln2_b, 1);
    Value ff = g.linear(g.gelu(g.linear(ln2, ly.w1, ly.b1)), ly.w2, ly.b2);
    x = g.add(x, ff);
  }
  return x;
}

// e_i = w^T tanh(V h'_i); alpha = softmax(e); z = sum_i alpha_i h'_i.
// Returns (z [C], alpha [L]).
inline std::pair<Value, Value> attn_mil_pool(Graph& g, const AggBound& agg,
                                             Value hprime) {
  const Tensor& th = g.value(hprime);
  if (th.rank() != 2)
    throw ContractError("attn_mil_pool: input must be [L x C]");
  Value t = g.tanh_(g.matmul(hprime, agg.mil_v));
  Value e = g.reshape(g.matmul(t, agg.mil_w), {th.dims[0]});
  Value alpha = g.softmax(e, 0);
  Value z = g.matmul(g.reshape(alpha, {1, th.dims[0]}), hprime);
  return {g.reshape(z, {th.dims[1]}), alpha};
}

// Independent per-year sigmoid probabilities (deliberately not softmax:
// cumulative risks sum the leading entries).
inline Value predict_head(Graph& g, const AggBound& agg, Value z_bag) {
  return g.sigmoid(g.linear(z_bag, agg.head_w, agg.head_b));
}

struct ForwardValues {
  Value p;      // [n+1]
  Value alpha;  // [L]
  Value z;      // [C]
};

// Full bag forward for one plane model under the configured mode.
inline ForwardValues forward_bag(Graph& g, const EncoderBound& enc,
                                 const AggBound& agg,
                                 const AggregatorConfig& cfg,
                                 const SliceBag& bag,
                                 AttnTrace* trace = nullptr) {
  if (bag.slices.empty()) throw ContractError("forward: empty bag");
  Value h = encode_bag(g, enc, bag);
  const std::size_t L = g.value(h).dims[0];
  const std::size_t C = g.value(h).dims[1];
  ForwardValues out;
  switch (cfg.mode) {
    case AggMode::kLogo: {
      Value pe = g.input(positional_encoding(L, C));
      Value hp = transformer_encode(g, agg, cfg, g.add(h, pe), trace);
      auto [z, alpha] = attn_mil_pool(g, agg, hp);
      out.z = z;
      out.alpha = alpha;
      break;
    }
    case AggMode::kNoPe: {
      Value hp = transformer_encode(g, agg, cfg, h, trace);
      auto [z, alpha] = attn_mil_pool(g, agg, hp);
      out.z = z;
      out.alpha = alpha;
      break;
    }
    case AggMode::kAbmil: {
      auto [z, alpha] = attn_mil_pool(g, agg, h);
      out.z = z;
      out.alpha = alpha;
      break;
    }
    case AggMode::kMean: {
      out.z = g.mean(h, 0);
      out.alpha = g.input(
          Tensor::full({L}, 1.0 / static_cast<double>(L)));
      break;
    }
  }
  out.p = predict_head(g, agg, out.z);
  return out;
}

}  // namespace srisk
