#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "srisk/errors.hpp"
#include "srisk/tensor.hpp"

namespace srisk {

enum class Op {
  kLeaf,
  kMatmul,
  kAdd,
  kMul,
  kScale,
  kRelu,
  kGelu,
  kTanh,
  kSigmoid,
  kSoftmax,
  kLayerNorm,
  kLinear,
  kMean,
  kConcat,
  kTranspose,
  kReshape,
  kConv2d,
  kMaxPool2,
  kSliceCols,
  kMaskedBce,
};

inline const char* op_name(Op op) {
  switch (op) {
    case Op::kLeaf: return "leaf";
    case Op::kMatmul: return "matmul";
    case Op::kAdd: return "add";
    case Op::kMul: return "mul";
    case Op::kScale: return "scale";
    case Op::kRelu: return "relu";
    case Op::kGelu: return "gelu";
    case Op::kTanh: return "tanh";
    case Op::kSigmoid: return "sigmoid";
    case Op::kSoftmax: return "softmax";
    case Op::kLayerNorm: return "layer_norm";
    case Op::kLinear: return "linear";
    case Op::kMean: return "mean";
    case Op::kConcat: return "concat";
    case Op::kTranspose: return "transpose";
    case Op::kReshape: return "reshape";
    case Op::kConv2d: return "conv2d";
    case Op::kMaxPool2: return "maxpool2";
    case Op::kSliceCols: return "slice_cols";
    case Op::kMaskedBce: return "masked_bce";
  }
  return "?";
}

// Handle into a Graph; cheap to copy.
struct Value {
  int id = -1;
};

constexpr double kLayerNormEps = 1e-5;
constexpr double kBceClamp = 1e-12;

namespace detail {

struct AxisView {
  std::size_t outer, len, inner;
};

inline AxisView axis_view(const std::vector<std::size_t>& dims, int axis) {
  AxisView v{1, dims[static_cast<std::size_t>(axis)], 1};
  for (int i = 0; i < axis; ++i) v.outer *= dims[static_cast<std::size_t>(i)];
  for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < dims.size(); ++i)
    v.inner *= dims[i];
  return v;
}

inline void im2col3x3(const double* x, std::size_t cin, std::size_t h,
                      std::size_t w, double* col) {
  // col is [(cin*9) x (h*w)], zero-padded borders.
  const std::size_t hw = h * w;
  for (std::size_t c = 0; c < cin; ++c) {
    const double* xc = x + c * hw;
    for (int ky = 0; ky < 3; ++ky) {
      for (int kx = 0; kx < 3; ++kx) {
        double* row = col + (c * 9 + static_cast<std::size_t>(ky * 3 + kx)) * hw;
        for (std::size_t oy = 0; oy < h; ++oy) {
          const long iy = static_cast<long>(oy) + ky - 1;
          if (iy < 0 || iy >= static_cast<long>(h)) {
            for (std::size_t ox = 0; ox < w; ++ox) row[oy * w + ox] = 0.0;
            continue;
          }
          const double* src = xc + static_cast<std::size_t>(iy) * w;
          for (std::size_t ox = 0; ox < w; ++ox) {
            const long ix = static_cast<long>(ox) + kx - 1;
            row[oy * w + ox] =
                (ix < 0 || ix >= static_cast<long>(w)) ? 0.0 : src[ix];
          }
        }
      }
    }
  }
}

inline void col2im3x3_add(const double* col, std::size_t cin, std::size_t h,
                          std::size_t w, double* dx) {
  const std::size_t hw = h * w;
  for (std::size_t c = 0; c < cin; ++c) {
    double* dxc = dx + c * hw;
    for (int ky = 0; ky < 3; ++ky) {
      for (int kx = 0; kx < 3; ++kx) {
        const double* row =
            col + (c * 9 + static_cast<std::size_t>(ky * 3 + kx)) * hw;
        for (std::size_t oy = 0; oy < h; ++oy) {
          const long iy = static_cast<long>(oy) + ky - 1;
          if (iy < 0 || iy >= static_cast<long>(h)) continue;
          double* dst = dxc + static_cast<std::size_t>(iy) * w;
          for (std::size_t ox = 0; ox < w; ++ox) {
            const long ix = static_cast<long>(ox) + kx - 1;
            if (ix < 0 || ix >= static_cast<long>(w)) continue;
            dst[ix] += row[oy * w + ox];
          }
        }
      }
    }
  }
}

}  // namespace detail

// Define-by-run computation graph. Nodes are appended in topological
// order; backward walks them in reverse. One graph per forward pass.
class Graph {
 public:
  Value input(Tensor t) { return add_leaf(std::move(t), false, {}); }

  Value param(const Tensor& t, std::string name) {
    return add_leaf(t, true, std::move(name));
  }

  Value matmul(Value a, Value b) {
    const Tensor& ta = val(a);
    const Tensor& tb = val(b);
    if (ta.rank() != 2 || tb.rank() != 2 || ta.dims[1] != tb.dims[0])
      throw ShapeError("matmul: incompatible dims " + ta.dims_str() + " and " +
                       tb.dims_str());
    Tensor out = Tensor::zeros({ta.dims[0], tb.dims[1]});
    detail::mm_nn(ta.data.data(), tb.data.data(), out.data.data(), ta.dims[0],
                  ta.dims[1], tb.dims[1]);
    return add_node(Op::kMatmul, {a, b}, std::move(out));
  }

  // a + b where b has the same dims as a, matches a's last dim (row
  // broadcast), or is a scalar.
  Value add(Value a, Value b) {
    const Tensor& ta = val(a);
    const Tensor& tb = val(b);
    Tensor out = ta;
    if (tb.same_dims(ta)) {
      for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += tb.data[i];
    } else if (tb.rank() == 1 && tb.dims[0] == ta.dims.back() && ta.rank() >= 2) {
      const std::size_t n = tb.dims[0];
      for (std::size_t i = 0; i < out.data.size(); ++i)
        out.data[i] += tb.data[i % n];
    } else if (tb.numel() == 1) {
      for (double& v : out.data) v += tb.data[0];
    } else {
      throw ShapeError("add: incompatible dims " + ta.dims_str() + " and " +
                       tb.dims_str());
    }
    return add_node(Op::kAdd, {a, b}, std::move(out));
  }

  Value mul(Value a, Value b) {
    const Tensor& ta = val(a);
    const Tensor& tb = val(b);
    if (!ta.same_dims(tb))
      throw ShapeError("mul: incompatible dims " + ta.dims_str() + " and " +
                       tb.dims_str());
    Tensor out = ta;
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] *= tb.data[i];
    return add_node(Op::kMul, {a, b}, std::move(out));
  }

  Value scale(Value a, double c) {
    Tensor out = val(a);
    for (double& v : out.data) v *= c;
    Value r = add_node(Op::kScale, {a}, std::move(out));
    nodes_[static_cast<std::size_t>(r.id)].c = c;
    return r;
  }

  Value relu(Value a) {
    Tensor out = val(a);
    for (double& v : out.data) v = v > 0.0 ? v : 0.0;
    return add_node(Op::kRelu, {a}, std::move(out));
  }

  Value gelu(Value a) {
    Tensor out = val(a);
    for (double& v : out.data) {
      const double u = 0.7978845608028654 * (v + 0.044715 * v * v * v);
      v = 0.5 * v * (1.0 + std::tanh(u));
    }
    return add_node(Op::kGelu, {a}, std::move(out));
  }

  Value tanh_(Value a) {
    Tensor out = val(a);
    for (double& v : out.data) v = std::tanh(v);
    return add_node(Op::kTanh, {a}, std::move(out));
  }

  Value sigmoid(Value a) {
    Tensor out = val(a);
    for (double& v : out.data) v = 1.0 / (1.0 + std::exp(-v));
    return add_node(Op::kSigmoid, {a}, std::move(out));
  }

  Value softmax(Value a, int axis) {
    const Tensor& ta = val(a);
    check_axis(ta, axis, "softmax");
    Tensor out = ta;
    auto view = detail::axis_view(ta.dims, axis);
    for_lines(view, [&](std::size_t base, std::size_t stride) {
      double mx = out.data[base];
      for (std::size_t j = 1; j < view.len; ++j)
        mx = std::max(mx, out.data[base + j * stride]);
      double sum = 0.0;
      for (std::size_t j = 0; j < view.len; ++j) {
        double& v = out.data[base + j * stride];
        v = std::exp(v - mx);
        sum += v;
      }
      for (std::size_t j = 0; j < view.len; ++j)
        out.data[base + j * stride] /= sum;
    });
    Value r = add_node(Op::kSoftmax, {a}, std::move(out));
    nodes_[static_cast<std::size_t>(r.id)].axis = axis;
    return r;
  }

  // Normalizes along `axis`, then applies elementwise affine gamma/beta
  // (vectors of the axis length). Variance floor keeps constant inputs
  // at exactly zero pre-affine.
  Value layer_norm(Value x, Value gamma, Value beta, int axis) {
    const Tensor& tx = val(x);
    check_axis(tx, axis, "layer_norm");
    auto view = detail::axis_view(tx.dims, axis);
    const Tensor& tg = val(gamma);
    const Tensor& tb = val(beta);
    if (tg.rank() != 1 || tg.dims[0] != view.len || !tb.same_dims(tg))
      throw ShapeError("layer_norm: affine dims " + tg.dims_str() + "/" +
                       tb.dims_str() + " do not match axis length " +
                       std::to_string(view.len));
    Tensor out = tx;
    for_lines(view, [&](std::size_t base, std::size_t stride) {
      double mean = 0.0;
      for (std::size_t j = 0; j < view.len; ++j)
        mean += out.data[base + j * stride];
      mean /= static_cast<double>(view.len);
      double var = 0.0;
      for (std::size_t j = 0; j < view.len; ++j) {
        const double d = out.data[base + j * stride] - mean;
        var += d * d;
      }
      var /= static_cast<double>(view.len);
      const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
      for (std::size_t j = 0; j < view.len; ++j) {
        double& v = out.data[base + j * stride];
        v = (v - mean) * inv * tg.data[j] + tb.data[j];
      }
    });
    Value r = add_node(Op::kLayerNorm, {x, gamma, beta}, std::move(out));
    nodes_[static_cast<std::size_t>(r.id)].axis = axis;
    return r;
  }

  // y = x W^T + b with W [out x in], b [out]; x is [in] or [rows x in].
  Value linear(Value x, Value w, Value b) {
    const Tensor& tx = val(x);
    const Tensor& tw = val(w);
    const Tensor& tb = val(b);
    if (tw.rank() != 2)
      throw ShapeError("linear: weight must be 2-D, got " + tw.dims_str());
    const std::size_t in = tw.dims[1];
    const std::size_t out_dim = tw.dims[0];
    if (tb.rank() != 1 || tb.dims[0] != out_dim)
      throw ShapeError("linear: bias dims " + tb.dims_str() + " vs out " +
                       std::to_string(out_dim));
    std::size_t rows;
    if (tx.rank() == 1 && tx.dims[0] == in) {
      rows = 1;
    } else if (tx.rank() == 2 && tx.dims[1] == in) {
      rows = tx.dims[0];
    } else {
      throw ShapeError("linear: input dims " + tx.dims_str() +
                       " vs weight " + tw.dims_str());
    }
    Tensor out = tx.rank() == 1 ? Tensor::zeros({out_dim})
                                : Tensor::zeros({rows, out_dim});
    detail::mm_nt(tx.data.data(), tw.data.data(), out.data.data(), rows, in,
                  out_dim);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t o = 0; o < out_dim; ++o)
        out.data[r * out_dim + o] += tb.data[o];
    return add_node(Op::kLinear, {x, w, b}, std::move(out));
  }

  Value mean(Value a, int axis) {
    const Tensor& ta = val(a);
    check_axis(ta, axis, "mean");
    auto view = detail::axis_view(ta.dims, axis);
    std::vector<std::size_t> od;
    for (std::size_t i = 0; i < ta.dims.size(); ++i)
      if (static_cast<int>(i) != axis) od.push_back(ta.dims[i]);
    if (od.empty()) od.push_back(1);
    Tensor out = Tensor::zeros(od);
    std::size_t li = 0;
    for_lines(view, [&](std::size_t base, std::size_t stride) {
      double s = 0.0;
      for (std::size_t j = 0; j < view.len; ++j) s += ta.data[base + j * stride];
      out.data[li++] = s / static_cast<double>(view.len);
    });
    Value r = add_node(Op::kMean, {a}, std::move(out));
    nodes_[static_cast<std::size_t>(r.id)].axis = axis;
    return r;
  }

  Value concat(std::span<const Value> xs, int axis) {
    if (xs.empty()) throw ShapeError("concat: no inputs");
    const Tensor& t0 = val(xs[0]);
    check_axis(t0, axis, "concat");
    std::vector<std::size_t> od = t0.dims;
    std::size_t total = 0;
    for (Value v : xs) {
      const Tensor& t = val(v);
      if (t.rank() != t0.rank())
        throw ShapeError("concat: rank mismatch");
      for (std::size_t i = 0; i < t.dims.size(); ++i)
        if (static_cast<int>(i) != axis && t.dims[i] != t0.dims[i])
          throw ShapeError("concat: dims mismatch " + t.dims_str() + " vs " +
                           t0.dims_str());
      total += t.dims[static_cast<std::size_t>(axis)];
    }
    od[static_cast<std::size_t>(axis)] = total;
    Tensor out = Tensor::zeros(od);
    auto ov = detail::axis_view(od, axis);
    std::size_t off = 0;
    for (Value v : xs) {
      const Tensor& t = val(v);
      auto iv = detail::axis_view(t.dims, axis);
      for (std::size_t o = 0; o < iv.outer; ++o)
        for (std::size_t j = 0; j < iv.len; ++j)
          for (std::size_t i = 0; i < iv.inner; ++i)
            out.data[(o * ov.len + off + j) * ov.inner + i] =
                t.data[(o * iv.len + j) * iv.inner + i];
      off += iv.len;
    }
    std::vector<Value> in(xs.begin(), xs.end());
    Value r = add_node_multi(Op::kConcat, in, std::move(out));
    nodes_[static_cast<std::size_t>(r.id)].axis = axis;
    return r;
  }

  Value transpose(Value a) {
    const Tensor& ta = val(a);
    if (ta.rank() != 2)
      throw ShapeError("transpose: need 2-D tensor, got " + ta.dims_str());
    Tensor out = Tensor::zeros({ta.dims[1], ta.dims[0]});
    for (std::size_t i = 0; i < ta.dims[0]; ++i)
      for (std::size_t j = 0; j < ta.dims[1]; ++j)
        out.data[j * ta.dims[0] + i] = ta.data[i * ta.dims[1] + j];
    return add_node(Op::kTranspose, {a}, std::move(out));
  }

  Value reshape(Value a, std::vector<std::size_t> dims) {
    const Tensor& ta = val(a);
    std::size_t n = 1;
    for (auto d : dims) n *= d;
    if (n != ta.numel())
      throw ShapeError("reshape: " + ta.dims_str() + " has " +
                       std::to_string(ta.numel()) + " elements, target needs " +
                       std::to_string(n));
    Tensor out(std::move(dims), ta.data);
    return add_node(Op::kReshape, {a}, std::move(out));
  }

  // 3x3 convolution, stride 1, zero padding 1.
  // x [cin x h x w], w [cout x cin x 3 x 3], b [cout] -> [cout x h x w].
  Value conv2d(Value x, Value w, Value b) {
    const Tensor& tx = val(x);
    const Tensor& tw = val(w);
    const Tensor& tb = val(b);
    if (tx.rank() != 3 || tw.rank() != 4 || tw.dims[1] != tx.dims[0] ||
        tw.dims[2] != 3 || tw.dims[3] != 3)
      throw ShapeError("conv2d: input " + tx.dims_str() + " kernel " +
                       tw.dims_str());
    const std::size_t cout = tw.dims[0];
    if (tb.rank() != 1 || tb.dims[0] != cout)
      throw ShapeError("conv2d: bias dims " + tb.dims_str());
    const std::size_t cin = tx.dims[0], h = tx.dims[1], wd = tx.dims[2];
    const std::size_t hw = h * wd;
    std::vector<double> col(cin * 9 * hw);
    detail::im2col3x3(tx.data.data(), cin, h, wd, col.data());
    Tensor out = Tensor::zeros({cout, h, wd});
    detail::mm_nn(tw.data.data(), col.data(), out.data.data(), cout, cin * 9,
                  hw);
    for (std::size_t c = 0; c < cout; ++c)
      for (std::size_t i = 0; i < hw; ++i) out.data[c * hw + i] += tb.data[c];
    return add_node(Op::kConv2d, {x, w, b}, std::move(out));
  }

  // 2x2 max pooling, stride 2 (floor). Needs h, w >= 2.
  Value maxpool2(Value x) {
    const Tensor& tx = val(x);
    if (tx.rank() != 3)
      throw ShapeError("maxpool2: need [c x h x w], got " + tx.dims_str());
    const std::size_t c = tx.dims[0], h = tx.dims[1], w = tx.dims[2];
    if (h < 2 || w < 2)
      throw ShapeError("maxpool2: spatial dims " + tx.dims_str() +
                       " below 2x2 window");
    const std::size_t oh = h / 2, ow = w / 2;
    Tensor out = Tensor::zeros({c, oh, ow});
    std::vector<int> arg(c * oh * ow);
    for (std::size_t ci = 0; ci < c; ++ci) {
      const double* xc = tx.data.data() + ci * h * w;
      for (std::size_t oy = 0; oy < oh; ++oy) {
        for (std::size_t ox = 0; ox < ow; ++ox) {
          std::size_t best = (2 * oy) * w + 2 * ox;
          double bv = xc[best];
          const std::size_t cand[3] = {(2 * oy) * w + 2 * ox + 1,
                                       (2 * oy + 1) * w + 2 * ox,
                                       (2 * oy + 1) * w + 2 * ox + 1};
          for (std::size_t k = 0; k < 3; ++k)
            if (xc[cand[k]] > bv) {
              bv = xc[cand[k]];
              best = cand[k];
            }
          out.data[(ci * oh + oy) * ow + ox] = bv;
          arg[(ci * oh + oy) * ow + ox] =
              static_cast<int>(ci * h * w + best);
        }
      }
    }
    Value r = add_node(Op::kMaxPool2, {x}, std::move(out));
    nodes_[static_cast<std::size_t>(r.id)].argmax = std::move(arg);
    return r;
  }

  // Contiguous column range of a 2-D tensor.
  Value slice_cols(Value a, std::size_t start, std::size_t len) {
    const Tensor& ta = val(a);
    if (ta.rank() != 2 || start + len > ta.dims[1])
      throw ShapeError("slice_cols: range [" + std::to_string(start) + ", " +
                       std::to_string(start + len) + ") of " + ta.dims_str());
    Tensor out = Tensor::zeros({ta.dims[0], len});
    for (std::size_t i = 0; i < ta.dims[0]; ++i)
      for (std::size_t j = 0; j < len; ++j)
        out.data[i * len + j] = ta.data[i * ta.dims[1] + start + j];
    Value r = add_node(Op::kSliceCols, {a}, std::move(out));
    Node& n = nodes_[static_cast<std::size_t>(r.id)];
    n.a0 = start;
    n.a1 = len;
    return r;
  }

  // Mean of the per-position binary cross-entropy over unmasked
  // positions; masked positions contribute exactly zero loss and
  // gradient. Probabilities are clamped to [1e-12, 1 - 1e-12].
  Value masked_bce(Value p, std::span<const double> y,
                   std::span<const double> mask) {
    const Tensor& tp = val(p);
    if (tp.numel() != y.size() || y.size() != mask.size())
      throw ShapeError("masked_bce: p " + tp.dims_str() + " vs labels " +
                       std::to_string(y.size()));
    double msum = 0.0;
    for (double m : mask) msum += m;
    if (msum <= 0.0)
      throw ContractError("masked_bce: empty mask (no observable years)");
    double loss = 0.0;
    for (std::size_t t = 0; t < y.size(); ++t) {
      if (mask[t] == 0.0) continue;
      const double pt =
          std::min(1.0 - kBceClamp, std::max(kBceClamp, tp.data[t]));
      loss += -y[t] * std::log(pt) - (1.0 - y[t]) * std::log(1.0 - pt);
    }
    Tensor out = Tensor::scalar(loss / msum);
    Value r = add_node(Op::kMaskedBce, {p}, std::move(out));
    Node& n = nodes_[static_cast<std::size_t>(r.id)];
    n.ya.assign(y.begin(), y.end());
    n.yb.assign(mask.begin(), mask.end());
    n.c = msum;
    return r;
  }

  void backward(Value loss) {
    Node& ln = node(loss);
    if (ln.val.numel() != 1)
      throw ContractError("backward: loss must be scalar, got " +
                          ln.val.dims_str());
    // Every trainable leaf gets a gradient tensor, so parameters that
    // are disconnected from the loss read back exact zeros.
    for (Node& n : nodes_)
      if (n.trainable) ensure_grad(n);
    ensure_grad(ln);
    ln.grad.data[0] = 1.0;
    for (std::size_t i = nodes_.size(); i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.needs_grad || n.grad.data.empty() || n.op == Op::kLeaf) continue;
      backprop(n);
    }
  }

  const Tensor& value(Value v) const { return node(v).val; }

  // Gradient of the last backward() w.r.t. this node; zeros if the node
  // never received one.
  const Tensor& grad(Value v) {
    Node& n = node(v);
    ensure_grad(n);
    return n.grad;
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Op op;
    std::vector<int> in;
    Tensor val;
    Tensor grad;
    bool trainable = false;
    bool needs_grad = false;
    int axis = -1;
    double c = 0.0;
    std::size_t a0 = 0, a1 = 0;
    std::vector<int> argmax;
    std::vector<double> ya, yb;
    std::string name;
  };

  Node& node(Value v) {
    if (v.id < 0 || static_cast<std::size_t>(v.id) >= nodes_.size())
      throw ContractError("invalid graph value handle");
    return nodes_[static_cast<std::size_t>(v.id)];
  }
  const Node& node(Value v) const {
    if (v.id < 0 || static_cast<std::size_t>(v.id) >= nodes_.size())
      throw ContractError("invalid graph value handle");
    return nodes_[static_cast<std::size_t>(v.id)];
  }

  const Tensor& val(Value v) const { return node(v).val; }

  static void ensure_grad(Node& n) {
    if (n.grad.data.empty()) n.grad = Tensor::zeros(n.val.dims);
  }

  Value add_leaf(Tensor t, bool trainable, std::string name) {
    if (!t.all_finite())
      throw NumericError("leaf tensor contains non-finite values");
    Node n;
    n.op = Op::kLeaf;
    n.val = std::move(t);
    n.trainable = trainable;
    n.needs_grad = trainable;
    n.name = std::move(name);
    nodes_.push_back(std::move(n));
    return Value{static_cast<int>(nodes_.size()) - 1};
  }

  Value add_node(Op op, std::initializer_list<Value> in, Tensor out) {
    std::vector<Value> v(in);
    return add_node_multi(op, v, std::move(out));
  }

  Value add_node_multi(Op op, const std::vector<Value>& in, Tensor out) {
    if (!out.all_finite())
      throw NumericError(std::string("op ") + op_name(op) +
                         " produced non-finite values");
    Node n;
    n.op = op;
    n.val = std::move(out);
    for (Value v : in) {
      n.in.push_back(v.id);
      if (node(v).needs_grad) n.needs_grad = true;
    }
    nodes_.push_back(std::move(n));
    return Value{static_cast<int>(nodes_.size()) - 1};
  }

  static void check_axis(const Tensor& t, int axis, const char* what) {
    if (axis < 0 || static_cast<std::size_t>(axis) >= t.dims.size())
      throw ShapeError(std::string(what) + ": axis " + std::to_string(axis) +
                       " out of range for " + t.dims_str());
  }

  template <typename F>
  static void for_lines(const detail::AxisView& v, F&& f) {
    for (std::size_t o = 0; o < v.outer; ++o)
      for (std::size_t i = 0; i < v.inner; ++i)
        f(o * v.len * v.inner + i, v.inner);
  }

  Node& in_node(Node& n, std::size_t k) {
    return nodes_[static_cast<std::size_t>(n.in[k])];
  }

  // Accumulates input gradients for one node from its output gradient.
  void backprop(Node& n) {
    const Tensor& g = n.grad;
    switch (n.op) {
      case Op::kLeaf:
        break;
      case Op::kMatmul: {
        Node& a = in_node(n, 0);
        Node& b = in_node(n, 1);
        const std::size_t m = a.val.dims[0], k = a.val.dims[1],
                          nn = b.val.dims[1];
        if (a.needs_grad) {
          ensure_grad(a);
          detail::mm_nt(g.data.data(), b.val.data.data(), a.grad.data.data(),
                        m, nn, k);
        }
        if (b.needs_grad) {
          ensure_grad(b);
          detail::mm_tn(a.val.data.data(), g.data.data(), b.grad.data.data(),
                        k, m, nn);
        }
        break;
      }
      case Op::kAdd: {
        Node& a = in_node(n, 0);
        Node& b = in_node(n, 1);
        if (a.needs_grad) {
          ensure_grad(a);
          for (std::size_t i = 0; i < g.data.size(); ++i)
            a.grad.data[i] += g.data[i];
        }
        if (b.needs_grad) {
          ensure_grad(b);
          if (b.val.same_dims(n.val)) {
            for (std::size_t i = 0; i < g.data.size(); ++i)
              b.grad.data[i] += g.data[i];
          } else if (b.val.numel() == 1) {
            for (double gv : g.data) b.grad.data[0] += gv;
          } else {
            const std::size_t nb = b.val.dims[0];
            for (std::size_t i = 0; i < g.data.size(); ++i)
              b.grad.data[i % nb] += g.data[i];
          }
        }
        break;
      }
      case Op::kMul: {
        Node& a = in_node(n, 0);
        Node& b = in_node(n, 1);
        if (a.needs_grad) {
          ensure_grad(a);
          for (std::size_t i = 0; i < g.data.size(); ++i)
            a.grad.data[i] += g.data[i] * b.val.data[i];
        }
        if (b.needs_grad) {
          ensure_grad(b);
          for (std::size_t i = 0; i < g.data.size(); ++i)
            b.grad.data[i] += g.data[i] * a.val.data[i];
        }
        break;
      }
      case Op::kScale: {
        Node& a = in_node(n, 0);
        if (a.needs_grad) {
          ensure_grad(a);
          for (std::size_t i = 0; i < g.data.size(); ++i)
            a.grad.data[i] += n.c * g.data[i];
        }
        break;
      }
      case Op::kRelu: {
        Node& a = in_node(n, 0);
        if (a.needs_grad) {
          ensure_grad(a);
          for (std::size_t i = 0; i < g.data.size(); ++i)
            if (a.val.data[i] > 0.0) a.grad.data[i] += g.data[i];
        }
        break;
      }
      case Op::kGelu: {
        Node& a = in_node(n, 0);
        if (a.needs_grad) {
          ensure_grad(a);
          for (std::size_t i = 0; i < g.data.size(); ++i) {
            const double x = a.val.data[i];
            const double u = 0.7978845608028654 * (x + 0.044715 * x * x * x);
            const double t = std::tanh(u);
            const double d = 0.5 * (1.0 + t) +
                             0.5 * x * (1.0 - t * t) * 0.7978845608028654 *
                                 (1.0 + 0.134145 * x * x);
            a.grad.data[i] += g.data[i] * d;
          }
        }
        break;
      }
      case Op::kTanh: {
        Node& a = in_node(n, 0);
        if (a.needs_grad) {
          ensure_grad(a);
          for (std::size_t i = 0; i < g.data.size(); ++i) {
            const double y = n.val.data[i];
            a.grad.data[i] += g.data[i] * (1.0 - y * y);
          }
        }
        break;
      }
      case Op::kSigmoid: {
        Node& a = in_node(n, 0);
        if (a.needs_grad) {
          ensure_grad(a);
          for (std::size_t i = 0; i < g.data.size(); ++i) {
            const double y = n.val.data[i];
            a.grad.data[i] += g.data[i] * y * (1.0 - y);
          }
        }
        break;
      }
      case Op::kSoftmax: {
        Node& a = in_node(n, 0);
        if (!a.needs_grad) break;
        ensure_grad(a);
        auto view = detail::axis_view(n.val.dims, n.axis);
        for_lines(view, [&](std::size_t base, std::size_t stride) {
          double dot = 0.0;
          for (std::size_t j = 0; j < view.len; ++j) {
            const std::size_t idx = base + j * stride;
            dot += g.data[idx] * n.val.data[idx];
          }
          for (std::size_t j = 0; j < view.len; ++j) {
            const std::size_t idx = base + j * stride;
            a.grad.data[idx] += n.val.data[idx] * (g.data[idx] - dot);
          }
        });
        break;
      }
      case Op::kLayerNorm: {
        Node& x = in_node(n, 0);
        Node& ga = in_node(n, 1);
        Node& be = in_node(n, 2);
        auto view = detail::axis_view(x.val.dims, n.axis);
        if (x.needs_grad) ensure_grad(x);
        if (ga.needs_grad) ensure_grad(ga);
        if (be.needs_grad) ensure_grad(be);
        std::vector<double> xhat(view.len), h(view.len);
        for_lines(view, [&](std::size_t base, std::size_t stride) {
          double mean = 0.0;
          for (std::size_t j = 0; j < view.len; ++j)
            mean += x.val.data[base + j * stride];
          mean /= static_cast<double>(view.len);
          double var = 0.0;
          for (std::size_t j = 0; j < view.len; ++j) {
            const double d = x.val.data[base + j * stride] - mean;
            var += d * d;
          }
          var /= static_cast<double>(view.len);
          const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
          for (std::size_t j = 0; j < view.len; ++j)
            xhat[j] = (x.val.data[base + j * stride] - mean) * inv;
          for (std::size_t j = 0; j < view.len; ++j) {
            const double gv = g.data[base + j * stride];
            if (ga.needs_grad) ga.grad.data[j] += gv * xhat[j];
            if (be.needs_grad) be.grad.data[j] += gv;
          }
          if (!x.needs_grad) return;
          double mh = 0.0, mhx = 0.0;
          for (std::size_t j = 0; j < view.len; ++j) {
            h[j] = g.data[base + j * stride] * ga.val.data[j];
            mh += h[j];
            mhx += h[j] * xhat[j];
          }
          mh /= static_cast<double>(view.len);
          mhx /= static_cast<double>(view.len);
          for (std::size_t j = 0; j < view.len; ++j)
            x.grad.data[base + j * stride] +=
                inv * (h[j] - mh - xhat[j] * mhx);
        });
        break;
      }
      case Op::kLinear: {
        Node& x = in_node(n, 0);
        Node& w = in_node(n, 1);
        Node& b = in_node(n, 2);
        const std::size_t in = w.val.dims[1], out = w.val.dims[0];
        const std::size_t rows = x.val.rank() == 1 ? 1 : x.val.dims[0];
        if (x.needs_grad) {
          ensure_grad(x);
          detail::mm_nn(g.data.data(), w.val.data.data(), x.grad.data.data(),
                        rows, out, in);
        }
        if (w.needs_grad) {
          ensure_grad(w);
          detail::mm_tn(g.data.data(), x.val.data.data(), w.grad.data.data(),
                        out, rows, in);
        }
        if (b.needs_grad) {
          ensure_grad(b);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t o = 0; o < out; ++o)
              b.grad.data[o] += g.data[r * out + o];
        }
        break;
      }
      case Op::kMean: {
        Node& a = in_node(n, 0);
        if (!a.needs_grad) break;
        ensure_grad(a);
        auto view = detail::axis_view(a.val.dims, n.axis);
        const double scale = 1.0 / static_cast<double>(view.len);
        std::size_t li = 0;
        for_lines(view, [&](std::size_t base, std::size_t stride) {
          const double gv = g.data[li++] * scale;
          for (std::size_t j = 0; j < view.len; ++j)
            a.grad.data[base + j * stride] += gv;
        });
        break;
      }
      case Op::kConcat: {
        auto ov = detail::axis_view(n.val.dims, n.axis);
        std::size_t off = 0;
        for (std::size_t k = 0; k < n.in.size(); ++k) {
          Node& a = in_node(n, k);
          auto iv = detail::axis_view(a.val.dims, n.axis);
          if (a.needs_grad) {
            ensure_grad(a);
            for (std::size_t o = 0; o < iv.outer; ++o)
              for (std::size_t j = 0; j < iv.len; ++j)
                for (std::size_t i = 0; i < iv.inner; ++i)
                  a.grad.data[(o * iv.len + j) * iv.inner + i] +=
                      g.data[(o * ov.len + off + j) * ov.inner + i];
          }
          off += iv.len;
        }
        break;
      }
      case Op::kTranspose: {
        Node& a = in_node(n, 0);
        if (!a.needs_grad) break;
        ensure_grad(a);
        const std::size_t r = n.val.dims[0], c = n.val.dims[1];
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < c; ++j)
            a.grad.data[j * r + i] += g.data[i * c + j];
        break;
      }
      case Op::kReshape: {
        Node& a = in_node(n, 0);
        if (!a.needs_grad) break;
        ensure_grad(a);
        for (std::size_t i = 0; i < g.data.size(); ++i)
          a.grad.data[i] += g.data[i];
        break;
      }
      case Op::kConv2d: {
        Node& x = in_node(n, 0);
        Node& w = in_node(n, 1);
        Node& b = in_node(n, 2);
        const std::size_t cin = x.val.dims[0], h = x.val.dims[1],
                          wd = x.val.dims[2];
        const std::size_t cout = w.val.dims[0];
        const std::size_t hw = h * wd;
        std::vector<double> col(cin * 9 * hw);
        detail::im2col3x3(x.val.data.data(), cin, h, wd, col.data());
        if (w.needs_grad) {
          ensure_grad(w);
          detail::mm_nt(g.data.data(), col.data(), w.grad.data.data(), cout,
                        hw, cin * 9);
        }
        if (b.needs_grad) {
          ensure_grad(b);
          for (std::size_t c = 0; c < cout; ++c)
            for (std::size_t i = 0; i < hw; ++i)
              b.grad.data[c] += g.data[c * hw + i];
        }
        if (x.needs_grad) {
          ensure_grad(x);
          std::vector<double> dcol(cin * 9 * hw, 0.0);
          detail::mm_tn(w.val.data.data(), g.data.data(), dcol.data(),
                        cin * 9, cout, hw);
          detail::col2im3x3_add(dcol.data(), cin, h, wd, x.grad.data.data());
        }
        break;
      }
      case Op::kMaxPool2: {
        Node& a = in_node(n, 0);
        if (!a.needs_grad) break;
        ensure_grad(a);
        for (std::size_t i = 0; i < g.data.size(); ++i)
          a.grad.data[static_cast<std::size_t>(n.argmax[i])] += g.data[i];
        break;
      }
      case Op::kSliceCols: {
        Node& a = in_node(n, 0);
        if (!a.needs_grad) break;
        ensure_grad(a);
        const std::size_t rows = n.val.dims[0], len = n.a1,
                          cols = a.val.dims[1];
        for (std::size_t i = 0; i < rows; ++i)
          for (std::size_t j = 0; j < len; ++j)
            a.grad.data[i * cols + n.a0 + j] += g.data[i * len + j];
        break;
      }
      case Op::kMaskedBce: {
        Node& p = in_node(n, 0);
        if (!p.needs_grad) break;
        ensure_grad(p);
        const double g0 = g.data[0] / n.c;
        for (std::size_t t = 0; t < n.ya.size(); ++t) {
          if (n.yb[t] == 0.0) continue;
          const double pt =
              std::min(1.0 - kBceClamp, std::max(kBceClamp, p.val.data[t]));
          p.grad.data[t] += g0 * (-n.ya[t] / pt + (1.0 - n.ya[t]) / (1.0 - pt));
        }
        break;
      }
    }
  }

  std::vector<Node> nodes_;
};

// Records (name, storage, graph handle) triples as parameters are bound
// into a graph, in a stable order shared by the optimizer, serializer
// and gradient checks.
struct Binding {
  std::vector<std::string> names;
  std::vector<Tensor*> tensors;
  std::vector<Value> values;

  Value bind(Graph& g, Tensor& t, std::string name) {
    Value v = g.param(t, name);
    names.push_back(std::move(name));
    tensors.push_back(&t);
    values.push_back(v);
    return v;
  }
};

}  // namespace srisk
