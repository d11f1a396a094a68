#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "srisk/errors.hpp"
#include "srisk/rng.hpp"
#include "srisk/tensor.hpp"

namespace srisk {

// Dense 3-D scalar field indexed (d, h, w), w fastest.
struct Volume {
  std::size_t d = 0, h = 0, w = 0;
  std::vector<double> voxels;

  Volume() = default;
  Volume(std::size_t dd, std::size_t hh, std::size_t ww)
      : d(dd), h(hh), w(ww), voxels(dd * hh * ww, 0.0) {}

  double& at(std::size_t di, std::size_t hi, std::size_t wi) {
    return voxels[(di * h + hi) * w + wi];
  }
  double at(std::size_t di, std::size_t hi, std::size_t wi) const {
    return voxels[(di * h + hi) * w + wi];
  }
  std::size_t size() const { return voxels.size(); }
};

enum class Plane { kAxial, kCoronal, kSagittal };

inline const char* plane_name(Plane p) {
  switch (p) {
    case Plane::kAxial: return "axial";
    case Plane::kCoronal: return "coronal";
    case Plane::kSagittal: return "sagittal";
  }
  return "?";
}

// Ordered pseudo-RGB slice sequence along one plane. Each slice tensor
// is [3 x s1 x s2].
struct SliceBag {
  Plane plane = Plane::kAxial;
  int gap = 0;
  std::vector<Tensor> slices;
};

// --- LGMR volume file -------------------------------------------------
// magic "LGMR" | u32 D | u32 H | u32 W | D*H*W float32, (d,h,w) order,
// little-endian throughout.

inline void save_volume(const Volume& v, const std::filesystem::path& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open for write: " + path.string());
  f.write("LGMR", 4);
  const std::uint32_t dims[3] = {static_cast<std::uint32_t>(v.d),
                                 static_cast<std::uint32_t>(v.h),
                                 static_cast<std::uint32_t>(v.w)};
  f.write(reinterpret_cast<const char*>(dims), sizeof(dims));
  std::vector<float> buf(v.voxels.size());
  for (std::size_t i = 0; i < buf.size(); ++i)
    buf[i] = static_cast<float>(v.voxels[i]);
  f.write(reinterpret_cast<const char*>(buf.data()),
          static_cast<std::streamsize>(buf.size() * sizeof(float)));
  if (!f) throw IoError("write failed: " + path.string());
}

inline Volume load_volume(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open: " + path.string());
  char magic[4];
  f.read(magic, 4);
  if (f.gcount() != 4 || std::memcmp(magic, "LGMR", 4) != 0)
    throw FormatError("bad volume magic at byte 0 in " + path.string());
  std::uint32_t dims[3];
  f.read(reinterpret_cast<char*>(dims), sizeof(dims));
  if (f.gcount() != sizeof(dims))
    throw FormatError("truncated volume header at byte 4 in " + path.string());
  const std::uint64_t n = static_cast<std::uint64_t>(dims[0]) * dims[1] * dims[2];
  if (dims[0] == 0 || dims[1] == 0 || dims[2] == 0 ||
      n > (1ull << 40) / sizeof(float))
    throw FormatError("volume dims overflow at byte 4 in " + path.string());
  std::vector<float> buf(n);
  f.read(reinterpret_cast<char*>(buf.data()),
         static_cast<std::streamsize>(n * sizeof(float)));
  if (static_cast<std::uint64_t>(f.gcount()) != n * sizeof(float))
    throw FormatError("truncated voxel payload at byte " +
                      std::to_string(16 + f.gcount()) + " in " + path.string());
  Volume v(dims[0], dims[1], dims[2]);
  for (std::size_t i = 0; i < v.voxels.size(); ++i)
    v.voxels[i] = static_cast<double>(buf[i]);
  if (!std::all_of(v.voxels.begin(), v.voxels.end(),
                   [](double x) { return std::isfinite(x); }))
    throw NumericError("volume contains non-finite voxels: " + path.string());
  return v;
}

// --- Reslicing ---------------------------------------------------------
// Axial slices index d (each H x W), coronal index h (D x W), sagittal
// index w (D x H).

inline std::size_t plane_count(const Volume& v, Plane p) {
  switch (p) {
    case Plane::kAxial: return v.d;
    case Plane::kCoronal: return v.h;
    case Plane::kSagittal: return v.w;
  }
  return 0;
}

inline std::vector<Tensor> reslice(const Volume& v, Plane p) {
  std::vector<Tensor> out;
  switch (p) {
    case Plane::kAxial:
      out.reserve(v.d);
      for (std::size_t d = 0; d < v.d; ++d) {
        Tensor t = Tensor::zeros({v.h, v.w});
        for (std::size_t h = 0; h < v.h; ++h)
          for (std::size_t w = 0; w < v.w; ++w) t.at2(h, w) = v.at(d, h, w);
        out.push_back(std::move(t));
      }
      break;
    case Plane::kCoronal:
      out.reserve(v.h);
      for (std::size_t h = 0; h < v.h; ++h) {
        Tensor t = Tensor::zeros({v.d, v.w});
        for (std::size_t d = 0; d < v.d; ++d)
          for (std::size_t w = 0; w < v.w; ++w) t.at2(d, w) = v.at(d, h, w);
        out.push_back(std::move(t));
      }
      break;
    case Plane::kSagittal:
      out.reserve(v.w);
      for (std::size_t w = 0; w < v.w; ++w) {
        Tensor t = Tensor::zeros({v.d, v.h});
        for (std::size_t d = 0; d < v.d; ++d)
          for (std::size_t h = 0; h < v.h; ++h) t.at2(d, h) = v.at(d, h, w);
        out.push_back(std::move(t));
      }
      break;
  }
  return out;
}

// Inverse of reslice; used by round-trip checks.
inline Volume restack(const std::vector<Tensor>& slices, Plane p) {
  if (slices.empty()) throw ContractError("restack: empty slice list");
  const std::size_t s1 = slices[0].dims[0], s2 = slices[0].dims[1];
  const std::size_t L = slices.size();
  Volume v;
  switch (p) {
    case Plane::kAxial: v = Volume(L, s1, s2); break;
    case Plane::kCoronal: v = Volume(s1, L, s2); break;
    case Plane::kSagittal: v = Volume(s1, s2, L); break;
  }
  for (std::size_t i = 0; i < L; ++i) {
    const Tensor& t = slices[i];
    for (std::size_t a = 0; a < s1; ++a)
      for (std::size_t b = 0; b < s2; ++b) {
        switch (p) {
          case Plane::kAxial: v.at(i, a, b) = t.at2(a, b); break;
          case Plane::kCoronal: v.at(a, i, b) = t.at2(a, b); break;
          case Plane::kSagittal: v.at(a, b, i) = t.at2(a, b); break;
        }
      }
  }
  return v;
}

// Pseudo-RGB stack of (s_{i-g}, s_i, s_{i+g}) with index clamping at the
// boundaries (nearest-slice replication). i is 1-based.
inline Tensor stack_neighbors(const std::vector<Tensor>& slices, std::size_t i,
                              int g) {
  const std::size_t L = slices.size();
  if (i < 1 || i > L)
    throw ContractError("stack_neighbors: slice index " + std::to_string(i) +
                        " outside [1, " + std::to_string(L) + "]");
  if (g < 0) throw ContractError("stack_neighbors: negative gap");
  auto clamp = [L](long idx) {
    return static_cast<std::size_t>(std::min<long>(
        static_cast<long>(L), std::max<long>(1, idx)));
  };
  const Tensor& lo = slices[clamp(static_cast<long>(i) - g) - 1];
  const Tensor& mid = slices[i - 1];
  const Tensor& hi = slices[clamp(static_cast<long>(i) + g) - 1];
  const std::size_t s1 = mid.dims[0], s2 = mid.dims[1];
  Tensor out = Tensor::zeros({3, s1, s2});
  std::copy(lo.data.begin(), lo.data.end(), out.data.begin());
  std::copy(mid.data.begin(), mid.data.end(), out.data.begin() + s1 * s2);
  std::copy(hi.data.begin(), hi.data.end(), out.data.begin() + 2 * s1 * s2);
  return out;
}

inline SliceBag make_bag(const Volume& v, Plane p, int g) {
  if (g < 0) throw ContractError("make_bag: negative gap");
  auto slices = reslice(v, p);
  SliceBag bag;
  bag.plane = p;
  bag.gap = g;
  bag.slices.reserve(slices.size());
  for (std::size_t i = 1; i <= slices.size(); ++i)
    bag.slices.push_back(stack_neighbors(slices, i, g));
  return bag;
}

// --- Normalization -----------------------------------------------------

// Per-volume z-score (std floor 1e-8), then corner-aligned trilinear
// resample to the target dims.
inline Volume normalize_volume(const Volume& v, std::size_t td, std::size_t th,
                               std::size_t tw) {
  if (td < 1 || th < 1 || tw < 1)
    throw ContractError("normalize_volume: target dims must be >= 1");
  double mean = 0.0;
  for (double x : v.voxels) mean += x;
  mean /= static_cast<double>(v.size());
  double var = 0.0;
  for (double x : v.voxels) {
    const double dd = x - mean;
    var += dd * dd;
  }
  var /= static_cast<double>(v.size());
  const double inv = 1.0 / std::max(std::sqrt(var), 1e-8);
  Volume z(v.d, v.h, v.w);
  for (std::size_t i = 0; i < v.voxels.size(); ++i)
    z.voxels[i] = (v.voxels[i] - mean) * inv;

  auto coord = [](std::size_t ti, std::size_t tn, std::size_t sn) {
    if (tn == 1 || sn == 1) return 0.0;
    return static_cast<double>(ti) * static_cast<double>(sn - 1) /
           static_cast<double>(tn - 1);
  };
  Volume out(td, th, tw);
  for (std::size_t dd = 0; dd < td; ++dd) {
    const double fd = coord(dd, td, z.d);
    const std::size_t d0 = static_cast<std::size_t>(fd);
    const std::size_t d1 = std::min(d0 + 1, z.d - 1);
    const double wd1 = fd - static_cast<double>(d0);
    for (std::size_t hh = 0; hh < th; ++hh) {
      const double fh = coord(hh, th, z.h);
      const std::size_t h0 = static_cast<std::size_t>(fh);
      const std::size_t h1 = std::min(h0 + 1, z.h - 1);
      const double wh1 = fh - static_cast<double>(h0);
      for (std::size_t ww = 0; ww < tw; ++ww) {
        const double fw = coord(ww, tw, z.w);
        const std::size_t w0 = static_cast<std::size_t>(fw);
        const std::size_t w1 = std::min(w0 + 1, z.w - 1);
        const double ww1 = fw - static_cast<double>(w0);
        const double c00 = z.at(d0, h0, w0) * (1 - ww1) + z.at(d0, h0, w1) * ww1;
        const double c01 = z.at(d0, h1, w0) * (1 - ww1) + z.at(d0, h1, w1) * ww1;
        const double c10 = z.at(d1, h0, w0) * (1 - ww1) + z.at(d1, h0, w1) * ww1;
        const double c11 = z.at(d1, h1, w0) * (1 - ww1) + z.at(d1, h1, w1) * ww1;
        const double c0 = c00 * (1 - wh1) + c01 * wh1;
        const double c1 = c10 * (1 - wh1) + c11 * wh1;
        out.at(dd, hh, ww) = c0 * (1 - wd1) + c1 * wd1;
      }
    }
  }
  return out;
}

// --- Augmentation -------------------------------------------------------

struct AugmentPolicy {
  double flip_prob[3] = {0.5, 0.5, 0.5};   // per axis d, h, w
  int max_shift[3] = {2, 2, 2};            // integer translation bound
};

// Applies per-axis flips then an integer translation with zero fill.
inline Volume flip_shift(const Volume& v, const bool flip[3],
                         const long shift[3]) {
  const std::size_t extent[3] = {v.d, v.h, v.w};
  for (int a = 0; a < 3; ++a)
    if (static_cast<std::size_t>(std::labs(shift[a])) >= extent[a])
      throw ContractError("augment: shift magnitude " +
                          std::to_string(std::labs(shift[a])) +
                          " >= axis extent " + std::to_string(extent[a]));
  Volume out(v.d, v.h, v.w);
  for (std::size_t d = 0; d < v.d; ++d)
    for (std::size_t h = 0; h < v.h; ++h)
      for (std::size_t w = 0; w < v.w; ++w) {
        // destination index after flip+shift of source (d,h,w)
        long dd = static_cast<long>(flip[0] ? v.d - 1 - d : d) + shift[0];
        long hh = static_cast<long>(flip[1] ? v.h - 1 - h : h) + shift[1];
        long ww = static_cast<long>(flip[2] ? v.w - 1 - w : w) + shift[2];
        if (dd < 0 || dd >= static_cast<long>(v.d) || hh < 0 ||
            hh >= static_cast<long>(v.h) || ww < 0 ||
            ww >= static_cast<long>(v.w))
          continue;
        out.at(static_cast<std::size_t>(dd), static_cast<std::size_t>(hh),
               static_cast<std::size_t>(ww)) = v.at(d, h, w);
      }
  return out;
}

// Random flips and translation. Draw order is fixed (flips d,h,w then
// shifts d,h,w) so a seed fully determines the result.
inline Volume augment(const Volume& v, Xoshiro256pp& rng,
                      const AugmentPolicy& policy) {
  const std::size_t extent[3] = {v.d, v.h, v.w};
  for (int a = 0; a < 3; ++a)
    if (static_cast<std::size_t>(policy.max_shift[a]) >= extent[a])
      throw ContractError("augment: max shift " +
                          std::to_string(policy.max_shift[a]) +
                          " >= axis extent " + std::to_string(extent[a]));
  bool flip[3];
  for (int a = 0; a < 3; ++a) flip[a] = rng.uniform() < policy.flip_prob[a];
  long shift[3];
  for (int a = 0; a < 3; ++a) {
    const int m = policy.max_shift[a];
    shift[a] = m == 0 ? 0 : static_cast<long>(rng.below(2 * m + 1)) - m;
  }
  return flip_shift(v, flip, shift);
}

}  // namespace srisk
