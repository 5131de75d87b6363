#pragma once

// Dense blocks, MDenseNet and MMDenseNet built from an ArchSpec.
//
// Parameters are declared by running the forward pass once on a tiny dummy
// input with a Binder in declare mode: every conv / BN the forward touches is
// created on first use with the shape the data flow implies. The forward pass
// is therefore the single source of truth for parameter names and shapes.

#include <algorithm>
#include <map>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

#include "mmdense/arch_spec.hpp"
#include "mmdense/layers.hpp"

namespace mmdense {

template <class T>
class ParamStore {
 public:
  struct Entry {
    std::string name;
    std::string group;  // reporting component, e.g. "low.dense3"
    Tensor<T> value;
  };

  void add(std::string name, std::string group, Tensor<T> value) {
    MMDENSE_REQUIRE(!index_.count(name), Errc::invalid_argument, "duplicate parameter name '" + name + "'");
    index_.emplace(name, entries_.size());
    entries_.push_back(Entry{std::move(name), std::move(group), std::move(value)});
  }
  bool contains(const std::string& name) const { return index_.count(name) > 0; }
  Tensor<T>& at(const std::string& name) { return entries_.at(lookup(name)).value; }
  const Tensor<T>& at(const std::string& name) const { return entries_.at(lookup(name)).value; }
  std::vector<Entry>& entries() { return entries_; }
  const std::vector<Entry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }
  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.value.size();
    return n;
  }

 private:
  std::size_t lookup(const std::string& name) const {
    auto it = index_.find(name);
    MMDENSE_REQUIRE(it != index_.end(), Errc::invalid_argument, "unknown parameter '" + name + "'");
    return it->second;
  }
  std::vector<Entry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

template <class T>
struct Model {
  ArchSpec spec;
  ParamStore<T> params;                                 // trainable, in declaration order
  std::map<std::string, BatchNormState<T>> bn_states;   // keyed by BN prefix
  std::string fingerprint;
};

/// Connects a Model's parameters to one Graph. Each parameter becomes a leaf
/// the first time it is requested.
template <class T>
class Binder {
 public:
  Binder(Graph<T>& g, Model<T>& m, bool declare = false, std::uint64_t seed = 0)
      : g_(g), m_(m), declare_(declare), rng_(seed) {}

  /// Binds parameters as constants: no gradients, no saved backward state.
  void freeze() { frozen_ = true; }

  /// Uses caller-provided leaves for the named parameters (gradient checking).
  void prebind(const std::string& name, Var v) { bound_[name] = v; }

  Graph<T>& graph() { return g_; }
  const ArchSpec& spec() const { return m_.spec; }

  ConvVars conv(const std::string& prefix, const std::string& group, std::size_t out, std::size_t in, std::size_t kt,
                std::size_t kf) {
    if (declare_ && !m_.params.contains(prefix + ".kernel")) {
      auto p = Conv2dParams<T>::he_uniform(out, in, kt, kf, rng_);
      m_.params.add(prefix + ".kernel", group, std::move(p.kernel));
      m_.params.add(prefix + ".bias", group, std::move(p.bias));
    }
    return {leaf(prefix + ".kernel", {out, in, kt, kf}), leaf(prefix + ".bias", {out})};
  }

  BatchNormVars bn(const std::string& prefix, const std::string& group, std::size_t ch) {
    if (declare_ && !m_.params.contains(prefix + ".gamma")) {
      auto p = BatchNormParams<T>::fresh(ch, T(m_.spec.bn_momentum), T(m_.spec.bn_epsilon));
      m_.params.add(prefix + ".gamma", group, std::move(p.gamma));
      m_.params.add(prefix + ".beta", group, std::move(p.beta));
      m_.bn_states.emplace(prefix, std::move(p.state));
    }
    return {leaf(prefix + ".gamma", {ch}), leaf(prefix + ".beta", {ch})};
  }

  BatchNormState<T>& bn_state(const std::string& prefix) {
    auto it = m_.bn_states.find(prefix);
    MMDENSE_REQUIRE(it != m_.bn_states.end(), Errc::uninitialized_state, "no running statistics for '" + prefix + "'");
    return it->second;
  }

 private:
  Var leaf(const std::string& name, const Shape& expected) {
    if (auto it = bound_.find(name); it != bound_.end()) {
      MMDENSE_REQUIRE(g_.value(it->second).shape() == expected, Errc::shape_mismatch,
              "parameter '" + name + "' is " + to_string(g_.value(it->second).shape()) + ", network needs " +
                  to_string(expected));
      return it->second;
    }
    const auto& t = m_.params.at(name);
    MMDENSE_REQUIRE(t.shape() == expected, Errc::shape_mismatch,
            "parameter '" + name + "' is " + to_string(t.shape()) + ", network needs " + to_string(expected));
    Var v = frozen_ ? g_.constant(t) : g_.parameter(t, name);
    bound_.emplace(name, v);
    return v;
  }

  Graph<T>& g_;
  Model<T>& m_;
  bool declare_;
  bool frozen_ = false;
  std::mt19937_64 rng_;
  std::unordered_map<std::string, Var> bound_;
};

// ---------------------------------------------------------------------------
// Forward passes

/// L composite layers; layer l sees concat(x, y_1, ..., y_{l-1}) along
/// channels. Returns y_L only.
template <class T>
Var dense_block(Binder<T>& b, const std::string& prefix, Var x, const DenseBlockSpec& spec, Mode mode) {
  auto& g = b.graph();
  const std::size_t c0 = g.value(x).dim(1);
  std::vector<Var> feats{x};
  Var y;
  for (std::size_t l = 1; l <= spec.layers; ++l) {
    Var in = feats.size() == 1 ? x : concat(g, feats, 1);
    const std::size_t cin = g.value(in).dim(1);
    MMDENSE_REQUIRE(cin == c0 + (l - 1) * spec.k, Errc::shape_mismatch,
            prefix + ": layer " + std::to_string(l) + " sees " + std::to_string(cin) + " channels, expected " +
                std::to_string(c0 + (l - 1) * spec.k));
    const std::string lp = prefix + ".layer" + std::to_string(l);
    auto bnv = b.bn(lp + ".bn", prefix, cin);
    auto cv = b.conv(lp + ".conv", prefix, spec.k, cin, spec.kernel.kt, spec.kernel.kf);
    y = composite_layer(g, in, bnv, b.bn_state(lp + ".bn"), cv, mode);
    if (feats.size() > 1) g.release(in);
    feats.push_back(y);
  }
  for (std::size_t i = 1; i + 1 < feats.size(); ++i) g.release(feats[i]);
  return y;
}

/// One multi-scale dense network over a band:
/// conv -> dense1 -> [pool -> dense_i] x (s-1) -> [up -> concat(skip) -> dense_j] x (s-1).
template <class T>
Var mdensenet_forward(Binder<T>& b, const BandSpec& band, Var x, Mode mode) {
  auto& g = b.graph();
  const auto& spec = b.spec();
  const auto& xs = g.value(x).shape();
  detail::require_feature_map(xs, "mdensenet_forward");
  const std::size_t div = spec.pool_factor();
  MMDENSE_REQUIRE(xs[2] % div == 0 && xs[3] % div == 0, Errc::shape_mismatch,
          "band '" + band.name + "': frames and bins must be divisible by " + std::to_string(div) + ", got " +
              to_string(xs));
  const std::string& p = band.name;
  const auto& ic = band.initial_conv;
  Var h = conv2d(g, x, b.conv(p + ".conv0", p + ".conv0", ic.ch, xs[1], ic.kt, ic.kf));
  std::vector<Var> skips;
  for (std::size_t lvl = 0; lvl < spec.scales; ++lvl) {
    Var in = lvl > 0 ? down_sample(g, h) : h;  // the pre-pool map lives on as a skip
    h = dense_block(b, p + ".dense" + std::to_string(lvl + 1), in, band.blocks[lvl], mode);
    g.release(in);
    if (lvl + 1 < spec.scales) skips.push_back(h);
  }
  for (std::size_t j = 0; j + 1 < spec.scales; ++j) {
    const std::size_t idx = spec.scales + j;  // 0-based block index
    const std::string up = p + ".up" + std::to_string(idx + 1);
    const std::size_t ch = g.value(h).dim(1);
    Var u = up_sample(g, h, b.conv(up, up, ch, ch, 2, 2));
    g.release(h);
    Var cat = concat(g, {u, skips.back()}, 1);
    g.release(u);
    g.release(skips.back());
    skips.pop_back();
    h = dense_block(b, p + ".dense" + std::to_string(idx + 1), cat, band.blocks[idx], mode);
    g.release(cat);
  }
  return h;
}

struct BandBins {
  std::size_t begin, width;
};

inline BandBins band_bins(const BandSpec& band, std::size_t bins, std::size_t div) {
  const double b0 = band.begin * double(bins), b1 = band.end * double(bins);
  const auto begin = std::size_t(std::llround(b0)), end = std::size_t(std::llround(b1));
  MMDENSE_REQUIRE(std::abs(b0 - double(begin)) < 1e-9 && std::abs(b1 - double(end)) < 1e-9 && (end - begin) % div == 0,
          Errc::shape_mismatch,
          "band '" + band.name + "' maps to bins [" + std::to_string(b0) + ", " + std::to_string(b1) +
              ") which is not a whole multiple of " + std::to_string(div) + " for " + std::to_string(bins) +
              " input bins");
  return {begin, end - begin};
}

/// Full network: per-band MDenseNets, sub-band outputs joined along
/// frequency (later sub-bands adapted to the first one's channel count by a
/// 1x1 conv), then joined with the full band along channels, then the final
/// dense block, final conv and a ReLU clamp.
template <class T>
Var network_forward(Binder<T>& b, Var x, Mode mode) {
  auto& g = b.graph();
  const auto& spec = b.spec();
  const auto& xs = g.value(x).shape();
  detail::require_feature_map(xs, "network_forward");
  MMDENSE_REQUIRE(xs[1] == spec.io_channels, Errc::shape_mismatch,
          "network expects " + std::to_string(spec.io_channels) + " input channels, got " + std::to_string(xs[1]));

  std::vector<Var> sub;
  Var full;
  for (const auto& band : spec.bands) {
    Var in = x;
    if (!band.is_full()) {
      const auto r = band_bins(band, xs[3], spec.pool_factor());
      in = narrow(g, x, 3, r.begin, r.width);
    } else {
      band_bins(band, xs[3], spec.pool_factor());
    }
    Var out = mdensenet_forward(b, band, in, mode);
    if (in.id != x.id) g.release(in);
    if (band.is_full())
      full = out;
    else
      sub.push_back(out);
  }

  std::vector<Var> joined;
  if (!sub.empty()) {
    const std::size_t ch = g.value(sub[0]).dim(1);
    std::size_t bi = 0;
    for (const auto& band : spec.bands) {
      if (band.is_full()) continue;
      Var v = sub[bi++];
      const std::size_t c = g.value(v).dim(1);
      if (c != ch) {
        const std::string ap = "adapter." + band.name;
        v = conv2d(g, v, b.conv(ap, ap, ch, c, 1, 1));
      }
      joined.push_back(v);
    }
  }
  Var h;
  if (!joined.empty()) {
    h = concat(g, joined, 3);
    if (full.valid()) h = concat(g, {h, full}, 1);
  } else {
    h = full;
  }
  const std::string fb = "dense" + std::to_string(2 * spec.scales);
  Var d = dense_block(b, fb, h, spec.final_block, mode);
  const auto& fc = spec.final_conv;
  Var o = conv2d(g, d, b.conv("final", "final", fc.ch, g.value(d).dim(1), fc.kt, fc.kf));
  return relu(g, o);
}

template <class T>
Var mmdensenet_forward(Binder<T>& b, Var x, Mode mode) {
  return network_forward(b, x, mode);
}

/// Smallest bin count for which every band maps to whole pooled bins.
inline std::size_t minimal_bins(const ArchSpec& spec) {
  const std::size_t div = spec.pool_factor();
  for (std::size_t m = 1; m <= 4096; ++m) {
    const std::size_t bins = div * m;
    bool ok = true;
    for (const auto& band : spec.bands) {
      const double b0 = band.begin * double(bins), b1 = band.end * double(bins);
      ok = ok && std::abs(b0 - std::round(b0)) < 1e-9 && std::abs(b1 - std::round(b1)) < 1e-9 &&
           std::size_t(std::llround(b1 - b0)) % div == 0;
    }
    if (ok) return bins;
  }
  fail(Errc::invalid_argument, "arch spec: band ranges admit no valid bin count");
}

template <class T>
Model<T> build_model(const ArchSpec& spec) {
  validate(spec);
  Model<T> m;
  m.spec = spec;
  m.fingerprint = fingerprint(spec);
  Graph<T> g;
  Binder<T> b(g, m, /*declare=*/true, spec.seed);
  const std::size_t div = spec.pool_factor();
  Var x = g.constant(Tensor<T>({1, spec.io_channels, div, minimal_bins(spec)}));
  network_forward(b, x, Mode::eval);
  return m;
}

/// Runs the network on `x` (batch, io_channels, frames, bins) in a fresh
/// graph and returns the output tensor.
template <class T>
Tensor<T> predict(Model<T>& m, const Tensor<T>& x, Mode mode = Mode::eval) {
  Graph<T> g;
  Binder<T> b(g, m);
  if (mode == Mode::eval) b.freeze();
  Var in = g.constant(x);
  return g.value(network_forward(b, in, mode));
}

template <class T>
Tensor<T> predict(const Model<T>& m, const Tensor<T>& x) {
  // Eval mode reads the running statistics and never writes them.
  return predict(const_cast<Model<T>&>(m), x, Mode::eval);
}

// ---------------------------------------------------------------------------
// Analysis

struct ParamCountRow {
  std::string component;
  std::size_t count;
};

struct ParamCount {
  std::vector<ParamCountRow> rows;  // in declaration order
  std::size_t total = 0;
};

/// Trainable scalars (kernels, biases, gamma, beta); running statistics are
/// buffers and not counted.
template <class T>
ParamCount count_params(const Model<T>& m) {
  ParamCount pc;
  for (const auto& e : m.params.entries()) {
    if (pc.rows.empty() || pc.rows.back().component != e.group) pc.rows.push_back({e.group, 0});
    pc.rows.back().count += e.value.size();
    pc.total += e.value.size();
  }
  return pc;
}

inline std::string param_count_csv(const ParamCount& pc) {
  std::string s = "component,params\n";
  for (const auto& r : pc.rows) s += r.component + "," + std::to_string(r.count) + "\n";
  s += "total," + std::to_string(pc.total) + "\n";
  return s;
}

/// Dependency interval of one output position along one axis, in input
/// pixels relative to the output position, at spacing `jump`.
struct AxisExtent {
  long lo = 0, hi = 0, jump = 1;

  void conv(std::size_t k) {
    const long pad = long(k - 1) / 2;
    lo -= pad * jump;
    hi += (long(k) - 1 - pad) * jump;
  }
  void pool() {
    hi += jump;
    jump *= 2;
  }
  void up() {
    jump /= 2;
    lo -= jump;
  }
  void unite(const AxisExtent& o) {
    lo = std::min(lo, o.lo);
    hi = std::max(hi, o.hi);
  }
  long size() const { return hi - lo + 1; }
};

struct ReceptiveField {
  AxisExtent frames, bins;
  long frame_size() const { return frames.size(); }
  long bin_size() const { return bins.size(); }
};

namespace detail {

inline void rf_conv(ReceptiveField& r, std::size_t kt, std::size_t kf) {
  r.frames.conv(kt);
  r.bins.conv(kf);
}

inline void rf_unite(ReceptiveField& r, const ReceptiveField& o) {
  r.frames.unite(o.frames);
  r.bins.unite(o.bins);
}

[[nodiscard]] inline ReceptiveField rf_dense_block(ReceptiveField in, const DenseBlockSpec& blk) {
  ReceptiveField acc = in, y = in;
  for (std::size_t l = 0; l < blk.layers; ++l) {
    y = acc;
    rf_conv(y, blk.kernel.kt, blk.kernel.kf);
    rf_unite(acc, y);
  }
  return y;
}

}  // namespace detail

/// Analytic receptive field of one output position of the whole network,
/// maximised over pooling alignments.
inline ReceptiveField receptive_field(const ArchSpec& spec) {
  using namespace detail;
  ReceptiveField joined;
  bool first = true;
  for (const auto& band : spec.bands) {
    ReceptiveField h;
    rf_conv(h, band.initial_conv.kt, band.initial_conv.kf);
    std::vector<ReceptiveField> skips;
    for (std::size_t lvl = 0; lvl < spec.scales; ++lvl) {
      if (lvl > 0) {
        h.frames.pool();
        h.bins.pool();
      }
      h = rf_dense_block(h, band.blocks[lvl]);
      if (lvl + 1 < spec.scales) skips.push_back(h);
    }
    for (std::size_t j = 0; j + 1 < spec.scales; ++j) {
      h.frames.up();
      h.bins.up();
      rf_unite(h, skips.back());
      skips.pop_back();
      h = rf_dense_block(h, band.blocks[spec.scales + j]);
    }
    if (first)
      joined = h;
    else
      rf_unite(joined, h);
    first = false;
  }
  joined = rf_dense_block(joined, spec.final_block);
  rf_conv(joined, spec.final_conv.kt, spec.final_conv.kf);
  return joined;
}

struct KernelNormRow {
  std::string block;  // e.g. "low.dense5"
  double skip_norm = 0;
  double upsampled_norm = 0;
  double ratio() const { return upsampled_norm > 0 ? skip_norm / upsampled_norm : 0.0; }
};

/// For the first layer of every up-path dense block, the mean over kernel
/// maps W[o, i, :, :] of their l2 norm, split by whether input channel i
/// arrives from the up-sampling layer or from the skip connection.
template <class T>
std::vector<KernelNormRow> kernel_norm_report(const Model<T>& m) {
  std::vector<KernelNormRow> rows;
  const auto& spec = m.spec;
  for (const auto& band : spec.bands) {
    for (std::size_t j = 0; j + 1 < spec.scales; ++j) {
      const std::string n = std::to_string(spec.scales + j + 1);
      const std::string block = band.name + ".dense" + n;
      const auto& k = m.params.at(block + ".layer1.conv.kernel");
      const std::size_t c_up = m.params.at(band.name + ".up" + n + ".kernel").dim(0);
      const std::size_t O = k.dim(0), I = k.dim(1), taps = k.dim(2) * k.dim(3);
      double up = 0, skip = 0;
      for (std::size_t o = 0; o < O; ++o)
        for (std::size_t i = 0; i < I; ++i) {
          double s = 0;
          const T* w = &k.at4(o, i, 0, 0);
          for (std::size_t t = 0; t < taps; ++t) s += double(w[t]) * double(w[t]);
          (i < c_up ? up : skip) += std::sqrt(s);
        }
      KernelNormRow r;
      r.block = block;
      r.upsampled_norm = up / double(O * c_up);
      r.skip_norm = skip / double(O * (I - c_up));
      rows.push_back(r);
    }
  }
  return rows;
}

inline std::string kernel_norm_csv(const std::vector<KernelNormRow>& rows) {
  std::string s = "block,skip_norm,upsampled_norm,ratio\n";
  char buf[160];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%s,%.9g,%.9g,%.9g\n", r.block.c_str(), r.skip_norm, r.upsampled_norm, r.ratio());
    s += buf;
  }
  return s;
}

inline std::string receptive_field_csv(const ReceptiveField& rf) {
  return "axis,size,lo,hi\nframes," + std::to_string(rf.frame_size()) + "," + std::to_string(rf.frames.lo) + "," +
         std::to_string(rf.frames.hi) + "\nbins," + std::to_string(rf.bin_size()) + "," + std::to_string(rf.bins.lo) +
         "," + std::to_string(rf.bins.hi) + "\n";
}

/// Copies parameters and running statistics from `src` into a model of a
/// different scalar type (f32 checkpoint -> f64 analysis and back).
template <class U, class T>
Model<U> convert_model(const Model<T>& src) {
  Model<U> m;
  m.spec = src.spec;
  m.fingerprint = src.fingerprint;
  for (const auto& e : src.params.entries()) m.params.add(e.name, e.group, e.value.template cast<U>());
  for (const auto& [k, s] : src.bn_states)
    m.bn_states.emplace(k, BatchNormState<U>{s.running_mean.template cast<U>(), s.running_var.template cast<U>(),
                                             U(s.momentum), U(s.epsilon)});
  return m;
}

}  // namespace mmdense
