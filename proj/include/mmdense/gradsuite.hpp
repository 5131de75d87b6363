#pragma once

// Finite-difference gradient suite over every differentiable operation, a
// small dense block and a miniature end-to-end network. Shared by the
// `gradcheck` command and the test binaries.

#include <random>
#include <set>
#include <string>
#include <vector>

#include "mmdense/gradcheck.hpp"
#include "mmdense/model.hpp"

namespace mmdense {

struct GradSuiteRow {
  std::string name;
  GradCheckResult result;
  double tolerance;
  bool pass() const { return result.ok(tolerance); }
};

namespace detail {

// Uniform values in [lo, hi) pushed at least `gap` away from zero so ReLU
// kinks stay outside the finite-difference stencil.
inline Tensor<double> off_zero(Shape s, std::mt19937_64& rng, double gap = 0.05) {
  auto t = Tensor<double>::uniform(std::move(s), -1.0, 1.0, rng);
  for (auto& v : t.values()) v = v < 0 ? v - gap : v + gap;
  return t;
}

// Weighted sum <w, x> with fixed random w, so every output coordinate
// contributes a distinct adjoint.
inline Var probe(Graph<double>& g, Var x, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Var w = g.constant(Tensor<double>::uniform(g.value(x).shape(), -1.0, 1.0, rng));
  return reduce_mean(g, mul(g, x, w));
}

template <class Keep>
void leaves_from_model(const Model<double>& m, std::vector<NamedTensor>& out, Keep keep) {
  for (const auto& e : m.params.entries())
    if (keep(e.name)) out.push_back({e.name, e.value});
}

// Leaves [skip, end) stand in for the model parameters of the same name; the
// rest bind from the model as usual.
inline Binder<double> binder_over(Graph<double>& g, Model<double>& m, const std::vector<NamedTensor>& leaves,
                                  const std::vector<Var>& v, std::size_t skip) {
  Binder<double> b(g, m);
  for (std::size_t i = skip; i < leaves.size(); ++i) b.prebind(leaves[i].name, v[i]);
  return b;
}

// Batch-norm scale in [0.5, 1.5) and shift in [-0.5, 0.5): near the fresh
// (1, 0) state, where no channel sits entirely below the ReLU.
inline void perturb_affine(Model<double>& m, std::mt19937_64& rng) {
  for (auto& e : m.params.entries()) {
    if (e.name.ends_with(".gamma")) e.value = Tensor<double>::uniform(e.value.shape(), 0.5, 1.5, rng);
    if (e.name.ends_with(".beta")) e.value = Tensor<double>::uniform(e.value.shape(), -0.5, 0.5, rng);
    if (e.name.ends_with(".bias")) e.value = off_zero(e.value.shape(), rng);
  }
}

inline bool is_bias(const std::string& name) { return name.ends_with(".bias"); }

/// Biases whose gradient survives train-mode batch norm, because the shift
/// they add is not a per-channel constant where it meets the next BN: the
/// final conv and the last conv of the final block; the last conv of every
/// block feeding a 2x2 transposed conv (the shift depends on output parity);
/// and, with several sub-bands joined along frequency, each sub-band's output
/// conv and adapter (the shift covers only that band's bins).
inline std::set<std::string> bn_surviving_biases(const ArchSpec& spec) {
  auto last_conv = [](const std::string& block, const DenseBlockSpec& b) {
    return block + ".layer" + std::to_string(b.layers) + ".conv.bias";
  };
  std::set<std::string> out{"final.bias", last_conv("dense" + std::to_string(2 * spec.scales), spec.final_block)};
  std::size_t sub = 0;
  for (const auto& band : spec.bands) sub += band.is_full() ? 0 : 1;
  for (const auto& band : spec.bands) {
    for (std::size_t j = spec.scales; j + 1 < 2 * spec.scales; ++j)
      out.insert(last_conv(band.name + ".dense" + std::to_string(j), band.blocks[j - 1]));
    if (!band.is_full() && sub > 1) {
      const std::size_t last = 2 * spec.scales - 1;
      out.insert(last_conv(band.name + ".dense" + std::to_string(last), band.blocks[last - 1]));
      out.insert("adapter." + band.name + ".bias");
    }
  }
  return out;
}

}  // namespace detail

/// Miniature MMDenseNet used by the end-to-end check: the preset's topology
/// with widths scaled to roughly a quarter.
inline ArchSpec miniature_arch() {
  ArchSpec s = scale_widths(mmdensenet_table1(), 0.25);
  s.name = "miniature";
  return s;
}

inline std::vector<GradSuiteRow> run_gradient_suite(std::uint64_t seed = 7, bool include_end_to_end = true) {
  using detail::off_zero;
  using detail::probe;
  using detail::is_bias;
  std::vector<GradSuiteRow> rows;
  std::mt19937_64 rng(seed);
  const double eps = 1e-5;
  auto add_row = [&](std::string name, GradCheckResult r, double tol) {
    rows.push_back({std::move(name), r, tol});
  };

  {
    const auto a = off_zero({2, 3, 4}, rng), b = off_zero({2, 5, 4}, rng);
    add_row("concat", grad_check_leaves([](Graph<double>& g, const std::vector<Var>& v) {
              return probe(g, concat(g, {v[0], v[1]}, 1), 1);
            }, {{"a", a}, {"b", b}}, eps), 1e-4);
  }
  {
    const auto a = off_zero({3, 4}, rng), b = off_zero({3, 4}, rng);
    const std::vector<NamedTensor> ab{{"a", a}, {"b", b}};
    add_row("add", grad_check_leaves([](Graph<double>& g, const std::vector<Var>& v) {
              return probe(g, add(g, v[0], v[1]), 2);
            }, ab, eps), 1e-4);
    add_row("sub", grad_check_leaves([](Graph<double>& g, const std::vector<Var>& v) {
              return probe(g, sub(g, v[0], v[1]), 3);
            }, ab, eps), 1e-4);
    add_row("mul", grad_check_leaves([](Graph<double>& g, const std::vector<Var>& v) {
              return probe(g, mul(g, v[0], v[1]), 4);
            }, ab, eps), 1e-4);
    add_row("relu", grad_check([](Graph<double>& g, Var x) { return probe(g, relu(g, x), 5); }, a, eps), 1e-4);
    add_row("square", grad_check([](Graph<double>& g, Var x) { return probe(g, square(g, x), 6); }, a, eps), 1e-4);
    add_row("reduce_mean", grad_check([](Graph<double>& g, Var x) { return reduce_mean(g, x); }, a, eps), 1e-4);
  }
  {
    const auto x = off_zero({2, 3, 6, 8}, rng);
    auto p = Conv2dParams<double>::he_uniform(4, 3, 3, 4, rng);
    p.bias = off_zero({4}, rng);
    add_row("conv2d", grad_check_leaves([](Graph<double>& g, const std::vector<Var>& v) {
              return probe(g, conv2d(g, v[0], ConvVars{v[1], v[2]}), 7);
            }, {{"x", x}, {"kernel", p.kernel}, {"bias", p.bias}}, eps), 1e-4);
  }
  {
    const auto x = off_zero({2, 3, 4, 6}, rng);
    auto gamma = off_zero({3}, rng), beta = off_zero({3}, rng);
    auto state = BatchNormState<double>::fresh(3);
    add_row("batch_norm", grad_check_leaves([&state](Graph<double>& g, const std::vector<Var>& v) {
              return probe(g, batch_norm(g, v[0], BatchNormVars{v[1], v[2]}, state, Mode::train), 8);
            }, {{"x", x}, {"gamma", gamma}, {"beta", beta}}, eps), 1e-4);
  }
  {
    const auto x = off_zero({1, 3, 6, 8}, rng);
    auto bn = BatchNormParams<double>::fresh(3);
    bn.gamma = off_zero({3}, rng);
    bn.beta = off_zero({3}, rng);
    auto conv = Conv2dParams<double>::he_uniform(2, 3, 3, 3, rng);
    auto state = bn.state;
    // A smaller step keeps the stencil clear of ReLU kinks after BN.
    add_row("composite_layer", grad_check_leaves([&state](Graph<double>& g, const std::vector<Var>& v) {
              return probe(g, composite_layer(g, v[0], BatchNormVars{v[1], v[2]}, state, ConvVars{v[3], v[4]},
                                              Mode::train), 9);
            }, {{"x", x}, {"gamma", bn.gamma}, {"beta", bn.beta}, {"kernel", conv.kernel}, {"bias", conv.bias}},
            1e-6), 1e-4);
  }
  {
    const auto x = off_zero({2, 3, 4, 6}, rng);
    add_row("down_sample", grad_check([](Graph<double>& g, Var v) { return probe(g, down_sample(g, v), 10); }, x, eps),
            1e-4);
  }
  {
    const auto x = off_zero({2, 3, 3, 4}, rng);
    auto p = Conv2dParams<double>::he_uniform(3, 3, 2, 2, rng);
    p.bias = off_zero({3}, rng);
    add_row("up_sample", grad_check_leaves([](Graph<double>& g, const std::vector<Var>& v) {
              return probe(g, up_sample(g, v[0], ConvVars{v[1], v[2]}), 11);
            }, {{"x", x}, {"kernel", p.kernel}, {"bias", p.bias}}, eps), 1e-4);
  }
  // Conv biases that reach the output only through a train-mode batch norm
  // have an identically zero gradient, which the relative-error measure
  // cannot score. Train-mode rows leave them out; eval-mode rows, where
  // batch norm is affine, check every parameter.
  {
    // Dense block (k=2, L=2) on 1x3x4x8 through the model binder.
    ArchSpec spec = miniature_arch();
    Model<double> m;
    m.spec = spec;
    const DenseBlockSpec blk{2, 2, {3, 3}};
    {
      Graph<double> g;
      Binder<double> b(g, m, true, seed);
      dense_block(b, "block", g.constant(Tensor<double>({1, 3, 4, 8})), blk, Mode::train);
    }
    detail::perturb_affine(m, rng);
    const auto x = off_zero({1, 3, 4, 8}, rng);
    for (Mode mode : {Mode::train, Mode::eval}) {
      std::vector<NamedTensor> leaves{{"x", x}};
      detail::leaves_from_model(m, leaves, [&](const std::string& n) {
        return mode == Mode::eval || !is_bias(n) || n == "block.layer2.conv.bias";
      });
      add_row(mode == Mode::train ? "dense_block" : "dense_block_eval",
              grad_check_leaves([&](Graph<double>& g, const std::vector<Var>& v) {
                auto b = detail::binder_over(g, m, leaves, v, 1);
                return probe(g, dense_block(b, "block", v[0], blk, mode), 12);
              }, leaves, 1e-6), 1e-4);
    }
  }
  if (include_end_to_end) {
    // Miniature network on (1, 2, 16, 64); parameters probed by sampling.
    Model<double> m = build_model<double>(miniature_arch());
    detail::perturb_affine(m, rng);
    const auto x = Tensor<double>::uniform({1, 2, 16, 64}, 0.0, 1.0, rng);
    for (Mode mode : {Mode::train, Mode::eval}) {
      std::vector<NamedTensor> leaves{{"x", x}};
      const auto surviving = detail::bn_surviving_biases(m.spec);
      detail::leaves_from_model(m, leaves, [&](const std::string& n) {
        return mode == Mode::eval || !is_bias(n) || surviving.contains(n);
      });
      add_row(mode == Mode::train ? "mmdensenet_end_to_end" : "mmdensenet_end_to_end_eval",
              grad_check_leaves([&](Graph<double>& g, const std::vector<Var>& v) {
                auto b = detail::binder_over(g, m, leaves, v, 1);
                return probe(g, network_forward(b, v[0], mode), 13);
              }, leaves, 1e-6, GradCheckOptions{6, true}), 1e-3);
    }
  }
  return rows;
}

}  // namespace mmdense
