// Criteria 2-4: inner maximization, rank/attribution oracles, circuit identity.

#include <algorithm>
#include <cmath>
#include <cstring>

#include "acceptance.hpp"
#include "attack_reference.hpp"
#include "circuitlab/attacks.hpp"
#include "circuitlab/circuits.hpp"
#include "circuitlab/metrics.hpp"
#include "circuitlab/ops.hpp"
#include "fd_oracle.hpp"
#include "toy_models.hpp"

namespace circuitlab::acceptance {

namespace {

namespace ct = circuitlab::testing;

Dataset random_images(const Shape& s, std::size_t n, std::uint64_t seed) {
  Dataset d;
  d.image_shape = s;
  d.class_count = 1;
  Rng rng(seed);
  for (std::size_t i = 0; i < n; ++i) d.append(ct::random_vector(rng, shape_numel(s), 0, 1), 0);
  return d;
}

double spatial_sum(const Model& m, const Tensor& x, const ChannelRef& head) {
  NoGradGuard guard;
  const std::string act = m.activation_layer(head.layer);
  double s = 0.0;
  const Tensor a = select_channel(forward_with_activations(m, x, act).at(act), head.channel);
  for (float v : a.data()) s += v;
  return s;
}

Model zero_kernel(const Model& m, const std::string& layer, int channel) {
  ModelParams p = m.params;
  LayerParams& lp = p.at(layer);
  std::vector<float> k(lp.kernel.data().begin(), lp.kernel.data().end());
  std::vector<float> b(lp.bias.data().begin(), lp.bias.data().end());
  const std::size_t per = k.size() / b.size();
  std::fill(k.begin() + channel * per, k.begin() + (channel + 1) * per, 0.0f);
  b[channel] = 0.0f;
  lp.kernel = Tensor::from_data(lp.kernel.shape(), k);
  lp.bias = Tensor::from_data(lp.bias.shape(), b);
  return m.with_params(p);
}

bool bitwise_equal(std::span<const float> a, std::span<const float> b) {
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size_bytes()) == 0;
}

}  // namespace

Outcome inner_max_fidelity() {
  Checks checks;
  const double rho = 0.02, big_c = 1e6;
  int beaten = 0;
  double worst_slack = 1e300;
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    Model m = ct::two_conv_net(seed);
    ct::RefNet r = ct::ref_net(m);
    Rng rng(seed * 7);
    const auto xv = ct::random_vector(rng, 108, 0, 1);
    const int j = static_cast<int>(rng.below(4));
    auto loss_at = [&](const std::vector<double>& e) {
      std::vector<double> x = ct::widen(xv);
      for (std::size_t i = 0; i < x.size(); ++i) x[i] += e[i];
      return ct::ref_inner_loss(ct::ref_energy(ct::ref_forward(r, x, 1), 0, j), big_c);
    };
    Tensor eps = epsilon_star(m, Tensor::from_data({3, 6, 6}, xv), {"conv2", j}, rho, big_c);
    const double ours = loss_at(ct::widen(ct::to_vector(eps.data())));
    double best = -1e300, worst = 1e300;
    for (int p = 0; p < 100; ++p) {
      std::vector<double> e(108);
      double n = 0;
      for (double& v : e) n += (v = rng.normal()) * v;
      for (double& v : e) v *= rho / std::sqrt(n);
      const double l = loss_at(e);
      best = std::max(best, l);
      worst = std::min(worst, l);
    }
    const double slack = ours - (best - 0.05 * (best - worst));
    worst_slack = std::min(worst_slack, slack);
    beaten += slack >= 0.0;
  }
  checks.expect(beaten == 10, cat(beaten, "/10 toy nets at or above best random probe minus 5% of range"));

  // Quadratic surrogates: distance between the first-order and the exact
  // constrained maximizer shrinks 100x per decade of rho.
  Rng rng(3);
  double lo = 1e300, hi = 0.0;
  bool value_gap_ok = true;
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t n = 12;
    ct::Quadratic q;
    for (std::size_t i = 0; i < n; ++i) {
      q.d.push_back(rng.uniform(0.5, 2.0));
      q.a.push_back(rng.uniform(-1, 1));
      q.c.push_back(rng.uniform(-0.5, 0.5));
    }
    std::vector<double> x(n);
    for (double& v : x) v = rng.uniform(-1, 1);
    const auto g = q.gradient(x);
    const std::vector<float> gf(g.begin(), g.end());
    std::vector<double> displacement;
    for (double rho_q : {1e-1, 1e-2, 1e-3}) {
      const auto exact = ct::exact_inner_max(q, g, rho_q);
      double gn = 0;
      for (double v : g) gn += v * v;
      gn = std::sqrt(gn);
      // The library's step direction, evaluated in double.
      const auto ours = epsilon_from_gradient(gf, rho_q);
      double d2 = 0;
      std::vector<double> xe = x, xf = x;
      for (std::size_t i = 0; i < n; ++i) {
        const double fo = rho_q * g[i] / gn;
        d2 += (fo - exact[i]) * (fo - exact[i]);
        xe[i] += exact[i];
        xf[i] += ours[i];
      }
      const double gap = q.value(xe) - q.value(xf);
      value_gap_ok = value_gap_ok && gap >= -1e-9 && gap <= 10 * rho_q * rho_q;
      displacement.push_back(std::sqrt(d2));
    }
    for (int k = 0; k < 2; ++k) {
      const double ratio = displacement[k] / displacement[k + 1];
      lo = std::min(lo, ratio);
      hi = std::max(hi, ratio);
    }
  }
  checks.expect(lo > 50 && hi < 200, cat("quadratic error ratio per decade in [", lo, ", ", hi, "]"));
  checks.expect(value_gap_ok, "quadratic value gap within 10 rho^2");
  return checks.outcome();
}

Outcome oracle_equivalence() {
  Checks checks;
  Rng rng(77);
  int exact = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 2 + rng.below(80);
    const bool ties = trial % 2 == 0;
    std::vector<double> a(n), b(n);
    for (std::size_t i = 0; i < n; ++i) {
      a[i] = ties ? static_cast<double>(rng.below(6)) : rng.uniform();
      b[i] = ties ? static_cast<double>(rng.below(5)) : rng.uniform();
    }
    const double brute = ct::brute_kendall(a, b);
    if (std::isnan(brute)) {
      try {
        kendall_tau(a, b);
      } catch (const NumericError&) {
        ++exact;
      }
      continue;
    }
    exact += kendall_tau(a, b) == brute;
  }
  checks.expect(exact == 200, cat("kendall_tau exact on ", exact, "/200 instances"));

  // One 1x1 conv: f = w x, so |w df/dw| = |w x|.
  int analytic = 0;
  for (int trial = 0; trial < 20; ++trial) {
    const float w = static_cast<float>(rng.uniform(-2, 2)), x = static_cast<float>(rng.uniform(0.1, 2));
    Model m = build_model({ct::conv_spec("conv", 1, 1, 0)}, {1, 1, 1}, 0, 0);
    m.params.at("conv").kernel = Tensor::from_data({1, 1, 1, 1}, {w});
    Dataset d;
    d.image_shape = {1, 1, 1};
    d.class_count = 1;
    d.append(std::vector<float>{x}, 0);
    // float product, as the library computes it
    analytic += snip_attribution(m, {"conv", 0}, d, 1).score({"conv", 0}) == std::fabs(w * x);
  }
  checks.expect(analytic == 20, cat("one-layer analytic case exact on ", analytic, "/20"));

  int agree = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Model m = ct::two_conv_net(100 + seed, 8, 4, 8);
    Dataset d = random_images({3, 8, 8}, 16, seed);
    const ChannelRef head{"conv2", static_cast<int>(seed % 4)};
    AttributionTable t = snip_attribution(m, head, d, 16);
    std::vector<double> ablation;
    for (int k = 0; k < 8; ++k) {
      Model z = zero_kernel(m, "conv1", k);
      double delta = 0.0;
      for (std::size_t i = 0; i < d.size(); ++i)
        delta += std::fabs(spatial_sum(m, d.image(i), head) - spatial_sum(z, d.image(i), head));
      ablation.push_back(delta);
    }
    agree += ct::brute_kendall(t.scores.at("conv1"), ablation) > 0.0;
  }
  checks.expect(agree >= 8, cat("attribution vs masked ablation tau > 0 on ", agree, "/10 seeds"));
  return checks.outcome();
}

Outcome circuit_identity() {
  Checks checks;
  int identical = 0, heads = 0, nested = 0, pairs = 0, pearson_one = 0;
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    Model m = build_mini_alexnet({3, 32, 32}, 10, seed);
    Dataset d = synthetic_blobs({3, 32, 32}, 10, 24, seed);
    const Tensor x = d.batch({0, 1, 2, 3, 4, 5, 6, 7});
    for (const std::string& layer : m.conv_layers()) {
      for (int channel : {1, 6}) {
        const ChannelRef head{layer, channel};
        const std::vector<double> act = channel_activations(m, d, head);
        if (*std::max_element(act.begin(), act.end()) == *std::min_element(act.begin(), act.end())) continue;
        ++heads;
        const AttributionTable t = snip_attribution(m, head, d, 4);
        const CircuitMask full = extract_circuit(m, t, 1.0);
        const Tensor circuit = circuit_forward(m, full, x);
        const std::string act_layer = m.activation_layer(layer);
        const Tensor model_out = select_channel(forward_with_activations(m, x, act_layer).at(act_layer), channel);
        identical += bitwise_equal(circuit.data(), model_out.data());
        pearson_one += head_pearson(m, full, d) == 1.0;
        for (bool global : {false, true}) {
          CircuitMask prev;
          bool first = true, ok = true;
          for (double s : {0.05, 0.1, 0.25, 0.5, 0.75, 1.0}) {
            CircuitMask cur = extract_circuit(m, t, s, global);
            if (!first)
              for (const auto& [l, keep] : prev.keep)
                for (std::size_t c = 0; c < keep.size(); ++c) ok = ok && (!keep[c] || cur.keep.at(l)[c]);
            prev = cur;
            first = false;
          }
          ++pairs;
          nested += ok;
        }
      }
    }
  }
  checks.expect(heads >= 20 && identical == heads, cat("sparsity-1 circuit bitwise equal on ", identical, "/", heads, " heads"));
  checks.expect(nested == pairs, cat("masks nested on ", nested, "/", pairs, " (head, mode) pairs"));
  checks.expect(pearson_one == heads, cat("head_pearson(1.0) == 1 on ", pearson_one, "/", heads));
  return checks.outcome();
}

}  // namespace circuitlab::acceptance
