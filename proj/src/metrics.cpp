#include "circuitlab/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include "circuitlab/ops.hpp"

namespace circuitlab {

namespace {

using Count = long long;

Count pairs_of(Count t) { return t * (t - 1) / 2; }

// Number of tied pairs in runs of equal keys of an ordered index list.
template <class Eq>
Count tied_pairs(const std::vector<std::size_t>& order, Eq eq) {
  Count total = 0, run = 1;
  for (std::size_t i = 1; i < order.size(); ++i) {
    if (eq(order[i - 1], order[i])) {
      ++run;
    } else {
      total += pairs_of(run);
      run = 1;
    }
  }
  return total + pairs_of(run);
}

// Stable merge sort of `idx` by key, returning the number of strict
// inversions (pairs i < j with key[i] > key[j]).
Count sort_counting_swaps(std::vector<std::size_t>& idx, const std::vector<double>& key) {
  const std::size_t n = idx.size();
  std::vector<std::size_t> buf(n);
  Count swaps = 0;
  for (std::size_t width = 1; width < n; width *= 2) {
    for (std::size_t lo = 0; lo < n; lo += 2 * width) {
      const std::size_t mid = std::min(lo + width, n), hi = std::min(lo + 2 * width, n);
      std::size_t i = lo, j = mid, k = lo;
      while (i < mid && j < hi) {
        if (key[idx[j]] < key[idx[i]]) {
          swaps += static_cast<Count>(mid - i);
          buf[k++] = idx[j++];
        } else {
          buf[k++] = idx[i++];
        }
      }
      while (i < mid) buf[k++] = idx[i++];
      while (j < hi) buf[k++] = idx[j++];
    }
    idx.swap(buf);
  }
  return swaps;
}

}  // namespace

double kendall_tau(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw ShapeError("kendall_tau: lengths differ");
  if (a.size() < 2) throw ShapeError("kendall_tau needs at least 2 entries");
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (std::isnan(a[i]) || std::isnan(b[i])) throw NumericError("kendall_tau: NaN score");
  }
  const Count n = static_cast<Count>(a.size());
  std::vector<std::size_t> idx(a.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t i, std::size_t j) {
    return a[i] != a[j] ? a[i] < a[j] : b[i] < b[j];
  });
  const Count ties_a = tied_pairs(idx, [&](std::size_t i, std::size_t j) { return a[i] == a[j]; });
  const Count ties_ab = tied_pairs(idx, [&](std::size_t i, std::size_t j) {
    return a[i] == a[j] && b[i] == b[j];
  });
  const Count swaps = sort_counting_swaps(idx, b);
  const Count ties_b = tied_pairs(idx, [&](std::size_t i, std::size_t j) { return b[i] == b[j]; });
  const Count total = pairs_of(n);
  if (ties_a == total || ties_b == total) throw NumericError("kendall_tau: all scores tied");
  const Count numerator = total - ties_a - ties_b + ties_ab - 2 * swaps;
  return static_cast<double>(numerator) /
         std::sqrt(static_cast<double>(total - ties_a) * static_cast<double>(total - ties_b));
}

// ---------------------------------------------------------------------------

double cosine(const Embedding& a, const Embedding& b) {
  if (a.v.size() != b.v.size()) throw ShapeError("cosine: embedding sizes differ");
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.v.size(); ++i) {
    dot += static_cast<double>(a.v[i]) * b.v[i];
    na += static_cast<double>(a.v[i]) * a.v[i];
    nb += static_cast<double>(b.v[i]) * b.v[i];
  }
  if (na == 0.0 || nb == 0.0) throw NumericError("cosine of a zero embedding");
  return std::clamp(dot / std::sqrt(na * nb), -1.0, 1.0);
}

Embedder::Embedder(const Model& reference) {
  if (reference.layers.size() < 2) throw ConfigError("embedder needs at least two layers");
  model_ = reference.with_params(reference.params.detached());
  layer_ = reference.layers[reference.layers.size() - 2].name;
}

const Model& Embedder::model() const {
  if (!model_) throw ConfigError("no reference embedder loaded");
  return *model_;
}

std::vector<Embedding> Embedder::embed_all(const std::vector<Tensor>& images) const {
  const Model& m = model();
  const Shape& chw = m.params.input_shape;
  std::vector<Embedding> out;
  NoGradGuard guard;
  for (std::size_t s = 0; s < images.size(); s += 64) {
    const std::size_t end = std::min(images.size(), s + 64);
    std::vector<float> xs;
    for (std::size_t i = s; i < end; ++i) {
      if (images[i].numel() != shape_numel(chw)) {
        throw ShapeError("embed: image " + shape_str(images[i].shape()) + " does not fit input " +
                         shape_str(chw));
      }
      xs.insert(xs.end(), images[i].data().begin(), images[i].data().end());
    }
    const int n = static_cast<int>(end - s);
    Tensor act = forward_with_activations(m, Tensor::from_data({n, chw[0], chw[1], chw[2]}, xs),
                                          layer_)
                     .at(layer_);
    const std::size_t per = act.numel() / static_cast<std::size_t>(n);
    for (int i = 0; i < n; ++i) {
      auto row = act.data().subspan(per * i, per);
      double norm = 0.0;
      for (float v : row) norm += static_cast<double>(v) * v;
      norm = std::sqrt(norm);
      if (norm == 0.0) throw NumericError("embed: zero penultimate activation");
      Embedding e;
      e.v.reserve(per);
      for (float v : row) e.v.push_back(static_cast<float>(v / norm));
      out.push_back(std::move(e));
    }
  }
  return out;
}

Embedding Embedder::embed(const Tensor& image, std::string source) const {
  Embedding e = std::move(embed_all({image}).front());
  e.source = std::move(source);
  return e;
}

namespace {

std::vector<double> mean_embedding(const std::vector<Embedding>& set) {
  if (set.empty()) throw ConfigError("semantic_delta: empty image set");
  std::vector<double> m(set.front().v.size(), 0.0);
  for (const Embedding& e : set) {
    if (e.v.size() != m.size()) throw ShapeError("semantic_delta: embedding sizes differ");
    for (std::size_t i = 0; i < m.size(); ++i) m[i] += e.v[i];
  }
  for (double& v : m) v /= static_cast<double>(set.size());
  return m;
}

}  // namespace

double semantic_delta(const std::vector<Embedding>& initial, const std::vector<Embedding>& final_set) {
  const auto a = mean_embedding(initial), b = mean_embedding(final_set);
  if (a.size() != b.size()) throw ShapeError("semantic_delta: embedding sizes differ");
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) throw NumericError("semantic_delta: zero mean embedding");
  return std::clamp(1.0 - dot / std::sqrt(na * nb), 0.0, 2.0);
}

double semantic_delta(const Embedder& embedder, const std::vector<Tensor>& initial,
                      const std::vector<Tensor>& final_set) {
  return semantic_delta(embedder.embed_all(initial), embedder.embed_all(final_set));
}

// ---------------------------------------------------------------------------

nlohmann::json SimilaritySummary::to_json() const {
  return {{"count", values.size()}, {"mean", mean},       {"std", stddev},
          {"kept", kept},           {"dropped", dropped}, {"histogram", histogram}};
}

SimilaritySummary summarize_pairs(const std::vector<Embedding>& embeddings) {
  if (embeddings.size() < 2) throw ConfigError("pairwise similarity needs at least 2 images");
  SimilaritySummary s;
  s.kept = embeddings.size();
  for (std::size_t i = 0; i < embeddings.size(); ++i)
    for (std::size_t j = i + 1; j < embeddings.size(); ++j)
      s.values.push_back(cosine(embeddings[i], embeddings[j]));
  double total = 0.0;
  for (double v : s.values) total += v;
  s.mean = total / static_cast<double>(s.values.size());
  double var = 0.0;
  for (double v : s.values) var += (v - s.mean) * (v - s.mean);
  s.stddev = std::sqrt(var / static_cast<double>(s.values.size()));
  for (double v : s.values) {
    int bin = static_cast<int>(std::floor((v + 1.0) / 2.0 * SimilaritySummary::kBins));
    ++s.histogram[std::clamp(bin, 0, SimilaritySummary::kBins - 1)];
  }
  return s;
}

SimilaritySummary pairwise_similarity(const std::vector<Tensor>& images, const Embedder& embedder,
                                      double noise_threshold) {
  std::vector<Tensor> clean;
  for (const Tensor& img : images) {
    if (!is_noisy(img.shape(), img.data(), noise_threshold)) clean.push_back(img);
  }
  if (clean.size() < 2) {
    throw ConfigError("pairwise similarity: " + std::to_string(clean.size()) + " of " +
                      std::to_string(images.size()) + " images survive the noise filter");
  }
  SimilaritySummary s = summarize_pairs(embedder.embed_all(clean));
  s.dropped = images.size() - clean.size();
  return s;
}

double attribution_rank_correlation(const AttributionTable& initial, const AttributionTable& final_table,
                                    const std::string& layer) {
  if (!(initial.head == final_table.head)) {
    throw ConfigError("attribution tables have different heads (" + initial.head.str() + ", " +
                      final_table.head.str() + ")");
  }
  auto a = initial.scores.find(layer), b = final_table.scores.find(layer);
  if (a == initial.scores.end() || b == final_table.scores.end()) {
    throw ConfigError("layer " + layer + " missing from an attribution table");
  }
  if (a->second.size() != b->second.size()) {
    throw ConfigError("layer " + layer + " has different kernel counts in the two tables");
  }
  return kendall_tau(a->second, b->second);
}

nlohmann::json SimilarityRatio::to_json() const {
  return {{"ratio", ratio},
          {"numerator", numerator},
          {"denominator", denominator},
          {"argmax", argmax},
          {"degenerate", degenerate}};
}

SimilarityRatio similarity_ratio(const Embedding& final_image,
                                 const std::vector<Embedding>& initial_layer, std::size_t own) {
  if (own >= initial_layer.size()) throw ConfigError("own channel is not in the initial layer set");
  SimilarityRatio r;
  r.numerator = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < initial_layer.size(); ++i) {
    const double c = cosine(final_image, initial_layer[i]);
    if (c > r.numerator) {
      r.numerator = c;
      r.argmax = i;
    }
  }
  r.denominator = cosine(final_image, initial_layer[own]);
  r.degenerate = r.denominator < 1e-6;
  r.ratio = r.numerator / std::max(r.denominator, 1e-6);
  return r;
}

// ---------------------------------------------------------------------------

std::map<ChannelRef, std::vector<Tensor>> synthesize_channels(const Model& model,
                                                              const std::vector<ChannelRef>& channels,
                                                              const SynthOptions& options, int seeds) {
  if (seeds < 1) throw ConfigError("need at least one visualization seed");
  std::map<ChannelRef, std::vector<Tensor>> out;
  for (const ChannelRef& c : channels) {
    for (int s = 0; s < seeds; ++s) {
      SynthOptions o = options;
      o.seed = options.seed + static_cast<std::uint64_t>(s);
      out[c].push_back(synth_featvis(model, c, o).image);
    }
  }
  return out;
}

namespace {

// Activation of every channel of `layer` for every image: [image][channel].
std::vector<std::vector<double>> activation_table(const Model& model, const Dataset& data,
                                                  const std::string& layer) {
  NoGradGuard guard;
  std::vector<std::vector<double>> out;
  for (std::size_t s = 0; s < data.size(); s += 128) {
    std::vector<std::size_t> idx;
    for (std::size_t i = s; i < std::min(data.size(), s + 128); ++i) idx.push_back(i);
    Tensor e = layer_energies(model, data.batch(idx), layer);
    const int c = e.dim(1);
    for (std::size_t r = 0; r < idx.size(); ++r) {
      auto row = e.data().subspan(r * c, c);
      out.emplace_back(row.begin(), row.end());
    }
  }
  return out;
}

std::vector<std::size_t> top_indices(const std::vector<double>& act, std::size_t k) {
  std::vector<std::size_t> order(act.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return act[a] > act[b]; });
  order.resize(std::min(k, order.size()));
  return order;
}

double nan_on_error(auto&& f) {
  try {
    return f();
  } catch (const NumericError&) {
    return std::numeric_limits<double>::quiet_NaN();
  }
}

nlohmann::json number(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(); }

}  // namespace

MetricReport evaluate_models(const Model& initial, const Model& final_model, const Dataset& data,
                             const Embedder& embedder, const EvaluateOptions& options) {
  if (data.size() < 3) throw ConfigError("evaluation needs at least 3 images");
  MetricReport rep;
  rep.accuracy_initial = accuracy(initial, data);
  rep.accuracy_final = accuracy(final_model, data);
  {
    auto a = per_class_accuracy(initial, data), b = per_class_accuracy(final_model, data);
    for (const auto& [k, v] : a) rep.per_class_delta[k] = b.at(k) - v;
  }

  // Channels grouped by layer in request order.
  std::vector<std::string> layers;
  std::map<std::string, std::vector<ChannelRef>> by_layer;
  for (const ChannelRef& c : options.channels) {
    check_channel(initial, c);
    if (!by_layer.count(c.layer)) layers.push_back(c.layer);
    auto& v = by_layer[c.layer];
    if (std::find(v.begin(), v.end(), c) != v.end()) throw ConfigError("channel " + c.str() + " requested twice");
    v.push_back(c);
  }
  const auto synth_initial = synthesize_channels(initial, options.channels, options.synth, options.synth_seeds);
  const auto synth_final = synthesize_channels(final_model, options.channels, options.synth, options.synth_seeds);

  for (const std::string& layer : layers) {
    const auto act_i = activation_table(initial, data, layer);
    const auto act_f = activation_table(final_model, data, layer);
    const auto& chans = by_layer[layer];
    std::vector<Tensor> before, after;
    std::vector<Embedding> initial_firsts;
    for (const ChannelRef& c : chans) {
      before.insert(before.end(), synth_initial.at(c).begin(), synth_initial.at(c).end());
      after.insert(after.end(), synth_final.at(c).begin(), synth_final.at(c).end());
      initial_firsts.push_back(embedder.embed(synth_initial.at(c).front(), c.str()));
    }
    for (std::size_t ci = 0; ci < chans.size(); ++ci) {
      const ChannelRef& c = chans[ci];
      std::vector<double> a, b;
      for (std::size_t i = 0; i < data.size(); ++i) {
        a.push_back(act_i[i][c.channel]);
        b.push_back(act_f[i][c.channel]);
      }
      ChannelMetrics m;
      m.channel = c;
      m.kendall_tau = nan_on_error([&] { return kendall_tau(a, b); });
      auto images = [&](const std::vector<std::size_t>& idx) {
        std::vector<Tensor> v;
        for (std::size_t i : idx) v.push_back(data.image(i));
        return v;
      };
      m.semantic_delta_natural = nan_on_error([&] {
        return semantic_delta(embedder, images(top_indices(a, options.topk)),
                              images(top_indices(b, options.topk)));
      });
      m.semantic_delta_synthetic =
          nan_on_error([&] { return semantic_delta(embedder, synth_initial.at(c), synth_final.at(c)); });
      m.similarity = similarity_ratio(embedder.embed(synth_final.at(c).front()), initial_firsts, ci);
      rep.channels.push_back(m);
    }
    try {
      rep.pairwise_before[layer] = pairwise_similarity(before, embedder, options.noise_threshold);
      rep.pairwise_after[layer] = pairwise_similarity(after, embedder, options.noise_threshold);
    } catch (const ConfigError&) {
      rep.pairwise_before.erase(layer);  // too few clean images on one side
    }
  }

  const int samples = std::min<int>(options.attribution_samples, static_cast<int>(data.size()));
  for (const ChannelRef& head : options.heads) {
    HeadMetrics h;
    h.head = head;
    const AttributionTable ti = snip_attribution(initial, head, data, samples);
    const AttributionTable tf = snip_attribution(final_model, head, data, samples);
    for (const std::string& l : ti.layers) {
      if (l == head.layer) continue;
      h.rank_correlation[l] = nan_on_error([&] { return attribution_rank_correlation(ti, tf, l); });
    }
    for (double s : options.sparsities) {
      h.pearson_initial[s] =
          nan_on_error([&] { return head_pearson(initial, extract_circuit(initial, ti, s), data); });
      h.pearson_final[s] =
          nan_on_error([&] { return head_pearson(final_model, extract_circuit(final_model, tf, s), data); });
    }
    rep.heads.push_back(std::move(h));
  }
  return rep;
}

nlohmann::json MetricReport::to_json() const {
  nlohmann::json j;
  j["accuracy_initial"] = accuracy_initial;
  j["accuracy_final"] = accuracy_final;
  nlohmann::json pc = nlohmann::json::object();
  for (const auto& [k, v] : per_class_delta) pc[std::to_string(k)] = v;
  j["per_class_accuracy_delta"] = pc;
  j["channels"] = nlohmann::json::array();
  for (const ChannelMetrics& c : channels) {
    j["channels"].push_back({{"channel", c.channel.str()},
                             {"kendall_tau", number(c.kendall_tau)},
                             {"semantic_delta_natural", number(c.semantic_delta_natural)},
                             {"semantic_delta_synthetic", number(c.semantic_delta_synthetic)},
                             {"similarity_ratio", c.similarity.to_json()}});
  }
  nlohmann::json pw = nlohmann::json::object();
  for (const auto& [layer, s] : pairwise_before) {
    pw[layer] = {{"before", s.to_json()}, {"after", pairwise_after.at(layer).to_json()}};
  }
  j["pairwise_similarity"] = pw;
  j["heads"] = nlohmann::json::array();
  for (const HeadMetrics& h : heads) {
    nlohmann::json rc = nlohmann::json::object(), pi = nlohmann::json::array(),
                   pf = nlohmann::json::array();
    for (const auto& [l, v] : h.rank_correlation) rc[l] = number(v);
    for (const auto& [s, v] : h.pearson_initial) pi.push_back({{"sparsity", s}, {"pearson", number(v)}});
    for (const auto& [s, v] : h.pearson_final) pf.push_back({{"sparsity", s}, {"pearson", number(v)}});
    j["heads"].push_back({{"head", h.head.str()},
                          {"rank_correlation", rc},
                          {"pearson_initial", pi},
                          {"pearson_final", pf}});
  }
  return j;
}

std::string MetricReport::histogram_csv() const {
  std::ostringstream out;
  out << "layer,bin_lo,bin_hi,before,after\n";
  for (const auto& [layer, s] : pairwise_before) {
    const auto& a = pairwise_after.at(layer);
    for (int b = 0; b < SimilaritySummary::kBins; ++b) {
      const double lo = -1.0 + 2.0 * b / SimilaritySummary::kBins;
      const double hi = -1.0 + 2.0 * (b + 1) / SimilaritySummary::kBins;
      out << layer << ',' << lo << ',' << hi << ',' << s.histogram[b] << ',' << a.histogram[b] << '\n';
    }
  }
  return out.str();
}

}  // namespace circuitlab
