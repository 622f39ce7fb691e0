#include <gtest/gtest.h>

#include <cmath>

#include "circuitlab/metrics.hpp"
#include "circuitlab/random.hpp"
#include "fd_oracle.hpp"
#include "toy_models.hpp"

using namespace circuitlab;
namespace ct = circuitlab::testing;

namespace {

Embedding unit(std::vector<float> v) {
  double n = 0;
  for (float x : v) n += static_cast<double>(x) * x;
  for (float& x : v) x = static_cast<float>(x / std::sqrt(n));
  return {v, ""};
}

struct Trained {
  Dataset data;
  Model model, reference;
};

const Trained& trained() {
  static const Trained t = [] {
    Trained out;
    out.data = synthetic_blobs({3, 16, 16}, 4, 400, 31);
    TrainOptions o;
    o.epochs = 4;
    o.batch = 32;
    o.seed = 31;
    out.model = train_baseline(build_mini_alexnet({3, 16, 16}, 4, 31), out.data, o).model;
    o.seed = 32;
    out.reference = train_baseline(build_mini_alexnet({3, 16, 16}, 4, 32), out.data, o).model;
    return out;
  }();
  return t;
}

// Smooth image: a horizontal ramp in one channel.
Tensor ramp(int channel, float scale) {
  std::vector<float> v(3 * 16 * 16, 0.2f);
  for (int i = 0; i < 16; ++i)
    for (int j = 0; j < 16; ++j) v[(channel * 16 + i) * 16 + j] = 0.2f + scale * j / 16.0f;
  return Tensor::from_data({3, 16, 16}, v);
}

}  // namespace

// ---------------------------------------------------------------------------
// Kendall

TEST(Kendall, HandExamples) {
  EXPECT_EQ(kendall_tau({1, 2, 3, 4}, {1, 2, 3, 4}), 1.0);
  EXPECT_EQ(kendall_tau({1, 2, 3, 4}, {4, 3, 2, 1}), -1.0);
  EXPECT_NEAR(kendall_tau({1, 2, 3, 4}, {1, 3, 2, 4}), 4.0 / 6.0, 1e-15);
}

TEST(Kendall, ExactlyMatchesPairEnumeration) {
  Rng rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 2 + rng.below(60);
    const bool ties = trial % 2 == 0;
    std::vector<double> a(n), b(n);
    for (std::size_t i = 0; i < n; ++i) {
      a[i] = ties ? static_cast<double>(rng.below(5)) : rng.uniform();
      b[i] = ties ? static_cast<double>(rng.below(4)) : rng.uniform();
    }
    const double brute = ct::brute_kendall(a, b);
    if (std::isnan(brute)) {
      EXPECT_THROW(kendall_tau(a, b), NumericError);
      continue;
    }
    EXPECT_EQ(kendall_tau(a, b), brute) << "trial " << trial;
  }
}

TEST(Kendall, InvariantUnderIncreasingTransforms) {
  Rng rng(6);
  std::vector<double> a(40), b(40), ea(40), cb(40);
  for (int i = 0; i < 40; ++i) {
    a[i] = rng.uniform(-2, 2);
    b[i] = std::floor(rng.uniform(0, 6));
    ea[i] = std::exp(a[i]);
    cb[i] = b[i] * b[i] * b[i] + 7;
  }
  EXPECT_EQ(kendall_tau(a, b), kendall_tau(ea, cb));
}

TEST(Kendall, Errors) {
  EXPECT_THROW(kendall_tau({1, 1, 1}, {1, 2, 3}), NumericError);
  EXPECT_THROW(kendall_tau({1, 2, 3}, {5, 5, 5}), NumericError);
  EXPECT_THROW(kendall_tau({1, 2}, {1, 2, 3}), ShapeError);
  EXPECT_THROW(kendall_tau({1}, {1}), ShapeError);
  EXPECT_THROW(kendall_tau({1, NAN}, {1, 2}), NumericError);
}

// ---------------------------------------------------------------------------
// embeddings

TEST(Embedder, UnitNormAndSelfSimilarity) {
  Embedder e(trained().reference);
  Rng rng(1);
  Tensor x = trained().data.image(3);
  Embedding a = e.embed(x, "img3");
  double n = 0;
  for (float v : a.v) n += static_cast<double>(v) * v;
  EXPECT_NEAR(std::sqrt(n), 1.0, 1e-5);
  EXPECT_EQ(a.source, "img3");
  EXPECT_NEAR(cosine(a, e.embed(x)), 1.0, 1e-12);
  EXPECT_EQ(a.v.size(), 512u);
}

TEST(Embedder, UnloadedIsAnError) {
  Embedder e;
  EXPECT_FALSE(e.loaded());
  EXPECT_THROW(e.embed(Tensor::zeros({3, 16, 16})), ConfigError);
}

TEST(Embedder, SeparatesClasses) {
  Embedder e(trained().reference);
  const Dataset& d = trained().data;
  std::vector<Tensor> imgs;
  std::vector<int> labels;
  for (std::size_t i = 0; i < 40; ++i) {
    imgs.push_back(d.image(i));
    labels.push_back(d.labels[i]);
  }
  auto emb = e.embed_all(imgs);
  double within = 0, across = 0;
  int nw = 0, na = 0;
  for (std::size_t i = 0; i < emb.size(); ++i)
    for (std::size_t j = i + 1; j < emb.size(); ++j) {
      const double c = cosine(emb[i], emb[j]);
      if (labels[i] == labels[j]) {
        within += c;
        ++nw;
      } else {
        across += c;
        ++na;
      }
    }
  EXPECT_GT(within / nw, across / na);
}

TEST(SemanticDelta, HandValues) {
  Embedding e1 = unit({1, 0, 0}), e2 = unit({0, 1, 0}), e3 = unit({0, 0, 1});
  EXPECT_EQ(semantic_delta({e1, e2}, {e1, e2}), 0.0);
  EXPECT_NEAR(semantic_delta({e1}, {e2}), 1.0, 1e-15);
  // Means (2,1,0)/3 and (0,2,1)/3 -> cos = 2/5.
  const double d = semantic_delta({e1, e1, e2}, {e2, e2, e3});
  EXPECT_NEAR(d, 1.0 - 2.0 / 5.0, 1e-12);
  EXPECT_EQ(d, semantic_delta({e2, e2, e3}, {e1, e1, e2}));
  Embedding minus = unit({-1, 0, 0});
  EXPECT_NEAR(semantic_delta({e1}, {minus}), 2.0, 1e-15);
  EXPECT_THROW(semantic_delta({e1, minus}, {e2}), NumericError);
  EXPECT_THROW(semantic_delta({}, {e2}), ConfigError);
}

TEST(SemanticDelta, IdenticalImageSetsGiveZero) {
  Embedder e(trained().reference);
  std::vector<Tensor> s{trained().data.image(0), trained().data.image(5)};
  EXPECT_NEAR(semantic_delta(e, s, s), 0.0, 1e-12);
}

// ---------------------------------------------------------------------------
// pairwise

TEST(Pairwise, HandBuiltEmbeddings) {
  std::vector<Embedding> e{unit({1, 0}), unit({0, 1}), unit({1, 1}), unit({-1, 0})};
  SimilaritySummary s = summarize_pairs(e);
  const double r = 1 / std::sqrt(2.0);
  const std::vector<double> expect{0, r, -1, r, 0, -r};
  ASSERT_EQ(s.values.size(), 6u);
  for (int i = 0; i < 6; ++i) EXPECT_NEAR(s.values[i], expect[i], 1e-7);
  const double mean = (r - 1.0) / 6.0;
  EXPECT_NEAR(s.mean, mean, 1e-7);
  double var = 0;
  for (double v : expect) var += (v - mean) * (v - mean);
  EXPECT_NEAR(s.stddev, std::sqrt(var / 6), 1e-7);
  // Bins of width 0.1 starting at -1: -1 -> 0, -0.707 -> 2, 0 -> 10, 0.707 -> 17.
  EXPECT_EQ(s.histogram[0], 1);
  EXPECT_EQ(s.histogram[2], 1);
  EXPECT_EQ(s.histogram[10], 2);
  EXPECT_EQ(s.histogram[17], 2);
}

TEST(Pairwise, CountsAndIdenticalImages) {
  Embedder e(trained().reference);
  std::vector<Tensor> same(4, ramp(0, 0.5f));
  SimilaritySummary s = pairwise_similarity(same, e);
  ASSERT_EQ(s.values.size(), 6u);
  for (double v : s.values) EXPECT_NEAR(v, 1.0, 1e-6);
  EXPECT_EQ(s.histogram[19], 6);
  EXPECT_EQ(pairwise_similarity({ramp(0, 0.5f), ramp(1, 0.5f)}, e).values.size(), 1u);
}

TEST(Pairwise, NoisyImagesAreDropped) {
  Embedder e(trained().reference);
  Rng rng(2);
  Tensor noise = Tensor::from_data({3, 16, 16}, ct::random_vector(rng, 768, 0, 1));
  SimilaritySummary s = pairwise_similarity({ramp(0, 0.5f), noise, ramp(2, 0.5f)}, e);
  EXPECT_EQ(s.kept, 2u);
  EXPECT_EQ(s.dropped, 1u);
  EXPECT_THROW(pairwise_similarity({ramp(0, 0.5f), noise}, e), ConfigError);
}

// ---------------------------------------------------------------------------
// attribution rank correlation

TEST(RankCorrelation, SelfScaledAndPermuted) {
  AttributionTable a;
  a.head = {"conv2", 1};
  a.layers = {"conv1", "conv2"};
  a.scores["conv1"] = {0.3, 0.1, 0.7, 0.2, 0.9};
  a.scores["conv2"] = {0.0, 1.0};
  EXPECT_EQ(attribution_rank_correlation(a, a, "conv1"), 1.0);
  AttributionTable b = a;
  for (double& v : b.scores["conv1"]) v *= 2;
  EXPECT_EQ(attribution_rank_correlation(a, b, "conv1"), 1.0);
  AttributionTable p = a;
  p.scores["conv1"] = {0.9, 0.3, 0.2, 0.7, 0.1};
  EXPECT_EQ(attribution_rank_correlation(a, p, "conv1"),
            ct::brute_kendall(a.scores["conv1"], p.scores["conv1"]));
  AttributionTable other = a;
  other.head = {"conv2", 0};
  EXPECT_THROW(attribution_rank_correlation(a, other, "conv1"), ConfigError);
  AttributionTable shorter = a;
  shorter.scores["conv1"].pop_back();
  EXPECT_THROW(attribution_rank_correlation(a, shorter, "conv1"), ConfigError);
  EXPECT_THROW(attribution_rank_correlation(a, a, "conv9"), ConfigError);
}

// ---------------------------------------------------------------------------
// similarity ratio

TEST(SimilarityRatio, HandValues) {
  Embedding f = unit({1, 0, 0});
  SimilarityRatio same = similarity_ratio(f, {unit({0, 1, 0}), f}, 1);
  EXPECT_EQ(same.ratio, 1.0);
  EXPECT_EQ(same.argmax, 1u);
  Embedding own = unit({0.5f, std::sqrt(0.75f), 0}), best = unit({0.9f, std::sqrt(0.19f), 0});
  SimilarityRatio r = similarity_ratio(f, {own, best}, 0);
  EXPECT_NEAR(r.numerator, 0.9, 1e-6);
  EXPECT_NEAR(r.denominator, 0.5, 1e-6);
  EXPECT_NEAR(r.ratio, 1.8, 1e-5);
  EXPECT_FALSE(r.degenerate);
  SimilarityRatio d = similarity_ratio(f, {unit({0, 1, 0}), best}, 0);
  EXPECT_TRUE(d.degenerate);
  EXPECT_THROW(similarity_ratio(f, {own}, 1), ConfigError);
}

TEST(SimilarityRatio, AtLeastOneWithOwnInCandidates) {
  Rng rng(9);
  for (int t = 0; t < 50; ++t) {
    std::vector<Embedding> layer;
    for (int k = 0; k < 5; ++k) layer.push_back(unit(ct::random_vector(rng, 8, 0.01, 1)));
    Embedding f = unit(ct::random_vector(rng, 8, 0.01, 1));
    EXPECT_GE(similarity_ratio(f, layer, rng.below(5)).ratio, 1.0);
  }
}

// ---------------------------------------------------------------------------
// report

TEST(Evaluate, SelfComparisonIsPerfect) {
  const Trained& t = trained();
  Embedder e(t.reference);
  EvaluateOptions o;
  o.channels = {{"conv3", 0}, {"conv3", 5}, {"conv4", 2}};
  o.heads = {{"conv3", 5}};
  o.synth.steps = 6;
  o.synth_seeds = 2;
  o.attribution_samples = 4;
  o.topk = 5;
  Dataset d = t.data.subset({0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11});
  MetricReport r = evaluate_models(t.model, t.model, d, e, o);
  ASSERT_EQ(r.channels.size(), 3u);
  for (const ChannelMetrics& c : r.channels) {
    EXPECT_EQ(c.kendall_tau, 1.0) << c.channel.str();
    EXPECT_NEAR(c.semantic_delta_natural, 0.0, 1e-12);
    EXPECT_NEAR(c.semantic_delta_synthetic, 0.0, 1e-12);
    EXPECT_NEAR(c.similarity.ratio, 1.0, 1e-12);
  }
  ASSERT_EQ(r.heads.size(), 1u);
  EXPECT_EQ(r.heads[0].rank_correlation.at("conv1"), 1.0);
  EXPECT_EQ(r.heads[0].pearson_initial.at(1.0), 1.0);
  EXPECT_EQ(r.accuracy_initial, r.accuracy_final);
  for (const auto& [k, v] : r.per_class_delta) EXPECT_EQ(v, 0.0);
  nlohmann::json j = r.to_json();
  EXPECT_EQ(j["channels"].size(), 3u);
  EXPECT_EQ(j["channels"][1]["channel"], "conv3:5");
  const std::string csv = r.histogram_csv();
  EXPECT_EQ(csv.rfind("layer,bin_lo,bin_hi,before,after\n", 0), 0u);
}

TEST(Evaluate, RejectsDuplicateChannels) {
  Embedder e(trained().reference);
  EvaluateOptions o;
  o.channels = {{"conv3", 0}, {"conv3", 0}};
  o.synth.steps = 2;
  EXPECT_THROW(evaluate_models(trained().model, trained().model, trained().data, e, o), ConfigError);
}
