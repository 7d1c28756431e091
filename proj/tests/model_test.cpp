#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "cgan/errors.hpp"
#include "cgan/model.hpp"
#include "cgan/training.hpp"
#include "test_support.hpp"

namespace cgan {
namespace {

using Matrix = std::vector<std::vector<double>>;

// Plain-loop decoder used as an oracle for forward(). Shares nothing with the
// library beyond the parameter tensors.
struct NaiveDecoder {
  const ModelParams& p;

  Matrix layer_norm(const Matrix& x, const Tensor& g, const Tensor& b) const {
    Matrix y = x;
    for (std::size_t r = 0; r < x.size(); ++r) {
      const std::size_t n = x[r].size();
      double mean = 0.0, var = 0.0;
      for (double v : x[r]) mean += v;
      mean /= n;
      for (double v : x[r]) var += (v - mean) * (v - mean);
      var /= n;
      for (std::size_t c = 0; c < n; ++c) y[r][c] = (x[r][c] - mean) / std::sqrt(var + 1e-5) * g[c] + b[c];
    }
    return y;
  }

  static Matrix affine(const Matrix& x, const Tensor& w, const Tensor& b) {
    Matrix y(x.size(), std::vector<double>(w.cols(), 0.0));
    for (std::size_t r = 0; r < x.size(); ++r)
      for (std::size_t c = 0; c < w.cols(); ++c) {
        double s = b[c];
        for (std::size_t k = 0; k < w.rows(); ++k) s += x[r][k] * w.at(k, c);
        y[r][c] = s;
      }
    return y;
  }

  // `bias_row`/`bias` add a per-key offset to one query row of the scores.
  Matrix logits(const std::vector<TokenId>& tokens, std::size_t bias_row = SIZE_MAX,
                const std::vector<double>& bias = {}, bool bias_all_layers = false) const {
    const ModelConfig& c = p.config;
    const std::size_t n = tokens.size(), d = c.embed_dim, hd = c.head_dim();
    Matrix x(n, std::vector<double>(d));
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t k = 0; k < d; ++k)
        x[i][k] = p.token_embedding.at(tokens[i], k) + p.position_embedding.at(i, k);
    for (std::size_t l = 0; l < c.num_layers; ++l) {
      const LayerParams& w = p.layers[l];
      const bool biased = bias_row != SIZE_MAX && (bias_all_layers || l + 1 == c.num_layers);
      const Matrix h = layer_norm(x, w.ln1_gain, w.ln1_bias);
      const Matrix q = affine(h, w.w_query, w.b_query);
      const Matrix k = affine(h, w.w_key, w.b_key);
      const Matrix v = affine(h, w.w_value, w.b_value);
      Matrix mixed(n, std::vector<double>(d, 0.0));
      for (std::size_t head = 0; head < c.num_heads; ++head) {
        for (std::size_t i = 0; i < n; ++i) {
          std::vector<double> score(i + 1);
          double mx = -1e300;
          for (std::size_t j = 0; j <= i; ++j) {
            double s = 0.0;
            for (std::size_t t = 0; t < hd; ++t) s += q[i][head * hd + t] * k[j][head * hd + t];
            score[j] = s / std::sqrt(static_cast<double>(hd));
            if (biased && i == bias_row) score[j] += bias[j];
            mx = std::max(mx, score[j]);
          }
          double z = 0.0;
          for (double& s : score) z += (s = std::exp(s - mx));
          for (std::size_t j = 0; j <= i; ++j)
            for (std::size_t t = 0; t < hd; ++t) mixed[i][head * hd + t] += score[j] / z * v[j][head * hd + t];
        }
      }
      const Matrix attn = affine(mixed, w.w_proj, w.b_proj);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t t = 0; t < d; ++t) x[i][t] += attn[i][t];
      Matrix up = affine(layer_norm(x, w.ln2_gain, w.ln2_bias), w.w_up, w.b_up);
      for (auto& row : up)
        for (double& u : row)
          u = 0.5 * u * (1.0 + std::tanh(std::sqrt(2.0 / std::numbers::pi) * (u + 0.044715 * u * u * u)));
      const Matrix down = affine(up, w.w_down, w.b_down);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t t = 0; t < d; ++t) x[i][t] += down[i][t];
    }
    return affine(layer_norm(x, p.final_gain, p.final_bias), p.w_out, p.b_out);
  }
};

// Random values everywhere, including gains and biases that init leaves at 1/0.
ModelParams scrambled(const ModelConfig& c, std::uint64_t seed) {
  ModelParams p = init_model(c);
  std::mt19937_64 rng(seed);
  for (auto& [name, t] : p.named()) *t = testing::random_tensor(t->shape(), rng, -0.5, 0.5);
  return p;
}

TEST(InitModel, IsDeterministic) {
  const ModelConfig c = testing::micro_config(2);
  EXPECT_EQ(init_model(c), init_model(c));
  ModelConfig other = c;
  other.seed = c.seed + 1;
  EXPECT_NE(init_model(c).token_embedding, init_model(other).token_embedding);
}

TEST(InitModel, RejectsIndivisibleEmbedDim) {
  ModelConfig c = testing::micro_config();
  c.embed_dim = 6;
  c.num_heads = 4;
  try {
    init_model(c);
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("embed_dim"), std::string::npos);
  }
}

TEST(InitModel, ReportsEveryBadField) {
  ModelConfig c;
  c.vocab_size = 0;
  c.dropout_rate = 1.0;
  const auto errors = c.validate();
  ASSERT_EQ(errors.size(), 2u);
  EXPECT_EQ(errors[0].rfind("vocab_size", 0), 0u);
  EXPECT_EQ(errors[1].rfind("dropout_rate", 0), 0u);
}

TEST(InitModel, ParameterCountForReferenceConfig) {
  ModelConfig c;
  c.vocab_size = 64;
  c.context_length = 64;
  c.num_layers = 2;
  c.num_heads = 4;
  c.embed_dim = 32;
  // Hand count, d = 32, V = 64, C = 64, MLP width 128:
  //   token + position embeddings  64*32 + 64*32            = 4096
  //   per layer: 2 norms 4*32, q/k/v/proj 4*(32*32 + 32)     = 4352
  //              mlp 32*128 + 128 + 128*32 + 32              = 8352
  //   two layers                                           = 25408
  //   final norm 64, output 32*64 + 64                      = 2176
  EXPECT_EQ(init_model(c).parameter_count(), 31680u);
  EXPECT_EQ(expected_parameter_count(c), 31680u);
}

TEST(InitModel, BiasesZeroGainsOne) {
  const ModelParams p = init_model(testing::micro_config());
  for (double v : p.layers[0].b_query.values()) EXPECT_EQ(v, 0.0);
  for (double v : p.layers[0].ln2_gain.values()) EXPECT_EQ(v, 1.0);
  for (double v : p.final_bias.values()) EXPECT_EQ(v, 0.0);
  EXPECT_TRUE(p.all_finite());
}

TEST(Forward, MatchesNaiveOracle) {
  std::mt19937_64 rng(11);
  for (std::size_t layers : {1u, 2u}) {
    const ModelParams p = scrambled(testing::micro_config(layers), 100 + layers);
    const NaiveDecoder oracle{p};
    for (int trial = 0; trial < 5; ++trial) {
      const auto tokens = testing::random_tokens(rng, testing::random_size(rng, 1, 12), 7);
      const ForwardResult r = forward(p, tokens);
      const Matrix expected = oracle.logits(tokens);
      for (std::size_t i = 0; i < tokens.size(); ++i)
        for (std::size_t v = 0; v < 7; ++v) EXPECT_NEAR(r.logits.at(i, v), expected[i][v], 1e-10);
    }
  }
}

TEST(Forward, AttentionBiasMatchesNaiveOracle) {
  std::mt19937_64 rng(12);
  const ModelParams p = scrambled(testing::micro_config(2), 7);
  const NaiveDecoder oracle{p};
  const auto tokens = testing::random_tokens(rng, 9, 7);
  for (bool all_layers : {false, true}) {
    AttentionBias bias;
    bias.query = 6;
    bias.key_bias.resize(7);
    for (auto& b : bias.key_bias) b = std::log(std::uniform_real_distribution<double>(0.05, 1.0)(rng));
    bias.all_layers = all_layers;
    const ForwardResult r = forward(p, tokens, &bias);
    const Matrix expected = oracle.logits(tokens, 6, bias.key_bias, all_layers);
    for (std::size_t i = 0; i < tokens.size(); ++i)
      for (std::size_t v = 0; v < 7; ++v) EXPECT_NEAR(r.logits.at(i, v), expected[i][v], 1e-10);
  }
}

TEST(Forward, TraceRowsAreCausalDistributions) {
  std::mt19937_64 rng(13);
  for (int trial = 0; trial < 20; ++trial) {
    const ModelParams p = scrambled(testing::micro_config(2), trial);
    const auto tokens = testing::random_tokens(rng, testing::random_size(rng, 1, 12), 7);
    const AttentionTrace t = forward(p, tokens).trace;
    ASSERT_EQ(t.maps.size(), 4u);
    for (const Tensor& a : t.maps) {
      ASSERT_EQ(a.shape(), (Shape{tokens.size(), tokens.size()}));
      for (std::size_t q = 0; q < tokens.size(); ++q) {
        double total = 0.0;
        for (std::size_t k = 0; k < tokens.size(); ++k) {
          if (k > q) EXPECT_EQ(a.at(q, k), 0.0);
          total += a.at(q, k);
        }
        EXPECT_NEAR(total, 1.0, 1e-9);
      }
    }
  }
}

TEST(Forward, SingleTokenAttendsToItself) {
  const ModelParams p = scrambled(testing::micro_config(2), 5);
  const std::vector<TokenId> one{3};
  for (const Tensor& a : forward(p, one).trace.maps) EXPECT_EQ(a, Tensor::matrix({{1.0}}));
}

TEST(Forward, RejectsBadInput) {
  const ModelParams p = init_model(testing::micro_config());
  const std::vector<TokenId> bad{1, 7};
  EXPECT_THROW(forward(p, bad), std::out_of_range);
  const std::vector<TokenId> too_long(13, 0);
  EXPECT_THROW(forward(p, too_long), std::invalid_argument);
  EXPECT_THROW(forward(p, std::vector<TokenId>{}), std::invalid_argument);
}

TEST(Generate, ZeroTokensGivesNothing) {
  const ModelParams p = init_model(testing::micro_config());
  const std::vector<TokenId> prompt{1, 2};
  const Generation g = generate(p, prompt, GenerateOptions{0});
  EXPECT_TRUE(g.tokens.empty());
  EXPECT_TRUE(g.traces.empty());
}

TEST(Generate, IsGreedyAndDeterministic) {
  const ModelParams p = scrambled(testing::micro_config(2), 9);
  const std::vector<TokenId> prompt{1, 2, 3};
  const Generation a = generate(p, prompt, GenerateOptions{4});
  const Generation b = generate(p, prompt, GenerateOptions{4});
  EXPECT_EQ(a.tokens, b.tokens);
  ASSERT_EQ(a.traces.size(), 4u);
  std::vector<TokenId> seq = prompt;
  for (std::size_t i = 0; i < 4; ++i) {
    const ForwardResult r = forward(p, seq);
    EXPECT_EQ(a.tokens[i], argmax(r.logits.row(seq.size() - 1)));
    EXPECT_EQ(a.traces[i].seq_len, seq.size());
    seq.push_back(a.tokens[i]);
  }
}

TEST(Generate, ContextOverflowIsRejectedUpFront) {
  const ModelParams p = init_model(testing::micro_config());
  const std::vector<TokenId> prompt(10, 1);
  EXPECT_THROW(generate(p, prompt, GenerateOptions{3}), std::invalid_argument);
  EXPECT_THROW(generate(p, std::vector<TokenId>{}, GenerateOptions{1}), std::invalid_argument);
}

TEST(Argmax, LowestIndexWinsTies) {
  const std::vector<double> v{1.0, 3.0, 3.0, 2.0};
  EXPECT_EQ(argmax(v), 1u);
}

// "K <key> V <value>" with a fixed key -> value table. After training, the
// prompt "K k V" must be completed with the paired value.
TEST(Generate, LearnsCopyTask) {
  constexpr std::size_t kKeys = 24;
  // ids: 0 = K, 1 = V, keys 2..25, values 26..49
  ModelConfig c;
  c.vocab_size = 2 + 2 * kKeys;
  c.context_length = 8;
  c.num_layers = 2;
  c.num_heads = 4;
  c.embed_dim = 32;
  c.dropout_rate = 0.0;
  c.seed = 17;
  auto value_of = [](std::size_t k) { return static_cast<TokenId>(2 + kKeys + (k * 7) % kKeys); };
  std::vector<Episode> corpus;
  for (std::size_t k = 0; k < kKeys; ++k) {
    Episode e;
    e.tokens = {0, static_cast<TokenId>(2 + k), 1, value_of(k)};
    e.evidence = {1, 2};
    e.target = {3, 4};
    corpus.push_back(e);
  }
  TrainSpec spec;
  spec.max_steps = 300;
  spec.causal_reg_weight = 0.0;
  spec.seed = 5;
  const TrainResult r = train(init_model(c), corpus, spec);
  for (std::size_t k : {0u, 9u, 17u, 23u}) {
    const std::vector<TokenId> prompt{0, static_cast<TokenId>(2 + k), 1};
    EXPECT_EQ(generate(r.params, prompt, GenerateOptions{1}).tokens.at(0), value_of(k)) << "key " << k;
  }
}

}  // namespace
}  // namespace cgan
