#include <cmath>
#include <random>
#include <vector>

#include <gtest/gtest.h>

#include "fingerforge/transformer.hpp"

using namespace fingerforge;
using ae::AutoencoderModel;
using ae::TransformerConfig;
using nn::Matrix;

namespace {

using Grid = std::vector<std::vector<double>>;

Matrix random_window(std::mt19937_64& rng, int rows, int cols) {
  std::uniform_real_distribution<double> d(0.0, 1.0);
  Matrix m(rows, cols);
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) m(r, c) = d(rng);
  return m;
}

// ---- independent reference forward pass (plain loops over nested vectors) ----

Grid to_grid(const Matrix& m) {
  Grid g(static_cast<std::size_t>(m.rows()), std::vector<double>(static_cast<std::size_t>(m.cols())));
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) g[r][c] = m(r, c);
  return g;
}

struct Ref {
  const nn::ParameterSet& p;
  Grid w(const std::string& name) const { return to_grid(p[p.index_of(name)]); }

  static Grid linear(const Grid& x, const Grid& w, const Grid& b) {
    Grid out(x.size(), std::vector<double>(w[0].size()));
    for (std::size_t r = 0; r < x.size(); ++r)
      for (std::size_t c = 0; c < w[0].size(); ++c) {
        double s = b[0][c];
        for (std::size_t i = 0; i < w.size(); ++i) s += x[r][i] * w[i][c];
        out[r][c] = s;
      }
    return out;
  }
  static Grid add(Grid a, const Grid& b) {
    for (std::size_t r = 0; r < a.size(); ++r)
      for (std::size_t c = 0; c < a[r].size(); ++c) a[r][c] += b[r][c];
    return a;
  }
  Grid norm(const Grid& x, const std::string& name) const {
    const auto g = w(name + ".gain"), b = w(name + ".bias");
    Grid out = x;
    for (std::size_t r = 0; r < x.size(); ++r) {
      double mean = 0, var = 0;
      for (double v : x[r]) mean += v;
      mean /= static_cast<double>(x[r].size());
      for (double v : x[r]) var += (v - mean) * (v - mean);
      var /= static_cast<double>(x[r].size());
      for (std::size_t c = 0; c < x[r].size(); ++c)
        out[r][c] = g[0][c] * (x[r][c] - mean) / std::sqrt(var + nn::kLayerNormEpsilon) + b[0][c];
    }
    return out;
  }
  Grid mha(const Grid& xq, const Grid& xkv, const std::string& name, int heads) const {
    const auto q = linear(xq, w(name + ".wq"), w(name + ".bq"));
    const auto k = linear(xkv, w(name + ".wk"), w(name + ".bk"));
    const auto v = linear(xkv, w(name + ".wv"), w(name + ".bv"));
    const std::size_t d = q[0].size(), dk = d / static_cast<std::size_t>(heads);
    Grid concat(xq.size(), std::vector<double>(d, 0.0));
    for (int h = 0; h < heads; ++h) {
      const std::size_t off = static_cast<std::size_t>(h) * dk;
      for (std::size_t i = 0; i < q.size(); ++i) {
        std::vector<double> a(k.size());
        double peak = -1e300;
        for (std::size_t j = 0; j < k.size(); ++j) {
          double s = 0;
          for (std::size_t c = 0; c < dk; ++c) s += q[i][off + c] * k[j][off + c];
          a[j] = s / std::sqrt(static_cast<double>(dk));
          peak = std::max(peak, a[j]);
        }
        double z = 0;
        for (auto& v_ : a) z += (v_ = std::exp(v_ - peak));
        for (std::size_t j = 0; j < k.size(); ++j)
          for (std::size_t c = 0; c < dk; ++c) concat[i][off + c] += a[j] / z * v[j][off + c];
      }
    }
    return linear(concat, w(name + ".wo"), w(name + ".bo"));
  }
  Grid ffn(const Grid& x, const std::string& name) const {
    auto h = linear(x, w(name + ".w1"), w(name + ".b1"));
    for (auto& row : h)
      for (auto& v : row) v = std::max(0.0, v);
    return linear(h, w(name + ".w2"), w(name + ".b2"));
  }
};

Grid reference_forward(const AutoencoderModel& m, const Matrix& window) {
  const auto& c = m.config();
  Ref ref{m.parameters()};
  Grid emb = Ref::linear(to_grid(window), ref.w("input.w"), ref.w("input.b"));
  if (c.positional_encoding)
    for (std::size_t pos = 0; pos < emb.size(); ++pos)
      for (std::size_t i = 0; i < emb[pos].size(); ++i) {
        const double angle = static_cast<double>(pos) /
                             std::pow(10000.0, static_cast<double>(2 * (i / 2)) / static_cast<double>(c.d_model));
        emb[pos][i] += (i % 2 == 0) ? std::sin(angle) : std::cos(angle);
      }
  Grid x = emb;
  for (int l = 0; l < c.num_layers; ++l) {
    const auto pre = "encoder." + std::to_string(l);
    Grid y = ref.norm(Ref::add(x, ref.mha(x, x, pre + ".self", c.num_heads)), pre + ".ln1");
    x = ref.norm(Ref::add(y, ref.ffn(y, pre + ".ffn")), pre + ".ln2");
  }
  Grid hidden = x;
  if (c.cross_attention) {
    Grid u = emb;
    for (int l = 0; l < c.num_layers; ++l) {
      const auto pre = "decoder." + std::to_string(l);
      Grid y1 = ref.norm(Ref::add(u, ref.mha(u, u, pre + ".self", c.num_heads)), pre + ".ln1");
      Grid y2 = ref.norm(Ref::add(y1, ref.mha(y1, x, pre + ".cross", c.num_heads)), pre + ".ln2");
      u = ref.norm(Ref::add(y2, ref.ffn(y2, pre + ".ffn")), pre + ".ln3");
    }
    hidden = u;
  }
  return Ref::linear(hidden, ref.w("output.w"), ref.w("output.b"));
}

TransformerConfig small_config() {
  TransformerConfig c;
  c.d_model = 4;
  c.num_heads = 2;
  c.dff = 8;
  c.num_layers = 1;
  c.window = 4;
  c.features = 3;
  c.seed = 11;
  return c;
}

}  // namespace

TEST(Forward, IsDeterministic) {
  auto m = AutoencoderModel::initialize(small_config());
  std::mt19937_64 rng(1);
  const Matrix w = random_window(rng, 4, 3);
  const Matrix a = m.forward(w), b = m.forward(w);
  EXPECT_EQ(0, std::memcmp(a.data(), b.data(), sizeof(double) * static_cast<std::size_t>(a.size())));
  EXPECT_EQ(a.rows(), 4);
  EXPECT_EQ(a.cols(), 3);
}

TEST(Forward, MatchesNaiveReference) {
  std::mt19937_64 rng(2);
  for (bool cross : {true, false})
    for (int layers : {1, 2}) {
      auto cfg = small_config();
      cfg.cross_attention = cross;
      cfg.num_layers = layers;
      auto m = AutoencoderModel::initialize(cfg);
      // Nonzero biases and gains exercise every term.
      for (auto& t : m.parameters().values)
        for (Eigen::Index i = 0; i < t.size(); ++i) t(i) += 0.1 * std::sin(static_cast<double>(i) + 1.0);
      const Matrix w = random_window(rng, 4, 3);
      const Matrix out = m.forward(w);
      const Grid expected = reference_forward(m, w);
      for (int r = 0; r < 4; ++r)
        for (int c = 0; c < 3; ++c) EXPECT_NEAR(out(r, c), expected[r][c], 1e-10) << "cross=" << cross;
    }
}

TEST(Forward, RejectsWrongShapeAndNonFiniteInput) {
  auto m = AutoencoderModel::initialize(small_config());
  try {
    m.forward(Matrix::Zero(5, 3));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::ShapeMismatch);
  }
  Matrix bad = Matrix::Zero(4, 3);
  bad(1, 1) = std::nan("");
  EXPECT_THROW(m.forward(bad), Error);
}

TEST(Forward, DivergedWeightsAreReportedAsNonFiniteActivation) {
  auto m = AutoencoderModel::initialize(small_config());
  auto& p = m.parameters();
  p[p.index_of("output.b")](0, 0) = std::numeric_limits<double>::infinity();
  try {
    m.forward(Matrix::Zero(4, 3));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::NonFiniteActivation);
  }
}

TEST(Loss, ExactReconstructionIsZero) {
  std::mt19937_64 rng(3);
  const Matrix w = random_window(rng, 4, 3);
  EXPECT_EQ(ae::mean_squared_error(w, w), 0.0);
}

TEST(Loss, ConstantHalfOutputOnZeroInputIsQuarter) {
  auto m = AutoencoderModel::initialize(small_config());
  auto& p = m.parameters();
  for (auto& t : p.values) t.setZero();
  p[p.index_of("output.b")].setConstant(0.5);
  const std::vector<Matrix> batch(3, Matrix::Zero(4, 3));
  EXPECT_DOUBLE_EQ(m.loss(batch), 0.25);
}

TEST(Loss, MatchesBruteForceSummation) {
  std::mt19937_64 rng(4);
  auto m = AutoencoderModel::initialize(small_config());
  std::vector<Matrix> batch;
  for (int i = 0; i < 5; ++i) batch.push_back(random_window(rng, 4, 3));
  double total = 0.0;
  for (const auto& w : batch) {
    const Grid rec = reference_forward(m, w);
    double s = 0.0;
    for (int r = 0; r < 4; ++r)
      for (int c = 0; c < 3; ++c) s += (rec[r][c] - w(r, c)) * (rec[r][c] - w(r, c));
    total += s / 12.0;
  }
  EXPECT_NEAR(m.loss(batch), total / 5.0, 1e-12);
  EXPECT_THROW(m.loss({}), Error);
}

TEST(GradCheck, AnalyticGradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(5);
  auto m = AutoencoderModel::initialize(ae::gradcheck_config());
  const Matrix w = random_window(rng, 3, 2);
  const auto report = ae::grad_check(m, w, 1e-5);
  EXPECT_LT(report.max_relative, 1e-4) << "worst tensor " << report.worst_tensor;
  EXPECT_EQ(report.per_tensor.size(), m.parameters().size());
}

TEST(GradCheck, EncoderOnlyStackAlsoChecks) {
  std::mt19937_64 rng(6);
  auto cfg = ae::gradcheck_config();
  cfg.cross_attention = false;
  cfg.num_layers = 2;
  auto m = AutoencoderModel::initialize(cfg);
  EXPECT_LT(ae::grad_check(m, random_window(rng, 3, 2)).max_relative, 1e-4);
}

TEST(GradCheck, DetectsDroppedGradientTerm) {
  std::mt19937_64 rng(7);
  auto m = AutoencoderModel::initialize(ae::gradcheck_config());
  const Matrix w = random_window(rng, 3, 2);
  const auto idx = m.parameters().index_of("encoder.0.self.wv");
  const auto report = ae::grad_check(m, w, 1e-5, [&](nn::Gradients& g) { g[idx](0, 0) = 0.0; });
  EXPECT_GT(report.max_relative, 1e-2);
  EXPECT_EQ(report.worst_tensor, "encoder.0.self.wv");
}

TEST(GradCheck, ZeroWeightFeedForwardPathIsExact) {
  std::mt19937_64 rng(8);
  auto m = AutoencoderModel::initialize(ae::gradcheck_config());
  auto& p = m.parameters();
  for (const auto* name : {"encoder.0.ffn.w1", "encoder.0.ffn.w2", "decoder.0.ffn.w1", "decoder.0.ffn.w2"})
    p[p.index_of(name)].setZero();
  p[p.index_of("encoder.0.ffn.b1")].setConstant(0.3);
  p[p.index_of("decoder.0.ffn.b1")].setConstant(0.2);
  const auto report = ae::grad_check(m, random_window(rng, 3, 2));
  for (const auto& [name, rel] : report.per_tensor)
    if (name.find(".ffn.") != std::string::npos) EXPECT_LT(rel, 1e-7) << name;
}

TEST(Train, MemorizesRepeatedWindow) {
  std::mt19937_64 rng(9);
  TransformerConfig cfg;
  cfg.d_model = 16;
  cfg.num_heads = 2;
  cfg.dff = 32;
  cfg.num_layers = 1;
  cfg.window = 5;
  cfg.features = 4;
  cfg.epochs = 50;
  cfg.batch_size = 4;
  cfg.learning_rate = 1e-2;
  const std::vector<Matrix> windows(16, random_window(rng, 5, 4));
  const auto m = ae::train(windows, cfg);
  ASSERT_EQ(m.history().size(), 50u);
  EXPECT_LT(m.history().back(), 1e-3 * m.history().front());
  for (std::size_t i = 1; i < m.history().size(); ++i) EXPECT_LE(m.history()[i], m.history()[i - 1] * 1.05);
}

TEST(Train, IdenticalInputsGiveIdenticalModelBytes) {
  std::mt19937_64 rng(10);
  auto cfg = small_config();
  cfg.epochs = 3;
  cfg.batch_size = 2;
  std::vector<Matrix> windows;
  for (int i = 0; i < 6; ++i) windows.push_back(random_window(rng, 4, 3));
  EXPECT_EQ(ae::serialize(ae::train(windows, cfg)), ae::serialize(ae::train(windows, cfg)));
}

TEST(Train, RequiresOneFullBatch) {
  auto cfg = small_config();
  cfg.batch_size = 8;
  EXPECT_THROW(ae::train(std::vector<Matrix>(4, Matrix::Zero(4, 3)), cfg), Error);
}

TEST(Train, DivergenceIsReportedWithEpoch) {
  std::mt19937_64 rng(11);
  auto cfg = small_config();
  cfg.epochs = 5;
  cfg.batch_size = 1;
  std::vector<Matrix> windows;
  for (int i = 0; i < 3; ++i) windows.push_back(random_window(rng, 4, 3) * 1e200);
  try {
    ae::train(windows, cfg);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::DivergenceDetected);
    EXPECT_NE(std::string(e.what()).find("epoch 1"), std::string::npos);
  }
}

TEST(Permutation, PositionalEncodingMakesModelOrderAware) {
  std::mt19937_64 rng(12);
  auto m = AutoencoderModel::initialize(small_config());
  const Matrix w = random_window(rng, 4, 3);
  Eigen::PermutationMatrix<Eigen::Dynamic> perm(4);
  perm.indices() << 2, 0, 3, 1;
  const Matrix permuted_input_output = m.forward(perm * w);
  const Matrix permuted_output = perm * m.forward(w);
  EXPECT_GT((permuted_input_output - permuted_output).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(Permutation, EncoderSelfAttentionIsEquivariantWithoutPositions) {
  std::mt19937_64 rng(13);
  auto cfg = small_config();
  cfg.positional_encoding = false;
  for (bool cross : {false, true}) {
    cfg.cross_attention = cross;
    auto m = AutoencoderModel::initialize(cfg);
    const Matrix w = random_window(rng, 4, 3);
    Eigen::PermutationMatrix<Eigen::Dynamic> perm(4);
    perm.indices() << 1, 3, 0, 2;
    const Matrix a = m.forward(perm * w), b = perm * m.forward(w);
    EXPECT_LT((a - b).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(Serialization, RoundTripsExactly) {
  std::mt19937_64 rng(14);
  auto cfg = small_config();
  cfg.epochs = 2;
  cfg.batch_size = 2;
  std::vector<Matrix> windows{random_window(rng, 4, 3), random_window(rng, 4, 3)};
  auto m = ae::train(windows, cfg);
  m.set_threshold(0.125);
  const auto bytes = ae::serialize(m);
  const auto back = ae::deserialize(bytes);
  EXPECT_EQ(back.config(), m.config());
  EXPECT_EQ(back.threshold(), m.threshold());
  EXPECT_EQ(back.history(), m.history());
  EXPECT_EQ(ae::serialize(back), bytes);
  EXPECT_EQ(back.forward(windows[0]), m.forward(windows[0]));
}

TEST(Serialization, RejectsCorruptContainers) {
  auto m = AutoencoderModel::initialize(small_config());
  auto bytes = ae::serialize(m);
  auto expect_corrupt = [](const std::string& b) {
    try {
      ae::deserialize(b);
      FAIL();
    } catch (const Error& e) {
      EXPECT_EQ(e.code(), Errc::CorruptModel);
    }
  };
  expect_corrupt(bytes.substr(0, bytes.size() / 2));
  expect_corrupt("not a model");
  auto flipped = bytes;
  flipped[0] ^= 0x01;
  expect_corrupt(flipped);
}

TEST(Config, ReferenceGridMembership) {
  TransformerConfig c;
  c.dff = 1024;
  c.num_layers = 3;
  c.epochs = 50;
  c.batch_size = 512;
  EXPECT_TRUE(c.in_reference_grid());
  c.dff = 100;
  EXPECT_FALSE(c.in_reference_grid());
  c.d_model = 10;
  c.num_heads = 4;
  EXPECT_THROW(c.validate(), Error);
}
