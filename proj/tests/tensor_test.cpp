#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "gradcheck.hpp"
#include "granmoe/tensor/optim.hpp"
#include "granmoe/tensor/param_io.hpp"
#include "granmoe/tensor/tape.hpp"

using namespace granmoe;
using gradcheck::max_rel_error;
using gradcheck::random_matrix;

namespace {

// Contract the op output with a fixed random matrix so every entry gets a
// distinct upstream gradient.
Var contract(DoubleTape& t, Var out, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return sum(mul(out, t.constant(random_matrix(rng, out.rows(), out.cols()))));
}

Tensor tensor_of(Matrix m) { return Tensor::from_matrix(std::move(m)); }

constexpr int kShapes = 100;

}  // namespace

TEST(Matmul, IdentityTimesIdentity) {
  DoubleTape t;
  auto i2 = t.constant(Matrix::Identity(2, 2));
  EXPECT_EQ(matmul(i2, i2).value(), Matrix::Identity(2, 2));
}

TEST(Matmul, RightIdentityKeepsMatrix) {
  DoubleTape t;
  Matrix a(2, 2);
  a << 1, 2, 3, 4;
  EXPECT_EQ(matmul(t.constant(a), t.constant(Matrix::Identity(2, 2))).value(), a);
}

TEST(Matmul, MatchesTripleLoop) {
  std::mt19937_64 rng(3);
  Matrix a = random_matrix(rng, 3, 4), b = random_matrix(rng, 4, 2);
  DoubleTape t;
  const Matrix c = matmul(t.constant(a), t.constant(b)).value();
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 2; ++j) {
      double s = 0;
      for (int k = 0; k < 4; ++k) s += a(i, k) * b(k, j);
      EXPECT_NEAR(c(i, j), s, 1e-12);
    }
}

TEST(Matmul, InnerMismatchThrows) {
  DoubleTape t;
  EXPECT_THROW(matmul(t.constant(Matrix::Zero(2, 3)), t.constant(Matrix::Zero(2, 3))), DimensionError);
}

TEST(Softmax, EqualRowIsUniform) {
  DoubleTape t;
  const Matrix s = softmax_rows(t.constant(Matrix::Constant(1, 5, 0.7))).value();
  for (int j = 0; j < 5; ++j) EXPECT_NEAR(s(0, j), 0.2, 1e-15);
}

TEST(Softmax, ZeroAndLog3) {
  DoubleTape t;
  Matrix x(1, 2);
  x << 0, std::log(3.0);
  const Matrix s = softmax_rows(t.constant(x)).value();
  EXPECT_NEAR(s(0, 0), 0.25, 1e-15);
  EXPECT_NEAR(s(0, 1), 0.75, 1e-15);
}

TEST(Softmax, SaturatesToOneHot) {
  DoubleTape t;
  Matrix x = Matrix::Zero(1, 4);
  x(0, 2) = 1000;
  const Matrix s = softmax_rows(t.constant(x)).value();
  for (int j = 0; j < 4; ++j) EXPECT_NEAR(s(0, j), j == 2 ? 1.0 : 0.0, 1e-12);
}

TEST(Softmax, CausalRowsIgnoreFuture) {
  std::mt19937_64 rng(1);
  DoubleTape t;
  const Matrix s = causal_softmax(t.constant(random_matrix(rng, 4, 4))).value();
  for (int r = 0; r < 4; ++r) {
    EXPECT_NEAR(s.row(r).sum(), 1.0, 1e-14);
    for (int c = r + 1; c < 4; ++c) EXPECT_EQ(s(r, c), 0.0);
  }
}

TEST(LayerNorm, ConstantRowGivesZero) {
  DoubleTape t;
  const Matrix y = layer_norm(t.constant(Matrix::Constant(1, 4, 3.0)), t.constant(Matrix::Ones(1, 4)),
                              t.constant(Matrix::Zero(1, 4)), 1e-5)
                       .value();
  EXPECT_NEAR(y.cwiseAbs().maxCoeff(), 0.0, 1e-12);
}

TEST(LayerNorm, OneThreeGivesMinusOneOne) {
  DoubleTape t;
  Matrix x(1, 2);
  x << 1, 3;
  const Matrix y =
      layer_norm(t.constant(x), t.constant(Matrix::Ones(1, 2)), t.constant(Matrix::Zero(1, 2)), 1e-12).value();
  EXPECT_NEAR(y(0, 0), -1.0, 1e-9);
  EXPECT_NEAR(y(0, 1), 1.0, 1e-9);
}

TEST(LayerNorm, ZeroGainBroadcastsBias) {
  std::mt19937_64 rng(2);
  DoubleTape t;
  Matrix bias = random_matrix(rng, 1, 5);
  const Matrix y =
      layer_norm(t.constant(random_matrix(rng, 3, 5)), t.constant(Matrix::Zero(1, 5)), t.constant(bias), 1e-5).value();
  for (int r = 0; r < 3; ++r) EXPECT_EQ(y.row(r), bias.row(0));
}

TEST(CrossEntropy, ConfidentTargetIsNearZero) {
  DoubleTape t;
  Matrix l = Matrix::Zero(3, 6);
  std::vector<int> tg{1, 4, 0};
  for (int r = 0; r < 3; ++r) l(r, tg[static_cast<std::size_t>(r)]) = 1000;
  EXPECT_NEAR(cross_entropy_masked(t.constant(l), tg, {1, 1, 1}).item(), 0.0, 1e-6);
}

TEST(CrossEntropy, UniformLogitsGiveLogV) {
  DoubleTape t;
  EXPECT_NEAR(cross_entropy_masked(t.constant(Matrix::Zero(2, 37)), {3, 9}, {1, 1}).item(), std::log(37.0), 1e-14);
}

TEST(CrossEntropy, MatchesScalarOracle) {
  std::mt19937_64 rng(4);
  const Matrix l = random_matrix(rng, 4, 8, 2.0);
  const std::vector<int> tg{2, 7, 0, 5};
  const std::vector<std::uint8_t> mk{1, 0, 1, 1};
  double s = 0;
  for (int r : {0, 2, 3}) {
    double z = 0;
    for (int j = 0; j < 8; ++j) z += std::exp(l(r, j));
    s += -(l(r, tg[static_cast<std::size_t>(r)]) - std::log(z));
  }
  DoubleTape t;
  EXPECT_NEAR(cross_entropy_masked(t.constant(l), tg, mk).item(), s / 3, 1e-12);
}

TEST(CrossEntropy, EmptyMaskThrows) {
  DoubleTape t;
  EXPECT_THROW(cross_entropy_masked(t.constant(Matrix::Zero(2, 3)), {0, 1}, {0, 0}), DegenerateInputError);
}

TEST(Backward, SumGivesOnes) {
  std::mt19937_64 rng(5);
  Tensor x = tensor_of(random_matrix(rng, 3, 4));
  DoubleTape t;
  t.backward(sum(t.parameter(x)));
  EXPECT_EQ(x.grad(), Matrix::Ones(3, 4));
}

TEST(Backward, ProductOfScalars) {
  Tensor x = tensor_of(Matrix::Constant(1, 1, 3.0)), y = tensor_of(Matrix::Constant(1, 1, -2.5));
  DoubleTape t;
  t.backward(mul(t.parameter(x), t.parameter(y)));
  EXPECT_EQ(x.grad()(0, 0), -2.5);
  EXPECT_EQ(y.grad()(0, 0), 3.0);
}

TEST(Backward, FrozenParameterGetsNoGradient) {
  Tensor x = tensor_of(Matrix::Ones(2, 2)), w = tensor_of(Matrix::Ones(2, 2));
  DoubleTape t;
  t.backward(sum(matmul(t.parameter(x), t.parameter(w, false))));
  EXPECT_FALSE(w.has_grad());
  EXPECT_TRUE(x.has_grad());
}

TEST(Backward, NonScalarLossThrows) {
  DoubleTape t;
  Tensor x = tensor_of(Matrix::Ones(2, 2));
  EXPECT_THROW(t.backward(t.parameter(x)), ContractError);
}

TEST(Backward, TwoLayerNetMatchesFiniteDifferences) {
  std::mt19937_64 rng(6);
  std::vector<Tensor> xs{tensor_of(random_matrix(rng, 5, 4)), tensor_of(random_matrix(rng, 4, 6, 0.5)),
                         tensor_of(random_matrix(rng, 1, 6, 0.1)), tensor_of(random_matrix(rng, 6, 3, 0.5))};
  auto f = [](DoubleTape& t, const std::vector<Var>& v) {
    auto h = gelu(add(matmul(v[0], v[1]), v[2]));
    return cross_entropy_masked(matmul(h, v[3]), {0, 2, 1, 1, 0}, {1, 1, 0, 1, 1});
  };
  EXPECT_LT(max_rel_error(xs, f), 1e-4);
}

// ---- finite differences per op over random shapes ------------------------------

class OpGradient : public ::testing::TestWithParam<const char*> {};

TEST_P(OpGradient, RandomShapes) {
  const std::string op = GetParam();
  std::mt19937_64 rng(std::hash<std::string>{}(op));
  std::uniform_int_distribution<int> dim(1, 5);
  double worst = 0;
  for (int trial = 0; trial < kShapes; ++trial) {
    const int m = dim(rng), k = dim(rng), n = dim(rng);
    const std::uint64_t cs = rng();
    std::vector<Tensor> xs;
    gradcheck::LossFn f;
    if (op == "matmul") {
      xs = {tensor_of(random_matrix(rng, m, k)), tensor_of(random_matrix(rng, k, n))};
      f = [cs](DoubleTape& t, const std::vector<Var>& v) { return contract(t, matmul(v[0], v[1]), cs); };
    } else if (op == "transpose") {
      xs = {tensor_of(random_matrix(rng, m, n))};
      f = [cs](DoubleTape& t, const std::vector<Var>& v) { return contract(t, transpose(v[0]), cs); };
    } else if (op == "add_broadcast") {
      xs = {tensor_of(random_matrix(rng, m + 1, n)), tensor_of(random_matrix(rng, 1, n))};
      f = [cs](DoubleTape& t, const std::vector<Var>& v) { return contract(t, add(v[0], v[1]), cs); };
    } else if (op == "sub_mul") {
      xs = {tensor_of(random_matrix(rng, m, n)), tensor_of(random_matrix(rng, m, n))};
      f = [cs](DoubleTape& t, const std::vector<Var>& v) { return contract(t, mul(sub(v[0], v[1]), v[0]), cs); };
    } else if (op == "scale_rows") {
      xs = {tensor_of(random_matrix(rng, m, n)), tensor_of(random_matrix(rng, m, 1))};
      f = [cs](DoubleTape& t, const std::vector<Var>& v) {
        return contract(t, scale(scale_rows(v[0], v[1]), 1.7), cs);
      };
    } else if (op == "gelu") {
      xs = {tensor_of(random_matrix(rng, m, n, 2.0))};
      f = [cs](DoubleTape& t, const std::vector<Var>& v) { return contract(t, gelu(v[0]), cs); };
    } else if (op == "softmax") {
      xs = {tensor_of(random_matrix(rng, m, n, 2.0))};
      f = [cs](DoubleTape& t, const std::vector<Var>& v) { return contract(t, softmax_rows(v[0]), cs); };
    } else if (op == "causal_softmax") {
      xs = {tensor_of(random_matrix(rng, m, m, 2.0))};
      f = [cs](DoubleTape& t, const std::vector<Var>& v) { return contract(t, causal_softmax(v[0]), cs); };
    } else if (op == "layer_norm") {
      xs = {tensor_of(random_matrix(rng, m, n + 1)), tensor_of(random_matrix(rng, 1, n + 1)),
            tensor_of(random_matrix(rng, 1, n + 1))};
      f = [cs](DoubleTape& t, const std::vector<Var>& v) { return contract(t, layer_norm(v[0], v[1], v[2], 1e-5), cs); };
    } else if (op == "embedding") {
      xs = {tensor_of(random_matrix(rng, k + 1, n))};
      std::vector<int> ids(static_cast<std::size_t>(m));
      for (auto& i : ids) i = static_cast<int>(rng() % static_cast<unsigned>(k + 1));
      f = [cs, ids](DoubleTape& t, const std::vector<Var>& v) { return contract(t, embedding(v[0], ids), cs); };
    } else if (op == "gather_scatter") {
      xs = {tensor_of(random_matrix(rng, m, n))};
      std::vector<Index> rows(static_cast<std::size_t>(m));
      for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = static_cast<Index>(i);
      std::shuffle(rows.begin(), rows.end(), rng);
      rows.resize(static_cast<std::size_t>(1 + rng() % static_cast<unsigned>(m)));
      f = [cs, rows, m](DoubleTape& t, const std::vector<Var>& v) {
        return contract(t, scatter_rows(gather_rows(v[0], rows), rows, m + 2), cs);
      };
    } else if (op == "slices_concat") {
      xs = {tensor_of(random_matrix(rng, m + 1, n + 1))};
      f = [cs, m, n](DoubleTape& t, const std::vector<Var>& v) {
        auto a = slice_cols(v[0], 0, 1), b = slice_cols(v[0], 1, n);
        auto top = slice_rows(v[0], 0, 1), rest = slice_rows(v[0], 1, m);
        return add(contract(t, concat_cols<double>({b, a}), cs), contract(t, concat_rows<double>({rest, top}), cs + 1));
      };
    } else if (op == "means") {
      xs = {tensor_of(random_matrix(rng, m, n))};
      f = [cs](DoubleTape& t, const std::vector<Var>& v) { return add(contract(t, col_mean(v[0]), cs), mean(v[0])); };
    } else if (op == "cross_entropy") {
      xs = {tensor_of(random_matrix(rng, m, n + 1, 2.0))};
      std::vector<int> tg(static_cast<std::size_t>(m));
      std::vector<std::uint8_t> mk(static_cast<std::size_t>(m));
      for (std::size_t i = 0; i < tg.size(); ++i) {
        tg[i] = static_cast<int>(rng() % static_cast<unsigned>(n + 1));
        mk[i] = i == 0 || rng() % 2;
      }
      f = [tg, mk](DoubleTape&, const std::vector<Var>& v) { return cross_entropy_masked(v[0], tg, mk); };
    }
    worst = std::max(worst, max_rel_error(xs, f));
  }
  EXPECT_LT(worst, 1e-4) << op;
}

INSTANTIATE_TEST_SUITE_P(Ops, OpGradient,
                         ::testing::Values("matmul", "transpose", "add_broadcast", "sub_mul", "scale_rows", "gelu",
                                           "softmax", "causal_softmax", "layer_norm", "embedding", "gather_scatter",
                                           "slices_concat", "means", "cross_entropy"));

// ---- optimiser and schedule ------------------------------------------------------

TEST(AdamW, FirstStepMovesByLr) {
  ParameterSet ps;
  ps.add("w", tensor_of(Matrix::Constant(1, 3, 1.0)));
  ps.at("w").grad() = (Matrix(1, 3) << 0.5, -2.0, 0.0).finished();
  AdamW opt;
  opt.step(ps, 0.1);
  // bias-corrected m/sqrt(v) is sign(g) on the first step
  EXPECT_NEAR(ps.at("w").values()(0, 0), 0.9, 1e-6);
  EXPECT_NEAR(ps.at("w").values()(0, 1), 1.1, 1e-6);
  EXPECT_EQ(ps.at("w").values()(0, 2), 1.0);
}

TEST(AdamW, FrozenEntriesUntouched) {
  ParameterSet ps;
  ps.add("w", tensor_of(Matrix::Ones(2, 2)), false);
  ps.at("w").grad() = Matrix::Ones(2, 2);
  AdamW opt;
  opt.step(ps, 1.0);
  EXPECT_EQ(ps.at("w").values(), Matrix::Ones(2, 2));
  EXPECT_TRUE(opt.state().empty());
}

TEST(Schedule, WarmupThenCosineToZero) {
  CosineSchedule s(1e-3, 100, 0.03);
  EXPECT_EQ(s.warmup_steps(), 3);
  EXPECT_NEAR(s.lr(0), 1e-3 / 3, 1e-18);
  EXPECT_NEAR(s.lr(2), 1e-3, 1e-18);
  EXPECT_NEAR(s.lr(99), 0.0, 1e-18);
  for (long i = 3; i < 99; ++i) EXPECT_GE(s.lr(i), s.lr(i + 1));
}

TEST(Clip, ScalesToMaxNorm) {
  ParameterSet ps;
  ps.add("a", tensor_of(Matrix::Zero(1, 2)));
  ps.at("a").grad() = (Matrix(1, 2) << 3, 4).finished();
  EXPECT_DOUBLE_EQ(clip_grad_norm(ps, 1.0), 5.0);
  EXPECT_NEAR(ps.at("a").grad().norm(), 1.0, 1e-15);
}

TEST(ParamIo, RoundTripIsBitExact) {
  std::mt19937_64 rng(8);
  ParameterSet ps;
  ps.add("b.x", Tensor({2, 3, 2}, random_matrix(rng, 6, 2)));
  ps.add("a.y", tensor_of(random_matrix(rng, 1, 5)), false);
  const auto path = std::filesystem::temp_directory_path() / "granmoe_param_io.json";
  write_param_file(path, ps, {{"note", "t"}});
  const auto back = read_param_file(path);
  ASSERT_EQ(back.params.names(), ps.names());
  for (const auto& n : ps.names()) {
    EXPECT_EQ(back.params.at(n).shape(), ps.at(n).shape());
    EXPECT_EQ(back.params.at(n).values(), ps.at(n).values());
    EXPECT_EQ(back.params.entry(n).trainable, ps.entry(n).trainable);
  }
  EXPECT_EQ(back.meta["note"], "t");
}

TEST(Tensor, ShapeMismatchThrows) { EXPECT_THROW(Tensor({2, 2}, Matrix::Zero(1, 3)), DimensionError); }
