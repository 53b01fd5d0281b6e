#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "opama/checkpoint.hpp"
#include "opama/error.hpp"
#include "opama/nn.hpp"
#include "opama/tensor.hpp"

using namespace opama;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

std::vector<double> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

}  // namespace

TEST(Matmul, IdentityAndHandComputed) {
  Tensor eye({2, 2}, {1, 0, 0, 1});
  Tensor b({2, 2}, {3, 4, 5, 6});
  EXPECT_EQ(values(matmul(eye, b)), (std::vector<double>{3, 4, 5, 6}));
  Tensor r({1, 2}, {1, 2});
  Tensor c({2, 1}, {3, 4});
  EXPECT_EQ(matmul(r, c).item(), 11.0);
}

TEST(Matmul, GradcheckRandom5x7x3) {
  Rng rng(1);
  Tensor a = random_tensor({5, 7}, rng);
  Tensor b = random_tensor({7, 3}, rng);
  a.set_requires_grad(true);
  b.set_requires_grad(true);
  Tensor w = random_tensor({5, 3}, rng);
  double err = gradcheck_params([&] { return sum_all(mul(matmul(a, b), w)); }, {a, b}, 1e-5);
  EXPECT_LE(err, 1e-6);
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  try {
    matmul(Tensor({2, 3}), Tensor({2, 3}));
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    EXPECT_NE(std::string(e.what()).find("[2,3]"), std::string::npos);
  }
}

TEST(MapUnary, ScalarValues) {
  EXPECT_DOUBLE_EQ(sigmoid(Tensor::scalar(0)).item(), 0.5);
  EXPECT_NEAR(softplus(Tensor::scalar(0)).item(), std::log(2.0), 1e-15);
  EXPECT_DOUBLE_EQ(silu(Tensor::scalar(0)).item(), 0.0);
  EXPECT_DOUBLE_EQ(neg(Tensor::scalar(2)).item(), -2.0);
  EXPECT_DOUBLE_EQ(reciprocal(Tensor::scalar(4)).item(), 0.25);
}

TEST(MapUnary, ReciprocalAtZeroIsDomainError) {
  EXPECT_THROW(reciprocal(Tensor({3}, {1, 0, 2})), DomainError);
}

TEST(MapUnary, SoftplusStableForLargeInputs) {
  Tensor x({2}, {800.0, -800.0});
  auto y = softplus(x);
  EXPECT_DOUBLE_EQ(y[0], 800.0);
  EXPECT_GE(y[1], 0.0);
  EXPECT_TRUE(std::isfinite(y[1]));
}

TEST(CombineBinary, HandComputed) {
  EXPECT_EQ(values(add(Tensor({3}, {1, 2, 3}), Tensor({3}))), (std::vector<double>{1, 2, 3}));
  EXPECT_EQ(values(div(Tensor({2}, {2, 4}), Tensor({2}, {2, 2}))), (std::vector<double>{1, 2}));
}

TEST(CombineBinary, TrailingBroadcastBothOperandsGradcheck) {
  Rng rng(2);
  Tensor a = random_tensor({4, 3}, rng);
  Tensor b = random_tensor({3}, rng, 0.5, 1.5);
  a.set_requires_grad(true);
  b.set_requires_grad(true);
  Tensor w = random_tensor({4, 3}, rng);
  for (auto op : {BinaryOp::add, BinaryOp::sub, BinaryOp::mul, BinaryOp::div}) {
    double e1 = gradcheck_params([&] { return sum_all(mul(combine_binary(a, b, op), w)); }, {a, b});
    double e2 = gradcheck_params([&] { return sum_all(mul(combine_binary(b, a, op), w)); }, {a, b});
    EXPECT_LE(e1, 1e-6);
    EXPECT_LE(e2, 1e-6);
  }
}

TEST(CombineBinary, IncompatibleShapesRejected) {
  EXPECT_THROW(add(Tensor({2, 3}), Tensor({2})), DimensionError);
  EXPECT_THROW(add(Tensor({2, 3}), Tensor({3, 2})), DimensionError);
}

TEST(Reduce, SumMeanAndGradcheck) {
  EXPECT_EQ(sum_all(Tensor({3}, {1, 2, 3})).item(), 6.0);
  EXPECT_EQ(mean_all(Tensor({2, 2}, 7.5)).item(), 7.5);
  Rng rng(3);
  Tensor x = random_tensor({3, 4}, rng);
  Tensor w = random_tensor({3}, rng);
  double err = gradcheck([&](const Tensor& v) { return sum_all(mul(reduce(v, ReduceOp::mean, {1}), w)); }, x);
  EXPECT_LE(err, 1e-6);
  auto r = reduce(Tensor({2, 3}, {1, 2, 3, 4, 5, 6}), ReduceOp::sum, {0});
  EXPECT_EQ(values(r), (std::vector<double>{5, 7, 9}));
  EXPECT_THROW(reduce(x, ReduceOp::sum, {2}), DimensionError);
}

TEST(Backward, SumGivesOnes) {
  Tensor p({2, 3}, 0.3);
  p.set_requires_grad(true);
  Tape tape;
  TapeScope scope(&tape);
  tape.backward(sum_all(p));
  for (double g : p.grad()) EXPECT_EQ(g, 1.0);
}

TEST(Backward, SquareGivesTwiceValue) {
  Rng rng(4);
  Tensor p = random_tensor({5}, rng);
  p.set_requires_grad(true);
  Tape tape;
  TapeScope scope(&tape);
  tape.backward(sum_all(mul(p, p)));
  for (std::size_t i = 0; i < p.size(); ++i) EXPECT_DOUBLE_EQ(p.grad()[i], 2.0 * p[i]);
}

TEST(Backward, FanOutAccumulates) {
  Tensor x({3}, {1, 2, 3});
  x.set_requires_grad(true);
  Tape tape;
  TapeScope scope(&tape);
  tape.backward(add(sum_all(x), sum_all(x)));
  for (double g : x.grad()) EXPECT_EQ(g, 2.0);
}

TEST(Backward, NonScalarRootIsContractError) {
  Tensor x({3}, 1.0);
  x.set_requires_grad(true);
  Tape tape;
  TapeScope scope(&tape);
  Tensor y = scale(x, 2.0);
  EXPECT_THROW(tape.backward(y), ContractError);
  Tape empty;
  EXPECT_THROW(empty.backward(Tensor::scalar(1.0)), ContractError);
}

TEST(Backward, CompositeMlpGradcheck) {
  Rng rng(5);
  Linear l1(6, 8, true, rng), l2(8, 1, true, rng);
  for (auto& v : l1.bias.data()) v = rng.uniform(-0.3, 0.3);
  Tensor x = random_tensor({4, 6}, rng);
  ParamList ps;
  l1.collect(ps, "l1");
  l2.collect(ps, "l2");
  double err = gradcheck_params([&] { return mean_all(mul(l2(silu(l1(x))), l2(silu(l1(x))))); },
                                ps.tensors());
  EXPECT_LE(err, 1e-6);
}

TEST(Gradcheck, LinearAndSigmoid) {
  Rng rng(6);
  Tensor x = random_tensor({6}, rng);
  EXPECT_LE(gradcheck([](const Tensor& v) { return sum_all(v); }, x), 1e-10);
  EXPECT_LE(gradcheck([](const Tensor& v) { return sum_all(sigmoid(v)); }, Tensor({6}, 0.0)), 1e-7);
  EXPECT_THROW(gradcheck([](const Tensor& v) { return scale(v, 1.0); }, x), ContractError);
  EXPECT_THROW(gradcheck([](const Tensor& v) { return sum_all(v); }, x, 0.5), ContractError);
}

// Every registered op passes gradcheck (eps 1e-5, rel-err 1e-4) on 10 seeds.
TEST(Gradcheck, EveryOpTenSeeds) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(100 + seed);
    auto w_for = [&](const Tensor& y) { return random_tensor(y.shape(), rng); };
    std::vector<std::pair<std::string, std::function<double()>>> cases;
    Tensor m1 = random_tensor({3, 4}, rng), m2 = random_tensor({4, 2}, rng);
    Tensor pos = random_tensor({3, 4}, rng, 0.5, 2.0);
    Tensor img = random_tensor({4, 4, 3}, rng);
    Tensor convw = random_tensor({27, 2}, rng), convb = random_tensor({2}, rng);
    Tensor gamma = random_tensor({4}, rng, 0.5, 1.5), beta = random_tensor({4}, rng);
    Tensor normw = random_tensor({4}, rng, 0.5, 1.5);
    Tensor seq = random_tensor({5, 3}, rng), k1 = random_tensor({4, 3}, rng),
           b1 = random_tensor({3}, rng), pre = random_tensor({3, 3}, rng);
    Tensor table = random_tensor({5, 3}, rng);
    Tensor wmm = w_for(Tensor({3, 2}));
    auto check = [&](const std::string& name, const std::function<Tensor()>& f,
                     std::vector<Tensor> ps) {
      for (auto& p : ps) p.set_requires_grad(true);
      const double err = gradcheck_params(f, ps, 1e-5);
      EXPECT_LE(err, 1e-4) << name << " seed " << seed;
    };
    Tensor w34 = random_tensor({3, 4}, rng);
    check("matmul", [&] { return sum_all(mul(matmul(m1, m2), wmm)); }, {m1, m2});
    check("transpose", [&] { return sum_all(mul(transpose(m1), transpose(w34))); }, {m1});
    for (auto op : {UnaryOp::exp, UnaryOp::sigmoid, UnaryOp::softplus, UnaryOp::silu, UnaryOp::neg})
      check("unary", [&] { return sum_all(mul(map_unary(m1, op), w34)); }, {m1});
    check("reciprocal", [&] { return sum_all(mul(reciprocal(pos), w34)); }, {pos});
    check("scale", [&] { return sum_all(mul(scale(m1, 1.7), w34)); }, {m1});
    check("add_scalar", [&] { return sum_all(mul(add_scalar(m1, 0.3), w34)); }, {m1});
    check("reduce", [&] { return sum_all(mul(reduce(m1, ReduceOp::mean, {0}), normw)); }, {m1});
    check("reshape", [&] { return sum_all(mul(reshape(m1, {4, 3}), reshape(w34, {4, 3}))); }, {m1});
    check("concat_rows", [&] { return sum_all(mul(concat_rows({m1, pos}), concat_rows({w34, w34}))); }, {m1, pos});
    check("concat_last", [&] { return sum_all(mul(concat_last({m1, pos}), concat_last({w34, w34}))); }, {m1, pos});
    check("slice_rows", [&] { return sum_all(mul(slice_rows(m1, 1, 3), slice_rows(w34, 0, 2))); }, {m1});
    check("reverse_rows", [&] { return sum_all(mul(reverse_rows(m1), w34)); }, {m1});
    check("embedding", [&] { return sum_all(mul(embedding(table, {0, 3, 3, 1}), slice_rows(concat_rows({seq, seq}), 0, 4))); }, {table});
    check("softmax", [&] { return sum_all(mul(softmax_last(m1), w34)); }, {m1});
    check("rms_norm", [&] { return sum_all(mul(rms_norm(m1, normw), w34)); }, {m1, normw});
    Tensor wimg = random_tensor({4, 4, 4}, rng);
    Tensor img4 = random_tensor({4, 4, 4}, rng);
    check("group_norm", [&] { return sum_all(mul(group_norm(img4, gamma, beta, 2), wimg)); }, {img4, gamma, beta});
    Tensor wconv = random_tensor({4, 4, 2}, rng), wconv2 = random_tensor({2, 2, 2}, rng);
    check("conv2d", [&] { return sum_all(mul(conv2d(img, convw, convb, 3, 1, 1), wconv)); }, {img, convw, convb});
    check("conv2d_s2", [&] { return sum_all(mul(conv2d(img, convw, convb, 3, 2, 1), wconv2)); }, {img, convw, convb});
    Tensor wup = random_tensor({8, 8, 3}, rng);
    check("upsample", [&] { return sum_all(mul(upsample_nearest2(img), wup)); }, {img});
    Tensor wpatch = random_tensor({4, 12}, rng);
    check("patchify", [&] { return sum_all(mul(patchify(img, 2), wpatch)); }, {img});
    Tensor wseq = random_tensor({5, 3}, rng);
    check("causal_conv1d", [&] { return sum_all(mul(causal_conv1d(seq, k1, b1, pre), wseq)); }, {seq, k1, b1, pre});
    check("causal_conv1d_noprefix", [&] { return sum_all(mul(causal_conv1d(seq, k1, b1), wseq)); }, {seq, k1, b1});
  }
}

TEST(Ops, CausalConvIsCausal) {
  Rng rng(7);
  Tensor x = random_tensor({6, 2}, rng), w = random_tensor({4, 2}, rng), b = random_tensor({2}, rng);
  Tensor y1 = causal_conv1d(x, w, b);
  x.data()[4 * 2 + 1] += 1.0;
  Tensor y2 = causal_conv1d(x, w, b);
  for (std::size_t i = 0; i < 4 * 2; ++i) EXPECT_EQ(y1[i], y2[i]);
  EXPECT_NE(y1[4 * 2 + 1], y2[4 * 2 + 1]);
}

TEST(Ops, ConvMatchesDirectSum) {
  Rng rng(8);
  Tensor x = random_tensor({5, 5, 2}, rng), w = random_tensor({18, 3}, rng), b = random_tensor({3}, rng);
  Tensor y = conv2d(x, w, b, 3, 1, 1);
  for (int oy = 0; oy < 5; ++oy)
    for (int ox = 0; ox < 5; ++ox)
      for (int co = 0; co < 3; ++co) {
        double s = b[co];
        for (int ky = 0; ky < 3; ++ky)
          for (int kx = 0; kx < 3; ++kx)
            for (int ci = 0; ci < 2; ++ci) {
              int iy = oy + ky - 1, ix = ox + kx - 1;
              if (iy < 0 || iy >= 5 || ix < 0 || ix >= 5) continue;
              s += x[(iy * 5 + ix) * 2 + ci] * w[((ky * 3 + kx) * 2 + ci) * 3 + co];
            }
        EXPECT_NEAR(y[(oy * 5 + ox) * 3 + co], s, 1e-12);
      }
}

TEST(Checkpoint, SaveLoadSaveIsByteIdentical) {
  Rng rng(9);
  ParamList ps;
  ps.add("vcr.block3.in_proj.weight", random_tensor({4, 5}, rng));
  ps.add("scalar", Tensor::scalar(3.25));
  ps.add("unet.bias", random_tensor({7}, rng));
  std::stringstream first;
  write_checkpoint(first, ps);
  const std::string bytes1 = first.str();
  EXPECT_EQ(bytes1.substr(0, 8), "OPAMA001");
  std::stringstream in(bytes1);
  ParamList loaded = read_checkpoint(in);
  ASSERT_EQ(loaded.size(), 3u);
  EXPECT_EQ(loaded.items()[0].name, "vcr.block3.in_proj.weight");
  std::stringstream second;
  write_checkpoint(second, loaded);
  EXPECT_EQ(bytes1, second.str());
}

TEST(Checkpoint, AssignChecksNamesAndShapes) {
  ParamList target;
  target.add("a", Tensor({2}, 0.0));
  ParamList src;
  src.add("a", Tensor({2}, {1.0, 2.0}));
  EXPECT_EQ(assign_parameters(target, src), 1u);
  EXPECT_EQ(target.items()[0].tensor[1], 2.0);
  ParamList wrong;
  wrong.add("a", Tensor({3}, 0.0));
  EXPECT_THROW(assign_parameters(target, wrong), DimensionError);
  EXPECT_THROW(assign_parameters(target, ParamList()), ContractError);
  std::stringstream bad("NOTMAGIC");
  EXPECT_THROW(read_checkpoint(bad), IoError);
}

TEST(ParamList, DuplicateNamesRejected) {
  ParamList ps;
  ps.add("x", Tensor({1}));
  EXPECT_THROW(ps.add("x", Tensor({1})), ContractError);
}

TEST(AdamW, MinimizesQuadratic) {
  Tensor p({3}, {1.0, -2.0, 0.5});
  p.set_requires_grad(true);
  ParamList ps;
  ps.add("p", p);
  AdamW opt({.lr = 0.05, .weight_decay = 0.0});
  for (int i = 0; i < 500; ++i) {
    ps.zero_grad();
    Tape tape;
    TapeScope scope(&tape);
    tape.backward(sum_all(mul(p, p)));
    opt.step(ps);
  }
  for (double v : p.data()) EXPECT_NEAR(v, 0.0, 1e-2);
  EXPECT_EQ(opt.steps(), 500);
}
