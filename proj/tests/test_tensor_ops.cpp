#include <doctest.h>

#include "adsd/ops.hpp"
#include "oracles.hpp"
#include "test_helpers.hpp"

using namespace adsd;
using ops::ConvSpec;
using oracle::rand_tensor;
using testutil::max_abs_diff;
using testutil::near;

TEST_CASE("conv2d 1x1 identity kernel passes the input through") {
  auto x = rand_tensor<double>({1, 1, 4, 4}, 11);
  auto w = Tensor<double>::full({1, 1, 1, 1}, 1.0);
  auto b = Tensor<double>({1});
  auto y = ops::conv2d(x, w, b, ConvSpec::k1(1, 1));
  CHECK(max_abs_diff(x, y) == 0.0);
}

TEST_CASE("conv2d matches the quadruple-loop oracle") {
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    auto x = rand_tensor<double>({1, 2, 5, 5}, seed);
    auto w = rand_tensor<double>({3, 2, 3, 3}, seed + 100);
    auto b = rand_tensor<double>({3}, seed + 200);
    ConvSpec sp = ConvSpec::k3(2, 3);
    auto y = ops::conv2d(x, w, b, sp);
    auto ref = oracle::conv2d_ref(x, w, b, sp);
    CHECK(y.shape() == ref.shape());
    CHECK(max_abs_diff(y, ref) < 1e-12);
  }
}

TEST_CASE("conv2d strided and dilated variants match the oracle") {
  ConvSpec strided{2, 3, 3, 3, 2, 2, 1, 1, 1, 1};
  ConvSpec dilated{2, 3, 3, 3, 1, 1, 2, 2, 2, 2};
  ConvSpec uneven{2, 3, 3, 2, 2, 1, 1, 0, 1, 1};
  for (const auto& sp : {strided, dilated, uneven}) {
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
      auto x = rand_tensor<double>({2, 2, 7, 6}, seed * 3);
      auto w = rand_tensor<double>(
          {(std::size_t)sp.out_channels, 2, (std::size_t)sp.kh, (std::size_t)sp.kw}, seed * 7);
      auto b = rand_tensor<double>({3}, seed * 13);
      auto y = ops::conv2d(x, w, b, sp);
      auto ref = oracle::conv2d_ref(x, w, b, sp);
      CHECK(max_abs_diff(y, ref) < 1e-12);
    }
  }
}

TEST_CASE("conv2d dilation 2 with padding 2 preserves the spatial extent") {
  auto x = rand_tensor<double>({1, 1, 9, 11}, 5);
  auto w = rand_tensor<double>({1, 1, 3, 3}, 6);
  auto b = Tensor<double>({1});
  ConvSpec sp{1, 1, 3, 3, 1, 1, 2, 2, 2, 2};
  auto y = ops::conv2d(x, w, b, sp);
  CHECK(y.dim(2) == 9);
  CHECK(y.dim(3) == 11);
}

TEST_CASE("conv2d rejects bad shapes and degenerate outputs") {
  auto x = rand_tensor<double>({1, 2, 4, 4}, 1);
  auto w = rand_tensor<double>({3, 2, 3, 3}, 2);
  auto b = Tensor<double>({3});
  CHECK_THROWS_AS(ops::conv2d(x, w, b, ConvSpec::k3(3, 3)), DimensionError);
  auto w_bad = rand_tensor<double>({3, 2, 5, 5}, 3);
  CHECK_THROWS_AS(ops::conv2d(x, w_bad, b, ConvSpec::k3(2, 3)), DimensionError);
  // 5x5 kernel without padding on a 4x4 input has no valid output position
  ConvSpec sp{2, 3, 5, 5, 1, 1, 0, 0, 1, 1};
  auto w5 = rand_tensor<double>({3, 2, 5, 5}, 4);
  CHECK_THROWS_AS(ops::conv2d(x, w5, b, sp), ConfigError);
}

TEST_CASE("conv_transpose2d doubles spatial extents with the decoder spec") {
  auto x = rand_tensor<double>({2, 3, 5, 7}, 21);
  auto w = rand_tensor<double>({3, 4, 2, 2}, 22);
  auto b = rand_tensor<double>({4}, 23);
  auto y = ops::conv_transpose2d(x, w, b, ConvSpec::up2(3, 4));
  CHECK(y.shape() == Shape{2, 4, 10, 14});
  auto ref = oracle::conv_transpose2d_ref(x, w, b, ConvSpec::up2(3, 4));
  CHECK(max_abs_diff(y, ref) < 1e-12);
}

TEST_CASE("conv_transpose2d on a 1x1 input reproduces the kernel scaled by the input") {
  auto x = Tensor<double>::full({1, 1, 1, 1}, 2.5);
  auto w = rand_tensor<double>({1, 1, 3, 3}, 31);
  auto b = Tensor<double>({1});
  ConvSpec sp{1, 1, 3, 3, 1, 1, 0, 0, 1, 1};
  auto y = ops::conv_transpose2d(x, w, b, sp);
  REQUIRE(y.shape() == Shape{1, 1, 3, 3});
  for (std::size_t i = 0; i < 9; ++i) CHECK(near(y.data()[i], 2.5 * w.data()[i], 1e-15));
}

TEST_CASE("conv_transpose2d matches the scatter oracle across specs") {
  ConvSpec strided{3, 2, 3, 3, 2, 2, 1, 1, 1, 1};
  ConvSpec padded{3, 2, 4, 4, 2, 2, 1, 1, 1, 1};
  for (const auto& sp : {ConvSpec::up2(3, 2), strided, padded}) {
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
      auto x = rand_tensor<double>({2, 3, 4, 5}, seed * 31);
      auto w = rand_tensor<double>({3, 2, (std::size_t)sp.kh, (std::size_t)sp.kw}, seed * 17);
      auto b = rand_tensor<double>({2}, seed * 7);
      auto y = ops::conv_transpose2d(x, w, b, sp);
      auto ref = oracle::conv_transpose2d_ref(x, w, b, sp);
      CHECK(max_abs_diff(y, ref) < 1e-12);
    }
  }
}

TEST_CASE("conv_transpose2d forward equals the conv2d input gradient (adjoint identity)") {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    ConvSpec sp = ConvSpec::k3(4, 3, 2);  // conv: 4ch -> 3ch, stride 2
    auto x = rand_tensor<double>({1, 4, 8, 8}, seed);
    auto w = rand_tensor<double>({3, 4, 3, 3}, seed + 50);
    auto b = Tensor<double>({3});
    Tensor<double> upstream;
    Tensor<double> dx_from_autodiff;
    {
      x.set_requires_grad(true);
      Tape<double> tape;
      auto y = ops::conv2d(x, w, b, sp);
      upstream = rand_tensor<double>(y.shape(), seed + 99);
      auto loss = ops::sum_all(ops::mul(y, upstream));
      backward(loss);
      dx_from_autodiff = Tensor<double>::from_data(x.shape(), x.grad_vec());
      x.set_requires_grad(false);
      x.zero_grad();
    }
    // Same weight memory, reinterpreted for the transposed op: [Co,Ci,kh,kw]
    // viewed as [Cin=Co, Cout=Ci, kh, kw].
    auto wt = Tensor<double>::from_data({3, 4, 3, 3}, w.vec());
    ConvSpec tsp = sp;
    tsp.in_channels = 3;
    tsp.out_channels = 4;
    auto zero_bias = Tensor<double>({4});
    auto via_transpose = ops::conv_transpose2d(upstream, wt, zero_bias, tsp);
    CHECK(max_abs_diff(dx_from_autodiff, via_transpose) == 0.0);
  }
}

TEST_CASE("batchnorm2d zeroes constant inputs in train mode") {
  auto x = Tensor<double>::full({2, 3, 4, 4}, 7.25);
  auto gamma = Tensor<double>::full({3}, 1.0);
  auto beta = Tensor<double>({3});
  ops::BatchNormState<double> st(3);
  auto y = ops::batchnorm2d(x, gamma, beta, st, ops::Phase::Train);
  for (std::size_t i = 0; i < y.numel(); ++i) CHECK(y.data()[i] == 0.0);
}

TEST_CASE("batchnorm2d matches the per-channel oracle") {
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    auto x = rand_tensor<double>({4, 3, 2, 2}, seed, -2.0, 2.0);
    auto gamma = rand_tensor<double>({3}, seed + 40, 0.5, 1.5);
    auto beta = rand_tensor<double>({3}, seed + 80);
    ops::BatchNormState<double> st(3);
    auto y = ops::batchnorm2d(x, gamma, beta, st, ops::Phase::Train);
    auto ref = oracle::batchnorm_train_ref(x, gamma, beta, 1e-5);
    CHECK(max_abs_diff(y, ref) < 1e-12);
  }
}

TEST_CASE("batchnorm2d with gamma=1 beta=5 shifts a standardized input") {
  // Build an exactly zero-mean input; variance close to 1.
  std::vector<double> vals = {-1.0, 1.0, -1.0, 1.0, -0.5, 0.5, -0.5, 0.5};
  auto x = Tensor<double>::from_data({2, 1, 2, 2}, vals);
  auto gamma = Tensor<double>::full({1}, 1.0);
  auto beta = Tensor<double>::full({1}, 5.0);
  ops::BatchNormState<double> st(1);
  auto y = ops::batchnorm2d(x, gamma, beta, st, ops::Phase::Train);
  // y = (x - 0)/sqrt(var+eps) + 5 with var = mean(x^2)
  double var = 0;
  for (double v : vals) var += v * v;
  var /= vals.size();
  for (std::size_t i = 0; i < y.numel(); ++i)
    CHECK(near(y.data()[i], vals[i] / std::sqrt(var + 1e-5) + 5.0, 1e-12));
}

TEST_CASE("batchnorm2d eval mode uses running statistics") {
  auto gamma = Tensor<double>::full({2}, 1.0);
  auto beta = Tensor<double>({2});
  ops::BatchNormState<double> st(2);
  st.running_mean = {1.0, -1.0};
  st.running_var = {4.0, 0.25};
  auto x = Tensor<double>::full({1, 2, 1, 1}, 3.0);
  auto y = ops::batchnorm2d(x, gamma, beta, st, ops::Phase::Eval);
  CHECK(near(y.data()[0], (3.0 - 1.0) / std::sqrt(4.0 + 1e-5), 1e-9));
  CHECK(near(y.data()[1], (3.0 + 1.0) / std::sqrt(0.25 + 1e-5), 1e-9));
}

TEST_CASE("batchnorm2d rejects channel mismatches") {
  auto x = rand_tensor<double>({1, 3, 2, 2}, 1);
  auto gamma = Tensor<double>::full({2}, 1.0);
  auto beta = Tensor<double>({2});
  ops::BatchNormState<double> st(2);
  CHECK_THROWS_AS(ops::batchnorm2d(x, gamma, beta, st, ops::Phase::Train), DimensionError);
}

TEST_CASE("relu and sigmoid basics") {
  auto x = rand_tensor<double>({2, 3, 4, 4}, 77, -2.0, 2.0);
  auto r = ops::relu(x);
  for (std::size_t i = 0; i < x.numel(); ++i) {
    if (x.data()[i] > 0)
      CHECK(r.data()[i] == x.data()[i]);
    else
      CHECK(r.data()[i] == 0.0);
  }
  auto zero = Tensor<double>({1, 1, 1, 1});
  CHECK(ops::sigmoid(zero).data()[0] == 0.5);
  auto big = Tensor<double>::full({1}, 800.0);
  auto small = Tensor<double>::full({1}, -800.0);
  CHECK(ops::sigmoid(big).all_finite());
  CHECK(ops::sigmoid(small).all_finite());
}

TEST_CASE("add requires identical shapes") {
  auto a = rand_tensor<double>({2, 3, 2, 2}, 1);
  auto b = rand_tensor<double>({2, 3, 2, 2}, 2);
  auto y = ops::add(a, b);
  for (std::size_t i = 0; i < y.numel(); ++i)
    CHECK(y.data()[i] == a.data()[i] + b.data()[i]);
  auto c = rand_tensor<double>({2, 3, 2, 3}, 3);
  CHECK_THROWS_AS(ops::add(a, c), DimensionError);
}

TEST_CASE("mul_channelwise matches the loop oracle and rejects bad broadcasts") {
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    auto x = rand_tensor<double>({2, 4, 3, 3}, seed);
    auto s = rand_tensor<double>({4}, seed + 7);
    auto y = ops::mul_channelwise(x, s);
    auto ref = oracle::mul_channelwise_ref(x, s.vec(), false);
    CHECK(max_abs_diff(y, ref) == 0.0);

    auto sn = rand_tensor<double>({2, 4, 1, 1}, seed + 9);
    auto yn = ops::mul_channelwise(x, sn);
    auto refn = oracle::mul_channelwise_ref(x, sn.vec(), true);
    CHECK(max_abs_diff(yn, refn) == 0.0);
  }
  auto x = rand_tensor<double>({2, 4, 3, 3}, 1);
  CHECK_THROWS_AS(ops::mul_channelwise(x, rand_tensor<double>({3}, 2)), DimensionError);
  CHECK_THROWS_AS(ops::mul_channelwise(x, rand_tensor<double>({2, 4, 3, 3}, 3)), DimensionError);
}

TEST_CASE("mul_pixelwise gates every channel by the shared map") {
  auto x = rand_tensor<double>({2, 3, 4, 4}, 5);
  auto g = rand_tensor<double>({2, 1, 4, 4}, 6);
  auto y = ops::mul_pixelwise(x, g);
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t p = 0; p < 16; ++p)
        CHECK(y.data()[(n * 3 + c) * 16 + p] ==
              x.data()[(n * 3 + c) * 16 + p] * g.data()[n * 16 + p]);
  CHECK_THROWS_AS(ops::mul_pixelwise(x, rand_tensor<double>({2, 3, 4, 4}, 7)), DimensionError);
}

TEST_CASE("global_avg_pool forced values and oracle equivalence") {
  auto ones = Tensor<double>::full({1, 1, 3, 5}, 1.0);
  CHECK(ops::global_avg_pool(ones).data()[0] == 1.0);

  auto quad = Tensor<double>::from_data({1, 1, 2, 2}, {1.0, 2.0, 3.0, 4.0});
  CHECK(ops::global_avg_pool(quad).data()[0] == 2.5);

  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    auto x = rand_tensor<double>({2, 8, 5, 7}, seed);
    auto y = ops::global_avg_pool(x);
    auto ref = oracle::global_avg_pool_ref(x);
    CHECK(max_abs_diff(y, ref) < 1e-12);
  }
}

TEST_CASE("broadcast_spatial replicates and matches shapes") {
  auto x = rand_tensor<double>({2, 3, 1, 1}, 9);
  auto y = ops::broadcast_spatial(x, 4, 5);
  CHECK(y.shape() == Shape{2, 3, 4, 5});
  for (std::size_t nc = 0; nc < 6; ++nc)
    for (std::size_t i = 0; i < 20; ++i) CHECK(y.data()[nc * 20 + i] == x.data()[nc]);
}

TEST_CASE("concat_channels stacks and validates") {
  auto a = rand_tensor<double>({2, 2, 3, 3}, 1);
  auto b = rand_tensor<double>({2, 3, 3, 3}, 2);
  auto y = ops::concat_channels<double>({a, b});
  CHECK(y.shape() == Shape{2, 5, 3, 3});
  CHECK(y.data()[0] == a.data()[0]);
  CHECK(y.data()[2 * 9] == b.data()[0]);  // first channel of b in sample 0
  auto c = rand_tensor<double>({2, 2, 4, 3}, 3);
  CHECK_THROWS_AS(ops::concat_channels<double>({a, c}), DimensionError);
}

TEST_CASE("softmax_cross_entropy equals ln C on uniform logits") {
  for (std::size_t C : {2, 3, 5, 7}) {
    auto logits = Tensor<double>::full({1, C, 2, 2}, 0.37);
    IntTensor labels({1, 2, 2});
    labels.data()[1] = static_cast<std::int32_t>(C - 1);
    auto loss = ops::softmax_cross_entropy(logits, labels, {});
    CHECK(near(loss.data()[0], std::log(static_cast<double>(C)), 1e-12));
  }
}

TEST_CASE("softmax_cross_entropy ignores everything when asked, with zero gradient") {
  auto logits = rand_tensor<double>({1, 3, 2, 2}, 3);
  logits.set_requires_grad(true);
  IntTensor labels({1, 2, 2});
  for (auto& v : labels.vec()) v = ops::kIgnoreIndex;
  Tape<double> tape;
  auto loss = ops::softmax_cross_entropy(logits, labels, {});
  CHECK(loss.data()[0] == 0.0);
  backward(loss);
  if (logits.has_grad())
    for (std::size_t i = 0; i < logits.numel(); ++i) CHECK(logits.grad()[i] == 0.0);
}

TEST_CASE("softmax_cross_entropy matches the per-pixel oracle") {
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    auto logits = rand_tensor<double>({1, 3, 2, 2}, seed, -2.0, 2.0);
    IntTensor labels({1, 2, 2});
    SplitMix64 rng(seed + 1000);
    for (auto& v : labels.vec()) v = static_cast<std::int32_t>(rng.uniform_index(3));
    labels.data()[0] = ops::kIgnoreIndex;  // exercise the ignore path
    std::vector<double> w = {1.0, 0.5, 2.0};
    auto loss = ops::softmax_cross_entropy(logits, labels, w);
    CHECK(near(loss.data()[0], oracle::softmax_cross_entropy_ref(logits, labels, w, 255), 1e-12));
  }
}

TEST_CASE("softmax_cross_entropy rejects out-of-range labels") {
  auto logits = rand_tensor<double>({1, 3, 1, 1}, 1);
  IntTensor labels({1, 1, 1});
  labels.data()[0] = 3;
  CHECK_THROWS_AS(ops::softmax_cross_entropy(logits, labels, {}), DataError);
}

TEST_CASE("argmax_channels breaks ties toward the lowest class") {
  auto logits = Tensor<double>::from_data({1, 3, 1, 2}, {1.0, 5.0, 1.0, 5.0, 0.5, 5.0});
  auto am = ops::argmax_channels(logits);
  CHECK(am.data()[0] == 0);  // tie between classes 0 and 1 at 1.0 vs 1.0? values: c0=1, c1=1, c2=0.5
  CHECK(am.data()[1] == 0);  // all three equal 5.0 -> class 0
}

TEST_CASE("downsample_labels picks the top-left tap") {
  IntTensor labels = IntTensor::from_data({1, 4, 4}, {0, 1, 2, 3,    //
                                                      4, 5, 6, 7,    //
                                                      8, 9, 10, 11,  //
                                                      12, 13, 14, 15});
  auto d = ops::downsample_labels(labels, 2);
  CHECK(d.shape() == Shape{1, 2, 2});
  CHECK(d.data()[0] == 0);
  CHECK(d.data()[1] == 2);
  CHECK(d.data()[2] == 8);
  CHECK(d.data()[3] == 10);
  CHECK_THROWS_AS(ops::downsample_labels(labels, 3), DimensionError);
}

TEST_CASE("forward determinism: identical seeds give bitwise-identical results") {
  auto run = [](std::uint64_t seed) {
    auto x = rand_tensor<float>({2, 3, 8, 8}, seed);
    auto w = rand_tensor<float>({4, 3, 3, 3}, seed + 1);
    auto b = rand_tensor<float>({4}, seed + 2);
    auto y = ops::conv2d(x, w, b, ConvSpec::k3(3, 4));
    auto g = rand_tensor<float>({4}, seed + 3);
    return ops::mul_channelwise(ops::relu(y), g);
  };
  auto a = run(42), b = run(42);
  CHECK(testutil::bitwise_equal(a, b));
}

TEST_CASE("finite inputs never produce NaN or Inf") {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    auto x = rand_tensor<double>({2, 4, 6, 6}, seed, -50.0, 50.0);
    auto w = rand_tensor<double>({4, 4, 3, 3}, seed + 5, -5.0, 5.0);
    auto b = rand_tensor<double>({4}, seed + 6);
    auto y = ops::conv2d(x, w, b, ConvSpec::k3(4, 4));
    CHECK(y.all_finite());
    CHECK(ops::sigmoid(y).all_finite());
    ops::BatchNormState<double> st(4);
    auto gamma = Tensor<double>::full({4}, 1.0);
    auto beta = Tensor<double>({4});
    CHECK(ops::batchnorm2d(y, gamma, beta, st, ops::Phase::Train).all_finite());
    CHECK(ops::global_avg_pool(y).all_finite());
  }
}
