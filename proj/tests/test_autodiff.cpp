#include <gtest/gtest.h>

#include <functional>

#include "divid/nn.hpp"
#include "divid/ops.hpp"
#include "divid/rng.hpp"

using namespace divid;
using ag::Var;

namespace {

// Central finite differences of a scalar graph function w.r.t. each leaf.
void grad_check(const std::vector<Var>& leaves, const std::function<Var()>& build,
                float eps = 1e-2f, float tol = 5e-2f) {
  Var loss = build();
  ag::backward(loss);
  std::vector<Tensor> grads;
  for (const auto& leaf : leaves) {
    ASSERT_TRUE(leaf->grad.defined());
    grads.push_back(leaf->grad.clone());
  }
  for (size_t li = 0; li < leaves.size(); ++li) {
    const auto& leaf = leaves[li];
    const Tensor& analytic = grads[li];
    for (size_t i = 0; i < leaf->value.size(); ++i) {
      const float orig = leaf->value[i];
      leaf->value[i] = orig + eps;
      const float up = build()->value.item();
      leaf->value[i] = orig - eps;
      const float dn = build()->value.item();
      leaf->value[i] = orig;
      const float fd = (up - dn) / (2.0f * eps);
      const float denom = std::max({std::abs(fd), std::abs(analytic[i]), 2e-2f});
      EXPECT_NEAR(analytic[i], fd, tol * denom) << "leaf element " << i;
    }
  }
}

Var leaf_from(Rng& rng, std::vector<int64_t> shape) {
  return ag::make_leaf(rng.normal_tensor(std::move(shape)), true);
}

}  // namespace

TEST(Autodiff, ElementwiseOps) {
  Rng rng(1);
  for (auto make : {+[](const Var& x) { return ag::relu(x); },
                    +[](const Var& x) { return ag::sigmoid(x); },
                    +[](const Var& x) { return ag::tanh_(x); },
                    +[](const Var& x) { return ag::silu(x); },
                    +[](const Var& x) { return ag::square(x); }}) {
    Var x = leaf_from(rng, {3, 4});
    grad_check({x}, [&] { return ag::mean_all(ag::square(make(x))); });
  }
}

TEST(Autodiff, BinaryOps) {
  Rng rng(2);
  Var a = leaf_from(rng, {2, 5});
  Var b = leaf_from(rng, {2, 5});
  grad_check({a, b}, [&] { return ag::sum_all(ag::mul(ag::add(a, b), ag::sub(a, b))); });
}

TEST(Autodiff, MeanAbs) {
  Rng rng(3);
  Var x = leaf_from(rng, {4, 4});
  grad_check({x}, [&] { return ag::mean_abs(x); });
}

TEST(Autodiff, Matmul) {
  Rng rng(4);
  Var a = leaf_from(rng, {3, 4});
  Var b = leaf_from(rng, {4, 2});
  grad_check({a, b}, [&] { return ag::mean_all(ag::square(ag::matmul(a, b))); });
}

TEST(Autodiff, Bmm) {
  Rng rng(5);
  Var a = leaf_from(rng, {2, 3, 4});
  Var b = leaf_from(rng, {2, 4, 2});
  grad_check({a, b}, [&] { return ag::mean_all(ag::square(ag::bmm(a, b))); });
}

TEST(Autodiff, SoftmaxLast) {
  Rng rng(6);
  Var x = leaf_from(rng, {3, 5});
  Var w = leaf_from(rng, {3, 5});
  grad_check({x}, [&] { return ag::sum_all(ag::mul(ag::softmax_last(x), w)); });
}

TEST(Autodiff, CrossEntropy) {
  Rng rng(7);
  Var x = leaf_from(rng, {4, 3});
  std::vector<int> labels = {0, 2, 1, 2};
  grad_check({x}, [&] { return ag::cross_entropy(x, labels); });
}

TEST(Autodiff, GroupNorm) {
  Rng rng(8);
  Var x = leaf_from(rng, {2, 4, 3, 3});
  Var gamma = leaf_from(rng, {4});
  Var beta = leaf_from(rng, {4});
  Var w = ag::make_const(rng.normal_tensor({2, 4, 3, 3}));
  grad_check({x, gamma, beta},
             [&] { return ag::sum_all(ag::mul(ag::group_norm(x, gamma, beta, 2), w)); });
}

TEST(Autodiff, LayerNorm) {
  Rng rng(9);
  Var x = leaf_from(rng, {3, 6});
  Var gamma = leaf_from(rng, {6});
  Var beta = leaf_from(rng, {6});
  Var w = ag::make_const(rng.normal_tensor({3, 6}));
  grad_check({x, gamma, beta},
             [&] { return ag::sum_all(ag::mul(ag::layer_norm(x, gamma, beta), w)); });
}

TEST(Autodiff, Conv2d) {
  Rng rng(10);
  Var x = leaf_from(rng, {2, 3, 5, 5});
  Var w = leaf_from(rng, {4, 3, 3, 3});
  Var b = leaf_from(rng, {4});
  grad_check({x, w, b}, [&] { return ag::mean_all(ag::square(ag::conv2d(x, w, b, 1, 1))); });
}

TEST(Autodiff, Conv2dStride2) {
  Rng rng(11);
  Var x = leaf_from(rng, {1, 2, 6, 6});
  Var w = leaf_from(rng, {3, 2, 3, 3});
  Var b = leaf_from(rng, {3});
  grad_check({x, w, b}, [&] { return ag::mean_all(ag::square(ag::conv2d(x, w, b, 2, 1))); });
}

TEST(Autodiff, Upsample) {
  Rng rng(12);
  Var x = leaf_from(rng, {1, 2, 3, 3});
  Var w = ag::make_const(rng.normal_tensor({1, 2, 6, 6}));
  grad_check({x}, [&] { return ag::sum_all(ag::mul(ag::upsample_nearest2x(x), w)); });
}

TEST(Autodiff, StructuralOps) {
  Rng rng(13);
  Var a = leaf_from(rng, {2, 3});
  Var b = leaf_from(rng, {2, 3});
  grad_check({a, b}, [&] {
    Var c = ag::concat0({a, b});                       // [4,3]
    Var d = ag::concat_last({a, b});                   // [2,6]
    Var s = ag::slice0(c, 1, 2);                       // [2,3]
    Var t = ag::slice_last(d, 2, 3);                   // [2,3]
    Var p = ag::permute(ag::reshape(a, {3, 2}), {1, 0});
    return ag::sum_all(ag::square(ag::add(ag::add(s, t), p)));
  });
}

TEST(Autodiff, SliceAxis1AndMeanAxis1) {
  Rng rng(14);
  Var x = leaf_from(rng, {2, 4, 3});
  grad_check({x}, [&] {
    Var a = ag::slice_axis1(x, 2);  // [2,1,3]
    Var m = ag::mean_axis1(x);      // [2,3]
    return ag::sum_all(ag::square(ag::add(ag::reshape(a, {2, 3}), m)));
  });
}

TEST(Autodiff, BiasAndFilm) {
  Rng rng(15);
  Var x = leaf_from(rng, {2, 3, 2, 2});
  Var cb = leaf_from(rng, {3});
  Var sc = leaf_from(rng, {2, 3});
  Var sh = leaf_from(rng, {2, 3});
  grad_check({x, cb, sc, sh}, [&] {
    Var y = ag::add_channel_bias(x, cb);
    return ag::mean_all(ag::square(ag::film(y, sc, sh)));
  });
}

TEST(Autodiff, Broadcast0AndMeanSpatial) {
  Rng rng(16);
  Var x = leaf_from(rng, {1, 2, 3});
  Var y = leaf_from(rng, {2, 3, 2, 2});
  grad_check({x, y}, [&] {
    Var b = ag::broadcast0(x, 4);  // [4,2,3]
    Var m = ag::mean_spatial(y);   // [2,3]
    return ag::add(ag::sum_all(ag::square(b)), ag::sum_all(ag::square(m)));
  });
}

TEST(Autodiff, GradAccumulatesAcrossSharedSubgraph) {
  // x used twice: d/dx (x*x + x) = 2x + 1
  Var x = ag::make_leaf(Tensor::scalar(3.0f), true);
  Var loss = ag::add(ag::mul(x, x), x);
  ag::backward(loss);
  EXPECT_FLOAT_EQ(x->grad[0], 7.0f);
}

TEST(Modules, LinearGrad) {
  Rng rng(17);
  nn::ParamStore ps(99);
  nn::Linear lin(ps, "lin", 4, 3);
  Var x = leaf_from(rng, {2, 4});
  std::vector<Var> leaves = {x, ps.get("lin.w"), ps.get("lin.b")};
  grad_check(leaves, [&] {
    ps.zero_grad();
    return ag::mean_all(ag::square(lin(x)));
  });
}

TEST(Modules, AttentionGrad) {
  Rng rng(18);
  nn::ParamStore ps(100);
  nn::MultiHeadAttention mha(ps, "mha", 8, 2);
  Var q = leaf_from(rng, {2, 3, 8});
  Var kv = leaf_from(rng, {2, 2, 8});
  grad_check({q, kv}, [&] {
    ps.zero_grad();
    return ag::mean_all(ag::square(mha(q, kv)));
  });
}

TEST(Modules, BiLSTMGradAndShape) {
  Rng rng(19);
  nn::ParamStore ps(101);
  nn::BiLSTM lstm(ps, "lstm", 5, 4);
  Var x = leaf_from(rng, {2, 3, 5});
  Var y = lstm(x);
  EXPECT_EQ(y->value.shape(), (std::vector<int64_t>{2, 3, 8}));
  grad_check({x}, [&] {
    ps.zero_grad();
    return ag::mean_all(ag::square(lstm(x)));
  });
}

TEST(Modules, AdamReducesQuadratic) {
  nn::ParamStore ps(7);
  Var w = ps.add("w", Tensor::full({4}, 2.0f));
  nn::Adam opt(ps, 0.1f);
  float first = 0.0f, last = 0.0f;
  for (int i = 0; i < 200; ++i) {
    ps.zero_grad();
    Var loss = ag::sum_all(ag::square(w));
    if (i == 0) first = loss->value.item();
    last = loss->value.item();
    ag::backward(loss);
    opt.step();
  }
  EXPECT_LT(last, 0.01f * first);
}
