#include <gtest/gtest.h>

#include "support.hpp"

using namespace lmnet;
using lmnet::testing::random_tensor;

TEST(Tensor, ShapeAndIndexing) {
  Tensor<float> t({2, 3, 4});
  EXPECT_EQ(t.size(), 24u);
  EXPECT_EQ(t.rank(), 3u);
  t.at(1, 2, 3) = 5.0f;
  EXPECT_EQ(t[23], 5.0f);
  EXPECT_EQ(t.offset({1, 0, 0}), 12u);
  EXPECT_THROW(t.at(2, 0, 0), ShapeError);
  EXPECT_THROW(t.at(0, 0), ShapeError);
  EXPECT_THROW((Tensor<float>({2, 2}, std::vector<float>{1, 2, 3})), ShapeError);
}

TEST(Tensor, ReshapeKeepsData) {
  std::mt19937_64 rng(1);
  auto t = random_tensor<double>({2, 6}, rng);
  auto r = t.reshape({3, 4});
  EXPECT_EQ(r.vec(), t.vec());
  EXPECT_THROW(t.reshape({5}), ShapeError);
}

TEST(Tensor, MatmulMatchesNaive) {
  std::mt19937_64 rng(2);
  for (auto [m, k, n] : {std::tuple{1, 1, 1}, {3, 5, 7}, {17, 9, 4}, {8, 33, 12}}) {
    auto a = random_tensor<double>({std::size_t(m), std::size_t(k)}, rng);
    auto b = random_tensor<double>({std::size_t(k), std::size_t(n)}, rng);
    auto c = matmul(a, b);
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) {
        double acc = 0;
        for (int p = 0; p < k; ++p) acc += a.at(i, p) * b.at(p, j);
        EXPECT_NEAR(c.at(i, j), acc, 1e-12);
      }
  }
  EXPECT_THROW(matmul(Tensor<double>({2, 3}), Tensor<double>({2, 3})), ShapeError);
}

TEST(Tensor, PermuteRoundTrip) {
  std::mt19937_64 rng(3);
  auto t = random_tensor<float>({2, 3, 4, 5}, rng);
  auto p = permute(t, {2, 0, 3, 1});
  EXPECT_EQ(p.shape(), (Shape{4, 2, 5, 3}));
  EXPECT_EQ(p.at(3, 1, 4, 2), t.at(1, 2, 3, 4));
  auto back = permute(p, {1, 3, 0, 2});
  EXPECT_EQ(back, t);
}

TEST(Tensor, ConcatAndSliceInverse) {
  std::mt19937_64 rng(4);
  auto a = random_tensor<float>({2, 3, 4}, rng);
  auto b = random_tensor<float>({2, 5, 4}, rng);
  auto c = concat(std::vector<Tensor<float>>{a, b}, 1);
  EXPECT_EQ(c.shape(), (Shape{2, 8, 4}));
  EXPECT_EQ(slice(c, 1, 0, 3), a);
  EXPECT_EQ(slice(c, 1, 3, 8), b);
  EXPECT_THROW(concat(std::vector<Tensor<float>>{a, b}, 0), ShapeError);
}

TEST(Tensor, ElementwiseShapeMismatch) {
  EXPECT_THROW(add(Tensor<float>({2}), Tensor<float>({3})), ShapeError);
  auto r = relu(Tensor<float>({3}, std::vector<float>{-1, 0, 2}));
  EXPECT_EQ(r.vec(), (std::vector<float>{0, 0, 2}));
}
