#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>

#include "bss/ops.hpp"
#include "bss/parallel.hpp"
#include "bss/rng.hpp"
#include "bss/tensor.hpp"
#include "bss/tensor_io.hpp"

using namespace bss;

namespace {

Tensor random_tensor(Rng& rng, Shape4 d, double scale = 1.0) {
  Tensor t(d);
  for (std::int64_t i = 0; i < t.size(); ++i) {
    t[static_cast<std::size_t>(i)] = static_cast<float>(scale * rng.normal());
  }
  return t;
}

}  // namespace

TEST_CASE("tensor construction enforces dims and length") {
  CHECK_THROWS_AS(Tensor(0, 1, 1, 1), ShapeError);
  CHECK_THROWS_AS(Tensor(Shape4{1, 1, 2, 2}, std::vector<float>{1.f, 2.f}), ShapeError);
  Tensor t(2, 3, 4, 5);
  CHECK(t.size() == 120);
  t.at(1, 2, 3, 4) = 7.f;
  CHECK(t[t.index(1, 2, 3, 4)] == 7.f);
}

TEST_CASE("global_avg_pool") {
  SECTION("constant plane") {
    Tensor t(2, 3, 4, 5, 5.0f);
    const Tensor g = global_avg_pool(t);
    REQUIRE(g.dims() == Shape4{2, 3, 1, 1});
    for (std::int64_t i = 0; i < g.size(); ++i) CHECK(g[static_cast<std::size_t>(i)] == 5.0f);
  }
  SECTION("2x2 plane [1,2,3,4] -> 2.5") {
    Tensor t(Shape4{1, 1, 2, 2}, {1.f, 2.f, 3.f, 4.f});
    CHECK(global_avg_pool(t).at(0, 0, 0, 0) == 2.5f);
  }
  SECTION("zeros") {
    Tensor t(1, 2, 3, 3);
    const Tensor g = global_avg_pool(t);
    for (std::int64_t i = 0; i < g.size(); ++i) CHECK(g[static_cast<std::size_t>(i)] == 0.0f);
  }
  SECTION("linearity") {
    Rng rng(1);
    const Shape4 d{1, 2, 4, 4};
    const Tensor x = random_tensor(rng, d), y = random_tensor(rng, d);
    Tensor mix(d);
    for (std::int64_t i = 0; i < mix.size(); ++i) {
      mix[static_cast<std::size_t>(i)] =
          2.0f * x[static_cast<std::size_t>(i)] - 3.0f * y[static_cast<std::size_t>(i)];
    }
    const Tensor gm = global_avg_pool(mix), gx = global_avg_pool(x), gy = global_avg_pool(y);
    for (std::int64_t i = 0; i < gm.size(); ++i) {
      CHECK_THAT(gm[static_cast<std::size_t>(i)],
                 Catch::Matchers::WithinAbs(2.0 * gx[static_cast<std::size_t>(i)] -
                                                3.0 * gy[static_cast<std::size_t>(i)],
                                            1e-6));
    }
  }
}

TEST_CASE("group_norm") {
  SECTION("constant input is all zero") {
    Tensor t(1, 4, 3, 3, 42.0f);
    const Tensor z = group_norm(t, 2, 1e-5);
    for (std::int64_t i = 0; i < z.size(); ++i) CHECK(z[static_cast<std::size_t>(i)] == 0.0f);
  }
  SECTION("two values, direct evaluation") {
    Tensor t(Shape4{1, 1, 1, 2}, {1.f, 3.f});
    const Tensor z = group_norm(t, 1, 1e-5);
    CHECK_THAT(z.at(0, 0, 0, 0), Catch::Matchers::WithinAbs(-0.999995, 1e-6));
    CHECK_THAT(z.at(0, 0, 0, 1), Catch::Matchers::WithinAbs(0.999995, 1e-6));
  }
  SECTION("zero-mean unit-variance group is a fixed point as delta -> 0") {
    // 4 values with mean 0, biased variance 1
    Tensor t(Shape4{1, 1, 2, 2}, {-1.f, 1.f, -1.f, 1.f});
    const Tensor z = group_norm(t, 1, 1e-12);
    for (std::int64_t i = 0; i < z.size(); ++i) {
      CHECK_THAT(z[static_cast<std::size_t>(i)],
                 Catch::Matchers::WithinAbs(t[static_cast<std::size_t>(i)], 1e-6));
    }
  }
  SECTION("groups must divide C") {
    Tensor t(1, 3, 2, 2);
    CHECK_THROWS_AS(group_norm(t, 2, 1e-5), ConfigError);
  }
  SECTION("per-group moments on random input") {
    Rng rng(7);
    const Tensor t = random_tensor(rng, Shape4{2, 6, 4, 4}, 2.5);
    const double delta = 1e-5;
    const Tensor z = group_norm(t, 3, delta);
    for (int n = 0; n < 2; ++n) {
      for (int g = 0; g < 3; ++g) {
        double mean = 0, var = 0, in_mean = 0, in_var = 0;
        const float* zp = z.plane_ptr(n, g * 2);
        const float* xp = t.plane_ptr(n, g * 2);
        const int m = 2 * 16;
        for (int i = 0; i < m; ++i) in_mean += xp[i];
        in_mean /= m;
        for (int i = 0; i < m; ++i) in_var += (xp[i] - in_mean) * (xp[i] - in_mean);
        in_var /= m;
        for (int i = 0; i < m; ++i) mean += zp[i];
        mean /= m;
        for (int i = 0; i < m; ++i) var += (zp[i] - mean) * (zp[i] - mean);
        var /= m;
        CHECK(std::abs(mean) <= 1e-6);
        CHECK_THAT(var, Catch::Matchers::WithinAbs(in_var / (in_var + delta), 1e-4));
      }
    }
  }
}

TEST_CASE("channel_shuffle") {
  SECTION("C=6 groups=2 reorders to [0,3,1,4,2,5]") {
    const auto perm = shuffle_permutation(6, 2);
    CHECK(perm == std::vector<int>{0, 3, 1, 4, 2, 5});
  }
  SECTION("groups=1 is the identity") {
    Rng rng(2);
    const Tensor t = random_tensor(rng, Shape4{1, 5, 3, 3});
    CHECK(channel_shuffle(t, 1) == t);
  }
  SECTION("C=4 groups=2 and its inverse") {
    const auto perm = shuffle_permutation(4, 2);
    CHECK(perm == std::vector<int>{0, 2, 1, 3});
    Rng rng(3);
    const Tensor t = random_tensor(rng, Shape4{2, 4, 2, 2});
    CHECK(channel_shuffle(channel_shuffle(t, 2), 4 / 2) == t);
  }
  SECTION("channel multiset preserved, inverse restores any tensor") {
    Rng rng(4);
    const Tensor t = random_tensor(rng, Shape4{1, 12, 2, 3});
    for (int g : {2, 3, 4, 6}) {
      const Tensor s = channel_shuffle(t, g);
      std::vector<float> a = t.raw(), b = s.raw();
      std::sort(a.begin(), a.end());
      std::sort(b.begin(), b.end());
      CHECK(a == b);
      CHECK(channel_shuffle(s, 12 / g) == t);
    }
  }
  SECTION("groups must divide C") {
    Tensor t(1, 5, 2, 2);
    CHECK_THROWS_AS(channel_shuffle(t, 2), ConfigError);
  }
}

TEST_CASE("resample") {
  SECTION("up2 replicates") {
    Tensor t(Shape4{1, 1, 1, 1}, {7.f});
    const Tensor u = resample(t, Resample::up2);
    REQUIRE(u.dims() == Shape4{1, 1, 2, 2});
    for (std::int64_t i = 0; i < u.size(); ++i) CHECK(u[static_cast<std::size_t>(i)] == 7.f);
  }
  SECTION("down2 takes the max") {
    Tensor t(Shape4{1, 1, 2, 2}, {1.f, 2.f, 3.f, 4.f});
    const Tensor d = resample(t, Resample::down2);
    REQUIRE(d.dims() == Shape4{1, 1, 1, 1});
    CHECK(d.at(0, 0, 0, 0) == 4.f);
  }
  SECTION("down2 of up2 is the identity") {
    Rng rng(5);
    const Tensor t = random_tensor(rng, Shape4{2, 3, 5, 7});
    CHECK(resample(resample(t, Resample::up2), Resample::down2) == t);
  }
  SECTION("down2 rejects odd dims") {
    Tensor t(1, 1, 3, 4);
    CHECK_THROWS_AS(resample(t, Resample::down2), ShapeError);
  }
}

TEST_CASE("pointwise_conv") {
  Rng rng(6);
  const Tensor x = random_tensor(rng, Shape4{1, 2, 3, 3});
  SECTION("identity weight, zero bias") {
    CHECK(pointwise_conv(x, ConvSpec<float>::identity(2)) == x);
  }
  SECTION("2x identity scales") {
    ConvSpec<float> s = ConvSpec<float>::identity(2);
    for (auto& w : s.weight) w *= 2.0f;
    const Tensor y = pointwise_conv(x, s);
    for (std::int64_t i = 0; i < x.size(); ++i) {
      CHECK(y[static_cast<std::size_t>(i)] == 2.0f * x[static_cast<std::size_t>(i)]);
    }
  }
  SECTION("channel sum 3+4=7") {
    Tensor t(Shape4{1, 2, 1, 1}, {3.f, 4.f});
    ConvSpec<float> s;
    s.out_channels = 1;
    s.in_channels = 2;
    s.weight = {1.f, 1.f};
    s.bias = {0.f};
    CHECK(pointwise_conv(t, s).at(0, 0, 0, 0) == 7.f);
  }
  SECTION("dimension mismatch") {
    ConvSpec<float> s = ConvSpec<float>::identity(3);
    CHECK_THROWS_AS(pointwise_conv(x, s), ShapeError);
  }
}

TEST_CASE("sigmoid and silu maps") {
  Tensor t(Shape4{1, 1, 1, 3}, {0.f, 0.5f, -0.5f});
  const Tensor s = sigmoid_map(t);
  CHECK(s.at(0, 0, 0, 0) == 0.5f);
  CHECK_THAT(s.at(0, 0, 0, 1), Catch::Matchers::WithinAbs(0.622459, 1e-6));
  const Tensor z = silu_map(t);
  CHECK(z.at(0, 0, 0, 0) == 0.0f);
  CHECK_THAT(z.at(0, 0, 0, 1), Catch::Matchers::WithinAbs(0.5 * 0.622459, 1e-6));
}

TEST_CASE("BST1 round-trip is byte-exact") {
  Rng rng(8);
  for (int trial = 0; trial < 50; ++trial) {
    const Shape4 d{static_cast<int>(rng.uniform_int(1, 3)),
                   static_cast<int>(rng.uniform_int(1, 5)),
                   static_cast<int>(rng.uniform_int(1, 6)),
                   static_cast<int>(rng.uniform_int(1, 6))};
    const Tensor t = random_tensor(rng, d, 100.0);
    const auto bytes = bst_serialize(to_bst(t));
    const Tensor back = tensor_from_bst(bst_deserialize(bytes));
    REQUIRE(back == t);
    REQUIRE(bst_serialize(to_bst(back)) == bytes);
  }
}

TEST_CASE("BST1 header layout") {
  Tensor t(Shape4{1, 1, 1, 2}, {1.0f, -2.0f});
  const auto bytes = bst_serialize(to_bst(t));
  REQUIRE(bytes.size() == 8 + 4 * 4 + 4 * 2);
  CHECK(bytes[0] == 'B');
  CHECK(bytes[1] == 'S');
  CHECK(bytes[2] == 'T');
  CHECK(bytes[3] == '1');
  CHECK(bytes[4] == 1);  // version
  CHECK(bytes[5] == 1);  // f32
  CHECK(bytes[6] == 4);  // rank
  CHECK(bytes[7] == 0);  // pad
  CHECK(bytes[8] == 1);  // dim 0, little-endian
  CHECK(bytes[12] == 1);
  CHECK(bytes[16] == 1);
  CHECK(bytes[20] == 2);
}

TEST_CASE("BST1 rejects malformed buffers") {
  Tensor t(1, 1, 1, 1, 3.f);
  auto bytes = bst_serialize(to_bst(t));
  SECTION("bad magic") {
    bytes[0] = 'X';
    CHECK_THROWS_AS(bst_deserialize(bytes), ParseError);
  }
  SECTION("bad version") {
    bytes[4] = 9;
    CHECK_THROWS_AS(bst_deserialize(bytes), ParseError);
  }
  SECTION("truncated payload") {
    bytes.pop_back();
    CHECK_THROWS_AS(bst_deserialize(bytes), ParseError);
  }
}

TEST_CASE("JSON tensor form") {
  const auto j = nlohmann::json::parse(R"({"dims":[1,1,2,2],"data":[1,2,3,4]})");
  const Tensor t = tensor_from_json(j, "inline");
  CHECK(t.at(0, 0, 1, 1) == 4.f);
  const auto round = tensor_to_json(t);
  CHECK(tensor_from_json(round, "round") == t);
  CHECK_THROWS_AS(tensor_from_json(nlohmann::json::parse(R"({"dims":[1,1,2,2],"data":[1]})"),
                                   "short"),
                  ParseError);
}

TEST_CASE("operators are deterministic across thread counts") {
  Rng rng(9);
  const Tensor t = random_tensor(rng, Shape4{2, 8, 8, 8});
  set_thread_count(1);
  const Tensor a = group_norm(t, 4, 1e-5);
  const Tensor b = global_avg_pool(t);
  set_thread_count(8);
  CHECK(group_norm(t, 4, 1e-5) == a);
  CHECK(global_avg_pool(t) == b);
  set_thread_count(0);
}
