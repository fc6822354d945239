#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstring>
#include <unordered_set>

#include "fusenmt/layers.hpp"

using namespace fusenmt;
using Catch::Approx;

using Td = Tensor<double>;

namespace {

Td random_tensor(Shape s, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Td t(std::move(s), 0.0);
  fill_uniform(t, rng, lo, hi);
  return t;
}

Td reverse_rows(const Td& x) {
  const std::int64_t k = x.shape()[0];
  const std::int64_t d = x.shape()[1];
  std::vector<double> out(x.values().size());
  for (std::int64_t i = 0; i < k; ++i) {
    std::copy(x.values().begin() + i * d, x.values().begin() + (i + 1) * d,
              out.begin() + (k - 1 - i) * d);
  }
  return Td(x.shape(), std::move(out));
}

}  // namespace

TEST_CASE("build_mask: forward K=3 matches Eq. 4 orientation") {
  auto m = build_mask<double>(3, MaskKind::kForward);
  const double inf = kNegInf;
  std::vector<double> expect = {0, inf, inf, 0, 0, inf, 0, 0, 0};
  REQUIRE(m.matrix.values() == expect);
}

TEST_CASE("build_mask: K=1 any kind is a single zero") {
  for (auto kind : {MaskKind::kForward, MaskKind::kBackward, MaskKind::kNone}) {
    auto m = build_mask<double>(1, kind);
    REQUIRE(m.matrix.values() == std::vector<double>{0});
  }
}

TEST_CASE("build_mask: backward is the transpose of forward") {
  auto fwd = build_mask<double>(5, MaskKind::kForward);
  auto bwd = build_mask<double>(5, MaskKind::kBackward);
  for (int c = 0; c < 5; ++c) {
    for (int v = 0; v < 5; ++v) {
      REQUIRE(bwd.matrix.at({c, v}) == fwd.matrix.at({v, c}));
    }
  }
}

TEST_CASE("build_mask: contract errors") {
  REQUIRE_THROWS_AS(build_mask<double>(0, MaskKind::kForward), ContractError);
  REQUIRE_THROWS_AS(build_mask<double>(-2, MaskKind::kNone), ContractError);
}

TEST_CASE("directional attention: first row sees only the first key") {
  Rng rng(21);
  auto q = random_tensor({4, 3}, rng);
  auto k = random_tensor({4, 3}, rng);
  auto v = random_tensor({4, 3}, rng);
  auto mask = build_mask<double>(4, MaskKind::kForward);
  auto out = directional_attention(q, k, v, mask);
  for (int j = 0; j < 3; ++j) {
    REQUIRE(out.at({0, j}) == v.at({0, j}));  // softmax over one key is 1
  }
}

TEST_CASE("directional attention matches dense softmax attention by hand") {
  Td q(Shape{2, 1}, {1, 0});
  Td k(Shape{2, 1}, {1, 0});
  Td v(Shape{2, 1}, {1, 0});
  auto mask = build_mask<double>(2, MaskKind::kNone);
  auto out = directional_attention(q, k, v, mask);
  // row 0: scores [1,0] -> softmax [e/(e+1), 1/(e+1)], context = e/(e+1)
  const double e = std::exp(1.0);
  REQUIRE(out.at({0, 0}) == Approx(e / (e + 1)).margin(1e-12));
  // row 1: scores [0,0] -> [0.5,0.5], context = 0.5
  REQUIRE(out.at({1, 0}) == Approx(0.5).margin(1e-12));
}

TEST_CASE("perturbing a masked value row leaves earlier outputs bit-identical") {
  Rng rng(5);
  auto q = random_tensor({4, 3}, rng);
  auto k = random_tensor({4, 3}, rng);
  auto v = random_tensor({4, 3}, rng);
  auto mask = build_mask<double>(4, MaskKind::kForward);
  auto base = directional_attention(q, k, v, mask);
  auto v2 = Td(v.shape(), v.values());
  for (int j = 0; j < 3; ++j) v2.mutable_values()[3 * 3 + j] += 17.5;  // row 3
  auto out2 = directional_attention(q, k, v2, mask);
  REQUIRE(std::memcmp(base.values().data(), out2.values().data(),
                      3 * 3 * sizeof(double)) == 0);
}

TEST_CASE("multi-head attention: H=1 equals projected single-head") {
  Rng rng(13);
  auto p = AttentionParams<double>::make(6, 1, rng);
  auto x = random_tensor({5, 6}, rng);
  auto mask = build_mask<double>(5, MaskKind::kNone);
  auto mha = multi_head_attention(x, x, p, mask);
  auto direct = matmul(
      directional_attention(matmul(x, p.wq), matmul(x, p.wk), matmul(x, p.wv),
                            &mask.matrix),
      p.wo);
  for (std::size_t i = 0; i < mha.values().size(); ++i) {
    REQUIRE(mha.values()[i] == Approx(direct.values()[i]).margin(1e-12));
  }
}

TEST_CASE("multi-head attention: output shape and zero projection") {
  Rng rng(17);
  auto p = AttentionParams<double>::make(8, 2, rng);
  auto x = random_tensor({3, 8}, rng);
  auto mask = build_mask<double>(3, MaskKind::kNone);
  auto out = multi_head_attention(x, x, p, mask);
  REQUIRE(out.shape() == Shape{3, 8});

  p.wo = Td::zeros({8, 8});
  auto zero_out = multi_head_attention(x, x, p, mask);
  for (double vv : zero_out.values()) REQUIRE(vv == 0.0);
}

TEST_CASE("multi-head attention works batched with broadcast mask") {
  Rng rng(29);
  auto p = AttentionParams<double>::make(8, 2, rng);
  auto x = random_tensor({2, 3, 8}, rng);
  auto mask = build_mask<double>(3, MaskKind::kForward);
  auto out = multi_head_attention(x, x, p, &mask.matrix);
  REQUIRE(out.shape() == Shape{2, 3, 8});
  for (int b = 0; b < 2; ++b) {
    auto xb = reshape(slice(x, 0, b, 1), {3, 8});
    auto single = multi_head_attention(xb, xb, p, &mask.matrix);
    for (int t = 0; t < 3; ++t) {
      for (int j = 0; j < 8; ++j) {
        REQUIRE(out.at({b, t, j}) == Approx(single.at({t, j})).margin(1e-12));
      }
    }
  }
}

TEST_CASE("layer_norm rows have mean 0, variance 1 before affine") {
  Rng rng(31);
  auto x = random_tensor({4, 16}, rng, -3.0, 3.0);
  auto ln = LayerNormParams<double>::make(16);  // gain 1, offset 0
  auto y = layer_norm(x, ln);
  for (int r = 0; r < 4; ++r) {
    double mean = 0, var = 0;
    for (int c = 0; c < 16; ++c) mean += y.at({r, c});
    mean /= 16;
    for (int c = 0; c < 16; ++c) var += (y.at({r, c}) - mean) * (y.at({r, c}) - mean);
    var /= 16;
    REQUIRE(mean == Approx(0.0).margin(1e-5));
    REQUIRE(var == Approx(1.0).margin(1e-5));
  }
}

TEST_CASE("slm_layer preserves shape and is causal under the forward mask") {
  Rng rng(37);
  auto p = SlmLayerParams<double>::make(8, 16, 2, rng);
  auto x = random_tensor({6, 8}, rng);
  auto mask = build_mask<double>(6, MaskKind::kForward);
  auto y = slm_layer(x, p, mask);
  REQUIRE(y.shape() == Shape{6, 8});

  auto x2 = Td(x.shape(), x.values());
  for (int j = 0; j < 8; ++j) x2.mutable_values()[4 * 8 + j] = -x2.values()[4 * 8 + j] + 3.3;
  auto y2 = slm_layer(x2, p, mask);
  REQUIRE(std::memcmp(y.values().data(), y2.values().data(),
                      4 * 8 * sizeof(double)) == 0);
}

TEST_CASE("slm_layer anti-causality under the backward mask") {
  Rng rng(41);
  auto p = SlmLayerParams<double>::make(8, 16, 2, rng);
  auto x = random_tensor({6, 8}, rng);
  auto mask = build_mask<double>(6, MaskKind::kBackward);
  auto y = slm_layer(x, p, mask);
  auto x2 = Td(x.shape(), x.values());
  for (int j = 0; j < 8; ++j) x2.mutable_values()[1 * 8 + j] += 2.0;  // position 1
  auto y2 = slm_layer(x2, p, mask);
  // rows 2..5 unchanged
  REQUIRE(std::memcmp(y.values().data() + 2 * 8, y2.values().data() + 2 * 8,
                      4 * 8 * sizeof(double)) == 0);
}

TEST_CASE("backward-mask layer mirrors the forward-mask layer") {
  Rng rng(43);
  auto p = SlmLayerParams<double>::make(8, 16, 2, rng);
  auto x = random_tensor({5, 8}, rng);
  auto fwd = build_mask<double>(5, MaskKind::kForward);
  auto bwd = build_mask<double>(5, MaskKind::kBackward);
  auto mirrored = reverse_rows(slm_layer(reverse_rows(x), p, bwd));
  auto direct = slm_layer(x, p, fwd);
  for (std::size_t i = 0; i < direct.values().size(); ++i) {
    REQUIRE(direct.values()[i] == Approx(mirrored.values()[i]).margin(1e-10));
  }
}

TEST_CASE("encoder and decoder layers keep shapes") {
  Rng rng(47);
  auto ep = EncoderLayerParams<double>::make(8, 16, 2, rng);
  auto dp = DecoderLayerParams<double>::make(8, 16, 2, rng);
  auto src = random_tensor({2, 5, 8}, rng);
  auto tgt = random_tensor({2, 4, 8}, rng);
  auto enc = encoder_layer<double>(src, ep, nullptr);
  REQUIRE(enc.shape() == Shape{2, 5, 8});
  auto causal = build_mask<double>(4, MaskKind::kForward);
  auto dec = decoder_layer<double>(tgt, enc, dp, &causal.matrix, nullptr);
  REQUIRE(dec.shape() == Shape{2, 4, 8});
}

TEST_CASE("pad mask keeps padded keys out and padded queries alive") {
  auto pm = make_pad_mask<double>({2, 3}, 3, 3, true);
  REQUIRE(pm.shape() == Shape{2, 1, 3, 3});
  REQUIRE(pm.at({0, 0, 0, 2}) == kNegInf);
  REQUIRE(pm.at({0, 0, 1, 2}) == kNegInf);
  REQUIRE(pm.at({0, 0, 2, 2}) == 0.0);  // padded query keeps itself
  for (int q = 0; q < 3; ++q)
    for (int k = 0; k < 3; ++k) REQUIRE(pm.at({1, 0, q, k}) == 0.0);
}

TEST_CASE("positional encoding basics") {
  auto pe = positional_encoding<double>(16, 8);
  for (int i = 0; i < 8; i += 2) {
    REQUIRE(pe.at({0, i}) == 0.0);      // sin(0)
    REQUIRE(pe.at({0, i + 1}) == 1.0);  // cos(0)
  }
  for (double v : pe.values()) {
    REQUIRE(v >= -1.0);
    REQUIRE(v <= 1.0);
  }
  REQUIRE_THROWS_AS(positional_encoding<double>(4, 7), ContractError);
  REQUIRE_THROWS_AS(positional_encoding<double>(0, 8), ContractError);
}

TEST_CASE("positional encoding rows are distinct up to K=10000") {
  const std::int64_t K = 10000, d = 8;
  auto pe = positional_encoding<double>(K, d);
  std::unordered_set<std::uint64_t> seen;
  for (std::int64_t p = 0; p < K; ++p) {
    seen.insert(fnv1a(pe.values().data() + p * d, d * sizeof(double)));
  }
  REQUIRE(seen.size() == static_cast<std::size_t>(K));
}

TEST_CASE("gradients flow through a full layer stack") {
  Rng rng(53);
  auto p = SlmLayerParams<double>::make(6, 12, 2, rng);
  std::vector<Td> params;
  p.register_params("layer", params);
  auto mask = build_mask<double>(4, MaskKind::kForward);
  auto x = random_tensor({4, 6}, rng);
  auto r = random_tensor({4, 6}, rng);  // projection; sum(LN(.)^2) is constant
  double err = finite_diff_check(
      [&](const Td& t) { return sum_all(mul(slm_layer(t, p, mask), r)); },
      x, 1e-5);
  REQUIRE(err < 1e-4);
}
