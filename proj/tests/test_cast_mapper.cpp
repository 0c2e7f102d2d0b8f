// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <vector>

#include "doctest.h"
#include "testing.hpp"

#include "cast/cast_mapper.hpp"
#include "cast/error.hpp"
#include "cast/lora.hpp"

using namespace cast;
using cast::testing::matrix;
using cast::testing::random_tensor;

namespace {

LoraAdapter frozen_adapter(std::size_t d_in, std::size_t d_out, std::size_t rank, Rng& rng) {
  LoraAdapter ad(random_tensor({rank, d_in}, rng), random_tensor({d_out, rank}, rng), 2.0 * static_cast<double>(rank));
  ad.freeze();
  return ad;
}

Tensor identity(std::size_t n) {
  Tensor t = Tensor::zeros({n, n});
  for (std::size_t i = 0; i < n; ++i) t.mutable_values()[i * n + i] = 1.0;
  return t;
}

TokenBatch random_tokens(std::size_t batch, std::size_t seq, int vocab, Rng& rng) {
  TokenBatch b{batch, seq, {}};
  for (std::size_t i = 0; i < batch * seq; ++i) b.ids.push_back(static_cast<int>(rng.index(vocab)));
  return b;
}

}  // namespace

TEST_CASE("cast_forward examples") {
  Rng rng(1);
  SUBCASE("identity projectors collapse to lora_delta") {
    const LoraAdapter k = frozen_adapter(5, 5, 2, rng);
    const CastLayer layer(identity(5), identity(5), k);
    const Tensor x = random_tensor({4, 5}, rng);
    CHECK(bit_equal(cast_forward(layer, x), lora_delta(k, x)));
    const Tensor at_zero = cast_forward(layer, Tensor::zeros({2, 5}));
    for (double v : at_zero.values()) CHECK(v == 0.0);
  }
  SUBCASE("hand composition, d_T = 3 and d_S = 2") {
    LoraAdapter k(matrix(1, 2, {1, 0}), matrix(2, 1, {2, 0}), 2.0);
    k.freeze();
    const CastLayer layer(matrix(2, 3, {1, 0, 0, 0, 1, 0}), matrix(3, 2, {1, 0, 0, 1, 0, 0}), k);
    const Tensor y = cast_forward(layer, matrix(1, 3, {3, 4, 5}));
    // x'_S = [3, 4]; A x'_S = 3; scale 2 · B · 3 = [12, 0]; padded to [12, 0, 0].
    CHECK(y.shape() == Shape{1, 3});
    CHECK(y.values()[0] == 12.0);
    CHECK(y.values()[1] == 0.0);
    CHECK(y.values()[2] == 0.0);
    CHECK(bit_equal(lora_delta(k, matrix(1, 2, {3, 4})), matrix(1, 2, {12, 0})));
  }
}

TEST_CASE("cast layer contracts") {
  Rng rng(2);
  LoraAdapter open(random_tensor({2, 4}, rng), random_tensor({3, 2}, rng), 4.0);
  CHECK_THROWS_AS(CastLayer(random_tensor({4, 6}, rng), random_tensor({6, 3}, rng), open), ContractError);
  open.freeze();
  CHECK_THROWS_AS(CastLayer(random_tensor({5, 6}, rng), random_tensor({6, 3}, rng), open), ShapeError);
  CHECK_THROWS_AS(CastLayer(random_tensor({4, 6}, rng), random_tensor({6, 2}, rng), open), ShapeError);
  const CastLayer ok(random_tensor({4, 6}, rng), random_tensor({7, 3}, rng), open);
  CHECK(ok.target_in() == 6);
  CHECK(ok.target_out() == 7);
  CHECK_THROWS_AS(cast_forward(ok, random_tensor({2, 5}, rng)), ShapeError);
}

TEST_CASE("cast_forward is linear and only the projectors get gradients") {
  Rng rng(3);
  for (int trial = 0; trial < 30; ++trial) {
    const LoraAdapter k = frozen_adapter(3, 4, 2, rng);
    const CastLayer layer(random_tensor({3, 5}, rng, true), random_tensor({6, 4}, rng, true), k);
    const Tensor x = random_tensor({2, 5}, rng);
    const Tensor y = random_tensor({2, 5}, rng);
    const double a = rng.normal(0, 1), b = rng.normal(0, 1);
    const Tensor lhs = cast_forward(layer, add(scale(x, a), scale(y, b)));
    const Tensor rhs = add(scale(cast_forward(layer, x), a), scale(cast_forward(layer, y), b));
    CHECK(testing::max_abs_diff(lhs, rhs) < 1e-9);
  }
  const LoraAdapter k = frozen_adapter(3, 4, 2, rng);
  Tensor p_in = random_tensor({3, 5}, rng, true);
  Tensor p_out = random_tensor({6, 4}, rng, true);
  const CastLayer layer(p_in, p_out, k);
  Tape tape;
  TapeScope scope(tape);
  backward_pass(sum(cast_forward(layer, random_tensor({2, 5}, rng))), tape);
  CHECK(p_in.has_grad());
  CHECK(p_out.has_grad());
  CHECK_FALSE(k.a_matrix().has_grad());
  CHECK_FALSE(k.b_matrix().has_grad());
}

TEST_CASE("projector initialization") {
  Rng rng(4);
  const auto [to_s, from_s] = init_projectors(4, 4, 0.0, 1);
  CHECK(bit_equal(to_s, identity(4)));
  CHECK(bit_equal(from_s, identity(4)));

  const auto [narrow, wide] = init_projectors(3, 2, 0.0, 1);
  CHECK(bit_equal(narrow, matrix(2, 3, {1, 0, 0, 0, 1, 0})));
  CHECK(bit_equal(wide, matrix(3, 2, {1, 0, 0, 1, 0, 0})));

  const Tensor noisy = identity_padded(101, 101, 0.01, rng);
  double sum2 = 0.0, sum1 = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < 101; ++i) {
    for (std::size_t j = 0; j < 101; ++j) {
      if (i == j) continue;
      const double v = noisy.at(i, j);
      sum1 += v;
      sum2 += v * v;
      ++n;
    }
  }
  REQUIRE(n >= 10000);
  const double mean = sum1 / static_cast<double>(n);
  const double sd = std::sqrt(sum2 / static_cast<double>(n) - mean * mean);
  CHECK(sd >= 0.005);
  CHECK(sd <= 0.02);

  const auto again = init_projectors(7, 5, 0.1, 9);
  CHECK(bit_equal(again.first, init_projectors(7, 5, 0.1, 9).first));
}

TEST_CASE("layer_correspondence") {
  CHECK(layer_correspondence(3, 3) == std::vector<int>{0, 1, 2});
  CHECK(layer_correspondence(2, 4) == std::vector<int>{0, 0, 1, 1});
  CHECK(layer_correspondence(4, 2) == std::vector<int>{0, 2});
  for (int s = 1; s <= 6; ++s) {
    for (int t = 1; t <= 6; ++t) {
      const auto c = layer_correspondence(s, t);
      REQUIRE(c.size() == static_cast<std::size_t>(t));
      CHECK(c.front() == 0);
      for (std::size_t i = 1; i < c.size(); ++i) CHECK(c[i] >= c[i - 1]);
      for (int v : c) CHECK(v < s);
    }
  }
}

TEST_CASE("attach_cast on a model") {
  Rng rng(5);
  const ModelConfig sc{16, 8, 2, 2, 16, 8, 3};
  const ModelConfig tc{16, 12, 2, 2, 24, 8, 4};
  TransformerModel source = init_model(sc);
  TransformerModel target = init_model(tc);
  std::vector<LoraAttachment> adapters;
  for (int l = 0; l < 2; ++l) {
    const SlotKey slot = source.register_adapter_slot(l, Projection::attn_q);
    target.register_adapter_slot(l, Projection::attn_q);
    adapters.push_back({LoraAdapter(random_tensor({2, 8}, rng), random_tensor({8, 2}, rng), 4.0), slot});
  }
  const CastMapping mapping = build_cast_mapping(source, adapters, target, 0.0, 7);
  CHECK(adapters[0].adapter.frozen());
  CHECK(mapping.layers.size() == 2);
  CHECK(mapping.hidden_projector.matrix.shape() == Shape{8, 12});
  CHECK(mapping.trainable_tensors().size() == 5);
  CHECK(mapping.correspondence == std::vector<int>{0, 1});

  const TokenBatch tokens = random_tokens(2, 5, 16, rng);
  const Tensor base = target.forward(tokens).logits;
  attach_cast(target, mapping);
  CHECK_FALSE(bit_equal(target.forward(tokens).logits, base));
  detach_cast(target, mapping);
  CHECK(bit_equal(target.forward(tokens).logits, base));

  SUBCASE("a zero B kernel leaves the target unchanged") {
    std::vector<LoraAttachment> zero;
    for (const auto& a : adapters) {
      zero.push_back({LoraAdapter(a.adapter.a_matrix(), Tensor::zeros({8, 2}), 4.0), a.slot});
    }
    const CastMapping m0 = build_cast_mapping(source, zero, target, 0.0, 7);
    attach_cast(target, m0);
    CHECK(bit_equal(target.forward(tokens).logits, base));
  }
  SUBCASE("a kernel that no longer matches its checksum is refused") {
    CastMapping tampered = mapping;
    tampered.layers[1].kernel_checksum ^= 1u;
    CHECK_THROWS_AS(attach_cast(target, tampered), IntegrityError);
    CHECK(target.attachment({0, Projection::attn_q}) == nullptr);
  }
  SUBCASE("a layer whose width does not fit the slot is refused") {
    CastMapping wrong = mapping;
    const LoraAdapter& k = wrong.layers[0].layer.kernel();
    wrong.layers[0].layer = CastLayer(random_tensor({8, 10}, rng), random_tensor({12, 8}, rng), k);
    CHECK_THROWS_AS(attach_cast(target, wrong), ShapeError);
    CHECK(target.attachment({1, Projection::attn_q}) == nullptr);
  }
}

TEST_CASE("identical architectures with identity projectors reproduce the source") {
  Rng rng(6);
  const ModelConfig c{16, 8, 2, 2, 16, 8, 5};
  TransformerModel source = init_model(c);
  TransformerModel target = source.clone();
  std::vector<LoraAttachment> adapters;
  for (int l = 0; l < 2; ++l) {
    for (auto p : {Projection::attn_v, Projection::mlp_down}) {
      const SlotKey slot = source.register_adapter_slot(l, p);
      target.register_adapter_slot(l, p);
      const auto [in, out] = source.slot_dims(slot);
      adapters.push_back({LoraAdapter(random_tensor({2, in}, rng), random_tensor({out, 2}, rng), 4.0), slot});
    }
  }
  const CastMapping mapping = build_cast_mapping(source, adapters, target, 0.0, 1);
  attach_lora(source, adapters);
  attach_cast(target, mapping);
  for (int trial = 0; trial < 10; ++trial) {
    const TokenBatch tokens = random_tokens(3, 8, 16, rng);
    CHECK(testing::max_abs_diff(source.forward(tokens).logits, target.forward(tokens).logits) < 1e-9);
  }
}
