// SPDX-License-Identifier: Apache-2.0
#include <Eigen/Dense>

#include <cmath>
#include <vector>

#include "doctest.h"
#include "testing.hpp"

#include "cast/adam.hpp"
#include "cast/error.hpp"
#include "cast/io.hpp"
#include "cast/lora.hpp"
#include "cast/task.hpp"

using namespace cast;
using cast::testing::matrix;
using cast::testing::random_tensor;

namespace {

LoraAdapter random_adapter(std::size_t d_in, std::size_t d_out, std::size_t rank, Rng& rng) {
  return LoraAdapter(random_tensor({rank, d_in}, rng), random_tensor({d_out, rank}, rng), 2.0 * static_cast<double>(rank));
}

struct TaskFixture {
  TransformerModel model = init_model({20, 16, 2, 2, 32, 8, 21});
  TaskSpec spec{TaskKind::modular_addition, 5, 4, 20, 77};
  std::vector<SlotKey> slots;

  TaskFixture() {
    for (int l = 0; l < 2; ++l) {
      slots.push_back(model.register_adapter_slot(l, Projection::attn_v));
      slots.push_back(model.register_adapter_slot(l, Projection::mlp_down));
    }
  }
};

}  // namespace

TEST_CASE("lora_delta examples") {
  const LoraAdapter hand(matrix(1, 2, {1, 0}), matrix(2, 1, {2, 0}), 2.0);
  CHECK(hand.scaling() == 2.0);
  const Tensor y = lora_delta(hand, matrix(1, 2, {3, 4}));
  CHECK(y.values()[0] == 12.0);
  CHECK(y.values()[1] == 0.0);

  Rng rng(1);
  const LoraAdapter zero_b(random_tensor({2, 5}, rng), Tensor::zeros({3, 2}), 4.0);
  const Tensor from_zero_b = lora_delta(zero_b, random_tensor({4, 5}, rng));
  for (double v : from_zero_b.values()) CHECK(v == 0.0);

  const LoraAdapter any = random_adapter(5, 3, 2, rng);
  const Tensor at_zero = lora_delta(any, Tensor::zeros({2, 5}));
  for (double v : at_zero.values()) CHECK(v == 0.0);

  CHECK_THROWS_AS(lora_delta(any, Tensor::zeros({2, 4})), ShapeError);
}

TEST_CASE("adapter construction checks") {
  Rng rng(2);
  CHECK_THROWS_AS(LoraAdapter(random_tensor({3, 2}, rng), random_tensor({4, 3}, rng), 1.0), ParameterError);
  CHECK_THROWS_AS(LoraAdapter(random_tensor({2, 5}, rng), random_tensor({4, 3}, rng), 1.0), ParameterError);
  CHECK_THROWS_AS(LoraAdapter(random_tensor({2, 5}, rng), random_tensor({4, 2}, rng), 0.0), ParameterError);

  const LoraAdapter fresh = LoraAdapter::init(9, 6, 3, 6.0, rng);
  CHECK(fresh.rank() == 3);
  CHECK(fresh.scaling() == 2.0);
  for (double v : fresh.b_matrix().values()) CHECK(v == 0.0);
  for (double v : fresh.a_matrix().values()) CHECK(std::abs(v) <= 1.0 / 3.0);
}

TEST_CASE("lora_delta is linear") {
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    const LoraAdapter ad = random_adapter(6, 4, 2, rng);
    const Tensor x = random_tensor({3, 6}, rng);
    const Tensor y = random_tensor({3, 6}, rng);
    const double a = rng.normal(0, 2), b = rng.normal(0, 2);
    const Tensor lhs = lora_delta(ad, add(scale(x, a), scale(y, b)));
    const Tensor rhs = add(scale(lora_delta(ad, x), a), scale(lora_delta(ad, y), b));
    CHECK(testing::max_abs_diff(lhs, rhs) < 1e-9);
  }
}

TEST_CASE("implied weight update has rank at most the adapter rank") {
  Rng rng(4);
  for (std::size_t rank = 1; rank <= 3; ++rank) {
    const LoraAdapter ad = random_adapter(7, 6, rank, rng);
    // Recover the dense update column by column through lora_delta.
    Eigen::MatrixXd w(6, 7);
    for (std::size_t j = 0; j < 7; ++j) {
      std::vector<double> e(7, 0.0);
      e[j] = 1.0;
      const Tensor col = lora_delta(ad, Tensor({1, 7}, e));
      for (std::size_t i = 0; i < 6; ++i) w(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = col.values()[i];
    }
    const Eigen::JacobiSVD<Eigen::MatrixXd> svd(w);
    const auto sv = svd.singularValues();
    for (Eigen::Index k = static_cast<Eigen::Index>(rank); k < sv.size(); ++k) CHECK(sv(k) < 1e-9);
    CHECK(sv(static_cast<Eigen::Index>(rank) - 1) > 1e-6);
  }
}

TEST_CASE("freezing") {
  Rng rng(5);
  LoraAdapter ad = random_adapter(4, 4, 2, rng);
  const Tensor x = random_tensor({2, 4}, rng);
  const Tensor before = lora_delta(ad, x);
  const auto sum_before = ad.checksum();
  freeze_adapter(ad);
  CHECK(ad.frozen());
  freeze_adapter(ad);
  CHECK(ad.frozen());
  CHECK(ad.checksum() == sum_before);
  CHECK(bit_equal(lora_delta(ad, x), before));

  std::vector<Tensor> params{ad.a_matrix()};
  AdamState opt;
  CHECK_THROWS_AS(adam_step(params, opt), ContractError);
  CHECK_THROWS_AS(ad.set_trainable(true), ContractError);

  // A copy shares the frozen tensors.
  LoraAdapter copy = ad;
  CHECK(copy.frozen());
}

TEST_CASE("train_lora") {
  TaskFixture f;
  const auto base_sum = model_checksum(f.model);

  SUBCASE("zero steps leave the adapters unchanged") {
    auto adapters = init_adapters(f.model, f.slots, 2, 4.0, 9);
    std::vector<std::uint32_t> sums;
    for (const auto& a : adapters) sums.push_back(a.adapter.checksum());
    auto stream = task_training_stream(f.spec, 0);
    AdamState opt = AdamState::with_learning_rate(1e-2);
    CHECK(train_lora(f.model, adapters, stream, 0, opt).empty());
    for (std::size_t i = 0; i < adapters.size(); ++i) CHECK(adapters[i].adapter.checksum() == sums[i]);
  }
  SUBCASE("base parameters stay bit-identical and the loss falls") {
    auto adapters = init_adapters(f.model, f.slots, 2, 4.0, 9);
    auto stream = task_training_stream(f.spec, 0);
    AdamState opt = AdamState::with_learning_rate(1e-2);
    LoraTrainOptions options;
    options.batch_size = 32;
    const auto trace = train_lora(f.model, adapters, stream, 500, opt, options);
    REQUIRE(trace.size() == 500);
    CHECK(model_checksum(f.model) == base_sum);
    double head = 0.0, tail = 0.0;
    for (std::size_t i = 0; i < 25; ++i) {
      head += trace[i];
      tail += trace[trace.size() - 1 - i];
    }
    CHECK(tail < head);
    CHECK(f.model.registered_slots().size() == 4);
    for (const auto& s : f.slots) CHECK(f.model.attachment(s) == nullptr);
  }
  SUBCASE("dropout runs are seeded") {
    LoraTrainOptions options;
    options.batch_size = 16;
    options.dropout = 0.2;
    options.seed = 3;
    auto run = [&] {
      auto adapters = init_adapters(f.model, f.slots, 2, 4.0, 9);
      auto stream = task_training_stream(f.spec, 0);
      AdamState opt = AdamState::with_learning_rate(1e-2);
      return train_lora(f.model, adapters, stream, 20, opt, options);
    };
    CHECK(run() == run());
  }
  SUBCASE("frozen adapters and trainable bases are rejected") {
    auto adapters = init_adapters(f.model, f.slots, 2, 4.0, 9);
    auto stream = task_training_stream(f.spec, 0);
    AdamState opt;
    f.model.set_trainable(true);
    CHECK_THROWS_AS(train_lora(f.model, adapters, stream, 1, opt), ContractError);
    f.model.set_trainable(false);
    freeze_adapter(adapters[0].adapter);
    CHECK_THROWS_AS(train_lora(f.model, adapters, stream, 1, opt), ContractError);
  }
}

TEST_CASE("adapter files round-trip and reject damage") {
  Rng rng(6);
  AdapterSet set;
  set.model_digest = "0badf00d";
  for (int l = 0; l < 2; ++l) {
    LoraAdapter ad = random_adapter(8, 12, 3, rng);
    Tensor a = ad.a_matrix();
    Tensor b = ad.b_matrix();
    quantize_to_storage(a);
    quantize_to_storage(b);
    set.adapters.push_back({LoraAdapter(a, b, 6.0), {l, Projection::mlp_up}});
  }
  freeze_adapter(set.adapters[1].adapter);
  const auto bytes = encode_adapters(set);
  const AdapterSet back = decode_adapters(bytes);
  REQUIRE(back.adapters.size() == 2);
  CHECK(back.model_digest == set.model_digest);
  for (std::size_t i = 0; i < 2; ++i) {
    CHECK(back.adapters[i].slot == set.adapters[i].slot);
    CHECK(bit_equal(back.adapters[i].adapter.a_matrix(), set.adapters[i].adapter.a_matrix()));
    CHECK(bit_equal(back.adapters[i].adapter.b_matrix(), set.adapters[i].adapter.b_matrix()));
    CHECK(back.adapters[i].adapter.lora_alpha() == 6.0);
  }
  CHECK_FALSE(back.adapters[0].adapter.frozen());
  CHECK(back.adapters[1].adapter.frozen());
  CHECK(encode_adapters(back) == bytes);

  auto bad_magic = bytes;
  bad_magic[0] ^= 0x20;
  CHECK_THROWS_AS(decode_adapters(bad_magic), BadMagicError);

  // Declared rank disagrees with the stored A and B.
  Artifact art = decode_artifact(bytes, ArtifactKind::adapter);
  art.metadata["adapters"][0]["rank"] = 2;
  CHECK_THROWS_AS(decode_adapters(encode_artifact(art)), ValidationError);
}
