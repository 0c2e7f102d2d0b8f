// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <memory>
#include <vector>

#include "doctest.h"
#include "testing.hpp"

#include "cast/error.hpp"
#include "cast/io.hpp"
#include "cast/ops.hpp"
#include "cast/transformer.hpp"

using namespace cast;

namespace {

ModelConfig small_config(std::uint64_t seed = 7) { return {16, 8, 2, 2, 16, 8, seed}; }

TokenBatch random_tokens(std::size_t batch, std::size_t seq, int vocab, Rng& rng) {
  TokenBatch b{batch, seq, {}};
  for (std::size_t i = 0; i < batch * seq; ++i) b.ids.push_back(static_cast<int>(rng.index(vocab)));
  return b;
}

// Delta that is identically zero but still goes through the slot machinery.
class ZeroAttachment final : public SlotAttachment {
 public:
  ZeroAttachment(std::size_t in, std::size_t out) : in_(in), out_(out) {}
  std::size_t in_features() const override { return in_; }
  std::size_t out_features() const override { return out_; }
  Tensor delta(const Tensor& x) const override { return linear(x, Tensor::zeros({out_, in_})); }

 private:
  std::size_t in_, out_;
};

class ConstantAttachment final : public SlotAttachment {
 public:
  ConstantAttachment(std::size_t in, std::size_t out) : in_(in), out_(out) {}
  std::size_t in_features() const override { return in_; }
  std::size_t out_features() const override { return out_; }
  Tensor delta(const Tensor& x) const override {
    // Uniform rows would cancel against a zero-mean normalized input.
    std::vector<double> w(out_ * in_);
    for (std::size_t i = 0; i < w.size(); ++i) w[i] = 0.05 * static_cast<double>(i % 5);
    return linear(x, Tensor({out_, in_}, w));
  }

 private:
  std::size_t in_, out_;
};

}  // namespace

TEST_CASE("model config validation") {
  ModelConfig c{64, 32, 2, 4, 128, 16, 0};
  CHECK_NOTHROW(c.validate());
  CHECK(c.head_dim() == 8);
  c.d_model = 30;
  CHECK_THROWS_AS(c.validate(), ParameterError);
  CHECK_THROWS_AS(init_model(c), ParameterError);
  ModelConfig zero = small_config();
  zero.n_layers = 0;
  CHECK_THROWS_AS(zero.validate(), ParameterError);
  CHECK(small_config(1).digest() != small_config(2).digest());
  CHECK(small_config(1).digest() == small_config(1).digest());
}

TEST_CASE("init_model is deterministic per seed") {
  const auto a = init_model(small_config(3));
  const auto b = init_model(small_config(3));
  const auto c = init_model(small_config(4));
  const auto pa = a.named_parameters();
  const auto pb = b.named_parameters();
  REQUIRE(pa.size() == pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) {
    CHECK(pa[i].first == pb[i].first);
    CHECK(bit_equal(pa[i].second, pb[i].second));
  }
  CHECK(model_checksum(a) == model_checksum(b));
  CHECK(model_checksum(a) != model_checksum(c));
}

TEST_CASE("parameter shapes follow the config") {
  const ModelConfig c = small_config();
  const auto m = init_model(c);
  CHECK(m.parameter("token_embedding").shape() == Shape{16, 8});
  CHECK(m.parameter("layers.1.mlp_up").shape() == Shape{16, 8});
  CHECK(m.parameter("layers.1.mlp_down").shape() == Shape{8, 16});
  CHECK(m.parameter("head").shape() == Shape{16, 8});
  CHECK(m.slot_dims({0, Projection::mlp_up}) == std::pair<std::size_t, std::size_t>{8, 16});
  CHECK_THROWS_AS(m.parameter("layers.9.attn_q"), ParameterError);
}

TEST_CASE("forward shapes, determinism and input checks") {
  const auto m = init_model(small_config());
  Rng rng(1);
  const TokenBatch tokens = random_tokens(3, 5, 16, rng);
  const auto out = m.forward(tokens);
  CHECK(out.logits.shape() == Shape{3, 5, 16});
  CHECK(out.final_hidden.shape() == Shape{3, 5, 8});
  CHECK(bit_equal(out.logits, m.forward(tokens).logits));

  const Tensor probs = softmax_temperature(out.logits, 1.0);
  for (std::size_t r = 0; r < 15; ++r) {
    double total = 0.0;
    for (std::size_t j = 0; j < 16; ++j) total += probs.values()[r * 16 + j];
    CHECK(std::abs(total - 1.0) < 1e-12);
  }

  TokenBatch bad = tokens;
  bad.ids[4] = 16;
  CHECK_THROWS_AS(m.forward(bad), InputError);
  bad.ids[4] = -1;
  CHECK_THROWS_AS(m.forward(bad), InputError);
  CHECK_THROWS_AS(m.forward(random_tokens(1, 9, 16, rng)), InputError);
}

TEST_CASE("forward is causal") {
  const auto m = init_model(small_config());
  Rng rng(2);
  for (int trial = 0; trial < 10; ++trial) {
    TokenBatch tokens = random_tokens(2, 8, 16, rng);
    const std::size_t t = 1 + rng.index(7);
    const auto before = m.forward(tokens).logits;
    tokens.ids[t] = (tokens.ids[t] + 1 + static_cast<int>(rng.index(15))) % 16;
    tokens.ids[8 + t] = (tokens.ids[8 + t] + 1) % 16;
    const auto after = m.forward(tokens).logits;
    for (std::size_t b = 0; b < 2; ++b) {
      for (std::size_t s = 0; s < t; ++s) {
        for (std::size_t v = 0; v < 16; ++v) {
          const std::size_t i = (b * 8 + s) * 16 + v;
          CHECK(before.values()[i] == after.values()[i]);
        }
      }
    }
  }
}

TEST_CASE("adapter slots") {
  auto m = init_model(small_config());
  Rng rng(3);
  const TokenBatch tokens = random_tokens(2, 4, 16, rng);
  const auto base = m.forward(tokens).logits;

  const SlotKey q = m.register_adapter_slot(0, Projection::attn_q);
  CHECK(slot_name(q) == "layers.0.attn_q");
  CHECK_THROWS_AS(m.register_adapter_slot(0, Projection::attn_q), ConflictError);
  CHECK_THROWS_AS(m.register_adapter_slot(2, Projection::attn_q), ParameterError);
  CHECK_THROWS_AS(m.register_adapter_slot(-1, Projection::attn_v), ParameterError);
  CHECK_THROWS_AS(parse_projection("attn_x"), ParameterError);
  CHECK(parse_projection("mlp_down") == Projection::mlp_down);

  SUBCASE("zero delta is bit-identical to the base") {
    m.attach(q, std::make_shared<ZeroAttachment>(8, 8));
    CHECK(bit_equal(m.forward(tokens).logits, base));
  }
  SUBCASE("a non-zero delta changes the output and detaching restores it") {
    m.attach(q, std::make_shared<ConstantAttachment>(8, 8));
    CHECK_FALSE(bit_equal(m.forward(tokens).logits, base));
    CHECK_THROWS_AS(m.attach(q, std::make_shared<ZeroAttachment>(8, 8)), ConflictError);
    m.detach(q);
    CHECK(bit_equal(m.forward(tokens).logits, base));
  }
  SUBCASE("shape and registration checks") {
    CHECK_THROWS_AS(m.attach(q, std::make_shared<ZeroAttachment>(8, 9)), ShapeError);
    CHECK_THROWS_AS(m.attach({1, Projection::attn_q}, std::make_shared<ZeroAttachment>(8, 8)), ParameterError);
  }
}

TEST_CASE("checkpoint reload forwards bit-identically") {
  const auto m = init_model(small_config(9));
  auto copy = decode_checkpoint(encode_checkpoint(m));
  // The reloaded model holds float32-rounded parameters; round the original the same way.
  auto rounded = m.clone();
  for (auto& [name, t] : rounded.named_parameters()) quantize_to_storage(t);
  Rng rng(4);
  const TokenBatch tokens = random_tokens(2, 6, 16, rng);
  CHECK(bit_equal(copy.forward(tokens).logits, rounded.forward(tokens).logits));
  CHECK(model_checksum(copy) == model_checksum(rounded));
}

TEST_CASE("pretrain_step") {
  Rng rng(5);
  SUBCASE("initial loss is close to ln(vocab)") {
    const ModelConfig c{64, 32, 2, 4, 128, 16, 42};
    auto m = init_model(c);
    m.set_trainable(true);
    AdamState opt = AdamState::with_learning_rate(0.0);
    const double loss = pretrain_step(m, random_tokens(16, 16, 64, rng), opt);
    CHECK(std::abs(loss - std::log(64.0)) < 0.15 * std::log(64.0));
  }
  SUBCASE("zero learning rate leaves parameters unchanged") {
    auto m = init_model(small_config());
    m.set_trainable(true);
    const auto before = model_checksum(m);
    AdamState opt = AdamState::with_learning_rate(0.0);
    pretrain_step(m, random_tokens(4, 8, 16, rng), opt);
    CHECK(model_checksum(m) == before);
  }
  SUBCASE("loss falls on a repetitive corpus") {
    auto m = init_model(small_config());
    m.set_trainable(true);
    AdamState opt = AdamState::with_learning_rate(1e-2);
    TokenBatch rep{4, 8, {}};
    for (std::size_t i = 0; i < 32; ++i) rep.ids.push_back(static_cast<int>(i % 4));
    const double first = pretrain_step(m, rep, opt);
    double last = first;
    for (int s = 1; s < 200; ++s) last = pretrain_step(m, rep, opt);
    CHECK(last < first);
    CHECK(last < 0.5 * first);
  }
  SUBCASE("requires a trainable model") {
    auto m = init_model(small_config());
    AdamState opt;
    CHECK_THROWS_AS(pretrain_step(m, random_tokens(2, 4, 16, rng), opt), ContractError);
  }
}

TEST_CASE("pretraining gradients match finite differences on sampled parameters") {
  const ModelConfig c{16, 8, 2, 2, 16, 8, 13};
  auto m = init_model(c);
  m.set_trainable(true);
  Rng rng(6);
  const TokenBatch tokens = random_tokens(2, 6, 16, rng);
  const LabeledBatch labeled = next_token_targets(tokens);
  auto loss_fn = [&] {
    const auto out = m.forward(labeled.tokens);
    return cross_entropy(reshape(out.logits, {12, 16}), labeled.targets);
  };
  {
    Tape tape;
    TapeScope scope(tape);
    backward_pass(loss_fn(), tape);
  }
  auto params = m.parameters();
  const double h = 1e-5;
  int checked = 0;
  while (checked < 20) {
    Tensor& p = params[rng.index(params.size())];
    const std::size_t i = rng.index(p.numel());
    const double analytic = p.has_grad() ? p.grad()[i] : 0.0;
    auto v = p.mutable_values();
    const double saved = v[i];
    v[i] = saved + h;
    const double up = loss_fn().item();
    v[i] = saved - h;
    const double down = loss_fn().item();
    v[i] = saved;
    const double numeric = (up - down) / (2.0 * h);
    const double scale = std::max({std::abs(analytic), std::abs(numeric), 1e-4});
    CHECK(std::abs(analytic - numeric) / scale < 1e-3);
    ++checked;
  }
}

TEST_CASE("set_trainable toggles every base parameter") {
  auto m = init_model(small_config());
  CHECK_FALSE(m.trainable());
  m.set_trainable(true);
  CHECK(m.trainable());
  for (const auto& p : m.parameters()) CHECK(p.requires_grad());
  m.set_trainable(false);
  CHECK_FALSE(m.trainable());
}
