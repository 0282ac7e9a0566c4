#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "support.hpp"
#include "vos/network.hpp"

using namespace vos;
using testing::gradient_error;
using testing::probe;
using testing::random_tensor;
using testing::TempDir;

namespace {

constexpr double kTol = 1e-4;

NetConfig tiny() {
  NetConfig c;
  c.n_blocks = 1;
  c.n_queries = 4;
  c.key_dim = 4;
  c.value_dim = 6;
  c.hidden_dim = 3;
  c.readout_dim = 8;
  c.heads = 2;
  c.object_tokens = 2;
  c.encoder_channels = {3, 4, 4, 5};
  c.mask_channels = {2, 3, 3, 4};
  c.decoder_channels = {4, 3, 3};
  c.seed = 3;
  return c;
}

std::vector<Var> params_with(VosNetwork& net, const std::string& prefix) {
  std::vector<Var> out;
  for (auto& [name, v] : net.params().items())
    if (name.rfind(prefix, 0) == 0) out.push_back(v);
  REQUIRE_FALSE(out.empty());
  return out;
}

// Zero biases put relu inputs of padded regions exactly on the kink; move to a generic point.
void perturb(VosNetwork& net, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-0.1, 0.1);
  for (auto& [name, v] : net.params().items())
    for (double& x : v.mutable_value().storage()) x += u(rng);
}

// Scaled dot-product attention with optional row permissions, written out per head.
Tensor attention_oracle(const Tensor& q, const Tensor& k, const Tensor& v, int heads,
                        const std::vector<std::uint8_t>* allowed, std::vector<std::vector<double>>* weights0) {
  const int n = q.dim(0), m = k.dim(0), d = q.dim(1), dv = v.dim(1);
  const int dh = d / heads, dvh = dv / heads;
  Tensor out({n, dv});
  for (int h = 0; h < heads; ++h)
    for (int i = 0; i < n; ++i) {
      bool any = false;
      for (int j = 0; j < m && allowed; ++j) any |= (*allowed)[static_cast<std::size_t>(i) * m + j] != 0;
      std::vector<double> p(static_cast<std::size_t>(m), 0.0);
      double mx = -1e300;
      for (int j = 0; j < m; ++j) {
        if (allowed && any && !(*allowed)[static_cast<std::size_t>(i) * m + j]) continue;
        double s = 0;
        for (int c = 0; c < dh; ++c) s += q[static_cast<std::size_t>(i * d + h * dh + c)] * k[static_cast<std::size_t>(j * d + h * dh + c)];
        p[static_cast<std::size_t>(j)] = s / std::sqrt(static_cast<double>(dh));
        mx = std::max(mx, p[static_cast<std::size_t>(j)]);
      }
      double z = 0;
      for (int j = 0; j < m; ++j) {
        if (allowed && any && !(*allowed)[static_cast<std::size_t>(i) * m + j]) {
          p[static_cast<std::size_t>(j)] = 0;
          continue;
        }
        z += (p[static_cast<std::size_t>(j)] = std::exp(p[static_cast<std::size_t>(j)] - mx));
      }
      for (double& x : p) x /= z;
      if (h == 0 && weights0) weights0->push_back(p);
      for (int c = 0; c < dvh; ++c) {
        double acc = 0;
        for (int j = 0; j < m; ++j) acc += p[static_cast<std::size_t>(j)] * v[static_cast<std::size_t>(j * dv + h * dvh + c)];
        out[static_cast<std::size_t>(i * dv + h * dvh + c)] = acc;
      }
    }
  return out;
}

}  // namespace

TEST_CASE("masked cross-attention matches a nested-loop oracle on a 4x4 grid") {
  std::mt19937_64 rng(31);
  NetConfig cfg = tiny();
  VosNetwork net(cfg);
  Tensor fg({1, 4, 4});
  for (int i = 0; i < 16; ++i) fg[static_cast<std::size_t>(i)] = (i % 5 == 0 || i == 7) ? 0.9 : 0.1;
  const auto allowed = net.query_permissions(fg);
  REQUIRE(allowed.size() == 4 * 16);
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 16; ++j)
      CHECK(allowed[static_cast<std::size_t>(i * 16 + j)] == ((fg[static_cast<std::size_t>(j)] >= 0.5) == (i < 2)));

  const Tensor q = random_tensor({4, 8}, rng, -2, 2), k = random_tensor({16, 8}, rng, -2, 2), v = random_tensor({16, 6}, rng);
  std::vector<std::vector<double>> w0;
  const Tensor want = attention_oracle(q, k, v, 2, &allowed, &w0);
  const Tensor got = ops::attention(Var(q), Var(k), Var(v), 2, &allowed).value();
  for (std::size_t i = 0; i < want.numel(); ++i) CHECK(std::abs(got[i] - want[i]) < 1e-6);

  const Tensor w = ops::attention_weights(q, k, 2, 0, &allowed);
  for (int i = 0; i < 4; ++i) {
    double s = 0;
    for (int j = 0; j < 16; ++j) {
      const double wij = w[static_cast<std::size_t>(i * 16 + j)];
      if (!allowed[static_cast<std::size_t>(i * 16 + j)]) CHECK(wij == 0.0);
      CHECK(std::abs(wij - w0[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)]) < 1e-6);
      s += wij;
    }
    CHECK(std::abs(s - 1.0) < 1e-12);
  }

  // all-background map: foreground queries see nothing and fall back to every position
  const auto bg_only = net.query_permissions(Tensor({1, 4, 4}, 0.0));
  const Tensor wf = ops::attention_weights(q, k, 2, 1, &bg_only);
  const Tensor wfull = ops::attention_weights(q, k, 2, 1, nullptr);
  for (int j = 0; j < 16; ++j) CHECK(wf[static_cast<std::size_t>(j)] == doctest::Approx(wfull[static_cast<std::size_t>(j)]).epsilon(1e-14));
  const Tensor unmasked = ops::attention(Var(q), Var(k), Var(v), 2).value();
  const Tensor unmasked_want = attention_oracle(q, k, v, 2, nullptr, nullptr);
  for (std::size_t i = 0; i < unmasked.numel(); ++i) CHECK(std::abs(unmasked[i] - unmasked_want[i]) < 1e-6);
}

TEST_CASE("query encoder shapes and gradients") {
  std::mt19937_64 rng(1);
  VosNetwork net(tiny());
  perturb(net, 1);
  Var frame(random_tensor({3, 20, 30}, rng, 0, 1), true);
  const QueryFeatures q = net.encode_query(frame);
  CHECK(q.key.shape() == Shape{4, 2, 2});
  CHECK(q.f16.shape() == Shape{5, 2, 2});
  CHECK(q.skip8.shape() == Shape{4, 4, 4});
  CHECK(q.skip4.shape() == Shape{4, 8, 8});
  CHECK(q.skip2.shape() == Shape{3, 16, 16});
  CHECK(q.height == 20);
  CHECK(q.width == 30);
  auto leaves = params_with(net, "qenc.");
  leaves.push_back(frame);
  CHECK(gradient_error([&] {
          const QueryFeatures f = net.encode_query(frame);
          return ops::add(probe(f.key, 1), ops::add(probe(f.skip4, 2), probe(f.skip2, 3)));
        }, leaves, 12) < kTol);
}

TEST_CASE("mask encoder gradients") {
  std::mt19937_64 rng(2);
  VosNetwork net(tiny());
  perturb(net, 2);
  Var frame(random_tensor({3, 16, 32}, rng, 0, 1));
  Var probs(random_tensor({2, 16, 32}, rng, 0.05, 0.95), true);
  auto leaves = params_with(net, "menc.");
  leaves.push_back(probs);
  CHECK(gradient_error([&] {
          const QueryFeatures q = net.encode_query(frame);
          const auto vals = net.encode_mask(q, probs);
          REQUIRE(vals.size() == 2);
          CHECK(vals[0].shape() == Shape{6, 1, 2});
          return ops::add(probe(vals[0], 4), probe(vals[1], 5));
        }, leaves, 12) < kTol);
}

TEST_CASE("pixel readout and transformer block gradients") {
  std::mt19937_64 rng(3);
  VosNetwork net(tiny());
  perturb(net, 3);
  Var frame(random_tensor({3, 32, 32}, rng, 0, 1));
  const QueryFeatures q = net.encode_query(frame);
  Var mem_value(random_tensor({6, 2, 2}, rng), true);
  Var sensory(random_tensor({3, 2, 2}, rng), true);
  auto fuse = params_with(net, "readout.");
  fuse.push_back(mem_value);
  fuse.push_back(sensory);
  CHECK(gradient_error([&] { return probe(net.pixel_readout(mem_value, sensory, q)); }, fuse, 12) < kTol);

  Var readout(random_tensor({8, 2, 2}, rng), true);
  Var queries(random_tensor({4, 8}, rng), true);
  Var tokens(random_tensor({2, 6}, rng), true);
  Var fg(Tensor({1, 2, 2}, std::vector<double>{0.9, 0.2, 0.1, 0.7}));
  auto block = params_with(net, "block0.");
  block.push_back(readout);
  block.push_back(queries);
  block.push_back(tokens);
  CHECK(gradient_error([&] {
          const auto out = net.transformer_block(0, readout, queries, tokens, fg);
          return ops::add(probe(out.readout, 6), probe(out.queries, 7));
        }, block, 8) < kTol);
  CHECK_THROWS(net.transformer_block(1, readout, queries, tokens, fg));
}

TEST_CASE("decoder and sensory update gradients") {
  std::mt19937_64 rng(4);
  VosNetwork net(tiny());
  perturb(net, 4);
  Var frame(random_tensor({3, 24, 40}, rng, 0, 1), true);
  Var readout(random_tensor({8, 2, 3}, rng), true);
  auto dec = params_with(net, "dec.");
  dec.push_back(readout);
  dec.push_back(frame);
  CHECK(gradient_error([&] {
          const QueryFeatures q = net.encode_query(frame);
          Var logits = net.decode(readout, q);
          CHECK(logits.shape() == Shape{1, 24, 40});
          return probe(logits);
        }, dec, 12) < kTol);

  const QueryFeatures q = net.encode_query(Var(frame.value()));
  Var hidden(random_tensor({3, 2, 3}, rng), true);
  Var p16(random_tensor({1, 2, 3}, rng, 0.05, 0.95), true);
  auto sens = params_with(net, "sensory.");
  sens.push_back(hidden);
  sens.push_back(p16);
  CHECK(gradient_error([&] { return probe(net.update_sensory(hidden, q, p16)); }, sens) < kTol);
}

TEST_CASE("weights round trip and config metadata") {
  TempDir dir;
  VosNetwork net(tiny());
  net.save(dir / "w.vosw");
  const VosNetwork back = VosNetwork::load(dir / "w.vosw");
  CHECK(back.config().encoder_channels == tiny().encoder_channels);
  CHECK(back.config().decoder_channels == tiny().decoder_channels);
  CHECK(back.params().parameter_count() == net.params().parameter_count());
  for (std::size_t i = 0; i < net.params().items().size(); ++i)
    CHECK(back.params().items()[i].second.value().storage() == net.params().items()[i].second.value().storage());
  CHECK(NetConfig::from_meta(tiny().to_meta()).to_meta() == tiny().to_meta());
  VosNetwork same(tiny());
  CHECK(same.params().items()[0].second.value().storage() == net.params().items()[0].second.value().storage());
  NetConfig bad = tiny();
  bad.heads = 3;
  CHECK_THROWS(bad.validate());
}

TEST_CASE("default network size") {
  const VosNetwork net(NetConfig{});
  CHECK(net.params().parameter_count() == 393473);
}
