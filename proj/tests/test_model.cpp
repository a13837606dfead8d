#include <cmath>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "gradcheck.hpp"
#include "module_util.hpp"
#include "spikesr/model.hpp"

using namespace spikesr;
using testutil::randn;

namespace {

ModelConfig tiny(int C = 4, int T = 2) {
  ModelConfig c = preset("toy");
  c.channels = C;
  c.ca_embed = 3;
  c.mlp_hidden = 5;
  c.num_sag = 1;
  c.num_sab = 1;
  c.time_steps = T;
  c.dsa_grid = 2;
  return c;
}

bool within(double got, double target, double tol) { return std::abs(got - target) <= tol * target; }

std::filesystem::path tmp_file(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("spikesr_test_" + name);
}

}  // namespace

TEST_CASE("forward maps (1,3,64,64) to (1,3,256,256) with eval output in [0,1]") {
  ModelConfig c = preset("toy");
  SpikeSR model(c);
  RunContext ctx;
  auto y = model.forward(randn({1, 3, 64, 64}, 1, 2.0), ctx);
  CHECK(y.shape() == Shape{1, 3, 256, 256});
  for (double v : y.values()) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }
  CHECK_THROWS_AS(model.forward(Tensor::zeros({1, 1, 16, 16}), ctx), ShapeError);
  CHECK_THROWS_AS(model.forward(Tensor::zeros({1, 3, 1, 16}), ctx), ShapeError);
}

TEST_CASE("zero residual branches reduce the model to head(FB(expanded shallow features))") {
  ModelConfig c = tiny(4, 3);
  SpikeSR model(c);
  for (Sag* g : model.sags) testutil::fill_params(*g, 0.0);
  auto lr = randn({2, 3, 8, 8}, 2, 0.5);
  RunContext ctx = RunContext::train(0);
  auto got = model.forward(lr, ctx);

  auto f = ops::conv2d(lr, model.shallow->weight, model.shallow->bias, 1, 1);
  auto seq = ops::expand(ops::reshape(f, {1, 2, 4, 8, 8}), {3, 2, 4, 8, 8});
  auto fused = model.fb->forward(seq);
  auto up = ops::pixel_shuffle(ops::conv2d(fused, model.head->weight, model.head->bias, 1, 1), 4);
  auto want = ops::conv2d(up, model.tail->weight, model.tail->bias, 1, 1);
  CHECK(testutil::max_abs_diff(got, want) == 0.0);
}

TEST_CASE("parameter counts") {
  std::mt19937_64 rng(0);
  Conv2d conv(3, 64, 3, rng);
  CHECK(conv.num_parameters() == 3 * 64 * 9 + 64);
  CHECK(within(count_params(preset("full")), 1042000, 0.15));
  CHECK(within(count_params(preset("s")), 472000, 0.15));
  CHECK(within(count_params(preset("m")), 763000, 0.15));
  CHECK(within(count_params(preset("baseline")), 1120000, 0.15));
  CHECK(within(count_params(preset("variant_a")), 1062000, 0.15));
  CHECK(within(count_params(preset("variant_b")), 1009000, 0.15));
  CHECK(count_params(preset("spikesr")) == count_params(preset("full")));
}

TEST_CASE("complexity at 160x160, T=1, and its pixel scaling") {
  auto r = count_complexity(preset("full"), 160, 160, 1);
  CHECK(within(r.flops(), 33.05e9, 0.25));
  CHECK(r.flops_2x() == 2 * r.flops());
  auto r2 = count_complexity(preset("full"), 320, 320, 1);
  CHECK(within(static_cast<double>(r2.macs), 4.0 * static_cast<double>(r.macs), 0.10));

  // One 3x3 conv C -> C on H x W: 9 C^2 H W MACs = 2 * 9 C^2 H W FLOPs.
  std::mt19937_64 rng(0);
  Conv2d conv(64, 64, 3, rng);
  CHECK(2 * conv.macs(20, 30) == 2ull * 9 * 64 * 64 * 20 * 30);
}

TEST_CASE("analytic complexity matches the instrumented counter") {
  SpikeSR model(tiny(6, 2));
  RunContext ctx;
  NoGradGuard ng;
  reset_mac_counter();
  model.forward(randn({1, 3, 12, 10}, 3), ctx, 2);
  CHECK(mac_counter() == model.macs(12, 10, 2));
}

TEST_CASE("variant wiring") {
  auto names = [](SpikeSR& m) {
    std::vector<std::string> n;
    for (auto& p : m.parameters()) n.push_back(p.name);
    return n;
  };
  auto has = [](const std::vector<std::string>& n, const std::string& key) {
    return std::any_of(n.begin(), n.end(), [&](auto& s) { return s.find(key) != std::string::npos; });
  };
  auto b = names(*build_variant("variant_b"));
  CHECK_FALSE(has(b, ".hda."));
  CHECK(has(b, ".dsa."));
  CHECK(has(b, ".ta."));
  auto a = names(*build_variant("variant_a"));
  CHECK(has(a, ".hda."));
  CHECK(has(a, ".sa."));
  CHECK_FALSE(has(a, ".dsa."));
  auto base = names(*build_variant("baseline"));
  CHECK(has(base, ".ca."));
  CHECK_FALSE(has(base, ".hda."));
  CHECK_FALSE(has(base, ".dsa."));
  auto full = names(*build_variant("spikesr"));
  CHECK(has(full, ".hda."));
  CHECK(has(full, ".dsa."));
  CHECK_THROWS_AS(build_variant("nope"), std::invalid_argument);
}

TEST_CASE("a T=4 model runs with T=1") {
  ModelConfig c = tiny(4, 4);
  SpikeSR model(c);
  RunContext ctx;
  CHECK(model.forward(randn({1, 3, 16, 16}, 4), ctx, 1).shape() == Shape{1, 3, 64, 64});
}

TEST_CASE("fixed seed gives identical parameters and outputs") {
  ModelConfig c = tiny();
  c.seed = 11;
  SpikeSR a(c), b(c);
  auto pa = a.parameters(), pb = b.parameters();
  for (std::size_t i = 0; i < pa.size(); ++i) CHECK(pa[i].tensor->values() == pb[i].tensor->values());
  auto x = randn({1, 3, 16, 16}, 5);
  RunContext c1, c2;
  CHECK(a.forward(x, c1).values() == b.forward(x, c2).values());
  RunContext t1 = RunContext::train(9), t2 = RunContext::train(9);
  CHECK(a.forward(x, t1).values() == b.forward(x, t2).values());
}

TEST_CASE("every parameter receives gradient") {
  ModelConfig c = tiny(4, 2);
  SpikeSR model(c);
  RunContext ctx = RunContext::train(1);
  ctx.relaxed = true;
  auto y = model.forward(randn({2, 3, 8, 8}, 6), ctx);
  backward(ops::mean(ops::abs(ops::sub(y, randn(y.shape(), 7)))));
  for (auto& p : model.parameters()) {
    CAPTURE(p.name);
    REQUIRE(p.tensor->has_grad());
    double s = 0;
    for (double g : p.tensor->grad()) s += std::abs(g);
    CHECK(s > 0.0);
  }
}

TEST_CASE("config text round trip and validation") {
  ModelConfig c = preset("variant_a");
  c.seed = 42;
  c.lif.tau = 3.5;
  c.gumbel_tau = 0.5;
  auto back = ModelConfig::from_text(c.to_text());
  CHECK(back.to_text() == c.to_text());
  CHECK_THROWS(c.set("nonsense", "1"));
  ModelConfig bad = c;
  bad.scale = 2;
  CHECK_THROWS(bad.validate());
  bad = c;
  bad.num_sag = 0;
  CHECK_THROWS(bad.validate());
}

TEST_CASE("checkpoint round trip is bit exact at 64-bit") {
  ModelConfig c = tiny();
  c.seed = 3;
  SpikeSR model(c);
  testutil::randomize_params(model, 4, 1.0);
  auto path = tmp_file("ckpt.bin").string();
  save_checkpoint(path, model, {2, 17, 3}, {{"extra.m", Tensor::full({2, 2}, 0.25)}}, 8);
  auto ck = read_checkpoint(path);
  CHECK(ck.meta.epoch == 2);
  CHECK(ck.meta.step == 17);
  CHECK(ck.meta.seed == 3);
  CHECK(ck.config.to_text() == c.to_text());
  REQUIRE(ck.find("extra.m"));
  CHECK(ck.find("extra.m")->values() == std::vector<double>(4, 0.25));
  auto loaded = load_model(path);
  auto pa = model.parameters(), pb = loaded->parameters();
  REQUIRE(pa.size() == pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) {
    CHECK(pa[i].name == pb[i].name);
    CHECK(pa[i].tensor->values() == pb[i].tensor->values());
  }
  auto ba = model.buffers(), bb = loaded->buffers();
  for (std::size_t i = 0; i < ba.size(); ++i) CHECK(ba[i].tensor->values() == bb[i].tensor->values());
  CHECK(!std::filesystem::exists(path + ".tmp"));

  // 32-bit files round values to float.
  save_checkpoint(path, model, {}, {}, 4);
  auto ck32 = read_checkpoint(path);
  const auto& w = *model.parameters()[0].tensor;
  CHECK(ck32.find(model.parameters()[0].name)->values()[0] == static_cast<double>(static_cast<float>(w.values()[0])));

  // Corrupt magic is rejected.
  { std::ofstream(path, std::ios::binary) << "NOPE"; }
  CHECK_THROWS(read_checkpoint(path));
  std::filesystem::remove(path);
}

TEST_CASE("full model gradient at (T,B,C,H,W) = (2,1,4,8,8)") {
  ModelConfig c = tiny(4, 2);
  SpikeSR model(c);
  testutil::randomize_params(model, 8, 0.3);
  auto x = randn({1, 3, 8, 8}, 9, 1.0, true);
  auto inputs = testutil::param_tensors(model);
  inputs.insert(inputs.begin(), x);
  auto r = testutil::gradcheck(
      [&](const std::vector<Tensor>&) {
        RunContext ctx = RunContext::train(2);
        ctx.relaxed = true;
        return testutil::project(model.forward(x, ctx));
      },
      inputs, 1e-5, 48);
  CAPTURE(r.coords);
  CHECK(r.rel_error < 1e-4);
}
