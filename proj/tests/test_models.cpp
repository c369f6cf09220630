#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "mflow/error.hpp"
#include "mflow/models.hpp"
#include "support/gradcheck.hpp"

using namespace mflow;
using namespace mflow::models;
using testing::random_tensor;
using tensor::Shape;

namespace {

ModelSpec spec_of(Arch a, int base, int out = 1, int depth = 0, std::uint64_t seed = 3) {
  ModelSpec s;
  s.arch = a;
  s.base_width = base;
  s.out_channels = out;
  s.depth = depth;
  s.seed = seed;
  return s;
}

std::filesystem::path temp(const std::string& name) { return std::filesystem::temp_directory_path() / name; }

ErrorKind kind_of(auto&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.kind();
  }
  return ErrorKind::IoFailure;
}

// Closed-form trainable count of the depth-d U-Net with one input channel.
std::size_t unet_params(std::size_t b, int d, std::size_t out) {
  auto conv = [](std::size_t cin, std::size_t cout, std::size_t k) { return cin * cout * k * k + cout; };
  std::size_t n = 0, cin = 1;
  for (int i = 0; i < d; ++i) {
    const std::size_t w = b << i;
    n += conv(cin, w, 3) + 2 * w;
    cin = w;
  }
  n += conv(cin, 2 * cin, 3) + 4 * cin;
  cin *= 2;
  for (int i = d - 2; i >= 0; --i) {
    const std::size_t w = b << i;
    n += conv(cin, w, 2) + conv(2 * w, w, 3) + 2 * w;
    cin = w;
  }
  return n + conv(cin, cin, 2) + conv(cin, out, 1);
}

}  // namespace

TEST_CASE("full-size models map 128x256 to 128x256") {
  for (Arch a : {Arch::unet, Arch::tnet, Arch::attn_unet}) {
    for (int out : {1, 2}) {
      const Model<float> m(spec_of(a, 4, out));
      const auto y = m.predict(Tensor<float>({1, 1, 128, 256}, 0.5f));
      CHECK(y.shape() == Shape{1, out, 128, 256});
      for (float v : y.values()) CHECK(std::isfinite(v));
    }
  }
}

TEST_CASE("attention encoder reaches 1x2 at full depth") {
  const Model<float> m(spec_of(Arch::attn_unet, 4));
  CHECK(m.spec().resolved_depth() == 7);
  CHECK((128 >> 7) == 1);
  CHECK((256 >> 7) == 2);
  CHECK(kind_of([&] { (void)m.predict(Tensor<float>({1, 1, 64, 256})); }) == ErrorKind::ShapeMismatch);
  CHECK(kind_of([&] { (void)m.predict(Tensor<float>({1, 2, 128, 256})); }) == ErrorKind::ShapeMismatch);
}

TEST_CASE("construction is deterministic in the seed") {
  for (Arch a : {Arch::unet, Arch::tnet, Arch::attn_unet}) {
    const Model<float> m1(spec_of(a, 4, 1, 0, 9)), m2(spec_of(a, 4, 1, 0, 9)), m3(spec_of(a, 4, 1, 0, 10));
    const auto x = random_tensor({1, 1, 128, 256}, 1).cast<float>();
    CHECK(m1.predict(x) == m2.predict(x));
    CHECK_FALSE(m1.predict(x) == m3.predict(x));
  }
}

TEST_CASE("U-Net parameter count has a closed form") {
  for (int b : {4, 16, 64}) {
    for (int out : {1, 2}) {
      const Model<float> m(spec_of(Arch::unet, b, out));
      CHECK(param_count(m) == unet_params(static_cast<std::size_t>(b), 4, static_cast<std::size_t>(out)));
    }
  }
  CHECK(param_count(Model<float>(spec_of(Arch::unet, 16))) == 567361);
}

TEST_CASE("parameter count scales with the square of the width") {
  for (Arch a : {Arch::unet, Arch::tnet, Arch::attn_unet}) {
    const double ratio = static_cast<double>(param_count(Model<float>(spec_of(a, 32)))) /
                         static_cast<double>(param_count(Model<float>(spec_of(a, 16))));
    CHECK(ratio > 3.8);
    CHECK(ratio < 4.05);
  }
}

TEST_CASE("spec validation") {
  CHECK_THROWS_AS(Model<float>(spec_of(Arch::unet, 4, 3)), Error);
  CHECK_THROWS_AS(Model<float>(spec_of(Arch::unet, 2)), Error);
  CHECK_THROWS_AS(Model<float>(spec_of(Arch::unet, 8, 1, 1)), Error);
  CHECK_THROWS_AS(Model<float>(spec_of(Arch::tnet, 8, 1, 8)), Error);
  CHECK(parse_arch("attn_unet") == Arch::attn_unet);
  CHECK(kind_of([] { (void)parse_arch("resnet"); }) == ErrorKind::InvalidSpec);
}

TEST_CASE("checkpoint round trip is exact") {
  for (Arch a : {Arch::unet, Arch::tnet, Arch::attn_unet}) {
    const auto path = temp("mflow_test_model.mfck");
    Model<float> m(spec_of(a, 4, 2, 0, 11));
    // perturb running statistics so they are exercised too
    for (auto* p : m.parameters())
      if (!p->trainable) p->value.fill(0.75f);
    save(m, path);
    const Model<float> r = load<float>(path);
    CHECK(r.spec() == m.spec());
    const auto pa = m.parameters(), pb = r.parameters();
    REQUIRE(pa.size() == pb.size());
    for (std::size_t i = 0; i < pa.size(); ++i) {
      CHECK(pa[i]->name == pb[i]->name);
      CHECK(pa[i]->value == pb[i]->value);
    }
    const auto x = random_tensor({1, 1, 128, 256}, 2).cast<float>();
    CHECK(m.predict(x) == r.predict(x));

    Model<float> into(spec_of(a, 4, 2, 0, 11));
    load_into(into, path);
    CHECK(into.predict(x) == m.predict(x));
    std::filesystem::remove(path);
  }
}

TEST_CASE("damaged checkpoints are rejected") {
  const auto path = temp("mflow_test_bad.mfck");
  const Model<float> m(spec_of(Arch::attn_unet, 4));
  save(m, path);
  const auto full = std::filesystem::file_size(path);

  SUBCASE("truncated") {
    for (auto cut : {full - 1, full / 2, std::uintmax_t{10}, std::uintmax_t{0}}) {
      save(m, path);
      std::filesystem::resize_file(path, cut);
      CHECK(kind_of([&] { (void)load<float>(path); }) == ErrorKind::CorruptCheckpoint);
    }
  }
  SUBCASE("trailing bytes") {
    std::ofstream(path, std::ios::binary | std::ios::app) << 'x';
    CHECK(kind_of([&] { (void)load<float>(path); }) == ErrorKind::CorruptCheckpoint);
  }
  SUBCASE("bad magic") {
    std::fstream f(path, std::ios::binary | std::ios::in | std::ios::out);
    f.put('X');
    f.close();
    CHECK(kind_of([&] { (void)load<float>(path); }) == ErrorKind::CorruptCheckpoint);
  }
  SUBCASE("architecture mismatch") {
    Model<float> other(spec_of(Arch::unet, 4));
    CHECK(kind_of([&] { load_into(other, path); }) == ErrorKind::CorruptCheckpoint);
  }
  SUBCASE("missing file") {
    CHECK(kind_of([&] { (void)load<float>(temp("mflow_does_not_exist.mfck")); }) == ErrorKind::IoFailure);
  }
  std::filesystem::remove(path);
}

TEST_CASE("copy_parameters") {
  const Model<float> a(spec_of(Arch::tnet, 4, 1, 0, 1));
  Model<float> b(spec_of(Arch::tnet, 4, 1, 0, 1));
  for (auto* p : b.parameters()) p->value.fill(0.0f);
  copy_parameters(a, b);
  const auto x = random_tensor({1, 1, 128, 256}, 3).cast<float>();
  CHECK(a.predict(x) == b.predict(x));
  Model<float> c(spec_of(Arch::tnet, 4, 1, 0, 2));
  CHECK_THROWS_AS(copy_parameters(a, c), Error);
}

TEST_CASE("end-to-end gradients of every architecture") {
  const auto x = random_tensor({2, 1, 16, 32}, 5);
  for (Arch a : {Arch::unet, Arch::tnet, Arch::attn_unet}) {
    for (tensor::Mode mode : {tensor::Mode::train, tensor::Mode::eval}) {
      const Model<double> m(spec_of(a, 4, 2, 4, 17));
      const double err = testing::check_model(m, x, mode, 23);
      INFO(arch_name(a), mode == tensor::Mode::train ? " train" : " eval", " error ", err);
      CHECK(err < 1e-3);
    }
  }
}
