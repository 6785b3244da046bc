#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <random>

#include "nestseg/inference.hpp"

using namespace nestseg;

namespace {

Volume make_volume(std::array<int64_t, 3> s, float fill = 0.f) {
  Volume v;
  v.nc = 1;
  v.nx = s[0];
  v.ny = s[1];
  v.nz = s[2];
  v.data.assign(static_cast<size_t>(s[0] * s[1] * s[2]), fill);
  return v;
}

}  // namespace

TEST_CASE("plan_windows covers the grid with the documented stride") {
  SUBCASE("window equals grid: exactly one window") {
    WindowPlan p = plan_windows({96, 96, 96}, {96, 96, 96}, 0.5);
    CHECK(p.corners.size() == 1);
    CHECK(p.corners[0] == std::array<int64_t, 3>{0, 0, 0});
  }
  SUBCASE("full-size grid at overlap 0.5 gives 3x4x3 windows") {
    WindowPlan p = plan_windows({172, 220, 156}, {96, 96, 96}, 0.5);
    CHECK(p.corners.size() == 36);
    // per-axis corners at stride 48 with the trailing one clamped
    std::array<std::array<int64_t, 3>, 3> bound{};
    for (const auto& c : p.corners)
      for (int a = 0; a < 3; ++a) bound[a][0] = std::max(bound[a][0], c[a]);
    CHECK(bound[0][0] == 172 - 96);
    CHECK(bound[1][0] == 220 - 96);
    CHECK(bound[2][0] == 156 - 96);
    // coverage: every voxel inside at least one window
    std::vector<uint8_t> cov(172 * 220 * 156, 0);
    for (const auto& c : p.corners)
      for (int64_t x = c[0]; x < c[0] + 96; ++x)
        for (int64_t y = c[1]; y < c[1] + 96; ++y)
          for (int64_t z = c[2]; z < c[2] + 96; ++z)
            cov[(x * 220 + y) * 156 + z] = 1;
    CHECK(std::count(cov.begin(), cov.end(), 0) == 0);
  }
  SUBCASE("invalid plans are rejected") {
    CHECK_THROWS(plan_windows({64, 64, 64}, {96, 96, 96}, 0.5));
    CHECK_THROWS(plan_windows({96, 96, 96}, {96, 96, 96}, 1.0));
  }
}

TEST_CASE("fusion normalization: constant model fuses to that constant") {
  Volume v = make_volume({64, 64, 64});
  WindowPlan p = plan_windows({64, 64, 64}, {32, 32, 32}, 0.5);
  WindowFn fn = [](const Tensor&) { return Tensor::full({2, 32, 32, 32}, 3.25); };
  Tensor fused = sliding_window_infer(v, fn, 2, p);
  CHECK(fused.shape() == std::vector<int64_t>{2, 64, 64, 64});
  for (int64_t i = 0; i < fused.numel(); ++i)
    CHECK(fused[i] == doctest::Approx(3.25).epsilon(1e-12));
}

TEST_CASE("single-window plan returns the raw window output") {
  Volume v = make_volume({16, 16, 16});
  std::mt19937_64 rng(3);
  for (auto& x : v.data) x = static_cast<float>(rng() % 100) / 100.f;
  WindowPlan p = plan_windows({16, 16, 16}, {16, 16, 16}, 0.5);
  WindowFn fn = [](const Tensor& crop) {
    Tensor out = crop.clone();
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = 2 * out[i] + 1;
    return out;
  };
  Tensor fused = sliding_window_infer(v, fn, 1, p);
  for (int64_t i = 0; i < fused.numel(); ++i)
    CHECK(fused[i] == doctest::Approx(2.0 * v.data[i] + 1.0).epsilon(1e-12));
}

TEST_CASE("two overlapping windows blend with hand-computed Gaussian weights") {
  // 1D-like setup on x: grid 24, window 16, overlap 0.5 -> corners 0 and 8
  Volume v = make_volume({24, 4, 4});
  WindowPlan p = plan_windows({24, 4, 4}, {16, 4, 4}, 0.5);
  REQUIRE(p.corners.size() == 2);
  // stub emits constant 0 for the first window, 1 for the second
  int call = 0;
  WindowFn fn = [&](const Tensor&) {
    return Tensor::full({1, 16, 4, 4}, static_cast<double>(call++));
  };
  Tensor fused = sliding_window_infer(v, fn, 1, p);
  auto g = [](double i, int64_t w) {
    double c = (w - 1) / 2.0, s = w / 8.0;
    double d = (i - c) / s;
    return std::exp(-0.5 * d * d);
  };
  for (int64_t x = 0; x < 24; ++x) {
    double w0 = (x < 16) ? g(x, 16) : 0.0;
    double w1 = (x >= 8) ? g(x - 8, 16) : 0.0;
    double expect = (w0 * 0.0 + w1 * 1.0) / (w0 + w1);
    CHECK(fused[(x * 4) * 4] == doctest::Approx(expect).epsilon(1e-9));
  }
}

TEST_CASE("fused output is invariant to window evaluation order") {
  Volume v = make_volume({40, 24, 24});
  std::mt19937_64 rng(9);
  for (auto& x : v.data) x = static_cast<float>((rng() % 1000) / 1000.0 - 0.5);
  WindowPlan p = plan_windows({40, 24, 24}, {24, 24, 24}, 0.5);
  REQUIRE(p.corners.size() > 1);
  WindowFn fn = [](const Tensor& crop) {
    Tensor out({1, 24, 24, 24});
    for (int64_t i = 0; i < out.numel(); ++i)
      out[i] = std::sin(3.0 * crop[i]) + 0.1 * crop[i];
    return out;
  };
  Tensor a = sliding_window_infer(v, fn, 1, p);
  WindowPlan rev = p;
  std::reverse(rev.corners.begin(), rev.corners.end());
  Tensor b = sliding_window_infer(v, fn, 1, rev);
  for (int64_t i = 0; i < a.numel(); ++i)
    CHECK(std::abs(a[i] - b[i]) < 1e-6);
}

TEST_CASE("volumes smaller than the plan grid are padded and cropped back") {
  Volume v = make_volume({20, 32, 32}, 1.f);
  WindowPlan p = plan_windows({32, 32, 32}, {32, 32, 32}, 0.5);
  // echo model: output equals input channel
  WindowFn fn = [](const Tensor& crop) { return crop.clone(); };
  Tensor fused = sliding_window_infer(v, fn, 1, p);
  CHECK(fused.shape() == std::vector<int64_t>{1, 20, 32, 32});
  for (int64_t i = 0; i < fused.numel(); ++i) CHECK(fused[i] == 1.0);
}

TEST_CASE("assemble_outputs matches the brute-force voxel oracle") {
  int num_classes = 5;
  std::mt19937_64 rng(13);
  std::uniform_int_distribution<int> d(-4, 4);
  Tensor fused({num_classes + 2, 3, 3, 3});
  for (int64_t i = 0; i < fused.numel(); ++i) fused[i] = d(rng);
  SegmentationResult r = assemble_outputs(fused, num_classes, Affine::identity());
  int64_t V = 27;
  for (int64_t v = 0; v < V; ++v) {
    int best = 0;
    for (int c = 1; c < num_classes; ++c)
      if (fused[c * V + v] > fused[best * V + v]) best = c;
    CHECK(r.labels.data[v] == best);
    CHECK(r.ticv.data[v] == (fused[num_classes * V + v] >= 0 ? 1 : 0));
    CHECK(r.pfv.data[v] == (fused[(num_classes + 1) * V + v] >= 0 ? 1 : 0));
  }
  SUBCASE("zero icv logit sits on the inclusive side of the threshold") {
    fused.fill(0.0);
    SegmentationResult z = assemble_outputs(fused, num_classes, Affine::identity());
    for (int64_t v = 0; v < V; ++v) {
      CHECK(z.ticv.data[v] == 1);
      CHECK(z.labels.data[v] == 0);  // ties resolve to the lowest class id
    }
  }
  SUBCASE("channel 3 maximal everywhere gives a uniform label map") {
    fused.fill(0.0);
    for (int64_t v = 0; v < V; ++v) fused[3 * V + v] = 2.0;
    SegmentationResult u = assemble_outputs(fused, num_classes, Affine::identity());
    for (int64_t v = 0; v < V; ++v) CHECK(u.labels.data[v] == 3);
  }
  CHECK_THROWS(assemble_outputs(Tensor::zeros({4, 2, 2, 2}), 5, Affine::identity()));
}

TEST_CASE("keep_largest_component drops satellites") {
  BinaryMask m{std::vector<uint8_t>(1000, 0), 10, 10, 10, Affine::identity(),
               IcvStructure::kTicv};
  auto set = [&](int64_t x, int64_t y, int64_t z) {
    m.data[(x * 10 + y) * 10 + z] = 1;
  };
  for (int64_t x = 1; x < 5; ++x)
    for (int64_t y = 1; y < 5; ++y)
      for (int64_t z = 1; z < 5; ++z) set(x, y, z);
  set(8, 8, 8);
  set(8, 8, 9);
  BinaryMask out = keep_largest_component(m);
  int64_t n = 0;
  for (auto v : out.data) n += v;
  CHECK(n == 64);
  CHECK(out.at(8, 8, 8) == 0);
  CHECK(out.at(2, 2, 2) == 1);
}

TEST_CASE("inverse_transform geometry cases") {
  // source: 8^3 labels with a distinctive pattern
  std::mt19937_64 rng(17);
  SegmentationResult src;
  src.labels = LabelMap{std::vector<uint16_t>(512), 8, 8, 8, Affine::identity(),
                        LabelProtocol::braincolor()};
  for (auto& v : src.labels.data) v = static_cast<uint16_t>(rng() % 7);
  src.ticv = BinaryMask{std::vector<uint8_t>(512), 8, 8, 8, Affine::identity(),
                        IcvStructure::kTicv};
  for (size_t i = 0; i < 512; ++i) src.ticv.data[i] = src.labels.data[i] > 3;
  src.pfv = src.ticv;
  src.pfv.structure = IcvStructure::kPfv;

  SUBCASE("identity affine is the identity map") {
    SegmentationResult out = inverse_transform(src, Affine::identity(), {8, 8, 8});
    CHECK(out.labels.data == src.labels.data);
    CHECK(out.ticv.data == src.ticv.data);
  }
  SUBCASE("integer translation round-trips exactly on the interior") {
    // native voxel x maps to world x+5; source affine identity
    Affine nat = Affine::identity();
    nat.m[3] = 5;
    SegmentationResult out = inverse_transform(src, nat, {8, 8, 8});
    for (int64_t x = 0; x < 3; ++x)  // native x -> source x+5
      for (int64_t y = 0; y < 8; ++y)
        for (int64_t z = 0; z < 8; ++z)
          CHECK(out.labels.at(x, y, z) == src.labels.at(x + 5, y, z));
    for (int64_t x = 3; x < 8; ++x)
      for (int64_t y = 0; y < 8; ++y)
        for (int64_t z = 0; z < 8; ++z) CHECK(out.labels.at(x, y, z) == 0);
  }
  SUBCASE("90-degree rotation permutes voxels, preserving the histogram") {
    // native (x,y,z) -> world (y, 7-x, z): a rotation within the 8^3 cube
    Affine rot{};
    rot.m = {0, -1, 0, 7, 1, 0, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1};
    SegmentationResult out = inverse_transform(src, rot, {8, 8, 8});
    std::array<int64_t, 7> ha{}, hb{};
    for (auto v : src.labels.data) ha[v]++;
    for (auto v : out.labels.data) hb[v]++;
    CHECK(ha == hb);
    // no labels invented
    for (auto v : out.labels.data) CHECK(v < 7);
  }
  SUBCASE("singular recorded affine is rejected") {
    SegmentationResult bad = src;
    bad.labels.affine.m[0] = 0;
    bad.labels.affine.m[1] = 0;
    bad.labels.affine.m[2] = 0;
    CHECK_THROWS(inverse_transform(bad, Affine::identity(), {8, 8, 8}));
  }
}
