#include <doctest.h>

#include <cmath>
#include <numeric>
#include <random>

#include "gaitworks/gait_repr.hpp"
#include "gaitworks/silhouette.hpp"

using namespace gaitworks;

namespace {

BinaryMask rect(int w, int h, int x0, int y0, int x1, int y1) {
  BinaryMask m(w, h);
  for (int y = y0; y <= y1; ++y)
    for (int x = x0; x <= x1; ++x) m.at(x, y) = 1;
  return m;
}

SilhouetteSequence numbered(int n, double fps) {
  SilhouetteSequence s;
  s.source_fps = fps;
  for (int i = 0; i < n; ++i) {
    BinaryMask m(64, 8);
    m.at(i % 64, 0) = 1;
    m.at(0, 1 + i / 64) = 1;
    s.frames.push_back(m);
  }
  return s;
}

double centroid_column(const BinaryMask& m) {
  double sx = 0;
  std::size_t n = 0;
  for (int y = 0; y < m.height; ++y)
    for (int x = 0; x < m.width; ++x)
      if (m.at(x, y)) {
        sx += x + 0.5;
        ++n;
      }
  return sx / static_cast<double>(n);
}

GrayImage random_binary_gray(std::mt19937_64& rng, int size = kEnergySize) {
  GrayImage g(size, size);
  for (auto& v : g.pixels) v = (rng() & 1) ? 1.0f : 0.0f;
  return g;
}

// Independent per-pixel mean: for each pixel walk the stack.
GrayImage stack_mean(const std::vector<GrayImage>& frames) {
  GrayImage out(frames[0].width, frames[0].height);
  for (int y = 0; y < out.height; ++y)
    for (int x = 0; x < out.width; ++x) {
      long double s = 0;
      for (const auto& f : frames) s += f.at(x, y);
      out.at(x, y) = static_cast<float>(s / frames.size());
    }
  return out;
}

PoseFrame standing_pose(double ox, double oy) {
  PoseFrame p;
  auto set = [&](int k, double x, double y) { p.keypoints[k] = {ox + x, oy + y, 0.9}; };
  set(0, 4, -70);    // nose
  set(1, 0, -55);    // neck
  set(2, 0, -52);    // shoulders
  set(5, 0, -52);
  set(3, 12, -30);   // elbows
  set(6, -12, -30);
  set(4, 20, -10);   // wrists
  set(7, -20, -10);
  set(8, 0, 0);      // mid hip
  set(9, 0, 0);
  set(12, 0, 0);
  set(10, 15, 35);   // knees
  set(13, -15, 35);
  set(11, 25, 70);   // ankles
  set(14, -25, 70);
  set(19, 35, 72);   // big toes
  set(22, 10, 75);
  set(21, -29, 70);  // heels
  set(24, 21, 70);
  return p;
}

}  // namespace

TEST_CASE("resample_fps") {
  SUBCASE("10 fps input is the identity") {
    auto s = numbered(17, 10.0);
    auto r = resample_fps(s);
    CHECK(r.frames == s.frames);
    CHECK(r.source_fps == 10.0);
  }
  SUBCASE("30 fps, 30 frames picks every third frame") {
    auto idx = resample_indices(30, 30.0);
    std::vector<int> expect;
    for (int i = 0; i < 30; i += 3) expect.push_back(i);
    CHECK(idx == expect);
    auto s = numbered(30, 30.0);
    auto r = resample_fps(s);
    REQUIRE(r.frames.size() == 10);
    for (int j = 0; j < 10; ++j) CHECK(r.frames[j] == s.frames[3 * j]);
  }
  SUBCASE("25 fps, 50 frames: 20 frames with bounded timing error") {
    auto idx = resample_indices(50, 25.0);
    CHECK(idx.size() == 20);
    for (std::size_t j = 0; j < idx.size(); ++j) {
      CHECK(std::abs(idx[j] / 25.0 - j / 10.0) <= 1.0 / 50.0 + 1e-12);
      if (j) CHECK(idx[j] > idx[j - 1]);
    }
  }
  SUBCASE("upsampling is rejected") { CHECK_THROWS(resample_indices(10, 5.0)); }
}

TEST_CASE("crop_normalize") {
  SUBCASE("centered square blob fills the output") {
    auto out = crop_normalize(rect(200, 200, 50, 50, 149, 149));
    CHECK(out.width == 224);
    CHECK(out.height == 224);
    CHECK(count_foreground(out) == 224u * 224u);
  }
  SUBCASE("off-centre centroid lands on the centre column") {
    // torso plus a foot sticking out to the right: centroid right of the box centre
    BinaryMask m = rect(300, 300, 100, 40, 119, 239);
    for (int y = 220; y <= 239; ++y)
      for (int x = 120; x <= 170; ++x) m.at(x, y) = 1;
    auto out = crop_normalize(m);
    CHECK(std::abs(centroid_column(out) - 112.0) <= 1.0);
    auto gray = crop_normalize_gray(m);
    double s = 0, sx = 0;
    for (int y = 0; y < 224; ++y)
      for (int x = 0; x < 224; ++x) {
        s += gray.at(x, y);
        sx += gray.at(x, y) * (x + 0.5);
      }
    CHECK(std::abs(sx / s - 112.0) <= 1.0);
  }
  SUBCASE("already-square silhouette is a pure resize") {
    BinaryMask m(120, 120);
    std::mt19937_64 rng(4);
    for (int y = 10; y < 90; ++y)
      for (int x = 30; x < 110; ++x) m.at(x, y) = (rng() % 3) ? 1 : 0;
    m.at(30, 10) = m.at(109, 89) = 1;
    GrayImage crop(80, 80);
    for (int y = 0; y < 80; ++y)
      for (int x = 0; x < 80; ++x) crop.at(x, y) = m.at(30 + x, 10 + y);
    CHECK(crop_normalize_gray(m) == resize_bilinear(crop, 224, 224));
  }
  SUBCASE("output is 224x224 and non-empty for any non-empty input") {
    std::mt19937_64 rng(8);
    for (int trial = 0; trial < 30; ++trial) {
      const int w = 20 + static_cast<int>(rng() % 900), h = 20 + static_cast<int>(rng() % 900);
      BinaryMask m(w, h);
      const int k = 1 + static_cast<int>(rng() % 4);
      for (int i = 0; i < k; ++i) m.at(static_cast<int>(rng() % w), static_cast<int>(rng() % h)) = 1;
      auto out = crop_normalize(m);
      CHECK(out.width == 224);
      CHECK(out.height == 224);
      CHECK(count_foreground(out) > 0);
      auto g = crop_normalize_gray(m);
      CHECK(*std::max_element(g.pixels.begin(), g.pixels.end()) > 0.0f);
    }
    // one-pixel-wide line, strongly downsampled
    BinaryMask line(40, 1000);
    for (int y = 0; y < 1000; ++y) line.at(7, y) = 1;
    CHECK(count_foreground(crop_normalize(line)) > 0);
  }
  SUBCASE("empty mask is rejected") { CHECK_THROWS(crop_normalize(BinaryMask(10, 10))); }
}

TEST_CASE("detect_cycles on constructed width signals") {
  SUBCASE("two ideal periods then a truncated half period give exactly one cycle") {
    std::vector<double> w;
    for (int t = 0; t < 50; ++t) w.push_back(60.0 + 20.0 * std::cos(2.0 * M_PI * t / 10.0));
    auto c = detect_cycles_from_signal(w);
    REQUIRE(c.size() == 1);
    CHECK(c[0].length() == 20);
  }
  SUBCASE("constant width gives no cycles") {
    CHECK(detect_cycles_from_signal(std::vector<double>(60, 33.0)).empty());
    SilhouetteSequence s;
    for (int i = 0; i < 30; ++i) s.frames.push_back(rect(100, 50, 10 + i, 5, 30 + i, 40));
    CHECK(detect_cycles(s).empty());
  }
  SUBCASE("cycles are ordered, non-overlapping and within [8, 40]") {
    std::mt19937_64 rng(2);
    std::normal_distribution<double> n(0.0, 0.5);
    for (int period : {8, 12, 20, 30}) {
      std::vector<double> w;
      for (int t = 0; t < 200; ++t) w.push_back(60.0 + 15.0 * std::cos(4.0 * M_PI * t / period) + n(rng));
      auto c = detect_cycles_from_signal(w);
      CHECK(!c.empty());
      for (std::size_t i = 0; i < c.size(); ++i) {
        CHECK(c[i].length() >= kMinCycleFrames);
        CHECK(c[i].length() <= kMaxCycleFrames);
        CHECK(std::abs(c[i].length() - period) <= 1);
        if (i) CHECK(c[i].start_frame > c[i - 1].end_frame);
      }
    }
  }
  SUBCASE("over-long periods are discarded") {
    std::vector<double> w;
    for (int t = 0; t < 300; ++t) w.push_back(60.0 + 15.0 * std::cos(4.0 * M_PI * t / 60.0));
    CHECK(detect_cycles_from_signal(w).empty());
  }
}

TEST_CASE("trim_partial") {
  auto seq_with_contact = [](int n, int lead, int trail) {
    SilhouetteSequence s;
    for (int i = 0; i < n; ++i) {
      if (i < lead) s.frames.push_back(rect(100, 60, 0, 10, 20, 50));
      else if (i >= n - trail) s.frames.push_back(rect(100, 60, 80, 10, 99, 50));
      else s.frames.push_back(rect(100, 60, 30 + i, 10, 50 + i, 50));
    }
    return s;
  };
  SUBCASE("no border contact is the identity") {
    auto s = seq_with_contact(12, 0, 0);
    CHECK(trim_partial(s).frames == s.frames);
  }
  SUBCASE("exactly the touching leading and trailing frames are removed") {
    auto s = seq_with_contact(20, 5, 3);
    auto t = trim_partial(s);
    REQUIRE(t.frames.size() == 12);
    CHECK(t.frames.front() == s.frames[5]);
    CHECK(t.frames.back() == s.frames[16]);
  }
  SUBCASE("touching the top border only is retained") {
    auto s = seq_with_contact(10, 0, 0);
    s.frames[4] = rect(100, 60, 30, 0, 50, 59);
    CHECK(trim_partial(s).frames.size() == 10);
  }
  SUBCASE("every frame touching is an error") {
    auto s = seq_with_contact(6, 6, 0);
    CHECK_THROWS(trim_partial(s));
  }
}

TEST_CASE("compute_gei") {
  std::mt19937_64 rng(12);
  SUBCASE("single frame is returned unchanged") {
    auto f = random_binary_gray(rng);
    auto e = compute_gei({f});
    CHECK(e.pixels == f);
    CHECK(e.kind == EnergyKind::gei);
  }
  SUBCASE("foreground in one of two frames averages to one half") {
    GrayImage a(224, 224, 0.0f), b(224, 224, 0.0f);
    a.at(3, 4) = 1.0f;
    CHECK(compute_gei({a, b}).pixels.at(3, 4) == 0.5f);
  }
  SUBCASE("matches the per-pixel stack mean and stays within the stack envelope") {
    std::vector<GrayImage> frames;
    std::uniform_real_distribution<float> u(0.0f, 1.0f);
    for (int i = 0; i < 10; ++i) {
      GrayImage g(224, 224);
      for (auto& v : g.pixels) v = u(rng);
      frames.push_back(g);
    }
    auto e = compute_gei(frames);
    auto ref = stack_mean(frames);
    double worst = 0;
    bool enveloped = true;
    for (std::size_t i = 0; i < ref.area(); ++i) {
      worst = std::max(worst, std::abs(static_cast<double>(e.pixels.pixels[i]) - ref.pixels[i]));
      float lo = 1, hi = 0;
      for (const auto& f : frames) lo = std::min(lo, f.pixels[i]), hi = std::max(hi, f.pixels[i]);
      enveloped = enveloped && e.pixels.pixels[i] >= lo && e.pixels.pixels[i] <= hi;
    }
    CHECK(worst <= 1e-6);
    CHECK(enveloped);
    auto shuffled = frames;
    std::shuffle(shuffled.begin(), shuffled.end(), rng);
    auto e2 = compute_gei(shuffled);
    for (std::size_t i = 0; i < ref.area(); ++i)
      CHECK_MESSAGE(std::abs(e2.pixels.pixels[i] - e.pixels.pixels[i]) <= 1e-6, i);
  }
  SUBCASE("empty list is rejected") { CHECK_THROWS(compute_gei({})); }
}

TEST_CASE("rasterize_skeleton") {
  SUBCASE("one limb pair draws a single straight stroke") {
    PoseFrame p;
    p.keypoints[1] = {20.0, 10.0, 1.0};
    p.keypoints[8] = {20.0, 50.0, 1.0};
    auto m = rasterize_skeleton(p, 60, 70);
    auto box = bounding_box(m);
    CHECK(box.width() == 4);
    CHECK(box.x0 == 18);
    CHECK(box.y0 == 8);
    CHECK(box.y1 == 51);
    CHECK(m.at(20, 30) == 1);
    CHECK(connected_components(m).size() == 1);
  }
  SUBCASE("fewer than two confident keypoints is an error") {
    PoseFrame p;
    p.keypoints[3] = {5, 5, 0.9};
    CHECK_THROWS(rasterize_skeleton(p, 20, 20));
  }
  SUBCASE("missing endpoints skip their limbs") {
    auto p = standing_pose(100, 100);
    auto full = count_foreground(rasterize_skeleton(p, 200, 200));
    p.keypoints[7].confidence = 0.0;
    CHECK(count_foreground(rasterize_skeleton(p, 200, 200)) < full);
  }
  SUBCASE("pixel count is within 20% of total limb length times thickness") {
    auto p = standing_pose(100, 100);
    double expected = 0;
    for (auto [a, b] : body25_limbs()) {
      const auto& q = p.keypoints[a];
      const auto& r = p.keypoints[b];
      if (q.confidence < kKeypointConfidence || r.confidence < kKeypointConfidence) continue;
      expected += std::hypot(q.x - r.x, q.y - r.y) * kStrokeThickness;
    }
    const double got = static_cast<double>(count_foreground(rasterize_skeleton(p, 200, 200)));
    CHECK(got >= 0.8 * expected);
    CHECK(got <= 1.2 * expected);
  }
}

TEST_CASE("compute_sei") {
  auto p = standing_pose(100, 100);
  SUBCASE("single pose equals its normalized rasterization") {
    auto e = compute_sei({p}, 200, 200);
    CHECK(e.kind == EnergyKind::sei);
    CHECK(e.pixels == crop_normalize_gray(rasterize_skeleton(p, 200, 200)));
  }
  SUBCASE("identical repeated poses equal a single rasterization") {
    auto e = compute_sei({p, p, p, p}, 200, 200);
    CHECK(e.pixels == crop_normalize_gray(rasterize_skeleton(p, 200, 200)));
  }
  SUBCASE("a moving cycle equals the independent stack mean") {
    std::vector<PoseFrame> poses;
    std::vector<GrayImage> frames;
    for (int i = 0; i < 12; ++i) {
      auto q = standing_pose(60 + 5 * i, 100);
      q.keypoints[10].x += 10 * std::sin(i * 0.5);
      q.keypoints[11].x += 15 * std::sin(i * 0.5);
      poses.push_back(q);
      frames.push_back(crop_normalize_gray(rasterize_skeleton(q, 200, 200)));
    }
    auto e = compute_sei(poses, 200, 200);
    auto ref = stack_mean(frames);
    for (std::size_t i = 0; i < ref.area(); i += 7) CHECK(std::abs(e.pixels.pixels[i] - ref.pixels[i]) <= 1e-6);
  }
}

TEST_CASE("gei_for_cycle uses the normalized frames of the cycle") {
  SilhouetteSequence s;
  for (int i = 0; i < 10; ++i) s.frames.push_back(rect(120, 100, 10 + i, 10, 40 + 2 * i, 90));
  auto e = gei_for_cycle(s, {2, 6});
  std::vector<GrayImage> frames;
  for (int i = 2; i <= 6; ++i) frames.push_back(crop_normalize_gray(s.frames[i]));
  CHECK(e.pixels == compute_gei(frames).pixels);
  CHECK_THROWS(gei_for_cycle(s, {5, 12}));
}
