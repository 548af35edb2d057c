#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>

#include <nlohmann/json.hpp>

#include "gaitworks/silhouette.hpp"
#include "gaitworks/synthkit.hpp"

using namespace gaitworks;
using namespace gaitworks::synth;

namespace {

const GaitClass kAll[] = {GaitClass::diplegic, GaitClass::hemiplegic, GaitClass::neuropathic, GaitClass::normal,
                          GaitClass::parkinsonian};

double l1(const GrayImage& a, const GrayImage& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.area(); ++i) s += std::abs(a.pixels[i] - b.pixels[i]);
  return s / static_cast<double>(a.area());
}

GrayImage mean_image(const std::vector<const GrayImage*>& images) {
  GrayImage m(images[0]->width, images[0]->height);
  for (const auto* im : images)
    for (std::size_t i = 0; i < m.area(); ++i) m.pixels[i] += im->pixels[i] / static_cast<float>(images.size());
  return m;
}

const SyntheticDataset& shared_dataset() {
  static const SyntheticDataset data = generate_dataset(5, 2, 42);
  return data;
}

}  // namespace

TEST_CASE("presets") {
  for (int sev : {1, 2}) CHECK(preset(GaitClass::hemiplegic, sev).arm_swing_right == 0.0);
  const auto normal = preset(GaitClass::normal, 1);
  CHECK(normal.torso_lean_deg == 0.0);
  CHECK(normal.arm_swing_left == normal.arm_swing_right);
  CHECK(preset(GaitClass::parkinsonian, 2).cadence_frames < preset(GaitClass::parkinsonian, 1).cadence_frames);
  CHECK(preset(GaitClass::parkinsonian, 1).cadence_frames < normal.cadence_frames);
  CHECK(preset(GaitClass::diplegic, 1).torso_lean_deg > 0.0);
  CHECK(preset(GaitClass::neuropathic, 1).knee_lift > normal.knee_lift);
  CHECK(preset(GaitClass::parkinsonian, 1).step_length < normal.step_length);
  for (auto c : kAll)
    for (int sev : {1, 2}) CHECK_NOTHROW(preset(c, sev).validate());
  CHECK_THROWS_AS(preset(GaitClass::diplegic, 3), std::invalid_argument);
  CHECK_THROWS_AS(preset(static_cast<GaitClass>(9), 1), std::invalid_argument);

  GaitStyleParams bad;
  bad.cadence_frames = 9;
  CHECK_THROWS(bad.validate());
  bad = {};
  bad.knee_lift = 1.6;
  CHECK_THROWS(bad.validate());
}

TEST_CASE("generate_sequence ground truth and layout") {
  GaitStyleParams p;
  p.cadence_frames = 20;
  const auto g = generate_sequence(p, 60, 3);
  REQUIRE(g.truth_cycles.size() == 3);
  CHECK(g.truth_cycles[0] == GaitCycle{0, 19});
  CHECK(g.truth_cycles[2] == GaitCycle{40, 59});
  CHECK(g.silhouettes.frames.size() == 60);
  CHECK(g.poses.size() == 60);

  const auto cycles = detect_cycles(g.silhouettes);
  REQUIRE_FALSE(cycles.empty());
  for (const auto& c : cycles) CHECK(std::abs(c.length() - 20) <= 1);

  const auto& frame = g.silhouettes.frames[0];
  for (const auto& pose : g.poses)
    for (int k = 0; k < kNumKeypoints; ++k) {
      const bool unused = (k >= 15 && k <= 18) || k == 20 || k == 23;
      CHECK(pose.keypoints[k].confidence == (unused ? 0.0 : 1.0));
      if (!unused) {
        CHECK(pose.keypoints[k].x >= 0.0);
        CHECK(pose.keypoints[k].x < frame.width);
        CHECK(pose.keypoints[k].y >= 0.0);
        CHECK(pose.keypoints[k].y < frame.height);
      }
    }
  for (const auto& f : g.silhouettes.frames) {
    const auto box = bounding_box(f);
    REQUIRE_FALSE(box.empty());
    CHECK(box.x0 > 0);
    CHECK(box.x1 < f.width - 1);
  }
}

TEST_CASE("generate_sequence is deterministic per seed") {
  const auto p = preset(GaitClass::parkinsonian, 2);
  SequenceOptions o;
  o.jitter = 0.05;
  o.render_color = true;
  const auto a = generate_sequence(p, 25, 11, o);
  const auto b = generate_sequence(p, 25, 11, o);
  const auto c = generate_sequence(p, 25, 12, o);
  CHECK(a.silhouettes.frames == b.silhouettes.frames);
  CHECK(a.color_frames[7].rgb == b.color_frames[7].rgb);
  bool same_poses = true;
  for (std::size_t i = 0; i < a.poses.size(); ++i)
    for (int k = 0; k < kNumKeypoints; ++k)
      same_poses = same_poses && a.poses[i].keypoints[k].x == b.poses[i].keypoints[k].x &&
                   a.poses[i].keypoints[k].y == b.poses[i].keypoints[k].y;
  CHECK(same_poses);
  CHECK(a.silhouettes.frames != c.silhouettes.frames);
}

TEST_CASE("legs-only variant moves the upper body like the normal walk") {
  const auto variant = legs_only_variant();
  CHECK_NOTHROW(variant.validate());
  const auto a = generate_sequence(GaitStyleParams{}, 24, 11);
  const auto b = generate_sequence(variant, 24, 11);
  REQUIRE(a.poses.size() == b.poses.size());
  // BODY25: nose, neck, shoulders, elbows, wrists, relative to the mid-hip (8).
  const int upper[] = {0, 1, 2, 3, 4, 5, 6, 7};
  double upper_gap = 0.0, leg_gap = 0.0;
  for (std::size_t t = 0; t < a.poses.size(); ++t) {
    const auto& pa = a.poses[t].keypoints;
    const auto& pb = b.poses[t].keypoints;
    for (int k : upper) {
      upper_gap = std::max(upper_gap, std::abs((pa[k].x - pa[8].x) - (pb[k].x - pb[8].x)));
      upper_gap = std::max(upper_gap, std::abs((pa[k].y - pa[8].y) - (pb[k].y - pb[8].y)));
    }
    for (int k : {10, 11, 13, 14})
      leg_gap = std::max(leg_gap, std::hypot((pa[k].x - pa[8].x) - (pb[k].x - pb[8].x),
                                             (pa[k].y - pa[8].y) - (pb[k].y - pb[8].y)));
  }
  CHECK(upper_gap <= 1e-3);
  CHECK(leg_gap > 10.0);
}

TEST_CASE("frame too small for the figure") {
  SequenceOptions o;
  o.frame.height = 120;
  CHECK_THROWS_AS(generate_sequence(GaitStyleParams{}, 5, 1, o), std::invalid_argument);
  o.frame = {40, 240};
  CHECK_THROWS_AS(generate_sequence(GaitStyleParams{}, 5, 1, o), std::invalid_argument);
  CHECK_THROWS_AS(generate_sequence(GaitStyleParams{}, 0, 1), std::invalid_argument);
}

TEST_CASE("cycle detection recovers every zero-jitter preset cadence within one frame") {
  for (auto c : kAll)
    for (int sev : {1, 2}) {
      const auto p = preset(c, sev);
      const auto g = generate_sequence(p, 4 * p.cadence_frames, 5);
      const auto cycles = detect_cycles(g.silhouettes);
      CAPTURE(class_name(c));
      CAPTURE(sev);
      REQUIRE(cycles.size() >= 2);
      for (const auto& cy : cycles) CHECK(std::abs(cy.length() - p.cadence_frames) <= 1);
    }
}

TEST_CASE("green-screen composites segment back to the figure") {
  for (auto c : kAll) {
    SequenceOptions o;
    o.render_color = true;
    o.color_noise_sigma = 2.0;
    const auto g = generate_sequence(preset(c, 2), 12, 21, o);
    const auto model = learn_background(g.background);
    for (int t : {0, 5, 11}) {
      const auto mask = denoise(segment(g.color_frames[t], model));
      CAPTURE(class_name(c));
      CHECK(iou(mask, g.silhouettes.frames[t]) >= 0.99);
    }
  }
}

TEST_CASE("anthropometric variation") {
  const auto a = Anthropometrics::vary(1), b = Anthropometrics::vary(2);
  CHECK_FALSE(a == b);
  CHECK(Anthropometrics::vary(1) == a);
  const Anthropometrics base;
  for (int s = 0; s < 50; ++s) {
    const auto v = Anthropometrics::vary(static_cast<std::uint64_t>(s));
    CHECK(std::abs(v.thigh / base.thigh - 1.0) <= 0.1 + 1e-12);
    CHECK(std::abs(v.forearm / base.forearm - 1.0) <= 0.1 + 1e-12);
  }
}

TEST_CASE("generate_dataset") {
  const auto& data = shared_dataset();
  REQUIRE(data.sequences.size() == 50);
  REQUIRE(data.subjects.size() == 5);
  for (std::size_t i = 0; i < data.subjects.size(); ++i)
    for (std::size_t j = i + 1; j < data.subjects.size(); ++j) CHECK_FALSE(data.subjects[i] == data.subjects[j]);
  CHECK_THROWS_AS(generate_dataset(1, 2, 1), std::invalid_argument);

  std::map<int, int> severities;
  for (const auto& s : data.sequences) {
    CHECK(s.meta.subject >= 1);
    CHECK(s.meta.subject <= 5);
    CHECK(s.geis.size() == s.sequence.truth_cycles.size());
    CHECK(s.seis.size() == s.geis.size());
    CHECK_FALSE(s.geis.empty());
    ++severities[s.meta.severity];
    if (s.meta.gait_class == GaitClass::normal) CHECK(s.meta.severity == 0);
  }
  CHECK(severities[0] == 10);
  CHECK(severities[1] == 20);
  CHECK(severities[2] == 20);
}

TEST_CASE("generate_dataset is a pure function of the seed") {
  const auto a = generate_dataset(2, 1, 8), b = generate_dataset(2, 1, 8);
  for (std::size_t i = 0; i < a.sequences.size(); ++i) {
    CHECK(a.sequences[i].geis[0].pixels == b.sequences[i].geis[0].pixels);
    CHECK(a.sequences[i].seis[0].pixels == b.sequences[i].seis[0].pixels);
  }
  DatasetOptions lean;
  lean.keep_frames = false;
  const auto c = generate_dataset(2, 1, 8, lean);
  CHECK(c.sequences[3].geis[0].pixels == a.sequences[3].geis[0].pixels);
  CHECK(c.sequences[3].sequence.silhouettes.frames.empty());
  CHECK_THROWS_AS(write_dataset(c, std::filesystem::temp_directory_path() / "gaitworks_unused"), std::invalid_argument);
}

TEST_CASE("synthetic classes are separable") {
  const auto& data = shared_dataset();
  std::vector<const GrayImage*> by_class[kNumClasses];
  for (const auto& s : data.sequences)
    for (const auto& g : s.geis) by_class[static_cast<int>(s.meta.gait_class)].push_back(&g.pixels);
  std::vector<GrayImage> means;
  for (auto& v : by_class) means.push_back(mean_image(v));
  double between = 0.0, within = 0.0;
  int nb = 0, nw = 0;
  for (int a = 0; a < kNumClasses; ++a)
    for (int b = a + 1; b < kNumClasses; ++b, ++nb) between += l1(means[a], means[b]);
  for (int a = 0; a < kNumClasses; ++a)
    for (const auto* g : by_class[a]) within += l1(*g, means[a]), ++nw;
  CHECK(between / nb > within / nw);

  // Nearest class mean, fitted on subjects 1-3 and scored on subjects 4-5.
  std::vector<const GrayImage*> train[kNumClasses];
  for (const auto& s : data.sequences)
    if (s.meta.subject <= 3)
      for (const auto& g : s.geis) train[static_cast<int>(s.meta.gait_class)].push_back(&g.pixels);
  std::vector<GrayImage> centroids;
  for (auto& v : train) centroids.push_back(mean_image(v));
  int correct = 0, total = 0;
  for (const auto& s : data.sequences) {
    if (s.meta.subject <= 3) continue;
    for (const auto& g : s.geis) {
      int best = 0;
      for (int k = 1; k < kNumClasses; ++k)
        if (l1(g.pixels, centroids[k]) < l1(g.pixels, centroids[best])) best = k;
      correct += best == static_cast<int>(s.meta.gait_class);
      ++total;
    }
  }
  MESSAGE("nearest-class-mean accuracy " << static_cast<double>(correct) / total);
  CHECK(static_cast<double>(correct) / total > 0.6);
}

TEST_CASE("write_dataset layout") {
  namespace fs = std::filesystem;
  const fs::path root = fs::temp_directory_path() / "gaitworks_synth_layout";
  fs::remove_all(root);
  DatasetOptions opt;
  opt.n_frames = 16;
  opt.write_color_frames = true;
  const auto data = generate_dataset(2, 1, 9, opt);
  write_dataset(data, root, opt);

  std::ifstream in(root / "manifest.json");
  const auto manifest = nlohmann::json::parse(in);
  CHECK(manifest["sequences"].size() == 10);
  CHECK(manifest["subjects"].size() == 2);
  const auto& first = manifest["sequences"][0];
  const fs::path dir = root / first["path"].get<std::string>();
  CHECK(first["path"] == "subject_01/diplegic_sev1/seq_01");
  CHECK(fs::exists(dir / "masks" / "frame_0000.png"));
  CHECK(fs::exists(dir / "frames" / "frame_0015.png"));
  CHECK(fs::exists(dir / "background.png"));
  CHECK(fs::exists(dir / "poses" / "frame_0000.json"));
  CHECK(fs::exists(dir / "gei" / "cycle_00.png"));
  CHECK(fs::exists(dir / "sei" / "cycle_00.png"));
  std::ifstream pose_in(dir / "poses" / "frame_0000.json");
  const auto pose = nlohmann::json::parse(pose_in);
  REQUIRE(pose.size() == 25);
  CHECK(pose[0].size() == 3);
  std::ifstream truth_in(dir / "truth.json");
  const auto truth = nlohmann::json::parse(truth_in);
  CHECK(truth["cycles"][0] == nlohmann::json::array({0, 15}));
  CHECK(truth["params"]["cadence_frames"] == 16);
  CHECK(fs::exists(root / "subject_02" / "normal_na" / "seq_01" / "truth.json"));
  fs::remove_all(root);
}

TEST_CASE("streamed dataset writing matches the in-memory path byte for byte") {
  namespace fs = std::filesystem;
  const fs::path a = fs::temp_directory_path() / "gaitworks_synth_mem";
  const fs::path b = fs::temp_directory_path() / "gaitworks_synth_stream";
  fs::remove_all(a);
  fs::remove_all(b);
  DatasetOptions opt;
  opt.n_frames = 16;
  write_dataset(generate_dataset(2, 1, 5, opt), a, opt);
  generate_dataset_to(b, 2, 1, 5, opt);
  auto slurp = [](const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(in), {});
  };
  std::size_t files = 0;
  for (const auto& e : fs::recursive_directory_iterator(a)) {
    if (!e.is_regular_file()) continue;
    const fs::path rel = fs::relative(e.path(), a);
    REQUIRE(fs::exists(b / rel));
    CHECK_MESSAGE(slurp(e.path()) == slurp(b / rel), rel.string());
    ++files;
  }
  std::size_t files_b = 0;
  for (const auto& e : fs::recursive_directory_iterator(b)) files_b += e.is_regular_file();
  CHECK(files == files_b);
  CHECK(files > 100);
  fs::remove_all(a);
  fs::remove_all(b);
}
