#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>

#include "gaitworks/classifier.hpp"
#include "netcheck.hpp"

using namespace gaitworks;

namespace {

constexpr std::size_t kSmall = 32;

// Separable fixture: class k is a bright horizontal band at row block k.
EnergyImage band_image(int cls, int subject, std::size_t size = kSmall, double noise = 0.0, std::uint64_t seed = 0) {
  EnergyImage e;
  e.pixels = GrayImage(static_cast<int>(size), static_cast<int>(size));
  const int band = static_cast<int>(size) / kNumClasses;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(0.0f, static_cast<float>(noise));
  for (int y = 0; y < e.pixels.height; ++y)
    for (int x = 0; x < e.pixels.width; ++x) {
      const bool on = y >= cls * band && y < (cls + 1) * band;
      e.pixels.at(x, y) = std::clamp((on ? 1.0f : 0.0f) + (noise > 0 ? u(rng) - static_cast<float>(noise) / 2 : 0.0f),
                                     0.0f, 1.0f);
    }
  e.meta.gait_class = static_cast<GaitClass>(cls);
  e.meta.subject = subject;
  return e;
}

Dataset band_dataset(int subjects, int per_class = 1) {
  Dataset d;
  for (int s = 1; s <= subjects; ++s)
    for (int c = 0; c < kNumClasses; ++c)
      for (int r = 0; r < per_class; ++r) d.samples.push_back(band_image(c, s));
  return d;
}

std::vector<std::vector<float>> snapshot(const Model& m) {
  std::vector<std::vector<float>> out;
  for (const Tensor* t : m.parameters()) out.push_back(t->values());
  return out;
}

TrainConfig quick(int epochs, std::uint64_t seed = 3) {
  TrainConfig c;
  c.max_epochs = epochs;
  c.batch_size = 16;
  c.seed = seed;
  return c;
}

}  // namespace

TEST_CASE("parameter budget of the default plan") {
  const ModelConfig cfg = ModelConfig::gait_cnn();
  // conv: 3*3*cin*cout + cout; batch norm: gamma, beta, mean, variance per channel
  const std::size_t convs = (9 * 1 * 32 + 32) + (9 * 32 * 32 + 32) * 2 + (9 * 32 * 64 + 64) + (9 * 64 * 64 + 64);
  const std::size_t norms = 4 * (32 * 3 + 64 * 2);
  const std::size_t dense = (7 * 7 * 64 * 512 + 512) + (512 * 5 + 5);
  const std::size_t hand = convs + norms + dense;
  CHECK(hand == 1683845);
  CHECK(count_parameters(cfg).total() == hand);
  CHECK(count_parameters(cfg).running_stats == 2 * (32 * 3 + 64 * 2));
  Rng rng(1);
  Model m = build_model(cfg, rng);
  CHECK(m.total_parameter_count() == hand);
  CHECK(std::abs(static_cast<double>(hand) - 1684421.0) / 1684421.0 <= 0.0005);
  CHECK(m.output_shape(m.conv_layers().back()) == Shape{7, 7, 64});
}

TEST_CASE("model config validation and json round trip") {
  ModelConfig cfg = ModelConfig::gait_cnn();
  CHECK(ModelConfig::from_json(cfg.to_json()) == cfg);
  ModelConfig bad = cfg;
  bad.layers.erase(bad.layers.begin());
  CHECK_THROWS(bad.validate());
  Rng rng(1);
  CHECK_THROWS(build_model(bad, rng));
}

TEST_CASE("full network gradients at 32x32 match finite differences over 20 seeds") {
  const auto r = oracle::network_gradient_check(kSmall, 20);
  INFO(r.worst_where);
  CHECK(r.worst <= 1e-3);
  CHECK(r.absorbed_grad <= 1e-5);
  CHECK(r.reference_gap <= 1e-4);
  CHECK(r.probes >= 20 * 16 * 8);
}

TEST_CASE("predict") {
  Rng rng(5);
  Model m = build_model(ModelConfig::gait_cnn(), rng);
  SUBCASE("zero image on an untrained model is near uniform") {
    const auto p = predict(m, GrayImage(224, 224, 0.0f));
    for (float v : p.probabilities) CHECK(std::abs(v - 0.2f) <= 0.05f);
  }
  SUBCASE("repeated calls are bit identical and sum to one") {
    std::mt19937_64 g(9);
    std::uniform_real_distribution<float> u(0, 1);
    for (int trial = 0; trial < 3; ++trial) {
      EnergyImage e;
      e.pixels = GrayImage(224, 224);
      for (auto& v : e.pixels.pixels) v = u(g);
      const auto a = predict(m, e), b = predict(m, e);
      CHECK(a.probabilities == b.probabilities);
      double s = 0;
      for (float v : a.probabilities) s += v;
      CHECK(std::abs(s - 1.0) <= 1e-6);
      CHECK(a.label == argmax(a.probabilities));
    }
  }
  SUBCASE("wrong dimensions and representation are rejected") {
    CHECK_THROWS(predict(m, GrayImage(100, 224)));
    EnergyImage e;
    e.pixels = GrayImage(224, 224);
    e.kind = EnergyKind::sei;
    CHECK_THROWS(predict(m, e));
  }
  SUBCASE("argmax ties go to the lowest index") {
    std::array<float, 5> v{0.1f, 0.3f, 0.3f, 0.2f, 0.1f};
    CHECK(argmax(v) == 1);
  }
}

TEST_CASE("model files") {
  Rng rng(21);
  Model m = build_model(ModelConfig::gait_cnn(), rng);
  // perturb running statistics so they are exercised by the round trip
  for (auto* s : m.running_state())
    for (auto& v : *s) v += 0.25f;
  const auto bytes = serialize_model(m);
  const std::size_t json_len = m.config().to_json().size();
  CHECK(bytes.size() == model_header_bytes(json_len) + 4 * (m.trainable_count() + m.running_stat_count()) +
                            kModelTrailerBytes);
  CHECK(std::abs(static_cast<double>(bytes.size()) - 6.8e6) / 6.8e6 <= 0.15);

  const auto path = std::filesystem::temp_directory_path() / "gaitworks_test_model.gmd";
  save_model(m, path);
  Model back = load_model(path);
  std::filesystem::remove(path);
  std::mt19937_64 g(1);
  std::uniform_real_distribution<float> u(0, 1);
  GrayImage img(224, 224);
  for (auto& v : img.pixels) v = u(g);
  CHECK(predict(m, img).probabilities == predict(back, img).probabilities);
  CHECK(snapshot(back) == snapshot(m));

  SUBCASE("corrupt magic") {
    auto b = bytes;
    b[0] = 'X';
    CHECK_THROWS_AS(deserialize_model(b), ModelFormatError);
  }
  SUBCASE("unknown version") {
    auto b = bytes;
    b[4] = 9;
    CHECK_THROWS_AS(deserialize_model(b), ModelFormatError);
  }
  SUBCASE("truncated") {
    auto b = bytes;
    b.resize(b.size() / 2);
    CHECK_THROWS_AS(deserialize_model(b), ModelFormatError);
  }
  SUBCASE("flipped payload bit") {
    auto b = bytes;
    b[b.size() / 2] ^= 0x10;
    CHECK_THROWS_AS(deserialize_model(b), ModelFormatError);
  }
  SUBCASE("kind is preserved") {
    m.set_kind(EnergyKind::sei);
    CHECK(deserialize_model(serialize_model(m)).kind() == EnergyKind::sei);
  }
}

TEST_CASE("training") {
  const ModelConfig cfg = ModelConfig::gait_cnn(kSmall);
  SUBCASE("learning rate 0 leaves the weights unchanged") {
    Rng rng(2);
    Model m = build_model(cfg, rng);
    const auto before = snapshot(m);
    Dataset d = band_dataset(2);
    TrainConfig c = quick(3);
    c.learning_rate = 0.0;
    train(m, d.samples, c);
    CHECK(snapshot(m) == before);
  }
  SUBCASE("a single repeated sample is memorized within 50 epochs") {
    Rng rng(3);
    // 64x64 keeps a 2x2 final map, so batch norm still sees spatial variance in a batch of copies
    Model m = build_model(ModelConfig::gait_cnn(64), rng);
    std::vector<EnergyImage> one(16, band_image(2, 1, 64, 0.3, 4));
    TrainConfig c = quick(50);
    c.batch_size = 4;
    auto h = train(m, one, c);
    CHECK(h.loss.back() < 0.01);
  }
  SUBCASE("fixed seed reproduces the loss history and weights") {
    Dataset d = band_dataset(3);
    for (auto& s : d.samples) s = band_image(label_of(s), s.meta.subject, kSmall, 0.5, s.meta.subject * 10 + label_of(s));
    Rng r1(4), r2(4);
    Model a = build_model(cfg, r1), b = build_model(cfg, r2);
    auto ha = train(a, d.samples, quick(4)), hb = train(b, d.samples, quick(4));
    CHECK(ha.loss == hb.loss);
    CHECK(snapshot(a) == snapshot(b));
  }
  SUBCASE("loss trends down on a learnable set") {
    Dataset d = band_dataset(4);
    Rng rng(6);
    Model m = build_model(cfg, rng);
    auto h = train(m, d.samples, quick(15));
    REQUIRE(h.epochs_run() >= 4);
    const double head = (h.loss[0] + h.loss[1]) / 2, tail = (h.loss[h.loss.size() - 1] + h.loss[h.loss.size() - 2]) / 2;
    CHECK(tail < head);
    CHECK(evaluate(m, refs(d.samples)).accuracy == 1.0);
  }
  SUBCASE("non-finite input aborts with a diagnostic") {
    Rng rng(7);
    Model m = build_model(cfg, rng);
    Dataset d = band_dataset(1);
    d.samples[2].pixels.at(3, 3) = std::nanf("");
    CHECK_THROWS_AS(train(m, d.samples, quick(2)), TrainingError);
  }
  SUBCASE("empty set and bad labels are rejected") {
    Rng rng(8);
    Model m = build_model(cfg, rng);
    CHECK_THROWS(train(m, std::vector<EnergyImage>{}, quick(1)));
    std::vector<EnergyImage> wrong{band_image(0, 1, 64)};
    CHECK_THROWS(train(m, wrong, quick(1)));
  }
  SUBCASE("batch norm statistics are finalized from the training set") {
    Dataset d = band_dataset(2);
    Rng rng(9);
    Model m = build_model(cfg, rng);
    train(m, d.samples, quick(2));
    const auto& first_bn = m.layer(1);
    REQUIRE(first_bn.kind() == LayerKind::batchnorm);
    // pooled statistics over the whole set equal a single full-batch pass
    ForwardTrace t;
    std::vector<const GrayImage*> imgs;
    for (const auto& s : d.samples) imgs.push_back(&s.pixels);
    m.forward(make_batch(imgs), Mode::train, nullptr, &t, 2);
    const auto& c = t.caches[1].batchnorm;
    auto state = first_bn.state();
    for (std::size_t ch = 0; ch < c.batch_mean.size(); ++ch) {
      CHECK((*state[0])[ch] == doctest::Approx(c.batch_mean[ch]).epsilon(1e-4));
      CHECK((*state[1])[ch] == doctest::Approx(c.batch_var[ch]).epsilon(1e-3));
    }
  }
}

TEST_CASE("metrics") {
  Metrics m;
  std::mt19937_64 rng(3);
  std::size_t diag = 0;
  for (int i = 0; i < 200; ++i) {
    const int t = static_cast<int>(rng() % 4), p = static_cast<int>(rng() % 5);
    diag += t == p;
    m.add(t, p);
  }
  CHECK(m.total == 200);
  CHECK(m.accuracy == doctest::Approx(diag / 200.0));
  for (int i = 0; i < 4; ++i) {
    double s = 0;
    for (double v : m.confusion[i]) s += v;
    CHECK(std::abs(s - 1.0) <= 1e-6);
  }
  CHECK(std::isnan(m.per_class_accuracy[4]));
  double weighted = 0;
  for (int i = 0; i < 5; ++i) {
    std::size_t row = 0;
    for (auto c : m.counts[i]) row += c;
    weighted += row * m.confusion[i][i];
  }
  CHECK(weighted / 200.0 == doctest::Approx(m.accuracy));
  CHECK(m.to_json().find("\"per_class_accuracy\"") != std::string::npos);
}

TEST_CASE("fold plan") {
  const auto plan = make_folds(21);
  REQUIRE(plan.folds.size() == 10);
  CHECK(plan.folds[0] == std::array<int, 3>{1, 2, 3});
  CHECK(plan.folds[9] == std::array<int, 3>{19, 20, 21});
  std::set<int> all;
  for (std::size_t k = 0; k < plan.folds.size(); ++k) {
    const int i = 2 * static_cast<int>(k + 1) - 1;
    CHECK(plan.folds[k] == std::array<int, 3>{i, i + 1, i + 2});
    all.insert(plan.folds[k].begin(), plan.folds[k].end());
  }
  CHECK(all.size() == 21);
  CHECK(*all.begin() == 1);
  CHECK(*all.rbegin() == 21);
  CHECK_THROWS(make_folds(20));
  CHECK(derive_seed(1, 1) != derive_seed(1, 2));
}

TEST_CASE("cross validation on a separable fixture") {
  Dataset d = band_dataset(21);
  TrainConfig c = quick(30);
  c.stop_loss = 0.02;
  CrossValidationOptions o;
  o.model = ModelConfig::gait_cnn(kSmall);
  int seen = 0;
  o.on_fold = [&](const FoldResult& f) {
    ++seen;
    CHECK(f.train_samples == 90);
    CHECK(f.test_samples == 15);
  };
  const auto r = cross_validate(d, c, o);
  CHECK(seen == 10);
  CHECK(r.mean_accuracy == 1.0);
  CHECK(r.pooled.total == 150);  // neighbouring folds share a subject
  CHECK(r.to_json().find("\"folds\"") != std::string::npos);

  Dataset missing = band_dataset(21);
  std::erase_if(missing.samples, [](const EnergyImage& e) { return e.meta.subject == 7; });
  CHECK_THROWS_WITH(cross_validate(missing, c, o), doctest::Contains("subject 7"));
}

TEST_CASE("cross dataset evaluation") {
  Dataset a = band_dataset(4), b = band_dataset(2);
  for (auto& s : a.samples)
    if (s.meta.subject == 4) s.meta.repeat_of = 1;
  TrainConfig c = quick(20);
  c.stop_loss = 0.02;
  const auto with = cross_dataset_eval(a, b, c, ModelConfig::gait_cnn(kSmall), true);
  CHECK(with.train_samples == 20);
  CHECK(with.metrics.accuracy == 1.0);
  const auto without = cross_dataset_eval(a, b, c, ModelConfig::gait_cnn(kSmall), false);
  CHECK(without.train_samples == 15);
  Dataset other = b;
  other.class_names[0] = "ataxic";
  CHECK_THROWS(cross_dataset_eval(a, other, c, ModelConfig::gait_cnn(kSmall)));
}
