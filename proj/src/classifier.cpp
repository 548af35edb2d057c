#include "gaitworks/classifier.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "gaitworks/nadam.hpp"

namespace gaitworks {

using json = nlohmann::json;

void TrainConfig::validate() const {
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate))
    throw std::invalid_argument("learning_rate must be finite and non-negative");
  if (batch_size < 1) throw std::invalid_argument("batch_size must be at least 1");
  if (max_epochs < 1) throw std::invalid_argument("max_epochs must be at least 1");
  if (patience < 1) throw std::invalid_argument("patience must be at least 1");
}

SampleRefs refs(std::span<const EnergyImage> samples) {
  SampleRefs r;
  r.reserve(samples.size());
  for (const auto& s : samples) r.push_back(&s);
  return r;
}

namespace {

void check_samples(const Model& model, const SampleRefs& samples) {
  const auto H = model.config().input_height, W = model.config().input_width;
  for (const EnergyImage* s : samples) {
    if (static_cast<std::size_t>(s->pixels.width) != W || static_cast<std::size_t>(s->pixels.height) != H)
      throw ShapeError("sample is " + std::to_string(s->pixels.width) + "x" + std::to_string(s->pixels.height) +
                       ", model expects " + std::to_string(W) + "x" + std::to_string(H));
    if (s->kind != model.kind())
      throw std::invalid_argument("sample representation " + std::string(kind_name(s->kind)) +
                                  " does not match the model's " + std::string(kind_name(model.kind())));
    const int l = label_of(*s);
    if (l < 0 || l >= static_cast<int>(model.config().classes)) throw std::invalid_argument("label out of range");
  }
}

Tensor batch_of(const SampleRefs& samples, std::span<const std::size_t> order) {
  std::vector<const GrayImage*> imgs;
  imgs.reserve(order.size());
  for (auto i : order) imgs.push_back(&samples[i]->pixels);
  return make_batch(imgs);
}

void shuffle(std::vector<std::size_t>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    const auto j = static_cast<std::size_t>(uniform01(rng) * static_cast<double>(i));
    std::swap(v[i - 1], v[std::min(j, i - 1)]);
  }
}

}  // namespace

void finalize_batchnorm(Model& model, const SampleRefs& samples, std::size_t batch_size) {
  if (samples.empty()) return;
  std::vector<std::size_t> bn_layers;
  for (std::size_t i = 0; i < model.layer_count(); ++i)
    if (model.layer(i).kind() == LayerKind::batchnorm) bn_layers.push_back(i);
  if (bn_layers.empty()) return;
  const std::size_t end = bn_layers.back() + 1;

  std::vector<std::vector<double>> sum_mean(bn_layers.size()), sum_sq(bn_layers.size());
  double total = 0.0;
  std::vector<std::size_t> order(samples.size());
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t b = 0; b < order.size(); b += batch_size) {
    const auto n = std::min(batch_size, order.size() - b);
    const Tensor x = batch_of(samples, std::span(order).subspan(b, n));
    ForwardTrace trace;
    model.forward(x, Mode::train, nullptr, &trace, end);
    // Weight each batch by its element count per channel.
    for (std::size_t k = 0; k < bn_layers.size(); ++k) {
      const auto& c = trace.caches[bn_layers[k]].batchnorm;
      const double weight = static_cast<double>(n);
      if (sum_mean[k].empty()) sum_mean[k].assign(c.batch_mean.size(), 0.0), sum_sq[k].assign(c.batch_mean.size(), 0.0);
      for (std::size_t ch = 0; ch < c.batch_mean.size(); ++ch) {
        const double m = c.batch_mean[ch];
        sum_mean[k][ch] += weight * m;
        sum_sq[k][ch] += weight * (c.batch_var[ch] + m * m);
      }
    }
    total += static_cast<double>(n);
  }
  for (std::size_t k = 0; k < bn_layers.size(); ++k) {
    auto state = model.layer(bn_layers[k]).state();
    auto& mean = *state[0];
    auto& var = *state[1];
    for (std::size_t ch = 0; ch < mean.size(); ++ch) {
      const double m = sum_mean[k][ch] / total;
      mean[ch] = static_cast<float>(m);
      var[ch] = static_cast<float>(std::max(0.0, sum_sq[k][ch] / total - m * m));
    }
  }
}

TrainHistory train(Model& model, const SampleRefs& samples, const TrainConfig& cfg) {
  cfg.validate();
  if (samples.empty()) throw std::invalid_argument("train: empty training set");
  check_samples(model, samples);

  Rng rng(cfg.seed);
  auto params = model.parameters();
  std::size_t n_params = 0;
  for (auto* p : params) n_params += p->size();
  NadamState opt = NadamState::zeros(n_params, cfg.learning_rate);

  std::vector<std::size_t> order(samples.size());
  std::iota(order.begin(), order.end(), 0);
  TrainHistory history;
  double best = std::numeric_limits<double>::infinity();
  int stale = 0;
  const std::size_t logits_end = model.logits_end();

  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    shuffle(order, rng);
    double loss_sum = 0.0;
    std::size_t correct = 0;
    for (std::size_t b = 0; b < order.size(); b += cfg.batch_size) {
      const auto n = std::min(cfg.batch_size, order.size() - b);
      const auto idx = std::span(order).subspan(b, n);
      const Tensor x = batch_of(samples, idx);
      std::vector<int> targets;
      for (auto i : idx) targets.push_back(label_of(*samples[i]));

      ForwardTrace trace;
      const Tensor logits = model.forward(x, Mode::train, &rng, &trace, logits_end);
      const LossAndGrad lg = softmax_cross_entropy(logits, targets);
      if (!std::isfinite(lg.loss))
        throw TrainingError("non-finite loss at epoch " + std::to_string(epoch) + ", batch starting at " +
                            std::to_string(b) + " (learning rate " + std::to_string(cfg.learning_rate) + ")");

      std::vector<std::span<float>> grads;
      for (auto* p : params) {
        p->zero_grad();
        grads.push_back(p->grad());
      }
      model.backward(trace, lg.grad, logits_end, 0, grads, false);
      nadam_step(params, opt);
      model.commit(trace);

      loss_sum += lg.loss * static_cast<double>(n);
      const std::size_t K = lg.probs.dim(1);
      for (std::size_t r = 0; r < n; ++r)
        correct += argmax(std::span<const float>(lg.probs.raw() + r * K, K)) == targets[r];
    }
    const double loss = loss_sum / static_cast<double>(order.size());
    const double acc = static_cast<double>(correct) / static_cast<double>(order.size());
    history.loss.push_back(loss);
    history.accuracy.push_back(acc);
    if (cfg.on_epoch) cfg.on_epoch({epoch, loss, acc});

    if (loss < best - cfg.min_delta) {
      best = loss;
      stale = 0;
    } else if (++stale >= cfg.patience) {
      history.early_stopped = true;
      break;
    }
    if (cfg.stop_loss > 0.0 && loss < cfg.stop_loss) {
      history.early_stopped = epoch < cfg.max_epochs;
      break;
    }
  }
  for (auto* p : params) p->drop_grad();
  if (cfg.learning_rate > 0.0) finalize_batchnorm(model, samples, cfg.batch_size);
  return history;
}

TrainHistory train(Model& model, std::span<const EnergyImage> samples, const TrainConfig& cfg) {
  return train(model, refs(samples), cfg);
}

int argmax(std::span<const float> values) {
  if (values.empty()) throw std::invalid_argument("argmax of an empty vector");
  int best = 0;
  for (std::size_t i = 1; i < values.size(); ++i)
    if (values[i] > values[best]) best = static_cast<int>(i);
  return best;
}

namespace {

Prediction to_prediction(const float* p, std::size_t k) {
  if (k != kNumClasses) throw ShapeError("model does not output " + std::to_string(kNumClasses) + " classes");
  Prediction out;
  std::copy(p, p + k, out.probabilities.begin());
  out.label = argmax(out.probabilities);
  return out;
}

}  // namespace

Prediction predict(const Model& model, const GrayImage& image) {
  const Tensor probs = model.forward(make_batch(image), Mode::infer, nullptr);
  return to_prediction(probs.raw(), probs.dim(1));
}

Prediction predict(const Model& model, const EnergyImage& image) {
  if (image.kind != model.kind())
    throw std::invalid_argument("image representation " + std::string(kind_name(image.kind)) +
                                " does not match the model's " + std::string(kind_name(model.kind())));
  return predict(model, image.pixels);
}

std::vector<Prediction> predict_batch(const Model& model, const SampleRefs& samples, std::size_t batch_size) {
  std::vector<Prediction> out;
  out.reserve(samples.size());
  std::vector<std::size_t> order(samples.size());
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t b = 0; b < order.size(); b += batch_size) {
    const auto n = std::min(batch_size, order.size() - b);
    const Tensor probs = model.forward(batch_of(samples, std::span(order).subspan(b, n)), Mode::infer, nullptr);
    const std::size_t K = probs.dim(1);
    for (std::size_t r = 0; r < n; ++r) out.push_back(to_prediction(probs.raw() + r * K, K));
  }
  return out;
}

void Metrics::add(int truth, int predicted) {
  if (truth < 0 || truth >= kNumClasses || predicted < 0 || predicted >= kNumClasses)
    throw std::out_of_range("class index out of range");
  ++counts[truth][predicted];
  finalize();
}

void Metrics::merge(const Metrics& other) {
  for (int i = 0; i < kNumClasses; ++i)
    for (int j = 0; j < kNumClasses; ++j) counts[i][j] += other.counts[i][j];
  finalize();
}

void Metrics::finalize() {
  total = 0;
  std::size_t diag = 0;
  for (int i = 0; i < kNumClasses; ++i) {
    std::size_t row = 0;
    for (int j = 0; j < kNumClasses; ++j) row += counts[i][j];
    total += row;
    diag += counts[i][i];
    for (int j = 0; j < kNumClasses; ++j)
      confusion[i][j] = row ? static_cast<double>(counts[i][j]) / static_cast<double>(row) : 0.0;
    per_class_accuracy[i] = row ? confusion[i][i] : std::numeric_limits<double>::quiet_NaN();
  }
  accuracy = total ? static_cast<double>(diag) / static_cast<double>(total) : 0.0;
}

namespace {

json metrics_json(const Metrics& m) {
  json j;
  j["accuracy"] = m.accuracy;
  j["samples"] = m.total;
  j["class_names"] = kClassNames;
  json per = json::array();
  for (double a : m.per_class_accuracy) per.push_back(std::isnan(a) ? json(nullptr) : json(a));
  j["per_class_accuracy"] = per;
  j["confusion"] = m.confusion;
  j["counts"] = m.counts;
  return j;
}

}  // namespace

std::string Metrics::to_json() const { return metrics_json(*this).dump(); }

Metrics evaluate(const Model& model, const SampleRefs& samples, std::vector<Prediction>* predictions) {
  check_samples(model, samples);
  const auto preds = predict_batch(model, samples);
  Metrics m;
  for (std::size_t i = 0; i < samples.size(); ++i) ++m.counts[label_of(*samples[i])][preds[i].label];
  m.finalize();
  if (predictions) *predictions = preds;
  return m;
}

FoldPlan make_folds(int n_subjects) {
  if (n_subjects != kProtocolSubjects)
    throw std::invalid_argument("the fold protocol is defined for exactly 21 subjects, got " +
                                std::to_string(n_subjects));
  FoldPlan plan;
  for (int k = 1; k <= kProtocolFolds; ++k) {
    const int i = 2 * k - 1;
    plan.folds.push_back({i, i + 1, i + 2});
  }
  return plan;
}

std::vector<int> Dataset::subjects() const {
  std::set<int> s;
  for (const auto& e : samples) s.insert(e.meta.subject);
  return {s.begin(), s.end()};
}

CrossValidationResult cross_validate(const Dataset& data, const TrainConfig& cfg, const CrossValidationOptions& options) {
  cfg.validate();
  const FoldPlan plan = make_folds(kProtocolSubjects);
  const auto present = data.subjects();
  for (int s = 1; s <= kProtocolSubjects; ++s)
    if (!std::binary_search(present.begin(), present.end(), s))
      throw std::invalid_argument("cross_validate: subject " + std::to_string(s) + " has no samples");
  for (int f : options.only_folds)
    if (f < 1 || f > kProtocolFolds) throw std::invalid_argument("fold index out of range: " + std::to_string(f));

  CrossValidationResult result;
  for (int k = 1; k <= kProtocolFolds; ++k) {
    if (!options.only_folds.empty() &&
        std::find(options.only_folds.begin(), options.only_folds.end(), k) == options.only_folds.end())
      continue;
    const auto test_subjects = plan.folds[k - 1];
    const auto is_test = [&](int s) { return std::find(test_subjects.begin(), test_subjects.end(), s) != test_subjects.end(); };
    SampleRefs train_set, test_set;
    for (const auto& e : data.samples) (is_test(e.meta.subject) ? test_set : train_set).push_back(&e);
    for (const EnergyImage* e : train_set)
      if (is_test(e->meta.subject))
        throw std::logic_error("fold " + std::to_string(k) + ": test subject " + std::to_string(e->meta.subject) +
                               " leaked into the training set");

    TrainConfig fold_cfg = cfg;
    fold_cfg.seed = derive_seed(cfg.seed, static_cast<std::uint64_t>(k));
    Rng init_rng(derive_seed(fold_cfg.seed, 0));
    Model model = build_model(options.model, init_rng, data.samples.empty() ? EnergyKind::gei : data.samples[0].kind);
    FoldResult fr;
    fr.fold = k;
    fr.test_subjects = test_subjects;
    fr.train_samples = train_set.size();
    fr.test_samples = test_set.size();
    fr.history = train(model, train_set, fold_cfg);
    fr.metrics = evaluate(model, test_set);
    if (options.on_fold) options.on_fold(fr);
    result.pooled.merge(fr.metrics);
    result.folds.push_back(std::move(fr));
  }
  double sum = 0.0;
  for (const auto& f : result.folds) sum += f.metrics.accuracy;
  result.mean_accuracy = result.folds.empty() ? 0.0 : sum / static_cast<double>(result.folds.size());
  return result;
}

std::string CrossValidationResult::to_json() const {
  json j;
  j["mean_accuracy"] = mean_accuracy;
  j["pooled"] = metrics_json(pooled);
  j["folds"] = json::array();
  for (const auto& f : folds) {
    j["folds"].push_back({{"fold", f.fold},
                          {"test_subjects", f.test_subjects},
                          {"train_samples", f.train_samples},
                          {"test_samples", f.test_samples},
                          {"epochs", f.history.epochs_run()},
                          {"final_loss", f.history.loss.empty() ? 0.0 : f.history.loss.back()},
                          {"metrics", metrics_json(f.metrics)}});
  }
  return j.dump();
}

CrossDatasetResult cross_dataset_eval(const Dataset& train_set, const Dataset& test_set, const TrainConfig& cfg,
                                      const ModelConfig& model_config, bool include_repeats) {
  if (train_set.class_names != test_set.class_names)
    throw std::invalid_argument("cross_dataset_eval: datasets use different label spaces");
  if (train_set.samples.empty() || test_set.samples.empty())
    throw std::invalid_argument("cross_dataset_eval: empty dataset");
  SampleRefs tr;
  for (const auto& e : train_set.samples)
    if (include_repeats || e.meta.repeat_of == 0) tr.push_back(&e);
  Rng init_rng(derive_seed(cfg.seed, 0));
  Model model = build_model(model_config, init_rng, train_set.samples[0].kind);
  TrainHistory history = train(model, tr, cfg);
  Metrics m = evaluate(model, refs(test_set.samples));
  return CrossDatasetResult{m, std::move(history), tr.size(), test_set.samples.size(), std::move(model)};
}

}  // namespace gaitworks
