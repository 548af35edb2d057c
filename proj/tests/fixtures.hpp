#pragma once

// Trained-model fixtures on synthetic walkers, shared by the explain, service and acceptance tests.

#include <vector>

#include "gaitworks/classifier.hpp"
#include "gaitworks/ops.hpp"
#include "gaitworks/synthkit.hpp"

namespace fixtures {

using namespace gaitworks;

/// GEIs of the normal walk (label normal) and the legs-only variant (label neuropathic), one
/// sequence each per subject.
inline std::vector<EnergyImage> legs_only_geis(int n_subjects, std::uint64_t seed) {
  std::vector<EnergyImage> out;
  for (int s = 0; s < n_subjects; ++s) {
    synth::SequenceOptions opt;
    opt.body = synth::Anthropometrics::vary(derive_seed(seed, s));
    opt.jitter = 0.02;
    for (const bool variant : {false, true}) {
      const auto params = variant ? synth::legs_only_variant() : synth::GaitStyleParams{};
      const auto g = synth::generate_sequence(params, 24, derive_seed(seed, 100 + 2 * s + variant), opt);
      for (const auto& c : g.truth_cycles) {
        EnergyImage e = gei_for_cycle(g.silhouettes, c);
        e.meta.subject = s + 1;
        e.meta.gait_class = variant ? GaitClass::neuropathic : GaitClass::normal;
        out.push_back(std::move(e));
      }
    }
  }
  return out;
}

inline Model train_fixture(const std::vector<EnergyImage>& samples, std::uint64_t seed, int max_epochs) {
  Rng rng(seed);
  Model model = build_model(ModelConfig::gait_cnn(), rng);
  TrainConfig cfg;
  cfg.batch_size = 8;
  cfg.max_epochs = max_epochs;
  cfg.stop_loss = 1e-3;
  cfg.seed = seed;
  train(model, samples, cfg);
  return model;
}

/// Binary normal-versus-legs-only model.
inline const Model& legs_only_model() {
  static const Model m = train_fixture(legs_only_geis(8, 1), 9, 10);
  return m;
}

/// Five-class model trained briefly on a small synthetic dataset.
inline const Model& gei_model() {
  static const Model m = [] {
    synth::DatasetOptions opt;
    opt.keep_frames = false;
    opt.n_frames = 24;
    const auto data = synth::generate_dataset(3, 1, 7, opt);
    std::vector<EnergyImage> samples;
    for (const auto& s : data.sequences) samples.insert(samples.end(), s.geis.begin(), s.geis.end());
    return train_fixture(samples, 7, 6);
  }();
  return m;
}

}  // namespace fixtures
