#pragma once
// Random sequences and a whole-model finite-difference probe.

#include <algorithm>
#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "granmoe/model/model.hpp"

namespace fixtures {

using namespace granmoe;

inline Image random_image(std::mt19937_64& rng, int side) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Image img(side, side);
  for (long i = 0; i < img.pixels.size(); ++i) img.pixels.data()[i] = u(rng);
  return img;
}

inline std::vector<int> random_ids(std::mt19937_64& rng, int n, int vocab) {
  std::vector<int> ids(static_cast<std::size_t>(n));
  for (auto& i : ids) i = 4 + static_cast<int>(rng() % static_cast<unsigned>(vocab - 4));
  return ids;
}

inline Sequence random_sequence(std::mt19937_64& rng, const ModelConfig& cfg, std::optional<GranularityLevel> level,
                                int side = 16) {
  const int images = 1 + static_cast<int>(rng() % 2);
  std::vector<Image> imgs;
  for (int k = 0; k < images; ++k) imgs.push_back(random_image(rng, side));
  const int prompt = 3 + static_cast<int>(rng() % 8), answer = 2 + static_cast<int>(rng() % 8);
  return assemble_sequence(std::move(imgs), cfg.patch_size, random_ids(rng, prompt, cfg.vocab_size),
                           random_ids(rng, answer, cfg.vocab_size), level, cfg.max_seq_len);
}

// The training objective for one sequence.
inline Var objective(TransformerModel& model, DoubleTape& tape, const Sequence& seq) {
  auto fr = model.forward(tape, seq);
  const auto st = next_token_targets(seq);
  Var loss = cross_entropy_masked(fr.logits, st.targets, st.mask);
  if (fr.aux_loss) loss = add(loss, scale(*fr.aux_loss, model.config().moe_aux_weight));
  return loss;
}

inline double objective_value(TransformerModel& model, const Sequence& seq) {
  DoubleTape tape;
  return objective(model, tape, seq).item();
}

struct GroupError {
  std::string name;
  double max_rel = 0;
  int probes = 0;
};

// For every parameter tensor, compare analytic gradients at `probes` random
// entries with a fourth-order central difference. Relative error uses a 1e-6
// floor so entries whose gradient is numerically zero do not divide by noise.
inline std::vector<GroupError> model_gradient_errors(TransformerModel& model, const Sequence& seq, int probes,
                                                     std::uint64_t seed, double h = 1e-4) {
  model.params().zero_grad();
  {
    DoubleTape tape;
    tape.backward(objective(model, tape, seq));
  }
  std::mt19937_64 rng(seed);
  std::vector<GroupError> out;
  for (const auto& name : model.params().names()) {
    auto& e = model.params().entry(name);
    GroupError g{name, 0, 0};
    const Matrix grad = e.tensor.grad();
    for (int p = 0; p < probes; ++p) {
      const long i = static_cast<long>(rng() % static_cast<unsigned long>(e.tensor.size()));
      double& v = e.tensor.values().data()[i];
      const double keep = v;
      auto at = [&](double offset) {
        v = keep + offset;
        return objective_value(model, seq);
      };
      const double numeric = (8 * (at(h) - at(-h)) - (at(2 * h) - at(-2 * h))) / (12 * h);
      v = keep;
      const double analytic = grad.data()[i];
      const double rel = std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-6});
      g.max_rel = std::max(g.max_rel, rel);
      ++g.probes;
    }
    out.push_back(g);
  }
  return out;
}

}  // namespace fixtures
