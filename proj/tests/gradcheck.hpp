#pragma once

// Finite-difference checks shared by the unit and acceptance suites. All
// checks run in double precision.

#include <algorithm>
#include <random>
#include <vector>

#include "oracles.hpp"
#include "resae/sae.hpp"
#include "resae/tinylm.hpp"

namespace resae::test {

struct GradCheck {
  double max_rel_err = 0.0;
  int checked = 0;
  int skipped_near_boundary = 0;
};

inline double grad_rel_err(double analytic, double numeric) {
  const double scale = std::max({std::abs(analytic), std::abs(numeric), 1e-7});
  return std::abs(analytic - numeric) / scale;
}

// Compares loss_and_grad against central differences on `n_params`
// parameters chosen at random. Parameters are first spread out from the
// small default init so every sublayer contributes curvature.
inline GradCheck lm_gradient_check(const LmConfig& config, std::uint64_t seed, int n_params, double h = 1e-5) {
  TransformerT<double> lm(config);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> noise(0.0, 0.3);
  for (double& p : lm.parameters()) p += noise(rng);

  TokenBatch batch;
  batch.batch = 2;
  batch.seq_len = config.context_len;
  std::uniform_int_distribution<int> byte(0, 255);
  for (int i = 0; i < batch.batch * batch.seq_len; ++i) batch.tokens.push_back(static_cast<std::uint8_t>(byte(rng)));

  AlignedVector<double> grad(lm.num_parameters());
  lm.loss_and_grad(batch, grad);
  std::uniform_int_distribution<std::size_t> pick(0, lm.num_parameters() - 1);
  GradCheck out;
  for (int i = 0; i < n_params; ++i) {
    const std::size_t j = pick(rng);
    double& p = lm.parameters()[j];
    const double numeric = oracle::central_difference([&] { return lm.loss(batch); }, p, h);
    out.max_rel_err = std::max(out.max_rel_err, grad_rel_err(grad[j], numeric));
    ++out.checked;
  }
  return out;
}

// SAE backward against central differences of sae_loss, with the TopK
// selection recomputed at every perturbed point. Coordinates whose
// perturbation would change the selection are skipped (and counted).
inline GradCheck sae_gradient_check(Eigen::Index d, Eigen::Index n, int k, Eigen::Index rows, std::uint64_t seed,
                                    double h = 1e-6) {
  using P = SaeParamsT<double>;
  P sae = P::init(n, d, k, seed);
  std::mt19937_64 rng(seed + 1);
  std::normal_distribution<double> g(0.0, 1.0);
  for (Eigen::Index i = 0; i < sae.b_enc.size(); ++i) sae.b_enc(i) = 0.1 * g(rng);
  for (Eigen::Index i = 0; i < sae.b_dec.size(); ++i) sae.b_dec(i) = 0.1 * g(rng);
  for (Eigen::Index i = 0; i < sae.w_dec.size(); ++i) sae.w_dec.data()[i] += 0.2 * g(rng);
  MatT<double> z(rows, d);
  for (Eigen::Index i = 0; i < z.size(); ++i) z.data()[i] = g(rng);

  auto loss = [&] { return sae_loss(z, reconstruct(sae, z)); };
  auto selection = [&] {
    const auto codes = encode(sae, z);
    return std::make_pair(codes.offset, codes.index);
  };
  const auto base_selection = selection();
  const SaeGradT<double> grad = backward(sae, z);

  GradCheck out;
  auto check_block = [&](double* params, const double* analytic, Eigen::Index count) {
    for (Eigen::Index i = 0; i < count; ++i) {
      double& p = params[i];
      const double saved = p;
      p = saved + h;
      const bool moved_up = selection() != base_selection;
      p = saved - h;
      const bool moved_down = selection() != base_selection;
      p = saved;
      if (moved_up || moved_down) {
        ++out.skipped_near_boundary;
        continue;
      }
      const double numeric = oracle::central_difference(loss, p, h);
      out.max_rel_err = std::max(out.max_rel_err, grad_rel_err(analytic[i], numeric));
      ++out.checked;
    }
  };
  check_block(sae.w_enc.data(), grad.w_enc.data(), sae.w_enc.size());
  check_block(sae.b_enc.data(), grad.b_enc.data(), sae.b_enc.size());
  check_block(sae.w_dec.data(), grad.w_dec.data(), sae.w_dec.size());
  check_block(sae.b_dec.data(), grad.b_dec.data(), sae.b_dec.size());
  return out;
}

}  // namespace resae::test
