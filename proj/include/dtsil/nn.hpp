#pragma once

// Layer building blocks on top of the autodiff ops.

#include <string>

#include "dtsil/params.hpp"
#include "dtsil/rng.hpp"

namespace dtsil::nn {

struct Linear {
  std::size_t w = 0;
  std::size_t b = 0;
  std::size_t in = 0;
  std::size_t out = 0;
};

// Gate layout follows the usual (reset, update, candidate) column blocks.
struct Gru {
  std::size_t wx = 0;  // in x 3H
  std::size_t wh = 0;  // H x 3H
  std::size_t bx = 0;  // 1 x 3H
  std::size_t bh = 0;  // 1 x 3H
  std::size_t in = 0;
  std::size_t hidden = 0;
};

// Weights ~ N(0, gain^2 / in), zero bias.
Linear add_linear(ad::ParamSet& params, const std::string& prefix, std::size_t in,
                  std::size_t out, Rng& rng, double gain = 1.0);

// Orthogonal recurrent blocks, scaled-normal input weights, zero biases.
Gru add_gru(ad::ParamSet& params, const std::string& prefix, std::size_t in,
            std::size_t hidden, Rng& rng);

// Square orthogonal matrix (row-major) from the QR factor of a Gaussian draw.
std::vector<double> orthogonal(std::size_t n, Rng& rng, double gain = 1.0);

ad::Tensor linear(const ad::Binding& b, const Linear& l, const ad::Tensor& x);

// x [B x in] -> input gate pre-activations [B x 3H]; may be computed for a
// whole sequence at once.
ad::Tensor gru_input(const ad::Binding& b, const Gru& g, const ad::Tensor& x);

// One recurrent step from precomputed input gates gx [B x 3H] and h [B x H].
ad::Tensor gru_step(const ad::Binding& b, const Gru& g, const ad::Tensor& gx,
                    const ad::Tensor& h);

}  // namespace dtsil::nn
