#include "dtsil/nn.hpp"

#include <Eigen/QR>
#include <cmath>

namespace dtsil::nn {

using ad::Shape;
using ad::Tensor;

std::vector<double> orthogonal(std::size_t n, Rng& rng, double gain) {
  Eigen::MatrixXd a(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) a(i, j) = rng.normal();
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(a);
  Eigen::MatrixXd q = qr.householderQ();
  // Sign-fix columns against R's diagonal.
  const Eigen::MatrixXd r = qr.matrixQR().triangularView<Eigen::Upper>();
  for (std::size_t j = 0; j < n; ++j)
    if (r(j, j) < 0) q.col(j) *= -1.0;
  std::vector<double> out(n * n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = gain * q(i, j);
  return out;
}

Linear add_linear(ad::ParamSet& params, const std::string& prefix, std::size_t in,
                  std::size_t out, Rng& rng, double gain) {
  std::vector<double> w(in * out);
  const double sd = gain / std::sqrt(static_cast<double>(in));
  for (double& x : w) x = sd * rng.normal();
  Linear l;
  l.in = in;
  l.out = out;
  l.w = params.add(prefix + ".w", Shape::matrix(in, out), std::move(w));
  l.b = params.add(prefix + ".b", Shape::matrix(1, out), std::vector<double>(out, 0.0));
  return l;
}

Gru add_gru(ad::ParamSet& params, const std::string& prefix, std::size_t in,
            std::size_t hidden, Rng& rng) {
  const std::size_t h3 = 3 * hidden;
  std::vector<double> wx(in * h3);
  const double sd = 1.0 / std::sqrt(static_cast<double>(in));
  for (double& x : wx) x = sd * rng.normal();
  std::vector<double> wh(hidden * h3);
  for (std::size_t blk = 0; blk < 3; ++blk) {
    const auto q = orthogonal(hidden, rng);
    for (std::size_t i = 0; i < hidden; ++i)
      for (std::size_t j = 0; j < hidden; ++j) wh[i * h3 + blk * hidden + j] = q[i * hidden + j];
  }
  Gru g;
  g.in = in;
  g.hidden = hidden;
  g.wx = params.add(prefix + ".wx", Shape::matrix(in, h3), std::move(wx));
  g.wh = params.add(prefix + ".wh", Shape::matrix(hidden, h3), std::move(wh));
  g.bx = params.add(prefix + ".bx", Shape::matrix(1, h3), std::vector<double>(h3, 0.0));
  g.bh = params.add(prefix + ".bh", Shape::matrix(1, h3), std::vector<double>(h3, 0.0));
  return g;
}

Tensor linear(const ad::Binding& b, const Linear& l, const Tensor& x) {
  return ad::add(ad::matmul(x, b[l.w]), b[l.b]);
}

Tensor gru_input(const ad::Binding& b, const Gru& g, const Tensor& x) {
  return ad::add(ad::matmul(x, b[g.wx]), b[g.bx]);
}

Tensor gru_step(const ad::Binding& b, const Gru& g, const Tensor& gx, const Tensor& h) {
  const std::size_t hs = g.hidden;
  Tensor gh = ad::add(ad::matmul(h, b[g.wh]), b[g.bh]);
  Tensor rz = ad::sigmoid(ad::add(ad::slice_cols(gx, 0, 2 * hs), ad::slice_cols(gh, 0, 2 * hs)));
  Tensor r = ad::slice_cols(rz, 0, hs);
  Tensor z = ad::slice_cols(rz, hs, 2 * hs);
  Tensor n = ad::tanh(
      ad::add(ad::slice_cols(gx, 2 * hs, 3 * hs), ad::mul(r, ad::slice_cols(gh, 2 * hs, 3 * hs))));
  // h' = (1 - z) * n + z * h
  return ad::add(n, ad::mul(z, ad::sub(h, n)));
}

}  // namespace dtsil::nn
