#include "kirl/func_approx.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <istream>
#include <ostream>
#include <stdexcept>

namespace kirl {

namespace {

constexpr char kMagic[8] = {'K', 'I', 'R', 'L', 'M', 'L', 'P', '\0'};
constexpr std::uint32_t kVersion = 1;

Eigen::MatrixXd orthogonal(int rows, int cols, double gain, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  const int n = std::max(rows, cols);
  Eigen::MatrixXd a(n, n);
  for (int j = 0; j < n; ++j)
    for (int i = 0; i < n; ++i) a(i, j) = normal(rng);
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(a);
  Eigen::MatrixXd q = qr.householderQ();
  // Sign fix so the distribution is uniform over orthogonal matrices.
  const Eigen::MatrixXd r = qr.matrixQR().triangularView<Eigen::Upper>();
  for (int j = 0; j < n; ++j)
    if (r(j, j) < 0.0) q.col(j) *= -1.0;
  return gain * q.topLeftCorner(rows, cols);
}

Eigen::MatrixXd apply_output(const Eigen::MatrixXd& z, OutputActivation act) {
  if (act == OutputActivation::Tanh) return z.array().tanh().matrix();
  return z;
}

}  // namespace

Mlp::Mlp(std::vector<int> sizes, OutputActivation output) : sizes_(std::move(sizes)), output_(output) {
  if (sizes_.size() < 2) throw std::domain_error("Mlp: need at least input and output sizes");
  for (int s : sizes_)
    if (s <= 0) throw std::domain_error("Mlp: layer sizes must be positive");
  for (std::size_t l = 0; l + 1 < sizes_.size(); ++l) {
    layers_.push_back({Eigen::MatrixXd::Zero(sizes_[l + 1], sizes_[l]),
                       Eigen::VectorXd::Zero(sizes_[l + 1])});
  }
}

Mlp Mlp::initialized(std::vector<int> sizes, OutputActivation output, Rng& rng,
                     double output_gain) {
  Mlp net(std::move(sizes), output);
  const std::size_t n = net.layers_.size();
  for (std::size_t l = 0; l < n; ++l) {
    auto& layer = net.layers_[l];
    const bool last = l + 1 == n;
    const double gain = last ? output_gain : std::sqrt(2.0);
    if (gain != 0.0) {
      layer.weight = orthogonal(static_cast<int>(layer.weight.rows()),
                                static_cast<int>(layer.weight.cols()), gain, rng);
    }
  }
  return net;
}

std::size_t Mlp::num_params() const {
  std::size_t n = 0;
  for (const auto& l : layers_) n += static_cast<std::size_t>(l.weight.size() + l.bias.size());
  return n;
}

void Mlp::check_input(Eigen::Index rows) const {
  if (layers_.empty()) throw std::domain_error("Mlp: network has no layers");
  if (rows != sizes_.front()) throw std::domain_error("Mlp: input dimension mismatch");
}

Eigen::VectorXd Mlp::forward(const Eigen::VectorXd& x) const {
  return forward_batch(x).col(0);
}

Eigen::MatrixXd Mlp::forward_batch(const Eigen::MatrixXd& x, Cache* cache) const {
  check_input(x.rows());
  if (cache) {
    cache->inputs.clear();
    cache->pre.clear();
  }
  Eigen::MatrixXd a = x;
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const auto& layer = layers_[l];
    Eigen::MatrixXd z = layer.weight * a;
    z.colwise() += layer.bias;
    if (cache) {
      cache->inputs.push_back(a);
      cache->pre.push_back(z);
    }
    if (l + 1 < layers_.size()) {
      a = z.cwiseMax(0.0);
    } else {
      a = apply_output(z, output_);
    }
  }
  if (cache) cache->output = a;
  return a;
}

Eigen::VectorXd Mlp::backward(const Eigen::VectorXd& x, const Eigen::VectorXd& out_grad) const {
  return backward_batch(x, out_grad);
}

Eigen::VectorXd Mlp::backward_batch(const Eigen::MatrixXd& x, const Eigen::MatrixXd& out_grad) const {
  Cache cache;
  forward_batch(x, &cache);
  return backward_cached(cache, out_grad);
}

Eigen::VectorXd Mlp::backward_cached(const Cache& cache, const Eigen::MatrixXd& out_grad) const {
  if (out_grad.rows() != output_dim() || out_grad.cols() != cache.output.cols())
    throw std::domain_error("Mlp: output-gradient shape mismatch");
  Eigen::VectorXd grad(num_params());
  // Offsets of each layer in the flat vector.
  std::vector<std::size_t> offset(layers_.size());
  std::size_t pos = 0;
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    offset[l] = pos;
    pos += static_cast<std::size_t>(layers_[l].weight.size() + layers_[l].bias.size());
  }

  Eigen::MatrixXd delta = out_grad;
  if (output_ == OutputActivation::Tanh)
    delta = delta.cwiseProduct((1.0 - cache.output.array().square()).matrix());
  for (std::size_t li = layers_.size(); li-- > 0;) {
    const auto& layer = layers_[li];
    const Eigen::MatrixXd gw = delta * cache.inputs[li].transpose();
    const Eigen::VectorXd gb = delta.rowwise().sum();
    std::size_t k = offset[li];
    for (Eigen::Index r = 0; r < gw.rows(); ++r)
      for (Eigen::Index c = 0; c < gw.cols(); ++c) grad[static_cast<Eigen::Index>(k++)] = gw(r, c);
    for (Eigen::Index r = 0; r < gb.size(); ++r) grad[static_cast<Eigen::Index>(k++)] = gb(r);
    if (li > 0) {
      delta = layer.weight.transpose() * delta;
      delta = delta.cwiseProduct((cache.pre[li - 1].array() > 0.0).cast<double>().matrix());
    }
  }
  return grad;
}

Eigen::MatrixXd Mlp::jvp_batch(const Eigen::MatrixXd& x, const Eigen::VectorXd& direction) const {
  check_input(x.rows());
  if (static_cast<std::size_t>(direction.size()) != num_params())
    throw std::domain_error("Mlp: direction length mismatch");
  const Mlp tangent = unflatten(*this, direction);
  Eigen::MatrixXd a = x;
  Eigen::MatrixXd da = Eigen::MatrixXd::Zero(x.rows(), x.cols());
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const auto& layer = layers_[l];
    const auto& t = tangent.layers_[l];
    Eigen::MatrixXd z = layer.weight * a;
    z.colwise() += layer.bias;
    Eigen::MatrixXd dz = t.weight * a + layer.weight * da;
    dz.colwise() += t.bias;
    if (l + 1 < layers_.size()) {
      const Eigen::MatrixXd mask = (z.array() > 0.0).cast<double>().matrix();
      a = z.cwiseMax(0.0);
      da = dz.cwiseProduct(mask);
    } else if (output_ == OutputActivation::Tanh) {
      const Eigen::ArrayXXd y = z.array().tanh();
      da = (dz.array() * (1.0 - y.square())).matrix();
    } else {
      da = dz;
    }
  }
  return da;
}

Eigen::VectorXd Mlp::flatten() const {
  Eigen::VectorXd flat(num_params());
  Eigen::Index k = 0;
  for (const auto& layer : layers_) {
    for (Eigen::Index r = 0; r < layer.weight.rows(); ++r)
      for (Eigen::Index c = 0; c < layer.weight.cols(); ++c) flat[k++] = layer.weight(r, c);
    for (Eigen::Index r = 0; r < layer.bias.size(); ++r) flat[k++] = layer.bias[r];
  }
  return flat;
}

void Mlp::assign(const Eigen::VectorXd& flat) {
  if (static_cast<std::size_t>(flat.size()) != num_params())
    throw std::domain_error("Mlp: flat parameter length mismatch");
  Eigen::Index k = 0;
  for (auto& layer : layers_) {
    for (Eigen::Index r = 0; r < layer.weight.rows(); ++r)
      for (Eigen::Index c = 0; c < layer.weight.cols(); ++c) layer.weight(r, c) = flat[k++];
    for (Eigen::Index r = 0; r < layer.bias.size(); ++r) layer.bias[r] = flat[k++];
  }
}

Mlp Mlp::unflatten(const Mlp& layout, const Eigen::VectorXd& flat) {
  Mlp net(layout.sizes_, layout.output_);
  net.assign(flat);
  return net;
}

bool Mlp::operator==(const Mlp& other) const {
  return sizes_ == other.sizes_ && output_ == other.output_ && flatten() == other.flatten();
}

double finite_diff_check(const Mlp& net, const Eigen::VectorXd& x, double step,
                         const Eigen::VectorXd* out_grad) {
  const Eigen::VectorXd g =
      out_grad ? *out_grad : Eigen::VectorXd::Ones(net.output_dim());
  const Eigen::VectorXd analytic = net.backward(x, g);
  const Eigen::VectorXd theta = net.flatten();
  Mlp probe = net;
  double worst = 0.0;
  for (Eigen::Index i = 0; i < theta.size(); ++i) {
    Eigen::VectorXd t = theta;
    t[i] = theta[i] + step;
    probe.assign(t);
    const double up = g.dot(probe.forward(x));
    t[i] = theta[i] - step;
    probe.assign(t);
    const double down = g.dot(probe.forward(x));
    const double numeric = (up - down) / (2.0 * step);
    const double scale = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-6});
    worst = std::max(worst, std::abs(analytic[i] - numeric) / scale);
  }
  return worst;
}

namespace io {

void write_u32(std::ostream& out, std::uint32_t v) {
  char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFFu);
  out.write(b, 4);
}

void write_u64(std::ostream& out, std::uint64_t v) {
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFFu);
  out.write(b, 8);
}

void write_f64(std::ostream& out, double v) { write_u64(out, std::bit_cast<std::uint64_t>(v)); }

std::uint32_t read_u32(std::istream& in) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4)) throw std::runtime_error("checkpoint truncated");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}

std::uint64_t read_u64(std::istream& in) {
  unsigned char b[8];
  if (!in.read(reinterpret_cast<char*>(b), 8)) throw std::runtime_error("checkpoint truncated");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

double read_f64(std::istream& in) { return std::bit_cast<double>(read_u64(in)); }

}  // namespace io

void save_mlp(std::ostream& out, const Mlp& net) {
  out.write(kMagic, sizeof kMagic);
  io::write_u32(out, kVersion);
  io::write_u32(out, static_cast<std::uint32_t>(net.output_activation()));
  io::write_u32(out, static_cast<std::uint32_t>(net.sizes().size()));
  for (int s : net.sizes()) io::write_u32(out, static_cast<std::uint32_t>(s));
  const Eigen::VectorXd flat = net.flatten();
  io::write_u64(out, static_cast<std::uint64_t>(flat.size()));
  for (Eigen::Index i = 0; i < flat.size(); ++i) io::write_f64(out, flat[i]);
}

Mlp load_mlp(std::istream& in) {
  char magic[8];
  if (!in.read(magic, 8) || std::memcmp(magic, kMagic, 8) != 0)
    throw std::runtime_error("not an MLP checkpoint");
  if (io::read_u32(in) != kVersion) throw std::runtime_error("unsupported MLP checkpoint version");
  const auto act = io::read_u32(in);
  if (act > 1) throw std::runtime_error("unknown output activation in checkpoint");
  const auto n = io::read_u32(in);
  std::vector<int> sizes(n);
  for (auto& s : sizes) s = static_cast<int>(io::read_u32(in));
  Mlp net(sizes, static_cast<OutputActivation>(act));
  const auto count = io::read_u64(in);
  if (count != net.num_params()) throw std::runtime_error("checkpoint parameter count mismatch");
  Eigen::VectorXd flat(static_cast<Eigen::Index>(count));
  for (Eigen::Index i = 0; i < flat.size(); ++i) flat[i] = io::read_f64(in);
  net.assign(flat);
  return net;
}

Adam::Adam(std::size_t n, double lr, double beta1, double beta2, double eps)
    : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps),
      m_(Eigen::VectorXd::Zero(static_cast<Eigen::Index>(n))),
      v_(Eigen::VectorXd::Zero(static_cast<Eigen::Index>(n))) {}

void Adam::step(Eigen::VectorXd& params, const Eigen::VectorXd& grad) {
  ++t_;
  m_ = beta1_ * m_ + (1.0 - beta1_) * grad;
  v_ = beta2_ * v_ + (1.0 - beta2_) * grad.cwiseProduct(grad);
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  params.array() -= lr_ * (m_.array() / c1) / ((v_.array() / c2).sqrt() + eps_);
}

MomentumSgd::MomentumSgd(std::size_t n, double lr, double momentum)
    : lr_(lr), momentum_(momentum), velocity_(Eigen::VectorXd::Zero(static_cast<Eigen::Index>(n))) {}

void MomentumSgd::step(Eigen::VectorXd& params, const Eigen::VectorXd& grad) {
  velocity_ = momentum_ * velocity_ - lr_ * grad;
  params += velocity_;
}

}  // namespace kirl
