#pragma once

#include <cstdint>
#include <iosfwd>
#include <vector>

#include <Eigen/Dense>

#include "kirl/traffic_net.hpp"

namespace kirl {

enum class OutputActivation : std::uint32_t { Identity = 0, Tanh = 1 };

/// Fully connected network with ReLU hidden layers.
///
/// Batched calls take one sample per column. Parameters flatten layer by
/// layer: the weight matrix in row-major order followed by the bias.
class Mlp {
 public:
  struct Layer {
    Eigen::MatrixXd weight;  // out x in
    Eigen::VectorXd bias;
  };

  struct Cache {
    std::vector<Eigen::MatrixXd> inputs;  // input to each layer
    std::vector<Eigen::MatrixXd> pre;     // pre-activation of each layer
    Eigen::MatrixXd output;
  };

  Mlp() = default;
  /// All parameters zero.
  Mlp(std::vector<int> sizes, OutputActivation output);

  /// Orthogonal hidden layers with ReLU gain; the output layer uses `output_gain`
  /// (zero gives an all-zero output layer).
  static Mlp initialized(std::vector<int> sizes, OutputActivation output, Rng& rng,
                         double output_gain);

  int input_dim() const { return sizes_.front(); }
  int output_dim() const { return sizes_.back(); }
  const std::vector<int>& sizes() const { return sizes_; }
  OutputActivation output_activation() const { return output_; }
  std::size_t num_params() const;
  std::vector<Layer>& layers() { return layers_; }
  const std::vector<Layer>& layers() const { return layers_; }

  Eigen::VectorXd forward(const Eigen::VectorXd& x) const;
  Eigen::MatrixXd forward_batch(const Eigen::MatrixXd& x, Cache* cache = nullptr) const;

  /// Gradient of sum(out_grad .* output) with respect to the flat parameters.
  Eigen::VectorXd backward(const Eigen::VectorXd& x, const Eigen::VectorXd& out_grad) const;
  /// Batched backward, summed over samples.
  Eigen::VectorXd backward_batch(const Eigen::MatrixXd& x, const Eigen::MatrixXd& out_grad) const;
  Eigen::VectorXd backward_cached(const Cache& cache, const Eigen::MatrixXd& out_grad) const;

  /// Directional derivative of every output along a flat parameter direction.
  Eigen::MatrixXd jvp_batch(const Eigen::MatrixXd& x, const Eigen::VectorXd& direction) const;

  Eigen::VectorXd flatten() const;
  void assign(const Eigen::VectorXd& flat);
  static Mlp unflatten(const Mlp& layout, const Eigen::VectorXd& flat);

  bool operator==(const Mlp& other) const;

 private:
  void check_input(Eigen::Index rows) const;

  std::vector<int> sizes_;
  OutputActivation output_ = OutputActivation::Identity;
  std::vector<Layer> layers_;
};

/// Max element-wise relative error between backward() and central finite
/// differences of sum(out_grad .* forward(x)). Defaults to an all-ones out_grad.
double finite_diff_check(const Mlp& net, const Eigen::VectorXd& x, double step,
                         const Eigen::VectorXd* out_grad = nullptr);

/// Binary checkpoint, little-endian:
///   "KIRLMLP\0" | u32 version(1) | u32 activation | u32 n_sizes | u32 sizes[n]
///   | u64 n_params | f64 params[n_params]
void save_mlp(std::ostream& out, const Mlp& net);
Mlp load_mlp(std::istream& in);

class Adam {
 public:
  explicit Adam(std::size_t n, double lr = 1e-3, double beta1 = 0.9, double beta2 = 0.999,
                double eps = 1e-8);
  void step(Eigen::VectorXd& params, const Eigen::VectorXd& grad);
  double learning_rate() const { return lr_; }

 private:
  double lr_, beta1_, beta2_, eps_;
  Eigen::VectorXd m_, v_;
  long t_ = 0;
};

class MomentumSgd {
 public:
  explicit MomentumSgd(std::size_t n, double lr = 1e-3, double momentum = 0.9);
  void step(Eigen::VectorXd& params, const Eigen::VectorXd& grad);

 private:
  double lr_, momentum_;
  Eigen::VectorXd velocity_;
};

// Little-endian primitives shared by the checkpoint writers.
namespace io {
void write_u32(std::ostream& out, std::uint32_t v);
void write_u64(std::ostream& out, std::uint64_t v);
void write_f64(std::ostream& out, double v);
std::uint32_t read_u32(std::istream& in);
std::uint64_t read_u64(std::istream& in);
double read_f64(std::istream& in);
}  // namespace io

}  // namespace kirl
