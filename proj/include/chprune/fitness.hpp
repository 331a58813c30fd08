#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "chprune/chromosome.hpp"
#include "chprune/sampler.hpp"
#include "chprune/tensor.hpp"

namespace chprune {

// H = (1/N) sum_i X_i X_i^T over the volumes of one layer, shared by all of
// its filters.
struct HessianCache {
  std::string layer_id;
  std::size_t channels = 0;
  std::size_t kernel = 0;
  std::size_t samples = 0;
  Tensor matrix;  // D x D, D = channels * kernel^2

  std::size_t dim() const { return channels * kernel * kernel; }
};

HessianCache compute_hessian(const VolumeSet& vs);

// Second-order estimate 0.5 * sum_f dW_f^T H dW_f with dW_f = -W_f on the
// positions of pruned channels. `weight` is F x C x K x K (or F x D).
double taylor_error(const HessianCache& h, const Tensor& weight, const Chromosome& mask);

// Mean over volumes of the squared pre-activation difference between the
// masked layer and the recorded outputs, summed over filters.
double direct_error(const VolumeSet& vs, const Tensor& weight, const Tensor* bias,
                    const Chromosome& mask);

// Roulette fitness: (E_max - E_n) + 0.01 (E_max - E_min); all ones when the
// errors are equal.
std::vector<double> population_fitness(std::span<const double> errors);

// taylor_error reduced to a C x C channel interaction matrix B, so that
// error(mask) = 0.5 * sum over pruned pairs (c, c') of B[c][c'].
class TaylorEvaluator {
 public:
  TaylorEvaluator(const HessianCache& h, const Tensor& weight);

  std::size_t channels() const { return channels_; }
  const Tensor& interaction() const { return interaction_; }
  double operator()(const Chromosome& mask) const;

 private:
  std::size_t channels_ = 0;
  Tensor interaction_;
};

void save_hessian(const HessianCache& h, const std::filesystem::path& dir);
HessianCache load_hessian(const std::filesystem::path& dir);

}  // namespace chprune
