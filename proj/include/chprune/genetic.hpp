#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "chprune/chromosome.hpp"
#include "chprune/fitness.hpp"
#include "chprune/rng.hpp"
#include "json.hpp"

namespace chprune {

// Randomness comes from the Rng handed to evolve(), seeded by the run.
struct GAConfig {
  std::size_t population = 20;
  double crossover_prob = 0.1;
  double mutation_prob = 0.1;
  std::size_t max_iterations = 0;  // 0: 10 x channels, at least 50
  std::size_t elitism = 1;
  std::size_t max_workers = 1;     // threads used for fitness evaluation

  void validate() const;
  std::size_t iterations_for(std::size_t channels) const;
};

struct Population {
  std::vector<Chromosome> individuals;
  std::size_t generation = 0;
};

// Kept-channel count for a layer of `channels` at compression rate r.
std::size_t kept_channels(std::size_t channels, double rate);

// Each bit i.i.d. Bernoulli(p), without repair.
Chromosome bernoulli_chromosome(std::size_t length, double p, Rng& rng);

// Bernoulli(p) individuals, each repaired to round(p * C) ones.
Population init_population(std::size_t channels, double keep_fraction, std::size_t size, Rng& rng);

// Flips the minimal number of uniformly chosen bits to reach popcount K.
Chromosome repair(Chromosome chrom, std::size_t k, Rng& rng);

// Index drawn with probability fitness_n / sum; uniform if the sum is zero.
std::size_t roulette_select(std::span<const double> fitness, Rng& rng);

// a[0, cut) followed by b[cut, l).
Chromosome splice(const Chromosome& a, const Chromosome& b, std::size_t cut);

// With probability p_c, splice at a uniform cut in [0, l); else a copy of a.
Chromosome crossover(const Chromosome& a, const Chromosome& b, double p_c, Rng& rng);

// Picks one bit uniformly and inverts it with probability p_m.
Chromosome mutate(const Chromosome& chrom, double p_m, Rng& rng);

struct GenerationLog {
  std::size_t generation = 0;
  double best_error = 0.0;  // best of this generation
  double mean_error = 0.0;
  std::string best_mask_hex;
};

struct EvolveResult {
  Chromosome best;
  double best_error = 0.0;
  std::size_t kept = 0;
  std::vector<GenerationLog> log;
};

using ErrorFn = std::function<double(const Chromosome&)>;

// Generic loop over an arbitrary thread-safe error function.
EvolveResult evolve(std::size_t channels, double rate, const ErrorFn& error, const GAConfig& cfg,
                    Rng& rng);

// Layer form: minimises the second-order error of (H, W).
EvolveResult evolve(const HessianCache& h, const Tensor& weight, double rate, const GAConfig& cfg,
                    Rng& rng);

// "generation,best_error,mean_error,best_mask" rows.
std::string run_log_csv(const EvolveResult& r);

nlohmann::json mask_to_json(const std::string& layer_id, const Chromosome& mask);
Chromosome mask_from_json(const nlohmann::json& j);

}  // namespace chprune
