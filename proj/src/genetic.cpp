#include "chprune/genetic.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <thread>

#include "chprune/errors.hpp"

namespace chprune {

void GAConfig::validate() const {
  if (population < 2) throw ConfigError("GA population must be at least 2");
  if (!(crossover_prob >= 0.0 && crossover_prob <= 1.0)) {
    throw ConfigError("crossover probability must lie in [0, 1]");
  }
  if (!(mutation_prob >= 0.0 && mutation_prob <= 1.0)) {
    throw ConfigError("mutation probability must lie in [0, 1]");
  }
  if (elitism > population) throw ConfigError("elitism count exceeds population size");
  if (max_workers == 0) throw ConfigError("max_workers must be at least 1");
}

std::size_t GAConfig::iterations_for(std::size_t channels) const {
  if (max_iterations > 0) return max_iterations;
  return std::max<std::size_t>(10 * channels, 50);
}

std::size_t kept_channels(std::size_t channels, double rate) {
  if (!(rate >= 0.0 && rate < 1.0)) throw ConfigError("compression rate must lie in [0, 1)");
  const auto k = static_cast<std::size_t>(std::lround((1.0 - rate) * static_cast<double>(channels)));
  if (k == 0) throw ConfigError("compression rate would remove every channel");
  return std::min(k, channels);
}

Chromosome bernoulli_chromosome(std::size_t length, double p, Rng& rng) {
  Chromosome c(length, 0);
  for (auto& b : c.bits) b = rng.bernoulli(p) ? 1 : 0;
  return c;
}

Population init_population(std::size_t channels, double keep_fraction, std::size_t size, Rng& rng) {
  if (channels == 0) throw ConfigError("layer has no channels");
  if (!(keep_fraction > 0.0 && keep_fraction <= 1.0)) {
    throw ConfigError("keep fraction must lie in (0, 1]");
  }
  const std::size_t k = kept_channels(channels, 1.0 - keep_fraction);
  Population pop;
  pop.individuals.reserve(size);
  for (std::size_t i = 0; i < size; ++i) {
    pop.individuals.push_back(repair(bernoulli_chromosome(channels, keep_fraction, rng), k, rng));
  }
  return pop;
}

Chromosome repair(Chromosome chrom, std::size_t k, Rng& rng) {
  if (k == 0 || k > chrom.size()) throw ConfigError("repair target must lie in [1, C]");
  const std::size_t ones = chrom.popcount();
  if (ones == k) return chrom;
  const std::uint8_t from = ones > k ? 1 : 0;
  std::vector<std::size_t> candidates;
  for (std::size_t i = 0; i < chrom.size(); ++i) {
    if (chrom[i] == from) candidates.push_back(i);
  }
  const std::size_t flips = ones > k ? ones - k : k - ones;
  for (std::size_t pick : rng.sample_without_replacement(candidates.size(), flips)) {
    chrom[candidates[pick]] = from ? 0 : 1;
  }
  return chrom;
}

std::size_t roulette_select(std::span<const double> fitness, Rng& rng) {
  if (fitness.empty()) throw ConfigError("roulette over an empty population");
  double total = 0.0;
  for (double f : fitness) {
    if (!(f >= 0.0) || !std::isfinite(f)) throw NumericError("roulette fitness must be finite and nonnegative");
    total += f;
  }
  if (total == 0.0) return static_cast<std::size_t>(rng.below(fitness.size()));
  const double r = rng.uniform() * total;
  double acc = 0.0;
  for (std::size_t i = 0; i < fitness.size(); ++i) {
    acc += fitness[i];
    if (r < acc) return i;
  }
  // Rounding can leave r just past the last partial sum.
  for (std::size_t i = fitness.size(); i-- > 0;) {
    if (fitness[i] > 0.0) return i;
  }
  return fitness.size() - 1;
}

Chromosome splice(const Chromosome& a, const Chromosome& b, std::size_t cut) {
  if (a.size() != b.size()) throw ShapeError("crossover parents differ in length");
  if (cut > a.size()) throw ShapeError("crossover cut past the chromosome end");
  Chromosome child = a;
  std::copy(b.bits.begin() + static_cast<std::ptrdiff_t>(cut), b.bits.end(),
            child.bits.begin() + static_cast<std::ptrdiff_t>(cut));
  return child;
}

Chromosome crossover(const Chromosome& a, const Chromosome& b, double p_c, Rng& rng) {
  if (a.size() != b.size()) throw ShapeError("crossover parents differ in length");
  if (!rng.bernoulli(p_c)) return a;
  return splice(a, b, static_cast<std::size_t>(rng.below(a.size())));
}

Chromosome mutate(const Chromosome& chrom, double p_m, Rng& rng) {
  if (chrom.size() == 0) throw ShapeError("cannot mutate an empty chromosome");
  Chromosome out = chrom;
  const auto bit = static_cast<std::size_t>(rng.below(chrom.size()));
  if (rng.bernoulli(p_m)) out[bit] ^= 1;
  return out;
}

namespace {

std::vector<double> evaluate_all(const std::vector<Chromosome>& pop, const ErrorFn& error,
                                 std::size_t workers) {
  std::vector<double> out(pop.size());
  workers = std::min(workers, pop.size());
  if (workers <= 1) {
    for (std::size_t i = 0; i < pop.size(); ++i) out[i] = error(pop[i]);
    return out;
  }
  std::vector<std::exception_ptr> errors(workers);
  {
    std::vector<std::jthread> threads;
    for (std::size_t w = 0; w < workers; ++w) {
      threads.emplace_back([&, w] {
        try {
          for (std::size_t i = w; i < pop.size(); i += workers) out[i] = error(pop[i]);
        } catch (...) {
          errors[w] = std::current_exception();
        }
      });
    }
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return out;
}

}  // namespace

EvolveResult evolve(std::size_t channels, double rate, const ErrorFn& error, const GAConfig& cfg,
                    Rng& rng) {
  cfg.validate();
  const std::size_t k = kept_channels(channels, rate);
  const std::size_t iterations = cfg.iterations_for(channels);

  Population pop = init_population(channels, static_cast<double>(k) / static_cast<double>(channels),
                                   cfg.population, rng);
  EvolveResult result;
  result.kept = k;
  bool have_best = false;

  for (std::size_t gen = 0; gen < iterations; ++gen) {
    pop.generation = gen;
    const std::vector<double> errs = evaluate_all(pop.individuals, error, cfg.max_workers);
    std::vector<std::size_t> order(errs.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return errs[a] < errs[b]; });

    const std::size_t champ = order.front();
    if (!have_best || errs[champ] < result.best_error) {
      result.best = pop.individuals[champ];
      result.best_error = errs[champ];
      have_best = true;
    }
    const double mean = std::accumulate(errs.begin(), errs.end(), 0.0) / static_cast<double>(errs.size());
    result.log.push_back({gen, errs[champ], mean, pop.individuals[champ].hex()});

    // Nothing to search when every channel is kept.
    if (k == channels || gen + 1 == iterations) break;

    const std::vector<double> fit = population_fitness(errs);
    std::vector<Chromosome> next;
    next.reserve(cfg.population);
    for (std::size_t e = 0; e < cfg.elitism; ++e) next.push_back(pop.individuals[order[e]]);
    while (next.size() < cfg.population) {
      const Chromosome& a = pop.individuals[roulette_select(fit, rng)];
      Chromosome child;
      if (rng.bernoulli(cfg.crossover_prob)) {
        const Chromosome& b = pop.individuals[roulette_select(fit, rng)];
        child = splice(a, b, static_cast<std::size_t>(rng.below(channels)));
      } else {
        child = mutate(a, cfg.mutation_prob, rng);
      }
      next.push_back(repair(std::move(child), k, rng));
    }
    pop.individuals = std::move(next);
  }
  return result;
}

EvolveResult evolve(const HessianCache& h, const Tensor& weight, double rate, const GAConfig& cfg,
                    Rng& rng) {
  const TaylorEvaluator eval(h, weight);
  return evolve(h.channels, rate, [&eval](const Chromosome& m) { return eval(m); }, cfg, rng);
}

std::string run_log_csv(const EvolveResult& r) {
  std::ostringstream out;
  out.precision(17);
  out << "generation,best_error,mean_error,best_mask\n";
  for (const auto& g : r.log) {
    out << g.generation << ',' << g.best_error << ',' << g.mean_error << ',' << g.best_mask_hex << '\n';
  }
  return out.str();
}

nlohmann::json mask_to_json(const std::string& layer_id, const Chromosome& mask) {
  return {{"layer_id", layer_id}, {"k", mask.popcount()}, {"mask", mask.bits}};
}

Chromosome mask_from_json(const nlohmann::json& j) {
  Chromosome c(j.at("mask").get<std::vector<std::uint8_t>>());
  for (auto b : c.bits) {
    if (b > 1) throw FormatError("mask entries must be 0 or 1");
  }
  if (j.contains("k") && j.at("k").get<std::size_t>() != c.popcount()) {
    throw FormatError("mask popcount does not match its recorded k");
  }
  return c;
}

}  // namespace chprune
