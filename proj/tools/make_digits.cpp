// Writes the procedural digits as IDX files:
//   <out>/train-images-idx3-ubyte, train-labels-idx1-ubyte,
//   <out>/t10k-images-idx3-ubyte, t10k-labels-idx1-ubyte

#include <filesystem>
#include <iostream>

#include "CLI11.hpp"
#include "chprune/dataset.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Generate procedural digit images in IDX format"};
  std::string out = "digits";
  std::size_t train = 10000, test = 2000, size = 16;
  std::uint64_t seed = 1;
  app.add_option("--out", out, "Output directory");
  app.add_option("--train", train, "Training images");
  app.add_option("--test", test, "Test images");
  app.add_option("--size", size, "Image side in pixels")->check(CLI::Range(8, 64));
  app.add_option("--seed", seed, "Generator seed");
  CLI11_PARSE(app, argc, argv);

  try {
    namespace fs = std::filesystem;
    fs::create_directories(out);
    const fs::path dir(out);
    chprune::DigitsSpec spec;
    spec.seed = seed;
    spec.image_size = size;
    spec.size = train;
    spec.stream = 0;
    chprune::write_idx(chprune::generate_digits(spec), dir / "train-images-idx3-ubyte",
                       dir / "train-labels-idx1-ubyte");
    spec.size = test;
    spec.stream = 1;
    chprune::write_idx(chprune::generate_digits(spec), dir / "t10k-images-idx3-ubyte",
                       dir / "t10k-labels-idx1-ubyte");
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
