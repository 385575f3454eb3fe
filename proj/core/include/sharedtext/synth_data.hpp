#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "sharedtext/detector.hpp"
#include "sharedtext/tensor.hpp"

namespace sharedtext {

// Binary glyph bitmaps, kGlyphRows x kGlyphCols, one per symbol.
class GlyphSet {
 public:
  static constexpr int kRows = 12;
  static constexpr int kCols = 8;
  using Bitmap = std::array<std::uint8_t, kRows * kCols>;

  // The first `size` symbols of A..Z (1 <= size <= 26).
  static GlyphSet builtin(int size);

  const std::string& symbols() const noexcept { return symbols_; }
  const Bitmap& bitmap(char symbol) const;
  int size() const noexcept { return static_cast<int>(symbols_.size()); }

 private:
  std::string symbols_;
  std::vector<Bitmap> bitmaps_;
};

struct GrayImage {
  int width = 0;
  int height = 0;
  std::vector<double> pixels;  // row-major, values in [0, 1]; ink is 1

  double at(int x, int y) const { return pixels[static_cast<std::size_t>(y) * width + x]; }
  Tensor to_tensor() const;  // [1, 1, height, width]
  friend bool operator==(const GrayImage&, const GrayImage&) = default;
};

struct Annotation {
  Box box;
  std::string text;

  friend bool operator==(const Annotation&, const Annotation&) = default;
};

struct Sample {
  GrayImage image;
  std::vector<Annotation> annotations;

  friend bool operator==(const Sample&, const Sample&) = default;
};

struct PageSpec {
  int width = 256;
  int height = 192;
  int lines_min = 2;
  int lines_max = 5;
  int text_min = 3;
  int text_max = 12;
  double scale_min = 1.5;
  double scale_max = 2.25;
  // Inter-glyph gap as a fraction of the glyph width.
  double gap_min = 0.1;
  double gap_max = 0.25;
  double noise = 0.03;  // std dev of additive Gaussian noise
  int margin = 8;
  int line_gap = 2;     // minimum vertical separation between lines
  int alphabet_size = 12;
  std::uint64_t seed = 1;

  void validate() const;
};

// Renders `text` with its top-left corner at (x, y). gaps[i] is the blank
// column count after glyph i (size text.size() - 1). Returns the line box.
Box render_text(GrayImage& image, const GlyphSet& glyphs, const std::string& text, int x, int y,
                double scale, std::span<const int> gaps);

// Glyph cell size in pixels at a given scale.
int glyph_width(double scale);
int glyph_height(double scale);

// Lines are stacked top to bottom with random spacing. Throws GenerationError
// when no sizing of the lines fits the page in 100 attempts.
Sample render_page(const PageSpec& spec, std::mt19937_64& rng);

// Generator for page `index` of `split`; streams of different splits and
// indices never share a seed.
std::mt19937_64 page_rng(std::uint64_t seed, int split, int index);

enum class Split { Train = 0, Val = 1, Test = 2 };
std::string split_name(Split s);

struct SplitFractions {
  double train = 0.8;
  double val = 0.1;  // test gets the remainder

  void validate() const;
};

struct ManifestEntry {
  std::string image_path;  // relative to the dataset directory
  std::vector<Annotation> annotations;
};

struct Manifest {
  std::vector<ManifestEntry> entries;
};

// Writes images/<split>/page_NNNNN.pgm and manifest.tsv under out_dir. The
// whole directory is staged and swapped in, so a failure leaves no partial
// output behind.
Manifest generate_dataset(const PageSpec& spec, int n, const SplitFractions& fractions,
                          const std::filesystem::path& out_dir);

// Counts per split for n samples.
std::array<int, 3> split_counts(int n, const SplitFractions& fractions);

// Manifest format: one line per image, tab-separated: the image path, then
// x, y, w, h, text for each annotated line.
std::string format_manifest(const Manifest& manifest);
Manifest parse_manifest(const std::string& text);
Manifest read_manifest(const std::filesystem::path& path);

// Binary PGM (P5, maxval 255). Pixel bytes are round(v * 255).
std::string encode_pgm(const GrayImage& image);
GrayImage decode_pgm(const std::string& bytes);
GrayImage read_pgm(const std::filesystem::path& path);

// Samples of one split from a generated dataset directory.
std::vector<Sample> load_split(const std::filesystem::path& dataset_dir, Split split);

}  // namespace sharedtext
