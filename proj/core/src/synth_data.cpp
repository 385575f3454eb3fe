#include "sharedtext/synth_data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "sharedtext/errors.hpp"

namespace sharedtext {
namespace fs = std::filesystem;
namespace {

// 5x7 source font. Every glyph inks its first and last row and column and
// every column has ink, so rendered lines are tight and segmentable.
constexpr const char* kFont[26][7] = {
    {".###.", "#...#", "#...#", "#####", "#...#", "#...#", "#...#"},  // A
    {"####.", "#...#", "#...#", "####.", "#...#", "#...#", "####."},  // B
    {".####", "#....", "#....", "#....", "#....", "#....", ".####"},  // C
    {"####.", "#...#", "#...#", "#...#", "#...#", "#...#", "####."},  // D
    {"#####", "#....", "#....", "####.", "#....", "#....", "#####"},  // E
    {"#####", "#....", "#....", "####.", "#....", "#....", "#...."},  // F
    {".####", "#....", "#....", "#..##", "#...#", "#...#", ".####"},  // G
    {"#...#", "#...#", "#...#", "#####", "#...#", "#...#", "#...#"},  // H
    {"#####", "..#..", "..#..", "..#..", "..#..", "..#..", "#####"},  // I
    {"#####", "...#.", "...#.", "...#.", "#..#.", "#..#.", ".##.."},  // J
    {"#...#", "#..#.", "#.#..", "##...", "#.#..", "#..#.", "#...#"},  // K
    {"#....", "#....", "#....", "#....", "#....", "#....", "#####"},  // L
    {"#...#", "##.##", "#.#.#", "#.#.#", "#...#", "#...#", "#...#"},  // M
    {"#...#", "##..#", "#.#.#", "#..##", "#...#", "#...#", "#...#"},  // N
    {".###.", "#...#", "#...#", "#...#", "#...#", "#...#", ".###."},  // O
    {"####.", "#...#", "#...#", "####.", "#....", "#....", "#...."},  // P
    {".###.", "#...#", "#...#", "#...#", "#.#.#", "#..#.", ".##.#"},  // Q
    {"####.", "#...#", "#...#", "####.", "#.#..", "#..#.", "#...#"},  // R
    {".####", "#....", "#....", ".###.", "....#", "....#", "####."},  // S
    {"#####", "..#..", "..#..", "..#..", "..#..", "..#..", "..#.."},  // T
    {"#...#", "#...#", "#...#", "#...#", "#...#", "#...#", ".###."},  // U
    {"#...#", "#...#", "#...#", "#...#", "#...#", ".#.#.", "..#.."},  // V
    {"#...#", "#...#", "#...#", "#.#.#", "#.#.#", "##.##", "#...#"},  // W
    {"#...#", "#...#", ".#.#.", "..#..", ".#.#.", "#...#", "#...#"},  // X
    {"#...#", "#...#", ".#.#.", "..#..", "..#..", "..#..", "..#.."},  // Y
    {"#####", "....#", "...#.", "..#..", ".#...", "#....", "#####"},  // Z
};

constexpr int kPlacementAttempts = 100;

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  if (in.bad()) throw IoError("read failed: " + path.string());
  return ss.str();
}

void write_file(const fs::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot create " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  out.close();
  if (!out) throw IoError("write failed: " + path.string());
}

std::string format_number(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

double parse_number(const std::string& field, std::size_t line) {
  try {
    std::size_t used = 0;
    const double v = std::stod(field, &used);
    if (used != field.size() || !std::isfinite(v)) throw FormatError("");
    return v;
  } catch (const std::exception&) {
    throw FormatError("manifest line " + std::to_string(line) + ": bad number '" + field + "'");
  }
}

double quantize(double v) {
  return std::round(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0;
}

}  // namespace

GlyphSet GlyphSet::builtin(int size) {
  if (size < 1 || size > 26) throw ConfigError("glyphs: alphabet size must be in 1..26");
  GlyphSet set;
  for (int k = 0; k < size; ++k) {
    set.symbols_.push_back(static_cast<char>('A' + k));
    Bitmap bm{};
    for (int r = 0; r < kRows; ++r) {
      for (int c = 0; c < kCols; ++c) {
        bm[r * kCols + c] = kFont[k][r * 7 / kRows][c * 5 / kCols] == '#' ? 1 : 0;
      }
    }
    set.bitmaps_.push_back(bm);
  }
  return set;
}

const GlyphSet::Bitmap& GlyphSet::bitmap(char symbol) const {
  const auto pos = symbols_.find(symbol);
  if (pos == std::string::npos) throw LookupError(std::string("glyphs: no glyph for '") + symbol + "'");
  return bitmaps_[pos];
}

Tensor GrayImage::to_tensor() const {
  return Tensor({1, 1, height, width}, pixels);
}

void PageSpec::validate() const {
  if (width < 1 || height < 1) throw ConfigError("page: width and height must be positive");
  if (lines_min < 1 || lines_max < lines_min) throw ConfigError("page: need 1 <= lines_min <= lines_max");
  if (text_min < 1 || text_max < text_min) throw ConfigError("page: need 1 <= text_min <= text_max");
  if (!(scale_min >= 1.0) || !(scale_max >= scale_min)) {
    throw ConfigError("page: need 1 <= scale_min <= scale_max");
  }
  if (!(gap_min >= 0.0) || !(gap_max >= gap_min)) throw ConfigError("page: need 0 <= gap_min <= gap_max");
  if (!(noise >= 0.0)) throw ConfigError("page: noise must be >= 0");
  if (margin < 0 || line_gap < 0) throw ConfigError("page: margin and line_gap must be >= 0");
  if (alphabet_size < 1 || alphabet_size > 26) throw ConfigError("page: alphabet_size must be in 1..26");
}

int glyph_width(double scale) { return std::max(1, static_cast<int>(std::lround(GlyphSet::kCols * scale))); }
int glyph_height(double scale) { return std::max(1, static_cast<int>(std::lround(GlyphSet::kRows * scale))); }

Box render_text(GrayImage& image, const GlyphSet& glyphs, const std::string& text, int x, int y,
                double scale, std::span<const int> gaps) {
  if (text.empty()) throw ConfigError("render_text: empty text");
  if (gaps.size() + 1 != text.size()) throw ConfigError("render_text: need one gap between each glyph pair");
  const int gw = glyph_width(scale), gh = glyph_height(scale);
  int width = gw * static_cast<int>(text.size());
  for (int gap : gaps) {
    if (gap < 0) throw ConfigError("render_text: negative gap");
    width += gap;
  }
  if (x < 0 || y < 0 || x + width > image.width || y + gh > image.height) {
    throw GenerationError("render_text: line does not fit the page");
  }
  int cx = x;
  for (std::size_t k = 0; k < text.size(); ++k) {
    const GlyphSet::Bitmap& bm = glyphs.bitmap(text[k]);
    for (int r = 0; r < gh; ++r) {
      const int sr = r * GlyphSet::kRows / gh;
      for (int c = 0; c < gw; ++c) {
        const int sc = c * GlyphSet::kCols / gw;
        if (bm[sr * GlyphSet::kCols + sc]) {
          image.pixels[static_cast<std::size_t>(y + r) * image.width + cx + c] = 1.0;
        }
      }
    }
    cx += gw + (k < gaps.size() ? gaps[k] : 0);
  }
  return {static_cast<double>(x), static_cast<double>(y), static_cast<double>(width),
          static_cast<double>(gh)};
}

Sample render_page(const PageSpec& spec, std::mt19937_64& rng) {
  spec.validate();
  const GlyphSet glyphs = GlyphSet::builtin(spec.alphabet_size);
  Sample sample;
  sample.image = {spec.width, spec.height,
                  std::vector<double>(static_cast<std::size_t>(spec.width) * spec.height, 0.0)};

  std::uniform_int_distribution<int> n_lines(spec.lines_min, spec.lines_max);
  std::uniform_int_distribution<int> n_chars(spec.text_min, spec.text_max);
  std::uniform_int_distribution<int> pick_symbol(0, glyphs.size() - 1);
  std::uniform_real_distribution<double> pick_scale(spec.scale_min, spec.scale_max);
  std::uniform_real_distribution<double> pick_gap(spec.gap_min, spec.gap_max);

  struct Line {
    std::string text;
    std::vector<int> gaps;
    double scale = 1.0;
    int width = 0;
    int height = 0;
  };
  const int lines = n_lines(rng);
  const int usable_h = spec.height - 2 * spec.margin;
  const int usable_w = spec.width - 2 * spec.margin;
  // Lines are sized first, then stacked top to bottom with the vertical
  // slack spread at random, so any set of lines that fits gets placed.
  std::vector<Line> plan;
  int stacked = 0;
  bool fits = false;
  for (int attempt = 0; attempt < kPlacementAttempts && !fits; ++attempt) {
    plan.assign(lines, {});
    stacked = spec.line_gap * (lines - 1);
    bool ok = true;
    for (Line& l : plan) {
      bool line_ok = false;
      for (int tries = 0; tries < kPlacementAttempts && !line_ok; ++tries) {
        l = {};
        l.scale = pick_scale(rng);
        const int len = n_chars(rng);
        const int gw = glyph_width(l.scale);
        l.height = glyph_height(l.scale);
        for (int k = 0; k < len; ++k) {
          l.text.push_back(glyphs.symbols()[pick_symbol(rng)]);
          l.width += gw;
          if (k + 1 < len) {
            l.gaps.push_back(std::max(1, static_cast<int>(std::lround(pick_gap(rng) * gw))));
            l.width += l.gaps.back();
          }
        }
        line_ok = l.width <= usable_w;
      }
      ok = ok && line_ok;
      stacked += l.height;
    }
    fits = ok && stacked <= usable_h;
  }
  if (!fits) {
    throw GenerationError("page: could not lay out " + std::to_string(lines) + " lines in " +
                          std::to_string(kPlacementAttempts) + " attempts");
  }

  // Random split of the slack into lines + 1 non-negative parts.
  const int slack = usable_h - stacked;
  std::uniform_int_distribution<int> cut(0, slack);
  std::vector<int> cuts{0, slack};
  for (int i = 0; i < lines; ++i) cuts.push_back(cut(rng));
  std::sort(cuts.begin(), cuts.end());
  int y = spec.margin;
  for (int i = 0; i < lines; ++i) {
    const Line& l = plan[i];
    y += cuts[i + 1] - cuts[i];
    const int x = std::uniform_int_distribution<int>(spec.margin, spec.width - spec.margin - l.width)(rng);
    const Box box = render_text(sample.image, glyphs, l.text, x, y, l.scale, l.gaps);
    sample.annotations.push_back({box, l.text});
    y += l.height + spec.line_gap;
  }

  std::normal_distribution<double> noise(0.0, spec.noise > 0.0 ? spec.noise : 1.0);
  for (double& p : sample.image.pixels) {
    if (spec.noise > 0.0) p += noise(rng);
    p = quantize(p);
  }
  return sample;
}

std::mt19937_64 page_rng(std::uint64_t seed, int split, int index) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(split), static_cast<std::uint32_t>(index)};
  return std::mt19937_64(seq);
}

std::string split_name(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
  }
  return "unknown";
}

void SplitFractions::validate() const {
  if (!(train >= 0.0) || !(val >= 0.0) || train + val > 1.0 + 1e-12) {
    throw ConfigError("split: fractions must be >= 0 and sum to at most 1");
  }
}

std::array<int, 3> split_counts(int n, const SplitFractions& f) {
  f.validate();
  if (n < 0) throw ConfigError("split: negative sample count");
  const int train = static_cast<int>(std::lround(n * f.train));
  const int val = std::min(n - train, static_cast<int>(std::lround(n * f.val)));
  return {train, val, n - train - val};
}

std::string format_manifest(const Manifest& manifest) {
  std::string out;
  for (const ManifestEntry& e : manifest.entries) {
    out += e.image_path;
    for (const Annotation& a : e.annotations) {
      if (a.text.find_first_of("\t\n") != std::string::npos) {
        throw FormatError("manifest: text may not contain tabs or newlines");
      }
      out += '\t' + format_number(a.box.x) + '\t' + format_number(a.box.y) + '\t' +
             format_number(a.box.w) + '\t' + format_number(a.box.h) + '\t' + a.text;
    }
    out += '\n';
  }
  return out;
}

Manifest parse_manifest(const std::string& text) {
  Manifest m;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::size_t start = 0;
    while (true) {
      const auto tab = line.find('\t', start);
      fields.push_back(line.substr(start, tab - start));
      if (tab == std::string::npos) break;
      start = tab + 1;
    }
    if ((fields.size() - 1) % 5 != 0 || fields[0].empty()) {
      throw FormatError("manifest line " + std::to_string(line_no) +
                        ": expected a path followed by groups of x, y, w, h, text");
    }
    ManifestEntry e;
    e.image_path = fields[0];
    for (std::size_t i = 1; i < fields.size(); i += 5) {
      Annotation a;
      a.box = {parse_number(fields[i], line_no), parse_number(fields[i + 1], line_no),
               parse_number(fields[i + 2], line_no), parse_number(fields[i + 3], line_no)};
      a.text = fields[i + 4];
      e.annotations.push_back(std::move(a));
    }
    m.entries.push_back(std::move(e));
  }
  return m;
}

Manifest read_manifest(const fs::path& path) { return parse_manifest(read_file(path)); }

std::string encode_pgm(const GrayImage& image) {
  if (image.width < 1 || image.height < 1 ||
      image.pixels.size() != static_cast<std::size_t>(image.width) * image.height) {
    throw DimensionError("pgm: image size does not match its pixels");
  }
  std::string out = "P5\n" + std::to_string(image.width) + " " + std::to_string(image.height) + "\n255\n";
  for (double v : image.pixels) {
    out.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0))));
  }
  return out;
}

GrayImage decode_pgm(const std::string& bytes) {
  std::istringstream in(bytes);
  std::string magic;
  int w = 0, h = 0, maxval = 0;
  in >> magic >> w >> h >> maxval;
  if (!in || magic != "P5" || w < 1 || h < 1 || maxval != 255) {
    throw FormatError("pgm: expected a binary P5 header with maxval 255");
  }
  in.get();  // single whitespace before the raster
  const auto offset = static_cast<std::size_t>(in.tellg());
  const std::size_t count = static_cast<std::size_t>(w) * h;
  if (bytes.size() - offset != count) throw CorruptionError("pgm: raster size does not match header");
  GrayImage img{w, h, std::vector<double>(count)};
  for (std::size_t i = 0; i < count; ++i) {
    img.pixels[i] = static_cast<unsigned char>(bytes[offset + i]) / 255.0;
  }
  return img;
}

GrayImage read_pgm(const fs::path& path) { return decode_pgm(read_file(path)); }

Manifest generate_dataset(const PageSpec& spec, int n, const SplitFractions& fractions,
                          const fs::path& out_dir) {
  spec.validate();
  const auto counts = split_counts(n, fractions);
  const fs::path staging = out_dir.string() + ".staging";
  const fs::path retired = out_dir.string() + ".old";
  std::error_code ec;
  fs::remove_all(staging, ec);
  try {
    Manifest manifest;
    for (int s = 0; s < 3; ++s) {
      const Split split = static_cast<Split>(s);
      if (counts[s] == 0) continue;
      const fs::path dir = fs::path("images") / split_name(split);
      fs::create_directories(staging / dir);
      for (int i = 0; i < counts[s]; ++i) {
        auto rng = page_rng(spec.seed, s, i);
        Sample sample = render_page(spec, rng);
        char name[32];
        std::snprintf(name, sizeof name, "page_%05d.pgm", i);
        write_file(staging / dir / name, encode_pgm(sample.image));
        manifest.entries.push_back({(dir / name).generic_string(), std::move(sample.annotations)});
      }
    }
    write_file(staging / "manifest.tsv", format_manifest(manifest));
    fs::remove_all(retired, ec);
    if (fs::exists(out_dir)) fs::rename(out_dir, retired);
    fs::rename(staging, out_dir);
    fs::remove_all(retired, ec);
    return manifest;
  } catch (const fs::filesystem_error& e) {
    fs::remove_all(staging, ec);
    throw IoError(std::string("dataset: ") + e.what());
  } catch (...) {
    fs::remove_all(staging, ec);
    throw;
  }
}

std::vector<Sample> load_split(const fs::path& dataset_dir, Split split) {
  const Manifest m = read_manifest(dataset_dir / "manifest.tsv");
  const std::string prefix = "images/" + split_name(split) + "/";
  std::vector<Sample> out;
  for (const ManifestEntry& e : m.entries) {
    if (e.image_path.rfind(prefix, 0) != 0) continue;
    out.push_back({read_pgm(dataset_dir / e.image_path), e.annotations});
  }
  return out;
}

}  // namespace sharedtext
