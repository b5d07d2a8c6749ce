#include "mlkd/data.hpp"

#include "mlkd/config_io.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <fstream>

#include <json.hpp>

namespace mlkd {

namespace {

constexpr int64_t kCell = 8;
constexpr float kBackground = 0.08f;

struct Color {
  const char* name;
  std::array<float, 3> rgb;
};

const std::array<Color, 4> kPalette = {{
    {"red", {0.90f, 0.15f, 0.15f}},
    {"green", {0.15f, 0.85f, 0.20f}},
    {"blue", {0.20f, 0.40f, 0.95f}},
    {"yellow", {0.95f, 0.85f, 0.15f}},
}};

// 8x8 stencils; dy, dx in [0, 8)
bool glyph_disc(int64_t dy, int64_t dx) {
  double a = dy - 3.5, b = dx - 3.5;
  return a * a + b * b <= 3.2 * 3.2;
}
bool glyph_triangle(int64_t dy, int64_t dx) {
  if (dy < 1 || dy > 6) return false;
  return std::abs(dx - 3.5) <= (dy - 0.5) * 0.55;
}
bool glyph_ring(int64_t dy, int64_t dx) {
  double a = dy - 3.5, b = dx - 3.5;
  double r2 = a * a + b * b;
  return r2 <= 3.4 * 3.4 && r2 >= 1.8 * 1.8;
}
bool glyph_cross(int64_t dy, int64_t dx) {
  if (dy < 1 || dy > 6 || dx < 1 || dx > 6) return false;
  return std::abs(dy - dx) <= 0.9 || std::abs(dy + dx - 7) <= 0.9;
}

using GlyphFn = bool (*)(int64_t, int64_t);
const std::array<std::pair<const char*, GlyphFn>, 4> kGlyphs = {{
    {"disc", glyph_disc},
    {"triangle", glyph_triangle},
    {"ring", glyph_ring},
    {"cross", glyph_cross},
}};

int64_t color_index(int64_t k) { return k % static_cast<int64_t>(kPalette.size()); }
int64_t glyph_index(int64_t k) {
  return (k / static_cast<int64_t>(kPalette.size())) % static_cast<int64_t>(kGlyphs.size());
}

// Mean label count per scene conditioned on >= 1 positive, under the
// base-frequency + pairwise-boost sampling scheme.
double conditional_mean_labels(const std::vector<double>& p, const std::vector<double>& boost,
                               int64_t q) {
  double p_none = 1.0;
  for (int64_t j = 0; j < q; ++j) p_none *= 1.0 - p[j];
  double m0 = 0.0;
  for (int64_t j = 0; j < q; ++j) {
    double not_boosted = 1.0;
    for (int64_t i = 0; i < q; ++i) {
      if (i == j) continue;
      double b = boost.empty() ? 0.0 : boost[i * q + j];
      not_boosted *= 1.0 - p[i] * b;
    }
    m0 += 1.0 - (1.0 - p[j]) * not_boosted;
  }
  return p_none >= 1.0 ? 0.0 : m0 / (1.0 - p_none);
}

std::vector<uint8_t> sample_labels(const SceneSpec& spec, Rng& rng) {
  int64_t q = spec.classes;
  std::vector<uint8_t> base(q), y(q);
  for (int attempt = 0; attempt < 64; ++attempt) {
    bool any = false;
    for (int64_t j = 0; j < q; ++j) {
      base[j] = rng.bernoulli(spec.frequencies[j]) ? 1 : 0;
      y[j] = base[j];
      any = any || base[j];
    }
    if (!spec.cooccurrence.empty()) {
      for (int64_t i = 0; i < q; ++i) {
        if (!base[i]) continue;
        for (int64_t j = 0; j < q; ++j) {
          if (j == i) continue;
          double b = spec.cooccurrence[i * q + j];
          if (b > 0.0 && rng.bernoulli(b)) y[j] = 1;
        }
      }
      for (int64_t j = 0; j < q; ++j) any = any || y[j];
    }
    if (any) return y;
  }
  std::fill(y.begin(), y.end(), 0);
  y[rng.index(q)] = 1;  // rejection cap reached
  return y;
}

}  // namespace

void SceneSpec::validate() const {
  if (classes < 2) throw ConfigError("scene: need at least 2 classes");
  if (height < kCell || width < kCell || channels < 1)
    throw ConfigError("scene: grid too small");
  if (density < 1.0)
    throw ConfigError("scene: mean objects per scene must be >= 1");
  if (density > static_cast<double>(classes))
    throw ConfigError("scene: density exceeds class count");
  if (classes > cells())
    throw ConfigError("scene: density incompatible with grid capacity, " +
                      std::to_string(classes) + " classes but only " + std::to_string(cells()) +
                      " free cells");
  if (!frequencies.empty()) {
    if (static_cast<int64_t>(frequencies.size()) != classes)
      throw ConfigError("scene: frequency vector length != classes");
    for (double f : frequencies)
      if (f < 0.0 || f > 1.0) throw ConfigError("scene: frequencies must lie in [0,1]");
  }
  if (!cooccurrence.empty()) {
    if (static_cast<int64_t>(cooccurrence.size()) != classes * classes)
      throw ConfigError("scene: co-occurrence matrix must be q*q");
    for (int64_t i = 0; i < classes; ++i) {
      if (cooccurrence[i * classes + i] != 0.0)
        throw ConfigError("scene: co-occurrence diagonal must be zero");
      for (int64_t j = 0; j < classes; ++j)
        if (cooccurrence[i * classes + j] != cooccurrence[j * classes + i])
          throw ConfigError("scene: co-occurrence matrix must be symmetric");
    }
  }
}

void SceneSpec::resolve() {
  if (frequencies.empty()) {
    // bisect a uniform base probability so the conditional mean hits density
    int64_t q = classes;
    auto mean_at = [&](double p) {
      std::vector<double> v(q, p);
      return conditional_mean_labels(v, cooccurrence, q);
    };
    double lo = 1e-9, hi = 0.999;
    if (mean_at(hi) < density)
      throw ConfigError("scene: density " + std::to_string(density) + " unreachable for q=" +
                        std::to_string(q));
    if (mean_at(lo) >= density) {
      frequencies.assign(q, lo);
    } else {
      for (int it = 0; it < 200; ++it) {
        double mid = 0.5 * (lo + hi);
        (mean_at(mid) < density ? lo : hi) = mid;
      }
      frequencies.assign(q, 0.5 * (lo + hi));
    }
  }
  validate();
}

SceneSpec SceneSpec::desk_default(uint64_t seed) {
  SceneSpec s;
  s.seed = seed;
  // same-color classes co-occur: disc/triangle pairs sharing a color are
  // the confusable pairs, so multi-positive scenes need shape discrimination
  s.cooccurrence.assign(s.classes * s.classes, 0.0);
  int64_t half = s.classes / 2;
  for (int64_t k = 0; k + half < s.classes; ++k) {
    s.cooccurrence[k * s.classes + (k + half)] = 0.35;
    s.cooccurrence[(k + half) * s.classes + k] = 0.35;
  }
  s.noise = 0.1;
  s.resolve();
  return s;
}

std::vector<std::string> class_names_for(const SceneSpec& spec) {
  std::vector<std::string> names;
  names.reserve(spec.classes);
  for (int64_t k = 0; k < spec.classes; ++k) {
    names.push_back(std::string(kPalette[color_index(k)].name) + "_" +
                    kGlyphs[glyph_index(k)].first);
  }
  return names;
}

void LabelMatrix::validate() const {
  if (static_cast<int64_t>(bits.size()) != rows * classes)
    throw ShapeError("label matrix: buffer does not match rows*classes");
  for (int64_t i = 0; i < rows; ++i) {
    int64_t pos = 0;
    for (int64_t k = 0; k < classes; ++k) {
      uint8_t v = bits[i * classes + k];
      if (v != 0 && v != 1) throw ConfigError("label matrix: entries must be 0/1");
      pos += v;
    }
    if (pos < 1) throw ConfigError("label matrix: row " + std::to_string(i) + " has no positive");
  }
}

LabelMatrix Dataset::label_matrix(int64_t begin, int64_t end) const {
  LabelMatrix m;
  m.rows = end - begin;
  m.classes = spec.classes;
  m.bits.assign(labels.begin() + begin * spec.classes, labels.begin() + end * spec.classes);
  return m;
}

Example generate_example(const SceneSpec& spec, const std::string& split, int64_t index) {
  Rng rng(derive_seed(spec.seed, split + "#" + std::to_string(index)));
  int64_t h = spec.height, w = spec.width, c = spec.channels;

  Example ex;
  ex.labels = sample_labels(spec, rng);
  ex.grid.assign(h * w * c, kBackground);

  int64_t cells_x = w / kCell;
  std::vector<int64_t> free_cells(spec.cells());
  for (size_t i = 0; i < free_cells.size(); ++i) free_cells[i] = static_cast<int64_t>(i);

  for (int64_t k = 0; k < spec.classes; ++k) {
    if (!ex.labels[k]) continue;
    int64_t pick = rng.index(static_cast<int64_t>(free_cells.size()));
    int64_t cell = free_cells[pick];
    free_cells[pick] = free_cells.back();
    free_cells.pop_back();

    int64_t oy = (cell / cells_x) * kCell;
    int64_t ox = (cell % cells_x) * kCell;
    const auto& rgb = kPalette[color_index(k)].rgb;
    GlyphFn glyph = kGlyphs[glyph_index(k)].second;
    for (int64_t dy = 0; dy < kCell; ++dy)
      for (int64_t dx = 0; dx < kCell; ++dx) {
        if (!glyph(dy, dx)) continue;
        float* px = ex.grid.data() + (((oy + dy) * w) + (ox + dx)) * c;
        for (int64_t ch = 0; ch < c; ++ch) px[ch] = rgb[ch % 3];
      }
  }

  if (spec.noise > 0.0) {
    for (auto& v : ex.grid) {
      v += static_cast<float>(rng.normal(0.0, spec.noise));
      v = std::clamp(v, 0.0f, 1.0f);
    }
  }
  return ex;
}

Dataset generate_split(const SceneSpec& spec, const std::string& split, int64_t count) {
  SceneSpec resolved = spec;
  resolved.resolve();
  Dataset ds;
  ds.spec = resolved;
  ds.split = split;
  ds.count = count;
  ds.class_names = class_names_for(resolved);
  ds.grids.reserve(count * ds.grid_size());
  ds.labels.reserve(count * resolved.classes);
  for (int64_t i = 0; i < count; ++i) {
    Example ex = generate_example(resolved, split, i);
    ds.grids.insert(ds.grids.end(), ex.grid.begin(), ex.grid.end());
    ds.labels.insert(ds.labels.end(), ex.labels.begin(), ex.labels.end());
  }
  return ds;
}

std::pair<Dataset, Dataset> generate_dataset(const SceneSpec& spec, int64_t n_train,
                                             int64_t n_test) {
  return {generate_split(spec, "train", n_train), generate_split(spec, "test", n_test)};
}

AugmentMode augment_mode_from_string(const std::string& s) {
  if (s == "none") return AugmentMode::none;
  if (s == "weak") return AugmentMode::weak;
  if (s == "strong") return AugmentMode::strong;
  throw ConfigError("unknown augmentation mode: " + s);
}

std::string to_string(AugmentMode m) {
  switch (m) {
    case AugmentMode::none: return "none";
    case AugmentMode::weak: return "weak";
    case AugmentMode::strong: return "strong";
  }
  return "none";
}

std::vector<float> hflip(const float* grid, int64_t h, int64_t w, int64_t c) {
  std::vector<float> out(h * w * c);
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < w; ++x) {
      const float* src = grid + (y * w + x) * c;
      float* dst = out.data() + (y * w + (w - 1 - x)) * c;
      std::copy(src, src + c, dst);
    }
  return out;
}

void cutout(std::vector<float>& grid, int64_t h, int64_t w, int64_t c, int64_t y0, int64_t x0,
            int64_t side) {
  for (int64_t y = y0; y < std::min(h, y0 + side); ++y)
    for (int64_t x = x0; x < std::min(w, x0 + side); ++x) {
      float* px = grid.data() + (y * w + x) * c;
      std::fill(px, px + c, 0.0f);
    }
}

std::vector<float> augment(const float* grid, const SceneSpec& spec, AugmentMode mode, Rng& rng) {
  int64_t h = spec.height, w = spec.width, c = spec.channels;
  std::vector<float> out(grid, grid + h * w * c);
  if (mode == AugmentMode::none) return out;

  if (rng.bernoulli(0.5)) out = hflip(out.data(), h, w, c);
  if (mode == AugmentMode::weak) return out;

  int64_t side = (h + 3) / 4;
  int64_t y0 = rng.index(h - side + 1);
  int64_t x0 = rng.index(w - side + 1);
  cutout(out, h, w, c, y0, x0, side);

  switch (rng.index(3)) {
    case 0: {  // brightness shift
      float d = static_cast<float>(rng.uniform(-0.2, 0.2));
      for (auto& v : out) v = std::clamp(v + d, 0.0f, 1.0f);
      break;
    }
    case 1: {  // single-channel scale
      int64_t ch = rng.index(c);
      float s = static_cast<float>(rng.uniform(0.7, 1.3));
      for (int64_t i = ch; i < static_cast<int64_t>(out.size()); i += c)
        out[i] = std::clamp(out[i] * s, 0.0f, 1.0f);
      break;
    }
    default: {  // small translation, zero fill
      int64_t dy = rng.index(5) - 2;
      int64_t dx = rng.index(5) - 2;
      std::vector<float> shifted(out.size(), 0.0f);
      for (int64_t y = 0; y < h; ++y) {
        int64_t sy = y - dy;
        if (sy < 0 || sy >= h) continue;
        for (int64_t x = 0; x < w; ++x) {
          int64_t sx = x - dx;
          if (sx < 0 || sx >= w) continue;
          std::copy(out.data() + (sy * w + sx) * c, out.data() + (sy * w + sx) * c + c,
                    shifted.data() + (y * w + x) * c);
        }
      }
      out = std::move(shifted);
      break;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// persistence
// ---------------------------------------------------------------------------

namespace {

constexpr char kMagic[4] = {'M', 'L', 'D', 'S'};
constexpr uint32_t kFormatVersion = 1;

void put_u32(std::string& buf, uint32_t v) {
  for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

uint32_t get_u32(const std::string& buf, size_t off) {
  uint32_t v = 0;
  for (int i = 0; i < 4; ++i)
    v |= static_cast<uint32_t>(static_cast<unsigned char>(buf[off + i])) << (8 * i);
  return v;
}

}  // namespace

void save_dataset(const Dataset& ds, const std::string& path) {
  nlohmann::ordered_json manifest;
  manifest["format_version"] = kFormatVersion;
  manifest["split"] = ds.split;
  manifest["count"] = ds.count;
  manifest["class_names"] = ds.class_names;
  manifest["scene"] = scene_spec_to_json(ds.spec);
  std::string mtxt = manifest.dump();

  std::string buf;
  buf.append(kMagic, 4);
  put_u32(buf, kFormatVersion);
  put_u32(buf, static_cast<uint32_t>(mtxt.size()));
  buf += mtxt;
  buf.append(reinterpret_cast<const char*>(ds.grids.data()), ds.grids.size() * sizeof(float));

  int64_t q = ds.spec.classes;
  int64_t row_bytes = (q + 7) / 8;
  std::string packed(ds.count * row_bytes, '\0');
  for (int64_t i = 0; i < ds.count; ++i)
    for (int64_t k = 0; k < q; ++k)
      if (ds.labels[i * q + k])
        packed[i * row_bytes + k / 8] |= static_cast<char>(1 << (k % 8));
  buf += packed;

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw FormatError("cannot open for writing: " + path);
  f.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!f) throw FormatError("short write: " + path);
}

Dataset load_dataset(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open dataset: " + path);
  std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());

  if (buf.size() < 12 || std::memcmp(buf.data(), kMagic, 4) != 0)
    throw FormatError(path + ": bad magic at byte 0");
  if (get_u32(buf, 4) != kFormatVersion)
    throw FormatError(path + ": unsupported format version at byte 4");
  size_t mlen = get_u32(buf, 8);
  if (12 + mlen > buf.size())
    throw FormatError(path + ": manifest truncated at byte " + std::to_string(buf.size()));

  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(buf.substr(12, mlen));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path + ": manifest parse failure: " + e.what());
  }

  Dataset ds;
  try {
    ds.split = manifest.at("split").get<std::string>();
    ds.count = manifest.at("count").get<int64_t>();
    ds.class_names = manifest.at("class_names").get<std::vector<std::string>>();
    ds.spec = scene_spec_from_json(manifest.at("scene"));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path + ": manifest field failure: " + e.what());
  }
  ds.spec.resolve();
  int64_t q = ds.spec.classes;
  if (static_cast<int64_t>(ds.class_names.size()) != q)
    throw FormatError(path + ": manifest class count " + std::to_string(ds.class_names.size()) +
                      " does not match label width " + std::to_string(q));

  size_t grid_bytes = static_cast<size_t>(ds.count) * ds.grid_size() * sizeof(float);
  int64_t row_bytes = (q + 7) / 8;
  size_t label_bytes = static_cast<size_t>(ds.count) * row_bytes;
  size_t expected = 12 + mlen + grid_bytes + label_bytes;
  if (buf.size() != expected)
    throw FormatError(path + ": expected " + std::to_string(expected) + " bytes, got " +
                      std::to_string(buf.size()) + " (payload begins at byte " +
                      std::to_string(12 + mlen) + ")");

  ds.grids.resize(static_cast<size_t>(ds.count) * ds.grid_size());
  std::memcpy(ds.grids.data(), buf.data() + 12 + mlen, grid_bytes);

  const char* lp = buf.data() + 12 + mlen + grid_bytes;
  ds.labels.assign(static_cast<size_t>(ds.count) * q, 0);
  for (int64_t i = 0; i < ds.count; ++i) {
    int64_t pos = 0;
    for (int64_t k = 0; k < q; ++k) {
      uint8_t bit = (static_cast<unsigned char>(lp[i * row_bytes + k / 8]) >> (k % 8)) & 1;
      ds.labels[i * q + k] = bit;
      pos += bit;
    }
    if (pos < 1)
      throw FormatError(path + ": example " + std::to_string(i) + " has no positive label");
  }
  return ds;
}


nlohmann::ordered_json scene_spec_to_json(const SceneSpec& s) {
  nlohmann::ordered_json j;
  j["classes"] = s.classes;
  j["height"] = s.height;
  j["width"] = s.width;
  j["channels"] = s.channels;
  j["density"] = s.density;
  j["frequencies"] = s.frequencies;
  j["cooccurrence"] = s.cooccurrence;
  j["noise"] = s.noise;
  j["seed"] = s.seed;
  return j;
}

SceneSpec scene_spec_from_json(const nlohmann::json& j) {
  SceneSpec s;
  s.classes = j.value("classes", s.classes);
  s.height = j.value("height", s.height);
  s.width = j.value("width", s.width);
  s.channels = j.value("channels", s.channels);
  s.density = j.value("density", s.density);
  s.frequencies = j.value("frequencies", std::vector<double>{});
  s.cooccurrence = j.value("cooccurrence", std::vector<double>{});
  s.noise = j.value("noise", s.noise);
  s.seed = j.value("seed", s.seed);
  return s;
}

}  // namespace mlkd
