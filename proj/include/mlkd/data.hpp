#pragma once

// Synthetic multi-label scenes: each positive class renders one colored glyph
// at a random free grid cell, plus Gaussian pixel noise. Generation is a pure
// function of (spec, split, index), so splits are reproducible and disjoint.

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "mlkd/common.hpp"

namespace mlkd {

struct SceneSpec {
  int64_t classes = 8;  // q
  int64_t height = 32;
  int64_t width = 32;
  int64_t channels = 3;
  double density = 2.0;               // target mean labels per scene
  std::vector<double> frequencies;    // per-class base probabilities; solved from density if empty
  std::vector<double> cooccurrence;   // q*q symmetric pairwise boosts, zero diagonal
  double noise = 0.05;                // Gaussian pixel noise sigma
  uint64_t seed = 1;

  /// Fills frequencies (if empty) so the post-rejection mean label count hits
  /// `density`, and validates every invariant. Must run before generation.
  void resolve();

  void validate() const;

  int64_t cells() const { return (height / 8) * (width / 8); }

  /// Desk-scale default: q=8, 32x32x3, mean 2.0 labels/scene, paired
  /// co-occurrence boosts so multi-positive instances are common.
  static SceneSpec desk_default(uint64_t seed = 1);
};

/// Class display names, "color_glyph" per class.
std::vector<std::string> class_names_for(const SceneSpec& spec);

struct Example {
  std::vector<float> grid;     // H*W*C in [0,1]
  std::vector<uint8_t> labels; // q entries of 0/1, at least one positive
};

// Binary label matrix [rows, classes]; every row carries >= 1 positive.
struct LabelMatrix {
  int64_t rows = 0;
  int64_t classes = 0;
  std::vector<uint8_t> bits;  // rows*classes

  uint8_t at(int64_t i, int64_t k) const { return bits[i * classes + k]; }
  void validate() const;
};

struct Dataset {
  SceneSpec spec;
  std::string split;
  int64_t count = 0;
  std::vector<std::string> class_names;
  std::vector<float> grids;     // count*H*W*C
  std::vector<uint8_t> labels;  // count*q, unpacked

  int64_t grid_size() const { return spec.height * spec.width * spec.channels; }
  const float* grid(int64_t i) const { return grids.data() + i * grid_size(); }
  const uint8_t* label_row(int64_t i) const { return labels.data() + i * spec.classes; }

  LabelMatrix label_matrix(int64_t begin, int64_t end) const;
};

/// Pure function of (spec, split, index).
Example generate_example(const SceneSpec& spec, const std::string& split, int64_t index);

std::pair<Dataset, Dataset> generate_dataset(const SceneSpec& spec, int64_t n_train,
                                             int64_t n_test);
Dataset generate_split(const SceneSpec& spec, const std::string& split, int64_t count);

enum class AugmentMode { none, weak, strong };

AugmentMode augment_mode_from_string(const std::string& s);
std::string to_string(AugmentMode m);

std::vector<float> hflip(const float* grid, int64_t h, int64_t w, int64_t c);

/// Zeroes the square [y0, y0+side) x [x0, x0+side).
void cutout(std::vector<float>& grid, int64_t h, int64_t w, int64_t c, int64_t y0, int64_t x0,
            int64_t side);

/// weak: horizontal flip with p=0.5. strong: flip + Cutout (side = ceil(H/4))
/// + one of {brightness shift, channel scale, small translation}.
/// Labels are never touched.
std::vector<float> augment(const float* grid, const SceneSpec& spec, AugmentMode mode, Rng& rng);

// Single-file container: "MLDS" magic, u32 version, u32 manifest length,
// JSON manifest, float32 LE grid block, bit-packed label block.
void save_dataset(const Dataset& ds, const std::string& path);
Dataset load_dataset(const std::string& path);

}  // namespace mlkd
