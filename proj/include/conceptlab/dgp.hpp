#pragma once
#include <optional>
#include <string>
#include <vector>

#include "conceptlab/rng.hpp"
#include "conceptlab/tensor.hpp"

namespace conceptlab::dgp {

// One latent factor of the data-generating process. An axis holds the mean
// value for each of its two concept values plus the half-width of the uniform
// sampling interval around those means. An axis whose two means coincide is
// fixed: it still renders, but contributes no bit to class labels and no
// entries to the conditioning vector.
//
// Value conventions:
//   color / background_color : RGB triple in [0,1]^3
//   size                     : object diameter as a fraction of min(H, W),
//                              in (0, 1]
//   shape                    : categorical id, 0 = circle, 1 = triangle
struct ConceptAxis {
  std::string name;
  bool categorical = false;
  std::vector<Vec> value_means;  // exactly 2 entries (value 0, value 1)
  double spread = 0.0;

  bool varies() const;
  int value_dims() const { return static_cast<int>(value_means.at(0).size()); }
  int cond_dims() const { return categorical ? 2 : value_dims(); }

  static ConceptAxis color(double separation, double spread_ratio = kSpreadRatio);
  static ConceptAxis size(double separation, double spread_ratio = kSpreadRatio);
  static ConceptAxis shape();
  static ConceptAxis background(double separation, double spread_ratio = kSpreadRatio);
  static ConceptAxis fixed_shape(int shape_id);
  static ConceptAxis fixed_background(const Vec& rgb);

  // Spreads scale proportionally with mean separation; 1/8 keeps the widest
  // sweep point (separation 0.8) exactly inside [0,1].
  static constexpr double kSpreadRatio = 0.125;
};

struct ConceptSpaceSpec {
  std::vector<ConceptAxis> axes;  // fixed order; defines coordinate order downstream
  int height = 32;
  int width = 32;

  int active_axis_count() const;                  // d
  std::vector<int> active_axis_indices() const;   // indices into axes
  int z_dims() const;                             // per-axis values, active axes only
  int cond_dims() const;                          // conditioning layout width
  std::vector<std::string> all_class_labels() const;  // 2^d bitstrings
  const ConceptAxis* find_axis(const std::string& name) const;
  int active_index_of(const std::string& name) const;  // -1 if absent/fixed

  // Throws std::invalid_argument on overlap between class intervals,
  // out-of-range means, or a resolution below 16x16.
  void validate() const;

  std::string to_json() const;
  static ConceptSpaceSpec from_json(const std::string& text);

  // Same axes with spreads maximized subject to no class overlap and range
  // limits; used to train probes on maximally diverse data.
  ConceptSpaceSpec with_max_diversity() const;
};

// A point z in concept space: per-axis values of the active axes,
// concatenated in axis order.
struct ConceptVector {
  Vec values;
  std::string class_label;
};

// Masking function M. With probability mask_fraction, a sample whose class
// and axis match mask_target has that axis's conditioning sub-vector
// overwritten by null_fill.
struct MixingConfig {
  double mask_fraction = 0.0;        // alpha in [0,1]
  std::string mask_class;            // class bitstring, e.g. "01"
  std::string mask_axis;             // axis name, e.g. "color"
  double null_fill = -1.0;

  void validate(const ConceptSpaceSpec& spec) const;
};

struct RenderedSample {
  Tensor image;  // 1 x 3 x H x W, values in [0,1]
  ConceptVector z;
  Vec h;            // conditioning vector (after mixing, if any)
  std::string class_label;
  double pos_x = 0.0, pos_y = 0.0;  // object center, pixel units
  uint64_t seed = 0;
};

struct Dataset {
  ConceptSpaceSpec spec;
  std::vector<RenderedSample> samples;
  uint64_t seed = 0;
};

// Draws each active-axis component uniformly from [m - s, m + s] for the
// class's concept values. Categorical axes return the id exactly.
ConceptVector sample_concept_vector(const std::string& class_label,
                                    const ConceptSpaceSpec& spec, Rng& rng);

// Conditioning layout: color -> 3 dims, size -> 1, shape -> one-hot 2,
// background -> 3; active axes concatenated in axis order.
Vec conditioning_of(const ConceptVector& z, const ConceptSpaceSpec& spec);

// The class's mean concept vector (spread ignored).
ConceptVector class_mean_vector(const std::string& class_label, const ConceptSpaceSpec& spec);

// Corner of the unit concept hypercube for a class bitstring ("01" -> (0,1)).
Vec class_corner(const std::string& class_label);

// Applies the mixing/masking function to z's conditioning layout.
Vec mix(const ConceptVector& z, const ConceptSpaceSpec& spec, const MixingConfig& cfg,
        Rng& rng);

// Renders the shape encoded by z at the given center. Boundary pixels are
// anti-aliased by 4x4 supersampling; everything outside the boundary band is
// exactly the background color.
Tensor render_at(const ConceptVector& z, const ConceptSpaceSpec& spec, double cx,
                 double cy);

// In-frame margin for an object of the given diameter fraction (pixels).
int placement_margin(double size_value, int height, int width);

// Renders at a uniformly random in-frame position.
RenderedSample render(const ConceptVector& z, const ConceptSpaceSpec& spec, Rng& rng);

// n_per_class samples for every listed class; sample i of class k uses the
// stream derived from (seed, "sample", k * n_per_class + i), so the dataset
// is a pure function of its arguments regardless of execution order.
Dataset build_dataset(const ConceptSpaceSpec& spec, const std::vector<std::string>& classes,
                      int n_per_class, uint64_t seed,
                      const std::optional<MixingConfig>& mixing = std::nullopt);

// Mean over n_pairs of |render(z+) - render(z-)|_2 / |z+_axis - z-_axis|_2,
// where the pair differs only on the given axis and shares its position.
double empirical_concept_signal(const ConceptSpaceSpec& spec, const std::string& axis,
                                int n_pairs, Rng& rng);

// Disk layout: <dir>/<class>/NNNNNN.png plus <dir>/manifest.jsonl with one
// record per sample and <dir>/spec.json.
void save_dataset(const Dataset& ds, const std::string& dir);
Dataset load_dataset(const std::string& dir);

}  // namespace conceptlab::dgp
