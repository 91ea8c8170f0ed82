#pragma once

#include <cstdint>
#include <utility>
#include <vector>

namespace cart {

// Latent-space raster, row-major and channel-interleaved like Image.
struct FeatureMap {
  int h = 0;
  int w = 0;
  int c = 0;
  std::vector<float> data;

  FeatureMap() = default;
  FeatureMap(int h_, int w_, int c_) : h(h_), w(w_), c(c_), data(static_cast<size_t>(h_) * w_ * c_, 0.0f) {}

  float* vec(int y, int x) { return data.data() + (static_cast<size_t>(y) * w + x) * c; }
  const float* vec(int y, int x) const { return data.data() + (static_cast<size_t>(y) * w + x) * c; }
  size_t size() const { return data.size(); }
  int positions() const { return h * w; }
};

// One autoregressive unit: a grid of codebook indices.
struct TokenMap {
  int h = 0;
  int w = 0;
  std::vector<std::int32_t> indices;

  TokenMap() = default;
  TokenMap(int h_, int w_) : h(h_), w(w_), indices(static_cast<size_t>(h_) * w_, 0) {}
  int count() const { return h * w; }
};

// Class id in [0, num_classes]; the value num_classes is the null label used
// for classifier-free guidance.
struct ClassLabel {
  int id = 0;
  static ClassLabel null_label(int num_classes) { return ClassLabel{num_classes}; }
};

// Token-map geometry: B multi-scale base maps followed by n_details groups of
// detail_depth maps, all detail maps at latent resolution.
struct ScaleSchedule {
  std::vector<std::pair<int, int>> base_scales;  // (h, w) per base map
  int detail_depth = 0;                          // maps per detail factor
  int n_details = 0;                             // number of detail factors
  std::pair<int, int> latent_size{0, 0};

  int num_base() const { return static_cast<int>(base_scales.size()); }
  int num_maps() const { return num_base() + detail_depth * n_details; }

  std::pair<int, int> map_shape(int m) const {  // m in [0, num_maps)
    if (m < num_base()) return base_scales[static_cast<size_t>(m)];
    return latent_size;
  }

  // Detail factor index for map m (m >= num_base); counts down from n_details
  // so the coarsest detail factor D_n is tokenized first.
  int detail_factor(int m) const { return n_details - (m - num_base()) / detail_depth; }

  int total_tokens() const {
    int t = 0;
    for (int m = 0; m < num_maps(); ++m) {
      auto [h, w] = map_shape(m);
      t += h * w;
    }
    return t;
  }

  // Throws ConfigError on violation. Base scales must increase strictly until
  // they reach latent_size; repeats are allowed only at latent_size so that
  // the order-0 (pure multi-scale / plain residual) configurations are
  // expressible on the same schedule type.
  void validate() const;

  // Toy default: 64x64 images, 4x downsample, 14 maps (8 base + 3x2 detail).
  static ScaleSchedule toy_default();

  // Order-0 variants used as reference tokenizers.
  static ScaleSchedule multiscale_baseline();  // base scales extended with latent-size maps
  static ScaleSchedule standard_vq_baseline(); // every map at latent size

  bool operator==(const ScaleSchedule&) const = default;
};

// Flattened per-position view of a schedule, used by the sequence model.
struct SequenceLayout {
  std::vector<int> map_sizes;    // tokens per map
  std::vector<int> map_offsets;  // start position of each map
  std::vector<int> map_of_pos;   // map index per sequence position
  int total = 0;

  static SequenceLayout from_schedule(const ScaleSchedule& s);
  int num_maps() const { return static_cast<int>(map_sizes.size()); }
  int map_end(int m) const { return map_offsets[static_cast<size_t>(m)] + map_sizes[static_cast<size_t>(m)]; }
};

}  // namespace cart
