#include "cart/types.hpp"

#include <string>

#include "cart/errors.hpp"

namespace cart {

void ScaleSchedule::validate() const {
  if (base_scales.empty()) throw ConfigError("schedule needs at least one base scale");
  if (latent_size.first < 1 || latent_size.second < 1) throw ConfigError("invalid latent size");
  if (base_scales.back() != latent_size) throw ConfigError("last base scale must equal latent size");
  for (size_t i = 0; i < base_scales.size(); ++i) {
    const auto [h, w] = base_scales[i];
    if (h < 1 || w < 1) throw ConfigError("base scale must be at least 1x1");
    if (h > latent_size.first || w > latent_size.second) throw ConfigError("base scale exceeds latent size");
    if (i > 0) {
      const auto [ph, pw] = base_scales[i - 1];
      const bool strictly_up = h > ph && w > pw;
      const bool at_latent = base_scales[i] == latent_size && base_scales[i - 1] == latent_size;
      if (!strictly_up && !at_latent) {
        throw ConfigError("base scales must be strictly increasing below latent size (scale " + std::to_string(i) + ")");
      }
    }
  }
  if (n_details < 0 || detail_depth < 0) throw ConfigError("negative detail configuration");
  if ((n_details == 0) != (detail_depth == 0)) throw ConfigError("detail_depth and n_details must both be zero or both positive");
}

ScaleSchedule ScaleSchedule::toy_default() {
  ScaleSchedule s;
  for (int k : {1, 2, 3, 4, 6, 8, 12, 16}) s.base_scales.emplace_back(k, k);
  s.detail_depth = 2;
  s.n_details = 3;
  s.latent_size = {16, 16};
  return s;
}

ScaleSchedule ScaleSchedule::multiscale_baseline() {
  ScaleSchedule s = toy_default();
  const int extra = s.detail_depth * s.n_details;
  for (int i = 0; i < extra; ++i) s.base_scales.push_back(s.latent_size);
  s.detail_depth = 0;
  s.n_details = 0;
  return s;
}

ScaleSchedule ScaleSchedule::standard_vq_baseline() {
  ScaleSchedule ref = toy_default();
  ScaleSchedule s;
  s.latent_size = ref.latent_size;
  for (int i = 0; i < ref.num_maps(); ++i) s.base_scales.push_back(ref.latent_size);
  s.detail_depth = 0;
  s.n_details = 0;
  return s;
}

SequenceLayout SequenceLayout::from_schedule(const ScaleSchedule& s) {
  SequenceLayout layout;
  const int m = s.num_maps();
  layout.map_sizes.reserve(static_cast<size_t>(m));
  layout.map_offsets.reserve(static_cast<size_t>(m));
  for (int i = 0; i < m; ++i) {
    const auto [h, w] = s.map_shape(i);
    layout.map_offsets.push_back(layout.total);
    layout.map_sizes.push_back(h * w);
    for (int p = 0; p < h * w; ++p) layout.map_of_pos.push_back(i);
    layout.total += h * w;
  }
  return layout;
}

}  // namespace cart
