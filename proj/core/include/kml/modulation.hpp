#pragma once

#include <span>
#include <utility>
#include <vector>

#include "kml/network.hpp"

namespace kml {

struct FilmParams {
  std::vector<FilmLayer> layers;
};

struct KmlLayer {
  Tensor m;        // shaped like the layer weight
  Tensor delta_b;  // shaped like the layer bias
};

struct KmlParams {
  std::vector<KmlLayer> layers;
  std::size_t rank = 1;
};

// eta = offset + first half of film_map . upsilon, gamma = second half.
// With offset 0 a zero generator yields eta = gamma = 0; offset 1 makes a zero
// generator the identity modulation.
FilmParams film_generate(const Tensor& upsilon, const GeneratorParams& gen,
                         double identity_offset = 0.0);

// Per-channel eta * y + gamma on [N, C, H, W] maps or [N, C] features.
Tensor film_apply(const Tensor& y, const Tensor& eta, const Tensor& gamma);

// Folds a FiLM pair into the kernel: W_i scaled by eta_i, b_i -> eta_i b_i + gamma_i.
std::pair<Tensor, Tensor> film_to_kernel(const Tensor& weight, const Tensor& bias,
                                         const Tensor& eta, const Tensor& gamma);

// M = sum_s outer(u_s . upsilon, v_s . upsilon) reshaped to the kernel with the
// output channel slowest; delta_b = bias_map . upsilon.
KmlParams kml_generate(const Architecture& arch, const Tensor& upsilon, const GeneratorParams& gen);

// W (.) (J + M), b + delta_b on every layer not listed in shared_layers. Head
// parameters pass through.
BaseParams kml_modulate(const BaseParams& theta, const KmlParams& mod,
                        std::span<const std::size_t> shared_layers = {});

// M_l reshaped to [No, Ni*k*k].
Tensor kml_matrix(const KmlLayer& layer);

struct ParamCount {
  std::vector<std::size_t> per_layer;
  std::size_t total = 0;
};

// Counts the maps generator_layout would allocate for a KML generator, and
// checks them against the closed forms
//   single_mlp: d (k^2 Ni No + No)
//   simplified: d (r (k^2 Ni + No) + No)
ParamCount count_generator_params(const Architecture& arch, std::size_t d_upsilon,
                                  GeneratorStructure structure, std::size_t rank = 1);

}  // namespace kml
