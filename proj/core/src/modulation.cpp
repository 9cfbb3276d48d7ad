#include "kml/modulation.hpp"

#include <algorithm>
#include <stdexcept>

namespace kml {

FilmParams film_generate(const Tensor& upsilon, const GeneratorParams& gen, double identity_offset) {
  if (gen.spec.kind != ModulationKind::film)
    throw ConfigError("film_generate needs a film generator, got " + to_string(gen.spec.kind));
  require(upsilon.shape() == Shape{gen.spec.d_upsilon}, "film_generate: embedding width mismatch");
  FilmParams out;
  for (const auto& layer : gen.layers) {
    require(layer.size() == 1, "film generator has one map per layer");
    Tensor both = matvec(layer[0], upsilon);
    const std::size_t no = both.numel() / 2;
    Tensor eta = slice(both, 0, no);
    if (identity_offset != 0.0) eta = add_scalar(eta, identity_offset);
    out.layers.push_back({eta, slice(both, no, no)});
  }
  return out;
}

Tensor film_apply(const Tensor& y, const Tensor& eta, const Tensor& gamma) {
  require(y.rank() == 4 || y.rank() == 2, "film_apply: expected [N,C,H,W] or [N,C]");
  const std::size_t c = y.shape()[1];
  require(eta.shape() == Shape{c} && gamma.shape() == Shape{c},
          "film_apply: eta/gamma must have one entry per channel (" + std::to_string(c) + ")");
  if (y.rank() == 4) return add_channel_bias(channel_scale(y, eta), gamma);
  const std::size_t n = y.shape()[0];
  return add(mul(y, broadcast_rows(eta, n)), broadcast_rows(gamma, n));
}

std::pair<Tensor, Tensor> film_to_kernel(const Tensor& weight, const Tensor& bias,
                                         const Tensor& eta, const Tensor& gamma) {
  require(weight.rank() >= 2, "film_to_kernel: weight must be at least 2-D");
  const std::size_t no = weight.shape()[0];
  require(bias.shape() == Shape{no} && eta.shape() == Shape{no} && gamma.shape() == Shape{no},
          "film_to_kernel: bias/eta/gamma must have one entry per output channel");
  const std::size_t row = weight.numel() / no;
  Tensor scaled = mul(reshape(weight, {no, row}), broadcast_cols(eta, row));
  return {reshape(scaled, weight.shape()), add(mul(eta, bias), gamma)};
}

KmlParams kml_generate(const Architecture& arch, const Tensor& upsilon, const GeneratorParams& gen) {
  if (gen.spec.kind != ModulationKind::kml)
    throw ConfigError("kml_generate needs a kml generator, got " + to_string(gen.spec.kind));
  require(upsilon.shape() == Shape{gen.spec.d_upsilon}, "kml_generate: embedding width mismatch");
  require(gen.layers.size() == arch.layers.size(), "kml_generate: one generator per layer");
  KmlParams out;
  out.rank = gen.spec.rank;
  for (std::size_t l = 0; l < arch.layers.size(); ++l) {
    const auto& maps = gen.layers[l];
    const Shape wshape = arch.layers[l].weight_shape();
    Tensor m;
    if (gen.spec.structure == GeneratorStructure::single_mlp) {
      require(maps.size() == 2, "single_mlp generator has kernel and bias maps");
      m = reshape(matvec(maps[0], upsilon), wshape);
    } else {
      require(maps.size() == 2 * gen.spec.rank + 1, "simplified generator map count mismatch");
      for (std::size_t s = 0; s < gen.spec.rank; ++s) {
        Tensor term = outer(matvec(maps[2 * s], upsilon), matvec(maps[2 * s + 1], upsilon));
        m = s == 0 ? term : add(m, term);
      }
      m = reshape(m, wshape);
    }
    out.layers.push_back({m, matvec(maps.back(), upsilon)});
  }
  return out;
}

BaseParams kml_modulate(const BaseParams& theta, const KmlParams& mod,
                        std::span<const std::size_t> shared_layers) {
  const std::size_t layers = theta.weights.size();
  require(mod.layers.size() == layers, "kml_modulate: one modulation per layer");
  for (std::size_t s : shared_layers) require(s < layers, "kml_modulate: shared layer out of range");
  BaseParams out = theta;
  for (std::size_t l = 0; l < layers; ++l) {
    if (std::find(shared_layers.begin(), shared_layers.end(), l) != shared_layers.end()) continue;
    require(mod.layers[l].m.shape() == theta.weights[l].shape(),
            "kml_modulate: M shape differs from layer weight");
    require(mod.layers[l].delta_b.shape() == theta.biases[l].shape(),
            "kml_modulate: delta_b shape differs from layer bias");
    out.weights[l] = mul(theta.weights[l], add_scalar(mod.layers[l].m, 1.0));
    out.biases[l] = add(theta.biases[l], mod.layers[l].delta_b);
  }
  return out;
}

Tensor kml_matrix(const KmlLayer& layer) {
  const std::size_t no = layer.m.shape()[0];
  return reshape(layer.m, {no, layer.m.numel() / no});
}

ParamCount count_generator_params(const Architecture& arch, std::size_t d_upsilon,
                                  GeneratorStructure structure, std::size_t rank) {
  arch.validate();
  GeneratorSpec spec{ModulationKind::kml, structure, rank, d_upsilon};
  ParamCount count;
  count.per_layer.assign(arch.layers.size(), 0);
  for (const GeneratorEntry& e : generator_layout(arch, spec)) count.per_layer[e.layer] += shape_numel(e.shape);
  for (std::size_t l = 0; l < arch.layers.size(); ++l) {
    const LayerSpec& s = arch.layers[l];
    const std::size_t row = s.kernel * s.kernel * s.in;
    const std::size_t closed = structure == GeneratorStructure::single_mlp
                                   ? d_upsilon * (row * s.out + s.out)
                                   : d_upsilon * (rank * (row + s.out) + s.out);
    if (closed != count.per_layer[l])
      throw std::logic_error("generator layout disagrees with the closed-form count at layer " +
                             std::to_string(l));
    count.total += count.per_layer[l];
  }
  return count;
}

}  // namespace kml
