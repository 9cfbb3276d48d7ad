#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "kml/ops.hpp"
#include "kml/tensor.hpp"

namespace kml {

enum class LayerKind { conv, dense };

struct LayerSpec {
  LayerKind kind = LayerKind::conv;
  std::size_t in = 0;   // input channels (conv) or features (dense)
  std::size_t out = 0;
  std::size_t kernel = 1;  // 1 for dense layers
  ConvGeometry geom;

  // [out, in, k, k] for conv, [out, in] for dense.
  Shape weight_shape() const;
  std::size_t fan_in() const { return in * kernel * kernel; }
};

// How the last conv feature map becomes a feature vector.
enum class FeaturePool { average, flatten };

struct Architecture {
  std::string name;
  Shape input;  // per-sample shape: {C, H, W} or {D}
  std::vector<LayerSpec> layers;
  FeaturePool pool = FeaturePool::average;

  // Throws ContractViolation if the layers do not compose with the input.
  void validate() const;
  // Per-sample output shape of layer l (before pooling).
  Shape layer_output_shape(std::size_t l) const;
  std::size_t feature_dim() const;
};

Architecture conv_architecture(Shape input, const std::vector<std::size_t>& channels,
                               std::size_t kernel, ConvGeometry geom,
                               FeaturePool pool = FeaturePool::average);
Architecture dense_architecture(std::size_t input_dim, const std::vector<std::size_t>& widths);

// "desk" (conv for image inputs, dense for flat ones), "desk-conv",
// "desk-dense", "paper-4conv". paper-4conv ignores `input` unless it is 3-D.
Architecture named_architecture(const std::string& name, const Shape& input);

/// theta: one (weight, bias) pair per layer plus an optional linear head.
struct BaseParams {
  std::vector<Tensor> weights;
  std::vector<Tensor> biases;
  Tensor head_weight;  // [classes, features]
  Tensor head_bias;

  bool has_head() const { return head_weight.defined(); }
  // w0, b0, w1, b1, ..., then head weight and bias when present.
  std::vector<Tensor> tensors() const;
  BaseParams with_tensors(std::span<const Tensor> tensors) const;
};

// He-uniform kernels, zero biases. head_classes = 0 builds no head.
BaseParams init_base(const Architecture& arch, std::size_t head_classes, std::uint64_t seed,
                     std::uint64_t stream, Precision precision = Precision::f64);

// Per-channel affine applied to a layer's pre-activation.
struct FilmLayer {
  Tensor eta;
  Tensor gamma;
};

/// Runs f_theta on a batch x[N, ...input]. Layer order is
/// conv/dense -> bias -> film (if given) -> relu, then pooling, then the head
/// (no relu) when params carry one.
Tensor forward_base(const Architecture& arch, const Tensor& x, const BaseParams& params,
                    std::span<const FilmLayer> film = {});

/// h_phi: a trunk shaped like the base network plus a projection to d_upsilon.
struct EncoderParams {
  BaseParams trunk;
  Tensor proj_weight;  // [d_upsilon, features]
  Tensor proj_bias;

  std::vector<Tensor> tensors() const;
  EncoderParams with_tensors(std::span<const Tensor> tensors) const;
};

EncoderParams init_encoder(const Architecture& arch, std::size_t d_upsilon, std::uint64_t seed,
                           std::uint64_t stream, Precision precision = Precision::f64);

// Mean of trunk features over the support rows, then linear + relu.
Tensor encode_task(const Architecture& arch, const Tensor& support_x, const EncoderParams& enc);

// ---- generator structure ----------------------------------------------------------

enum class ModulationKind { none, film, kml };
enum class GeneratorStructure { simplified, single_mlp };
enum class GeneratorInit { zero, zero_output, uniform };

ModulationKind parse_modulation_kind(const std::string& s);
GeneratorStructure parse_generator_structure(const std::string& s);
GeneratorInit parse_generator_init(const std::string& s);
std::string to_string(ModulationKind kind);
std::string to_string(GeneratorStructure structure);
std::string to_string(GeneratorInit init);

struct GeneratorSpec {
  ModulationKind kind = ModulationKind::kml;
  GeneratorStructure structure = GeneratorStructure::simplified;
  std::size_t rank = 1;
  std::size_t d_upsilon = 128;
};

// One bias-free linear map [outputs, d_upsilon] of a layer's generator.
struct GeneratorEntry {
  std::size_t layer = 0;
  std::string name;
  Shape shape;
};

// Per layer, in order:
//   film:              film [2*No, d]
//   kml simplified:    u0 [No, d], v0 [Ni*k*k, d], ..., u{r-1}, v{r-1}, bias [No, d]
//   kml single_mlp:    kernel [No*Ni*k*k, d], bias [No, d]
std::vector<GeneratorEntry> generator_layout(const Architecture& arch, const GeneratorSpec& spec);

struct GeneratorParams {
  GeneratorSpec spec;
  std::vector<std::vector<Tensor>> layers;  // layout order within each layer

  std::vector<Tensor> tensors() const;
  GeneratorParams with_tensors(std::span<const Tensor> tensors) const;
};

// zero: every map zero. zero_output: maps that scale the output (u, bias,
// film, kernel) are zero, v maps are uniform; the modulation is exactly zero
// but still receives gradients. uniform: every map U(-s, s) / sqrt(d).
GeneratorParams init_generator(const Architecture& arch, const GeneratorSpec& spec,
                               GeneratorInit init, double scale, std::uint64_t seed,
                               std::uint64_t stream, Precision precision = Precision::f64);

}  // namespace kml
