#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "kml/random.hpp"
#include "kml/tensor.hpp"

namespace kml {

enum class ModeKind { glyph, blob, ring, texture, idx };
enum class Split { train, test };

ModeKind parse_mode_kind(const std::string& name);
std::string to_string(ModeKind kind);
std::string to_string(Split split);

/// One input-label domain of the multimodal task distribution.
struct ModeSpec {
  ModeKind kind = ModeKind::blob;
  std::size_t channels = 1;
  std::size_t height = 16;
  std::size_t width = 16;
  // blob only: flat inputs of this width when non-zero.
  std::size_t flat_dim = 0;
  // Meta-train categories come first, meta-test categories after them.
  std::size_t train_categories = 32;
  std::size_t test_categories = 16;
  double noise = 0.1;
  double weight = 1.0;
  // idx only.
  std::string images_path;
  std::string labels_path;

  Shape sample_shape() const;
};

struct EpisodeShape {
  std::size_t n_way = 5;
  std::size_t k_shot = 1;
  std::size_t m_query = 15;
};

/// One N-way K-shot episode. Samples are stored batched and class-major:
/// support row n*K + s and query row n*M + q both carry label n.
struct TaskInstance {
  int mode_id = 0;
  std::size_t n_way = 0;
  std::size_t k_shot = 0;
  std::size_t m_query = 0;
  Tensor support_x;
  std::vector<int> support_y;
  Tensor query_x;
  std::vector<int> query_y;
  // Mode-level category behind each label.
  std::vector<std::size_t> categories;
};

/// Synthesizes samples for the categories of one mode. Immutable after
/// construction; category structure is a pure function of (spec, seed).
class ModeGenerator {
 public:
  ModeGenerator(ModeSpec spec, std::uint64_t seed);

  const ModeSpec& spec() const { return spec_; }
  Shape sample_shape() const { return spec_.sample_shape(); }
  std::size_t category_count(Split split) const;
  // Mode-level index of the local-th category of a split.
  std::size_t category_id(Split split, std::size_t local) const;

  // Writes one sample of a category, drawing nuisance noise from rng.
  void synthesize(std::size_t category, Philox& rng, std::span<double> out) const;

 private:
  struct Stroke {
    double y0, x0, y1, x1;
  };
  struct Category {
    std::vector<Stroke> strokes;    // glyph
    std::vector<double> centroid;   // blob
    double radius = 0.0;            // ring
    double thickness = 0.0;         // ring
    double freq_y = 0.0;            // texture
    double freq_x = 0.0;            // texture
    std::vector<double> phases;     // texture, per channel
    std::vector<std::size_t> items; // idx: sample rows of this label
  };

  void build_categories(std::uint64_t seed);
  void load_idx();

  ModeSpec spec_;
  std::vector<Category> categories_;
  std::vector<double> idx_pixels_;  // idx: all images scaled to [0, 1]
};

ModeGenerator make_mode(const ModeSpec& spec, std::uint64_t seed);

/// Weighted mixture of modes.
class TaskDistribution {
 public:
  TaskDistribution(std::vector<ModeSpec> modes, std::uint64_t seed);

  std::size_t mode_count() const { return modes_.size(); }
  const ModeGenerator& mode(std::size_t i) const { return *modes_[i]; }
  int mode_id(std::size_t i) const { return ids_[i]; }
  double weight(std::size_t i) const { return weights_[i]; }
  Shape sample_shape() const { return modes_.front()->sample_shape(); }

  // The single-mode distribution of one member, keeping its mode id.
  TaskDistribution restricted_to(std::size_t i) const;

 private:
  TaskDistribution() = default;
  std::vector<std::shared_ptr<const ModeGenerator>> modes_;
  std::vector<double> weights_;
  std::vector<int> ids_;
};

/// Draws episode `index` of the stream keyed by `seed`. Pure in its inputs.
TaskInstance sample_episode(const TaskDistribution& dist, EpisodeShape shape, Split split,
                            std::uint64_t seed, std::uint64_t index = 0);

// IDX ingestion (u8 payloads): images [count, rows, cols], labels [count].
struct IdxImages {
  std::size_t count = 0, rows = 0, cols = 0;
  std::vector<std::uint8_t> pixels;
};
IdxImages read_idx_images(const std::string& path);
std::vector<std::uint8_t> read_idx_labels(const std::string& path);
void write_idx_images(const std::string& path, const IdxImages& images);
void write_idx_labels(const std::string& path, std::span<const std::uint8_t> labels);

}  // namespace kml
