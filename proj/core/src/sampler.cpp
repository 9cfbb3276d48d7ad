#include "kml/sampler.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <numeric>

namespace kml {

ModeKind parse_mode_kind(const std::string& name) {
  if (name == "glyph") return ModeKind::glyph;
  if (name == "blob") return ModeKind::blob;
  if (name == "ring") return ModeKind::ring;
  if (name == "texture") return ModeKind::texture;
  if (name == "idx") return ModeKind::idx;
  throw ConfigError("unknown mode kind '" + name + "' (expected glyph|blob|ring|texture|idx)");
}

std::string to_string(ModeKind kind) {
  switch (kind) {
    case ModeKind::glyph: return "glyph";
    case ModeKind::blob: return "blob";
    case ModeKind::ring: return "ring";
    case ModeKind::texture: return "texture";
    case ModeKind::idx: return "idx";
  }
  return "?";
}

std::string to_string(Split split) { return split == Split::train ? "train" : "test"; }

Shape ModeSpec::sample_shape() const {
  if (kind == ModeKind::blob && flat_dim > 0) return {flat_dim};
  return {channels, height, width};
}

// ---- mode generators ------------------------------------------------------------

ModeGenerator::ModeGenerator(ModeSpec spec, std::uint64_t seed) : spec_(std::move(spec)) {
  if (spec_.noise < 0.0) throw ConfigError("mode noise must be non-negative");
  if (spec_.train_categories == 0 || spec_.test_categories == 0)
    throw ConfigError("mode needs at least one train and one test category");
  if (spec_.flat_dim == 0 && (spec_.channels == 0 || spec_.height == 0 || spec_.width == 0))
    throw ConfigError("mode input extents must be positive");
  switch (spec_.kind) {
    case ModeKind::glyph:
      if (spec_.channels != 1) throw ConfigError("glyph mode emits exactly one channel");
      [[fallthrough]];
    case ModeKind::ring:
    case ModeKind::texture:
      if (spec_.flat_dim != 0) throw ConfigError(to_string(spec_.kind) + " mode needs image inputs");
      if (spec_.height < 4 || spec_.width < 4) throw ConfigError("image modes need at least 4x4");
      break;
    case ModeKind::blob:
      break;
    case ModeKind::idx:
      if (spec_.flat_dim != 0 || spec_.channels != 1) throw ConfigError("idx mode is 1-channel images");
      load_idx();
      return;
  }
  build_categories(seed);
}

void ModeGenerator::build_categories(std::uint64_t seed) {
  const std::size_t total = spec_.train_categories + spec_.test_categories;
  const double h = static_cast<double>(spec_.height), w = static_cast<double>(spec_.width);
  categories_.resize(total);
  for (std::size_t c = 0; c < total; ++c) {
    Philox rng(seed, StreamDomain::category, c);
    Category& cat = categories_[c];
    switch (spec_.kind) {
      case ModeKind::glyph: {
        const std::size_t strokes = 2 + rng.below(3);
        for (std::size_t s = 0; s < strokes; ++s)
          cat.strokes.push_back({rng.uniform(1.0, h - 2.0), rng.uniform(1.0, w - 2.0),
                                 rng.uniform(1.0, h - 2.0), rng.uniform(1.0, w - 2.0)});
        break;
      }
      case ModeKind::blob: {
        cat.centroid.resize(shape_numel(spec_.sample_shape()));
        for (double& v : cat.centroid) v = rng.normal();
        break;
      }
      case ModeKind::ring: {
        cat.radius = rng.uniform(1.5, std::min(h, w) / 2.0 - 1.0);
        cat.thickness = rng.uniform(0.5, 1.2);
        break;
      }
      case ModeKind::texture: {
        // Frequencies in cycles per image, kept away from zero.
        auto freq = [&rng] {
          const double f = rng.uniform(0.5, 3.5);
          return rng.uniform() < 0.5 ? -f : f;
        };
        cat.freq_y = freq();
        cat.freq_x = freq();
        cat.phases.resize(spec_.channels);
        for (double& p : cat.phases) p = rng.uniform(0.0, 2.0 * std::numbers::pi);
        break;
      }
      case ModeKind::idx:
        break;
    }
  }
}

void ModeGenerator::load_idx() {
  IdxImages images = read_idx_images(spec_.images_path);
  std::vector<std::uint8_t> labels = read_idx_labels(spec_.labels_path);
  if (labels.size() != images.count) throw ConfigError("idx: image and label counts differ");
  if (images.rows != spec_.height || images.cols != spec_.width)
    throw ConfigError("idx: image extents do not match mode height/width");
  std::map<std::uint8_t, std::vector<std::size_t>> by_label;
  for (std::size_t i = 0; i < labels.size(); ++i) by_label[labels[i]].push_back(i);
  const std::size_t total = spec_.train_categories + spec_.test_categories;
  if (by_label.size() < total)
    throw ConfigError("idx: " + std::to_string(by_label.size()) + " labels present, mode asks for " +
                      std::to_string(total) + " categories");
  for (auto& [label, rows] : by_label) {
    if (categories_.size() == total) break;
    Category cat;
    cat.items = std::move(rows);
    categories_.push_back(std::move(cat));
  }
  idx_pixels_.resize(images.pixels.size());
  for (std::size_t i = 0; i < images.pixels.size(); ++i) idx_pixels_[i] = images.pixels[i] / 255.0;
}

std::size_t ModeGenerator::category_count(Split split) const {
  return split == Split::train ? spec_.train_categories : spec_.test_categories;
}

std::size_t ModeGenerator::category_id(Split split, std::size_t local) const {
  require(local < category_count(split), "category index out of range");
  return split == Split::train ? local : spec_.train_categories + local;
}

void ModeGenerator::synthesize(std::size_t category, Philox& rng, std::span<double> out) const {
  require(category < categories_.size(), "unknown category");
  require(out.size() == shape_numel(sample_shape()), "sample buffer has wrong size");
  const Category& cat = categories_[category];
  const std::size_t H = spec_.height, W = spec_.width;
  const double noise = spec_.noise;
  switch (spec_.kind) {
    case ModeKind::glyph: {
      std::fill(out.begin(), out.end(), 0.0);
      const double shift_y = noise * 2.0 * rng.normal(), shift_x = noise * 2.0 * rng.normal();
      const double jitter = noise * static_cast<double>(std::min(H, W)) / 8.0;
      for (const Stroke& s : cat.strokes) {
        const double y0 = s.y0 + shift_y + jitter * rng.normal();
        const double x0 = s.x0 + shift_x + jitter * rng.normal();
        const double y1 = s.y1 + shift_y + jitter * rng.normal();
        const double x1 = s.x1 + shift_x + jitter * rng.normal();
        const double len = std::max(std::abs(y1 - y0), std::abs(x1 - x0));
        const int steps = static_cast<int>(std::ceil(len * 2.0)) + 1;
        for (int t = 0; t <= steps; ++t) {
          const double a = static_cast<double>(t) / steps;
          const long py = std::lround(y0 + a * (y1 - y0));
          const long px = std::lround(x0 + a * (x1 - x0));
          if (py < 0 || px < 0 || py >= static_cast<long>(H) || px >= static_cast<long>(W)) continue;
          out[static_cast<std::size_t>(py) * W + static_cast<std::size_t>(px)] = 1.0;
        }
      }
      break;
    }
    case ModeKind::blob: {
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = cat.centroid[i] + noise * rng.normal();
      break;
    }
    case ModeKind::ring: {
      const double cy = (H - 1) / 2.0 + noise * 2.0 * rng.normal();
      const double cx = (W - 1) / 2.0 + noise * 2.0 * rng.normal();
      for (std::size_t c = 0; c < spec_.channels; ++c)
        for (std::size_t y = 0; y < H; ++y)
          for (std::size_t x = 0; x < W; ++x) {
            const double d = std::hypot(y - cy, x - cx) - cat.radius;
            out[(c * H + y) * W + x] =
                std::exp(-d * d / (2.0 * cat.thickness * cat.thickness)) + noise * rng.normal();
          }
      break;
    }
    case ModeKind::texture: {
      const double shift = rng.uniform(0.0, 2.0 * std::numbers::pi);
      const double two_pi = 2.0 * std::numbers::pi;
      for (std::size_t c = 0; c < spec_.channels; ++c)
        for (std::size_t y = 0; y < H; ++y)
          for (std::size_t x = 0; x < W; ++x) {
            const double arg = two_pi * (cat.freq_y * y / H + cat.freq_x * x / W) + cat.phases[c] + shift;
            out[(c * H + y) * W + x] = 0.5 + 0.5 * std::sin(arg) + noise * rng.normal();
          }
      break;
    }
    case ModeKind::idx: {
      const std::size_t row = cat.items[rng.below(cat.items.size())];
      std::copy_n(idx_pixels_.begin() + static_cast<long>(row * H * W), H * W, out.begin());
      for (double& v : out) v += noise * rng.normal();
      break;
    }
  }
}

ModeGenerator make_mode(const ModeSpec& spec, std::uint64_t seed) { return ModeGenerator(spec, seed); }

// ---- distribution ---------------------------------------------------------------

TaskDistribution::TaskDistribution(std::vector<ModeSpec> modes, std::uint64_t seed) {
  if (modes.empty()) throw ConfigError("task distribution needs at least one mode");
  double total = 0.0;
  for (const ModeSpec& m : modes) {
    if (!(m.weight > 0.0)) throw ConfigError("mode mixing weights must be positive");
    total += m.weight;
  }
  if (std::abs(total - 1.0) > 1e-9)
    throw ConfigError("mode mixing weights sum to " + std::to_string(total) + ", expected 1");
  for (std::size_t i = 0; i < modes.size(); ++i) {
    const std::uint64_t mode_seed = Philox(seed, StreamDomain::mode, i).next_u64();
    modes_.push_back(std::make_shared<const ModeGenerator>(modes[i], mode_seed));
    weights_.push_back(modes[i].weight);
    ids_.push_back(static_cast<int>(i));
    if (modes_.back()->sample_shape() != modes_.front()->sample_shape())
      throw ConfigError("all modes must emit the same input shape; mode " + std::to_string(i) +
                        " has " + shape_str(modes_.back()->sample_shape()));
  }
}

TaskDistribution TaskDistribution::restricted_to(std::size_t i) const {
  require(i < modes_.size(), "restricted_to: mode index out of range");
  TaskDistribution d;
  d.modes_ = {modes_[i]};
  d.weights_ = {1.0};
  d.ids_ = {ids_[i]};
  return d;
}

TaskInstance sample_episode(const TaskDistribution& dist, EpisodeShape shape, Split split,
                            std::uint64_t seed, std::uint64_t index) {
  require(shape.n_way >= 1 && shape.k_shot >= 1 && shape.m_query >= 1,
          "episode extents must be positive");
  for (std::size_t m = 0; m < dist.mode_count(); ++m)
    if (dist.mode(m).category_count(split) < shape.n_way)
      throw CapacityError("mode " + std::to_string(dist.mode_id(m)) + " has " +
                          std::to_string(dist.mode(m).category_count(split)) + " " +
                          to_string(split) + " categories, episode needs " +
                          std::to_string(shape.n_way));

  Philox rng(seed, StreamDomain::episode, index);
  const double u = rng.uniform();
  std::size_t chosen = dist.mode_count() - 1;
  double acc = 0.0;
  for (std::size_t m = 0; m < dist.mode_count(); ++m) {
    acc += dist.weight(m);
    if (u < acc) {
      chosen = m;
      break;
    }
  }
  const ModeGenerator& gen = dist.mode(chosen);

  const std::size_t pool = gen.category_count(split);
  std::vector<std::size_t> order(pool);
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t i = 0; i < shape.n_way; ++i) std::swap(order[i], order[i + rng.below(pool - i)]);

  TaskInstance task;
  task.mode_id = dist.mode_id(chosen);
  task.n_way = shape.n_way;
  task.k_shot = shape.k_shot;
  task.m_query = shape.m_query;
  const Shape sample = gen.sample_shape();
  const std::size_t width = shape_numel(sample);
  std::vector<double> support(shape.n_way * shape.k_shot * width);
  std::vector<double> query(shape.n_way * shape.m_query * width);
  for (std::size_t n = 0; n < shape.n_way; ++n) {
    const std::size_t category = gen.category_id(split, order[n]);
    task.categories.push_back(category);
    for (std::size_t s = 0; s < shape.k_shot; ++s) {
      gen.synthesize(category, rng,
                     std::span<double>(support).subspan((n * shape.k_shot + s) * width, width));
      task.support_y.push_back(static_cast<int>(n));
    }
    for (std::size_t q = 0; q < shape.m_query; ++q) {
      gen.synthesize(category, rng,
                     std::span<double>(query).subspan((n * shape.m_query + q) * width, width));
      task.query_y.push_back(static_cast<int>(n));
    }
  }
  Shape support_shape{shape.n_way * shape.k_shot};
  Shape query_shape{shape.n_way * shape.m_query};
  support_shape.insert(support_shape.end(), sample.begin(), sample.end());
  query_shape.insert(query_shape.end(), sample.begin(), sample.end());
  task.support_x = Tensor::from_values(std::move(support_shape), std::move(support));
  task.query_x = Tensor::from_values(std::move(query_shape), std::move(query));
  return task;
}

// ---- IDX files ------------------------------------------------------------------

namespace {

std::uint32_t read_be32(std::istream& in) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4)) throw IoError("idx: truncated header");
  return (std::uint32_t{b[0]} << 24) | (std::uint32_t{b[1]} << 16) | (std::uint32_t{b[2]} << 8) | b[3];
}

void write_be32(std::ostream& out, std::uint32_t v) {
  const char b[4] = {static_cast<char>(v >> 24), static_cast<char>(v >> 16), static_cast<char>(v >> 8),
                     static_cast<char>(v)};
  out.write(b, 4);
}

std::vector<std::uint32_t> read_idx_header(std::istream& in, std::uint32_t expected_dims,
                                           const std::string& path) {
  const std::uint32_t magic = read_be32(in);
  if ((magic >> 8) != 0x08u || (magic & 0xFFu) != expected_dims)
    throw IoError("idx: " + path + " is not a u8 IDX file with " + std::to_string(expected_dims) +
                  " dimensions");
  std::vector<std::uint32_t> dims;
  for (std::uint32_t i = 0; i < expected_dims; ++i) dims.push_back(read_be32(in));
  return dims;
}

}  // namespace

IdxImages read_idx_images(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("idx: cannot open " + path);
  auto dims = read_idx_header(in, 3, path);
  IdxImages images{dims[0], dims[1], dims[2], {}};
  images.pixels.resize(images.count * images.rows * images.cols);
  if (!in.read(reinterpret_cast<char*>(images.pixels.data()), static_cast<long>(images.pixels.size())))
    throw IoError("idx: truncated payload in " + path);
  return images;
}

std::vector<std::uint8_t> read_idx_labels(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("idx: cannot open " + path);
  auto dims = read_idx_header(in, 1, path);
  std::vector<std::uint8_t> labels(dims[0]);
  if (!in.read(reinterpret_cast<char*>(labels.data()), static_cast<long>(labels.size())))
    throw IoError("idx: truncated payload in " + path);
  return labels;
}

void write_idx_images(const std::string& path, const IdxImages& images) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("idx: cannot write " + path);
  write_be32(out, 0x00000803u);
  write_be32(out, static_cast<std::uint32_t>(images.count));
  write_be32(out, static_cast<std::uint32_t>(images.rows));
  write_be32(out, static_cast<std::uint32_t>(images.cols));
  out.write(reinterpret_cast<const char*>(images.pixels.data()), static_cast<long>(images.pixels.size()));
}

void write_idx_labels(const std::string& path, std::span<const std::uint8_t> labels) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("idx: cannot write " + path);
  write_be32(out, 0x00000801u);
  write_be32(out, static_cast<std::uint32_t>(labels.size()));
  out.write(reinterpret_cast<const char*>(labels.data()), static_cast<long>(labels.size()));
}

}  // namespace kml
