#include "kml/persist.hpp"

#include <bit>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <sstream>

#include "kml/config.hpp"
#include "json.hpp"

namespace kml {

namespace {

constexpr char kMagic[8] = {'K', 'M', 'L', 'C', 'K', 'P', 'T', '1'};

class Writer {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out.insert(out.end(), b, b + n);
  }
  template <typename T>
  void le(T v) {
    for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  std::vector<std::uint8_t> out;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> b) : buf_(b) {}
  std::span<const std::uint8_t> take(std::size_t n) {
    if (buf_.size() - pos_ < n) throw IoError("checkpoint truncated");
    auto s = buf_.subspan(pos_, n);
    pos_ += n;
    return s;
  }
  template <typename T>
  T le() {
    auto s = take(sizeof(T));
    T v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(static_cast<T>(s[i]) << (8 * i));
    return v;
  }
  bool done() const { return pos_ == buf_.size(); }

 private:
  std::span<const std::uint8_t> buf_;
  std::size_t pos_ = 0;
};

template <typename T>
T parse_field(std::string_view s, const char* what) {
  T v{};
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (s.empty() || res.ec != std::errc{} || res.ptr != s.data() + s.size())
    throw IoError(std::string("bad ") + what + " field '" + std::string(s) + "'");
  return v;
}

std::vector<std::string_view> split(std::string_view line, char sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto p = line.find(sep, start);
    out.push_back(line.substr(start, p == std::string_view::npos ? std::string_view::npos : p - start));
    if (p == std::string_view::npos) break;
    start = p + 1;
  }
  return out;
}

// Data lines after an exact header match.
std::vector<std::string_view> data_lines(std::string_view text, std::string_view header) {
  std::vector<std::string_view> lines;
  for (std::string_view l : split(text, '\n'))
    if (!l.empty()) lines.push_back(l);
  if (lines.empty() || lines.front() != header) throw IoError("unexpected CSV header");
  lines.erase(lines.begin());
  return lines;
}

nlohmann::ordered_json stat_json(const AccuracyStat& s) {
  return {{"mean", s.mean}, {"ci95", s.half_width}, {"episodes", s.episodes}};
}

nlohmann::ordered_json eval_object(const EvalResult& e) {
  nlohmann::ordered_json modes = nlohmann::ordered_json::array();
  for (const auto& [id, s] : e.per_mode) {
    nlohmann::ordered_json row = stat_json(s);
    row["mode"] = id;
    modes.push_back(row);
  }
  return {{"per_mode", modes}, {"overall", stat_json(e.overall)}};
}

}  // namespace

Checkpoint checkpoint_of(const TrainState& state) {
  return {state.named_tensors(), state.iteration, state.rng};
}

TrainState state_from_checkpoint(const TrainState& layout, const Checkpoint& ckpt) {
  return restore_train_state(layout, ckpt.tensors, ckpt.iteration, ckpt.rng);
}

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt, bool down_convert) {
  Writer w;
  w.bytes(kMagic, sizeof kMagic);
  w.le(static_cast<std::uint32_t>(ckpt.tensors.size()));
  for (const auto& [name, t] : ckpt.tensors) {
    require(name.size() <= std::numeric_limits<std::uint16_t>::max(), "checkpoint: name too long");
    require(t.rank() <= 255, "checkpoint: rank too large");
    w.le(static_cast<std::uint16_t>(name.size()));
    w.bytes(name.data(), name.size());
    w.le(static_cast<std::uint8_t>(t.rank()));
    for (std::size_t e : t.shape()) {
      require(e <= std::numeric_limits<std::uint32_t>::max(), "checkpoint: extent too large");
      w.le(static_cast<std::uint32_t>(e));
    }
    const bool narrow = down_convert || t.precision() == Precision::f32;
    w.le(static_cast<std::uint8_t>(narrow ? 0 : 1));
    for (double v : t.values()) {
      if (narrow) w.le(std::bit_cast<std::uint32_t>(static_cast<float>(v)));
      else w.le(std::bit_cast<std::uint64_t>(v));
    }
  }
  w.le(ckpt.iteration);
  for (std::uint64_t s : ckpt.rng) w.le(s);
  return std::move(w.out);
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  auto magic = r.take(sizeof kMagic);
  if (std::memcmp(magic.data(), kMagic, sizeof kMagic) != 0) throw IoError("not a checkpoint (bad magic)");
  Checkpoint c;
  const auto count = r.le<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = r.le<std::uint16_t>();
    auto name_bytes = r.take(len);
    std::string name(name_bytes.begin(), name_bytes.end());
    const auto rank = r.le<std::uint8_t>();
    Shape shape;
    std::size_t numel = 1;
    for (std::uint8_t d = 0; d < rank; ++d) {
      shape.push_back(r.le<std::uint32_t>());
      numel *= shape.back();
    }
    const auto precision = r.le<std::uint8_t>();
    if (precision > 1) throw IoError("checkpoint: bad precision byte for '" + name + "'");
    std::vector<double> values(numel);
    for (double& v : values)
      v = precision == 0 ? static_cast<double>(std::bit_cast<float>(r.le<std::uint32_t>()))
                         : std::bit_cast<double>(r.le<std::uint64_t>());
    c.tensors.emplace_back(std::move(name),
                           Tensor::from_values(shape, std::move(values),
                                               precision == 0 ? Precision::f32 : Precision::f64));
  }
  c.iteration = r.le<std::uint64_t>();
  for (std::uint64_t& s : c.rng) s = r.le<std::uint64_t>();
  if (!r.done()) throw IoError("checkpoint has trailing bytes");
  return c;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt, bool down_convert) {
  const auto bytes = encode_checkpoint(ckpt, down_convert);
  write_text(path, std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  const std::string text = read_text(path);
  return decode_checkpoint(
      std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

void write_text(const std::filesystem::path& path, std::string_view text) {
  std::error_code ec;
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path(), ec);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

std::string history_csv(std::span<const HistoryRow> rows) {
  std::string s = "iteration,loss,accuracy,val_accuracy,lr\n";
  for (const HistoryRow& r : rows)
    s += std::to_string(r.iteration) + ',' + format_double(r.loss) + ',' + format_double(r.accuracy) + ',' +
         format_double(r.val_accuracy) + ',' + format_double(r.lr) + '\n';
  return s;
}

std::vector<HistoryRow> parse_history_csv(std::string_view text) {
  std::vector<HistoryRow> out;
  for (std::string_view line : data_lines(text, "iteration,loss,accuracy,val_accuracy,lr")) {
    auto f = split(line, ',');
    if (f.size() != 5) throw IoError("history row needs 5 fields");
    out.push_back({parse_field<std::uint64_t>(f[0], "iteration"), parse_field<double>(f[1], "loss"),
                   parse_field<double>(f[2], "accuracy"), parse_field<double>(f[3], "val_accuracy"),
                   parse_field<double>(f[4], "lr")});
  }
  return out;
}

namespace {
constexpr std::string_view kTransferHeader =
    "iteration,source_task_id,target_task_id,source_mode,target_mode,loss_before,loss_after,lr,label";
}

std::string transference_csv(std::span<const TransferenceRecord> records) {
  std::string s(kTransferHeader);
  s += '\n';
  for (const TransferenceRecord& r : records)
    s += std::to_string(r.iteration) + ',' + std::to_string(r.source_task_id) + ',' +
         std::to_string(r.target_task_id) + ',' + std::to_string(r.source_mode) + ',' +
         std::to_string(r.target_mode) + ',' + format_double(r.loss_before) + ',' +
         format_double(r.loss_after) + ',' + format_double(r.lr) + ',' + to_string(r.label) + '\n';
  return s;
}

std::vector<TransferenceRecord> parse_transference_csv(std::string_view text) {
  std::vector<TransferenceRecord> out;
  for (std::string_view line : data_lines(text, kTransferHeader)) {
    auto f = split(line, ',');
    if (f.size() != 9) throw IoError("transference row needs 9 fields");
    TransferenceRecord r;
    r.iteration = parse_field<std::uint64_t>(f[0], "iteration");
    r.source_task_id = parse_field<std::size_t>(f[1], "source_task_id");
    r.target_task_id = parse_field<std::size_t>(f[2], "target_task_id");
    r.source_mode = parse_field<int>(f[3], "source_mode");
    r.target_mode = parse_field<int>(f[4], "target_mode");
    r.loss_before = parse_field<double>(f[5], "loss_before");
    r.loss_after = parse_field<double>(f[6], "loss_after");
    r.lr = parse_field<double>(f[7], "lr");
    r.label = parse_transfer_label(std::string(f[8]));
    r.degenerate = r.loss_before == 0.0;
    out.push_back(r);
  }
  return out;
}

std::string embeddings_csv(std::span<const EmbeddingRow> rows) {
  std::string s = "episode,mode_id";
  const std::size_t d = rows.empty() ? 0 : rows.front().upsilon.size();
  for (std::size_t i = 0; i < d; ++i) s += ",u" + std::to_string(i);
  s += '\n';
  for (const EmbeddingRow& r : rows) {
    s += std::to_string(r.episode) + ',' + std::to_string(r.mode_id);
    for (double v : r.upsilon) s += ',' + format_double(v);
    s += '\n';
  }
  return s;
}

std::string histogram_json(const HistogramSummary& h, NeutralBand band) {
  nlohmann::ordered_json j = {
      {"records", h.records},
      {"degenerate", h.degenerate},
      {"epsilon", band.epsilon},
      {"positive_pct", h.positive_pct},
      {"negative_pct", h.negative_pct},
      {"neutral_pct", h.neutral_pct},
      {"mean_lr", h.mean_lr},
      {"edges", h.edges},
      {"counts", h.counts},
      {"underflow", h.underflow},
      {"overflow", h.overflow},
  };
  return j.dump(2) + '\n';
}

std::string eval_json(const EvalResult& eval) { return eval_object(eval).dump(2) + '\n'; }

std::string baselines_json(std::span<const BaselineResult> results) {
  nlohmann::ordered_json arr = nlohmann::ordered_json::array();
  for (const BaselineResult& r : results) {
    nlohmann::ordered_json o = {{"name", r.name}};
    o.update(eval_object(r.eval));
    arr.push_back(o);
  }
  return arr.dump(2) + '\n';
}

}  // namespace kml
