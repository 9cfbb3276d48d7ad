#include "kml/config.hpp"

#include <charconv>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

namespace kml {

std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

namespace {

std::string trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return std::string(s.substr(first, last - first + 1));
}

class KeyReader {
 public:
  explicit KeyReader(std::map<std::string, std::string> kv) : kv_(std::move(kv)) {}

  bool has(const std::string& key) const { return kv_.count(key) > 0; }

  const std::string* raw(const std::string& key) {
    auto it = kv_.find(key);
    if (it == kv_.end()) return nullptr;
    used_.insert(key);
    return &it->second;
  }

  std::string require_key(const std::string& key) {
    const std::string* v = raw(key);
    if (!v) throw ConfigError("missing required key '" + key + "'");
    return *v;
  }

  void str(const std::string& key, std::string& out) {
    if (const std::string* v = raw(key)) out = *v;
  }

  template <typename T>
  void num(const std::string& key, T& out) {
    const std::string* v = raw(key);
    if (!v) return;
    T parsed{};
    auto res = std::from_chars(v->data(), v->data() + v->size(), parsed);
    if (res.ec != std::errc{} || res.ptr != v->data() + v->size() || v->empty())
      throw ConfigError("key '" + key + "': cannot parse '" + *v + "'");
    out = parsed;
  }

  void flag(const std::string& key, bool& out) {
    const std::string* v = raw(key);
    if (!v) return;
    if (*v == "true" || *v == "1") out = true;
    else if (*v == "false" || *v == "0") out = false;
    else throw ConfigError("key '" + key + "': expected true or false, got '" + *v + "'");
  }

  template <typename F>
  void parsed(const std::string& key, F&& fn) {
    const std::string* v = raw(key);
    if (!v) return;
    try {
      fn(*v);
    } catch (const std::exception& e) {
      throw ConfigError("key '" + key + "': " + e.what());
    }
  }

  void reject_unused() const {
    for (const auto& [k, v] : kv_)
      if (!used_.count(k)) throw ConfigError("unknown key '" + k + "'");
  }

 private:
  std::map<std::string, std::string> kv_;
  std::set<std::string> used_;
};

Precision parse_precision(const std::string& s) {
  if (s == "f64") return Precision::f64;
  if (s == "f32") return Precision::f32;
  throw ConfigError("unknown precision '" + s + "' (expected f32 or f64)");
}

std::string precision_name(Precision p) { return p == Precision::f32 ? "f32" : "f64"; }

std::vector<std::size_t> parse_index_list(const std::string& s) {
  std::vector<std::size_t> out;
  std::stringstream in(s);
  std::string item;
  while (std::getline(in, item, ',')) {
    item = trim(item);
    if (item.empty()) continue;
    std::size_t v = 0;
    auto res = std::from_chars(item.data(), item.data() + item.size(), v);
    if (res.ec != std::errc{} || res.ptr != item.data() + item.size())
      throw ConfigError("bad layer index '" + item + "'");
    out.push_back(v);
  }
  return out;
}

void parse_bins(const std::string& s, TransferConfig& t) {
  // lo:hi:count
  const auto a = s.find(':');
  const auto b = s.find(':', a == std::string::npos ? a : a + 1);
  if (a == std::string::npos || b == std::string::npos) throw ConfigError("expected lo:hi:count");
  const std::string lo = s.substr(0, a), hi = s.substr(a + 1, b - a - 1), n = s.substr(b + 1);
  auto ok = [](const std::string& text, auto& out) {
    auto res = std::from_chars(text.data(), text.data() + text.size(), out);
    return res.ec == std::errc{} && res.ptr == text.data() + text.size() && !text.empty();
  };
  if (!ok(lo, t.bin_lo) || !ok(hi, t.bin_hi) || !ok(n, t.bin_count)) throw ConfigError("expected lo:hi:count");
}

}  // namespace

TaskDistribution RunConfig::distribution() const { return TaskDistribution(modes, data_seed); }

void RunConfig::validate() const {
  learner.validate();
  if (modes.empty()) throw ConfigError("missing required key 'mode.0.kind'");
  if (transfer.sources == 0) throw ConfigError("key 'transfer.sources' must be positive");
  if (transfer.targets == 0) throw ConfigError("key 'transfer.targets' must be positive");
  if (transfer.alpha < 0.0) throw ConfigError("key 'transfer.alpha' must be non-negative");
  if (transfer.epsilon < 0.0) throw ConfigError("key 'transfer.epsilon' must be non-negative");
  if (transfer.bin_count == 0 || !(transfer.bin_hi > transfer.bin_lo))
    throw ConfigError("key 'transfer.bins' needs hi > lo and a positive count");
  const int n = static_cast<int>(modes.size());
  if (transfer.source_mode < -1 || transfer.source_mode >= n)
    throw ConfigError("key 'transfer.source_mode' is not a configured mode");
  if (transfer.target_mode < -1 || transfer.target_mode >= n)
    throw ConfigError("key 'transfer.target_mode' is not a configured mode");
  if (output_dir.empty()) throw ConfigError("key 'output_dir' must not be empty");
}

RunConfig parse_config(std::string_view text) {
  std::map<std::string, std::string> kv;
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    const std::string body = trim(line);
    if (body.empty()) continue;
    const auto eq = body.find('=');
    if (eq == std::string::npos)
      throw ConfigError("line " + std::to_string(lineno) + ": expected key=value");
    const std::string key = trim(std::string_view(body).substr(0, eq));
    if (key.empty()) throw ConfigError("line " + std::to_string(lineno) + ": empty key");
    if (!kv.emplace(key, trim(std::string_view(body).substr(eq + 1))).second)
      throw ConfigError("duplicate key '" + key + "'");
  }

  KeyReader r(std::move(kv));
  RunConfig c;
  MetaLearnerConfig& l = c.learner;
  {
    const std::string learner = r.require_key("learner");
    try {
      l.kind = parse_learner_kind(learner);
    } catch (const std::exception& e) {
      throw ConfigError(std::string("key 'learner': ") + e.what());
    }
  }
  {
    const std::string it = r.require_key("iterations");
    std::size_t v = 0;
    auto res = std::from_chars(it.data(), it.data() + it.size(), v);
    if (res.ec != std::errc{} || res.ptr != it.data() + it.size() || it.empty())
      throw ConfigError("key 'iterations': cannot parse '" + it + "'");
    l.iterations = v;
  }
  l.inner_steps = l.kind == LearnerKind::maml ? 1 : 0;
  r.num("inner_lr", l.inner_lr);
  r.num("outer_lr", l.outer_lr);
  r.num("inner_steps", l.inner_steps);
  r.num("meta_batch", l.meta_batch);
  r.flag("first_order", l.first_order);
  r.parsed("modulation", [&](const std::string& v) { l.modulation = parse_modulation_kind(v); });
  r.parsed("generator.structure", [&](const std::string& v) { l.structure = parse_generator_structure(v); });
  r.num("generator.rank", l.rank);
  r.parsed("generator.init", [&](const std::string& v) { l.generator_init = parse_generator_init(v); });
  r.num("generator.init_scale", l.generator_init_scale);
  r.parsed("shared_layers", [&](const std::string& v) { l.shared_layers = parse_index_list(v); });
  r.num("d_upsilon", l.d_upsilon);
  r.str("architecture", l.architecture);
  r.num("episode.n_way", l.episode.n_way);
  r.num("episode.k_shot", l.episode.k_shot);
  r.num("episode.m_query", l.episode.m_query);
  r.num("seed", l.seed);
  r.parsed("optimizer", [&](const std::string& v) { l.optimizer = parse_outer_optimizer(v); });
  r.num("lr_halve_every", l.lr_halve_every);
  r.num("log_every", l.log_every);
  r.num("val_episodes", l.val_episodes);
  r.num("checkpoint_every", l.checkpoint_every);
  r.parsed("precision", [&](const std::string& v) { l.precision = parse_precision(v); });

  c.data_seed = l.seed;
  c.eval_seed = l.seed;
  c.transfer.seed = l.seed;
  r.num("data_seed", c.data_seed);
  r.num("eval.episodes", c.eval_episodes);
  r.num("eval.seed", c.eval_seed);
  r.num("embed.episodes", c.embed_episodes);
  r.num("transfer.sources", c.transfer.sources);
  r.num("transfer.targets", c.transfer.targets);
  r.num("transfer.alpha", c.transfer.alpha);
  r.num("transfer.epsilon", c.transfer.epsilon);
  r.parsed("transfer.bins", [&](const std::string& v) { parse_bins(v, c.transfer); });
  r.num("transfer.source_mode", c.transfer.source_mode);
  r.num("transfer.target_mode", c.transfer.target_mode);
  r.num("transfer.seed", c.transfer.seed);
  r.flag("checkpoint.f32", c.checkpoint_f32);
  r.str("output_dir", c.output_dir);

  for (std::size_t i = 0;; ++i) {
    const std::string p = "mode." + std::to_string(i) + ".";
    if (!r.has(p + "kind")) {
      if (i == 0) r.require_key("mode.0.kind");
      break;
    }
    ModeSpec m;
    r.parsed(p + "kind", [&](const std::string& v) { m.kind = parse_mode_kind(v); });
    r.num(p + "channels", m.channels);
    r.num(p + "height", m.height);
    r.num(p + "width", m.width);
    r.num(p + "flat_dim", m.flat_dim);
    r.num(p + "train_categories", m.train_categories);
    r.num(p + "test_categories", m.test_categories);
    r.num(p + "noise", m.noise);
    r.num(p + "weight", m.weight);
    r.str(p + "images", m.images_path);
    r.str(p + "labels", m.labels_path);
    c.modes.push_back(m);
  }
  // Keys of mode.N beyond the first gap land here as unknown.
  r.reject_unused();
  c.validate();
  return c;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open config '" + path.string() + "'");
  std::ostringstream text;
  text << in.rdbuf();
  return parse_config(text.str());
}

std::string render_config(const RunConfig& c) {
  const MetaLearnerConfig& l = c.learner;
  std::ostringstream o;
  auto kv = [&o](const std::string& k, const std::string& v) { o << k << '=' << v << '\n'; };
  auto b = [](bool v) { return std::string(v ? "true" : "false"); };
  auto u = [](auto v) { return std::to_string(v); };
  kv("learner", to_string(l.kind));
  kv("iterations", u(l.iterations));
  kv("inner_lr", format_double(l.inner_lr));
  kv("outer_lr", format_double(l.outer_lr));
  kv("inner_steps", u(l.inner_steps));
  kv("meta_batch", u(l.meta_batch));
  kv("first_order", b(l.first_order));
  kv("modulation", to_string(l.modulation));
  kv("generator.structure", to_string(l.structure));
  kv("generator.rank", u(l.rank));
  kv("generator.init", to_string(l.generator_init));
  kv("generator.init_scale", format_double(l.generator_init_scale));
  std::string shared;
  for (std::size_t i = 0; i < l.shared_layers.size(); ++i)
    shared += (i ? "," : "") + std::to_string(l.shared_layers[i]);
  kv("shared_layers", shared);
  kv("d_upsilon", u(l.d_upsilon));
  kv("architecture", l.architecture);
  kv("episode.n_way", u(l.episode.n_way));
  kv("episode.k_shot", u(l.episode.k_shot));
  kv("episode.m_query", u(l.episode.m_query));
  kv("seed", u(l.seed));
  kv("optimizer", to_string(l.optimizer));
  kv("lr_halve_every", u(l.lr_halve_every));
  kv("log_every", u(l.log_every));
  kv("val_episodes", u(l.val_episodes));
  kv("checkpoint_every", u(l.checkpoint_every));
  kv("precision", precision_name(l.precision));
  kv("data_seed", u(c.data_seed));
  kv("eval.episodes", u(c.eval_episodes));
  kv("eval.seed", u(c.eval_seed));
  kv("embed.episodes", u(c.embed_episodes));
  kv("transfer.sources", u(c.transfer.sources));
  kv("transfer.targets", u(c.transfer.targets));
  kv("transfer.alpha", format_double(c.transfer.alpha));
  kv("transfer.epsilon", format_double(c.transfer.epsilon));
  kv("transfer.bins", format_double(c.transfer.bin_lo) + ":" + format_double(c.transfer.bin_hi) + ":" +
                          u(c.transfer.bin_count));
  kv("transfer.source_mode", std::to_string(c.transfer.source_mode));
  kv("transfer.target_mode", std::to_string(c.transfer.target_mode));
  kv("transfer.seed", u(c.transfer.seed));
  kv("checkpoint.f32", b(c.checkpoint_f32));
  kv("output_dir", c.output_dir);
  for (std::size_t i = 0; i < c.modes.size(); ++i) {
    const ModeSpec& m = c.modes[i];
    const std::string p = "mode." + std::to_string(i) + ".";
    kv(p + "kind", to_string(m.kind));
    kv(p + "channels", u(m.channels));
    kv(p + "height", u(m.height));
    kv(p + "width", u(m.width));
    kv(p + "flat_dim", u(m.flat_dim));
    kv(p + "train_categories", u(m.train_categories));
    kv(p + "test_categories", u(m.test_categories));
    kv(p + "noise", format_double(m.noise));
    kv(p + "weight", format_double(m.weight));
    if (!m.images_path.empty()) kv(p + "images", m.images_path);
    if (!m.labels_path.empty()) kv(p + "labels", m.labels_path);
  }
  return o.str();
}

}  // namespace kml
