#include "muslcat/model.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <map>
#include <set>
#include <sstream>

#include "muslcat/errors.hpp"
#include "muslcat/random.hpp"

namespace muslcat {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Config JSON

std::string to_string(BlockKind k) {
  switch (k) {
    case BlockKind::kConv: return "conv";
    case BlockKind::kSE: return "se";
    case BlockKind::kAAC: return "aac";
  }
  return "?";
}

std::string to_string(BackendKind k) {
  switch (k) {
    case BackendKind::kBert: return "bert";
    case BackendKind::kAAC: return "aac";
    case BackendKind::kPool: return "pool";
  }
  return "?";
}

namespace {

// Reads fields off one JSON object and rejects keys nobody asked for, so a
// misspelled field fails loudly instead of silently taking its default.
class Fields {
 public:
  Fields(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw ValidationError(where_ + ": expected a JSON object");
  }

  bool has(const std::string& key) {
    seen_.insert(key);
    return j_.contains(key);
  }

  template <typename T>
  T get(const std::string& key, T fallback) {
    if (!has(key)) return fallback;
    return as<T>(j_.at(key), key);
  }

  template <typename T>
  T require(const std::string& key) {
    if (!has(key)) throw ValidationError(where_ + ": missing field '" + key + "'");
    return as<T>(j_.at(key), key);
  }

  const json& raw(const std::string& key) {
    seen_.insert(key);
    return j_.at(key);
  }

  std::string path(const std::string& key) const { return where_ + "." + key; }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.count(it.key())) throw ValidationError(where_ + ": unknown field '" + it.key() + "'");
    }
  }

 private:
  template <typename T>
  T as(const json& v, const std::string& key) const {
    try {
      if constexpr (std::is_same_v<T, std::size_t> || std::is_same_v<T, std::uint64_t>) {
        if (!v.is_number_integer() || v.get<long long>() < 0) throw std::invalid_argument("");
      }
      return v.get<T>();
    } catch (const std::exception&) {
      throw ValidationError(where_ + "." + key + ": invalid value " + v.dump());
    }
  }

  const json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

AttentionSpec attention_from_json(const json& j, const std::string& where, AttentionSpec base) {
  Fields f(j, where);
  base.heads = f.get("heads", base.heads);
  base.key_ratio = f.get("key_ratio", base.key_ratio);
  base.value_ratio = f.get("value_ratio", base.value_ratio);
  base.max_distance = f.get("max_distance", base.max_distance);
  base.relative = f.get("relative", base.relative);
  f.finish();
  return base;
}

json attention_to_json(const AttentionSpec& a) {
  return {{"heads", a.heads},
          {"key_ratio", a.key_ratio},
          {"value_ratio", a.value_ratio},
          {"max_distance", a.max_distance},
          {"relative", a.relative}};
}

BlockKind block_kind(const std::string& s, const std::string& where) {
  if (s == "conv") return BlockKind::kConv;
  if (s == "se") return BlockKind::kSE;
  if (s == "aac") return BlockKind::kAAC;
  throw ValidationError(where + ": unknown layer kind '" + s + "' (conv, se, aac)");
}

BackendKind backend_kind(const std::string& s, const std::string& where) {
  if (s == "bert") return BackendKind::kBert;
  if (s == "aac") return BackendKind::kAAC;
  if (s == "pool") return BackendKind::kPool;
  throw ValidationError(where + ": unknown backend kind '" + s + "' (bert, aac, pool)");
}

CANConfig can_from_json(const json& j, const std::string& where) {
  Fields f(j, where);
  CANConfig c;
  c.branch = f.get<std::string>("branch", c.branch);
  c.multilevel = f.get("multilevel", c.multilevel);
  c.se_reduction = f.get("se_reduction", c.se_reduction);
  c.pool_size = f.get("pool_size", c.pool_size);
  if (f.has("attention")) c.attention = attention_from_json(f.raw("attention"), f.path("attention"), c.attention);
  c.fusion = f.get("fusion", c.fusion);
  if (f.has("fusion_max_distance")) c.fusion_max_distance = f.get<std::size_t>("fusion_max_distance", 0);
  const json& layers = f.has("layers") ? f.raw("layers") : json();
  if (!layers.is_array() || layers.empty()) throw ValidationError(where + ".layers: expected a non-empty array");
  for (std::size_t i = 0; i < layers.size(); ++i) {
    Fields lf(layers[i], where + ".layers[" + std::to_string(i) + "]");
    LayerSpec s;
    s.kind = block_kind(lf.require<std::string>("kind"), lf.path("kind"));
    s.channels = lf.require<std::size_t>("channels");
    s.filter = lf.get("filter", s.filter);
    s.stride = lf.get("stride", s.stride);
    s.pool = lf.get("pool", s.pool);
    if (lf.has("max_distance")) s.max_distance = lf.get<std::size_t>("max_distance", 0);
    const std::size_t repeat = lf.get<std::size_t>("repeat", 1);
    lf.finish();
    if (repeat == 0) throw ValidationError(lf.path("repeat") + ": must be >= 1");
    for (std::size_t r = 0; r < repeat; ++r) c.layers.push_back(s);
  }
  f.finish();
  return c;
}

json can_to_json(const CANConfig& c) {
  json layers = json::array();
  for (const LayerSpec& s : c.layers) {
    json l = {{"kind", to_string(s.kind)}, {"channels", s.channels}, {"filter", s.filter},
              {"stride", s.stride}, {"pool", s.pool}};
    if (s.max_distance) l["max_distance"] = *s.max_distance;
    layers.push_back(l);
  }
  json j = {{"branch", c.branch},           {"multilevel", c.multilevel},
            {"se_reduction", c.se_reduction}, {"pool_size", c.pool_size},
            {"attention", attention_to_json(c.attention)},
            {"fusion", c.fusion},           {"layers", layers}};
  if (c.fusion_max_distance) j["fusion_max_distance"] = *c.fusion_max_distance;
  return j;
}

BackendConfig backend_from_json(const json& j, const std::string& where) {
  Fields f(j, where);
  BackendConfig b;
  b.kind = backend_kind(f.require<std::string>("kind"), f.path("kind"));
  b.layers = f.get("layers", b.layers);
  b.width = f.get("width", b.width);
  b.heads = f.get("heads", b.heads);
  b.ffn = f.get("ffn", b.ffn);
  b.dropout = f.get("dropout", b.dropout);
  b.max_distance = f.get("max_distance", b.max_distance);
  b.channels = f.get("channels", b.channels);
  b.kernel = f.get("kernel", b.kernel);
  if (f.has("attention")) b.attention = attention_from_json(f.raw("attention"), f.path("attention"), b.attention);
  f.finish();
  return b;
}

json backend_to_json(const BackendConfig& b) {
  switch (b.kind) {
    case BackendKind::kBert:
      return {{"kind", "bert"},   {"layers", b.layers},   {"width", b.width},
              {"heads", b.heads}, {"ffn", b.ffn},         {"dropout", b.dropout},
              {"max_distance", b.max_distance}};
    case BackendKind::kAAC:
      return {{"kind", "aac"},
              {"channels", b.channels},
              {"kernel", b.kernel},
              {"attention", attention_to_json(b.attention)}};
    case BackendKind::kPool:
      return {{"kind", "pool"}};
  }
  return {};
}

std::size_t layer_padding(const LayerSpec& s) { return s.stride == 1 ? (s.filter - 1) / 2 : 0; }

AACConfig aac_config(std::size_t in, std::size_t out, std::size_t kernel, const AttentionSpec& a,
                     std::size_t max_distance) {
  AACConfig c;
  c.in_channels = in;
  c.out_channels = out;
  c.kernel = kernel;
  c.heads = a.heads;
  c.key_ratio = a.key_ratio;
  c.value_ratio = a.value_ratio;
  c.max_distance = max_distance;
  c.relative = a.relative;
  return c;
}

void validate_aac(const AACConfig& c, const std::string& where) {
  try {
    c.validate();
  } catch (const std::invalid_argument& e) {
    throw ValidationError(where + ": " + e.what());
  }
}

}  // namespace

nlohmann::json to_json(const ModelConfig& cfg) {
  json branches = json::array();
  for (const CANConfig& c : cfg.branches) branches.push_back(can_to_json(c));
  json j = {{"name", cfg.name},
            {"n_tags", cfg.n_tags},
            {"input_length", cfg.input_length},
            {"seed", cfg.seed},
            {"branches", branches},
            {"backend", backend_to_json(cfg.backend)},
            {"classifier_hidden", cfg.classifier_hidden}};
  if (cfg.reference_params > 0 || cfg.baseline_params > 0) {
    j["reference"] = {{"params", cfg.reference_params},
                      {"baseline", cfg.baseline_params},
                      {"claimed_reduction", cfg.claimed_reduction}};
  }
  return j;
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  Fields f(j, "model");
  ModelConfig cfg;
  cfg.name = f.get<std::string>("name", cfg.name);
  cfg.n_tags = f.get("n_tags", cfg.n_tags);
  cfg.input_length = f.get("input_length", cfg.input_length);
  cfg.seed = f.get<std::uint64_t>("seed", cfg.seed);
  cfg.classifier_hidden = f.get("classifier_hidden", cfg.classifier_hidden);
  if (!f.has("branches") || !f.raw("branches").is_array() || f.raw("branches").empty()) {
    throw ValidationError("model.branches: expected a non-empty array");
  }
  const json& br = f.raw("branches");
  for (std::size_t i = 0; i < br.size(); ++i)
    cfg.branches.push_back(can_from_json(br[i], "model.branches[" + std::to_string(i) + "]"));
  if (!f.has("backend")) throw ValidationError("model: missing field 'backend'");
  cfg.backend = backend_from_json(f.raw("backend"), "model.backend");
  if (f.has("reference")) {
    Fields r(f.raw("reference"), "model.reference");
    cfg.reference_params = r.get("params", 0.0);
    cfg.baseline_params = r.get("baseline", 0.0);
    cfg.claimed_reduction = r.get("claimed_reduction", 0.0);
    r.finish();
  }
  f.finish();
  if (cfg.n_tags == 0) throw ValidationError("model.n_tags: must be >= 1");
  if (cfg.classifier_hidden == 0) throw ValidationError("model.classifier_hidden: must be >= 1");
  return cfg;
}

ModelConfig load_model_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open model config '" + path + "'");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ValidationError("model config '" + path + "': " + e.what());
  }
  if (j.contains("model") && j.at("model").is_object()) return model_config_from_json(j.at("model"));
  return model_config_from_json(j);
}

// ---------------------------------------------------------------------------
// CAN

std::size_t CANConfig::top_channels() const {
  if (layers.empty()) return 0;
  return layers.back().channels;
}

std::vector<LayerShape> can_layer_shapes(const CANConfig& cfg, std::size_t input_length) {
  const std::string where = cfg.branch + "CAN";
  if (cfg.layers.empty()) throw ValidationError(where + ": no layers");
  if (cfg.multilevel < 1 || cfg.multilevel > cfg.layers.size()) {
    throw ValidationError(where + ": multilevel span " + std::to_string(cfg.multilevel) +
                          " must be between 1 and the depth " + std::to_string(cfg.layers.size()));
  }
  std::vector<LayerShape> shapes;
  std::size_t channels = 1, length = input_length;
  for (std::size_t i = 0; i < cfg.layers.size(); ++i) {
    const LayerSpec& s = cfg.layers[i];
    const std::string at = where + " layer " + std::to_string(i + 1);
    if (s.channels == 0) throw ValidationError(at + ": zero channels");
    if (s.filter == 0 || s.stride == 0) throw ValidationError(at + ": filter and stride must be >= 1");
    if (s.stride == 1 && s.filter % 2 == 0) {
      throw ValidationError(at + ": stride-1 layers need an odd filter to preserve length");
    }
    if (s.kind == BlockKind::kAAC && s.stride != 1) throw ValidationError(at + ": aac layers must use stride 1");
    if (s.kind == BlockKind::kSE && s.channels % cfg.se_reduction != 0) {
      throw ValidationError(at + ": " + std::to_string(s.channels) +
                            " channels not divisible by SE reduction " +
                            std::to_string(cfg.se_reduction));
    }
    const std::size_t pad = layer_padding(s);
    if (length + 2 * pad < s.filter) {
      throw ValidationError(at + ": filter " + std::to_string(s.filter) + " exceeds input length " +
                            std::to_string(length) + " (input " + std::to_string(input_length) + ")");
    }
    length = (length + 2 * pad - s.filter) / s.stride + 1;
    if (s.pool) {
      if (length < cfg.pool_size) {
        throw ValidationError(at + ": pool window " + std::to_string(cfg.pool_size) +
                              " exceeds remaining length " + std::to_string(length) + " (input " +
                              std::to_string(input_length) + ")");
      }
      length = (length - cfg.pool_size) / cfg.pool_size + 1;
    }
    channels = s.channels;
    shapes.push_back({channels, length});
  }
  const std::size_t top = cfg.layers.back().channels;
  for (std::size_t i = cfg.layers.size() - cfg.multilevel; i < cfg.layers.size(); ++i) {
    if (cfg.layers[i].channels != top) {
      throw ValidationError(where + ": multi-level layers need one width; layer " +
                            std::to_string(i + 1) + " has " + std::to_string(cfg.layers[i].channels) +
                            ", top has " + std::to_string(top));
    }
  }
  return shapes;
}

CAN::CAN(const CANConfig& cfg, std::size_t input_length, Rng& rng)
    : cfg_(cfg), shapes_(can_layer_shapes(cfg, input_length)) {
  std::size_t in = 1;
  for (std::size_t i = 0; i < cfg_.layers.size(); ++i) {
    const LayerSpec& s = cfg_.layers[i];
    auto seq = std::make_unique<Sequential>();
    const std::string at = cfg_.branch + "CAN layer " + std::to_string(i + 1);
    if (s.kind == BlockKind::kAAC) {
      const AACConfig ac = aac_config(in, s.channels, s.filter, cfg_.attention,
                                      s.max_distance.value_or(cfg_.attention.max_distance));
      validate_aac(ac, at);
      seq->emplace<AACBlock>("aac", ac, rng);
    } else {
      seq->emplace<Conv1d>("conv", in, s.channels, s.filter, s.stride, layer_padding(s), rng);
      seq->emplace<BatchNorm1d>("bn", s.channels);
      seq->emplace<ReLU>("relu");
      if (s.kind == BlockKind::kSE) seq->emplace<SEBlock>("se", s.channels, cfg_.se_reduction, rng);
    }
    if (s.pool) seq->emplace<MaxPool1d>("pool", cfg_.pool_size, cfg_.pool_size);
    layers_.push_back(std::move(seq));
    in = s.channels;
  }
  if (cfg_.fusion) {
    const std::size_t c = cfg_.top_channels();
    const AACConfig ac = aac_config(c, c, 3, cfg_.attention,
                                    cfg_.fusion_max_distance.value_or(cfg_.attention.max_distance));
    validate_aac(ac, cfg_.branch + "CAN fusion");
    fusion_ = std::make_unique<AACBlock>(ac, rng);
  }
}

std::size_t CAN::output_length() const {
  std::size_t total = 0;
  for (std::size_t i = shapes_.size() - cfg_.multilevel; i < shapes_.size(); ++i) total += shapes_[i].length;
  return total;
}

Tensor CAN::forward(const Tensor& x, Mode mode) {
  if (x.rank() != 3 || x.dim(1) != 1) {
    throw std::invalid_argument(cfg_.branch + "CAN: expected (B, 1, L) waveform, got " + shape_str(x.shape()));
  }
  const std::size_t first_top = layers_.size() - cfg_.multilevel;
  std::vector<Tensor> top;
  top.reserve(cfg_.multilevel);
  Tensor h = x;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    h = layers_[i]->forward(h, mode);
    if (h.dim(2) != shapes_[i].length) {
      throw std::invalid_argument(cfg_.branch + "CAN layer " + std::to_string(i + 1) + ": length " +
                                  std::to_string(h.dim(2)) + " != configured " +
                                  std::to_string(shapes_[i].length) + "; input length differs from the one the branch was built for");
    }
    if (i >= first_top) top.push_back(h);
  }
  std::vector<const Tensor*> parts;
  for (const Tensor& t : top) parts.push_back(&t);
  Tensor cat = concat(parts, 2);
  return fusion_ ? fusion_->forward(cat, mode) : cat;
}

Tensor CAN::backward(const Tensor& grad_out) {
  const Tensor gcat = fusion_ ? fusion_->backward(grad_out) : grad_out;
  const std::size_t first_top = layers_.size() - cfg_.multilevel;
  std::vector<std::size_t> offsets(layers_.size(), 0);
  std::size_t off = 0;
  for (std::size_t i = first_top; i < layers_.size(); ++i) {
    offsets[i] = off;
    off += shapes_[i].length;
  }
  Tensor g;
  for (std::size_t i = layers_.size(); i-- > 0;) {
    if (i >= first_top) {
      Tensor tap = slice(gcat, 2, offsets[i], offsets[i] + shapes_[i].length);
      if (g.size() == 0) {
        g = std::move(tap);
      } else {
        add_inplace(g, tap);
      }
    }
    g = layers_[i]->backward(g);
  }
  return g;
}

void CAN::collect(const std::string& prefix, std::vector<ParamRef>& params, std::vector<BufferRef>& buffers) {
  for (std::size_t i = 0; i < layers_.size(); ++i)
    layers_[i]->collect(join_name(prefix, "layer" + std::to_string(i + 1)), params, buffers);
  if (fusion_) fusion_->collect(join_name(prefix, "fusion"), params, buffers);
}

std::vector<std::pair<std::string, AACBlock*>> CAN::aac_blocks() {
  std::vector<std::pair<std::string, AACBlock*>> out;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    if (cfg_.layers[i].kind == BlockKind::kAAC) {
      out.emplace_back(cfg_.branch + ".layer" + std::to_string(i + 1),
                       static_cast<AACBlock*>(&layers_[i]->at(0)));
    }
  }
  if (fusion_) out.emplace_back(cfg_.branch + ".fusion", fusion_.get());
  return out;
}

Tensor fuse_multiscale(const Tensor& low, const Tensor& high) {
  if (low.rank() != 3 || high.rank() != 3) {
    throw std::invalid_argument("fuse_multiscale: expected rank-3 inputs, got " + shape_str(low.shape()) +
                                " and " + shape_str(high.shape()));
  }
  if (high.dim(2) == 0) return low;
  if (low.dim(2) == 0) return high;
  if (low.dim(0) != high.dim(0) || low.dim(1) != high.dim(1)) {
    throw std::invalid_argument("fuse_multiscale: channel/batch mismatch " + shape_str(low.shape()) +
                                " vs " + shape_str(high.shape()));
  }
  return concat({&low, &high}, 2);
}

// ---------------------------------------------------------------------------
// Backends

EncoderLayer::EncoderLayer(std::size_t width, std::size_t heads, std::size_t ffn, double dropout,
                           std::size_t max_distance, Rng& rng, std::uint64_t dropout_seed)
    : mha_(make_mha(width, heads, width, width, max_distance, rng), true),
      drop1_(dropout, derive_seed(dropout_seed, 0)),
      ln1_(width, 2),
      ffn1_(width, ffn, rng),
      ffn2_(ffn, width, rng),
      drop2_(dropout, derive_seed(dropout_seed, 1)),
      ln2_(width, 2) {}

Tensor EncoderLayer::forward(const Tensor& x, Mode mode) {
  Tensor a = drop1_.forward(mha_.forward(x, mode), mode);
  add_inplace(a, x);
  const Tensor h = ln1_.forward(a, mode);
  Tensor f = drop2_.forward(ffn2_.forward(gelu_.forward(ffn1_.forward(h, mode), mode), mode), mode);
  add_inplace(f, h);
  return ln2_.forward(f, mode);
}

Tensor EncoderLayer::backward(const Tensor& grad_out) {
  const Tensor dz2 = ln2_.backward(grad_out);
  Tensor dh = ffn1_.backward(gelu_.backward(ffn2_.backward(drop2_.backward(dz2))));
  add_inplace(dh, dz2);
  const Tensor dz1 = ln1_.backward(dh);
  Tensor dx = mha_.backward(drop1_.backward(dz1));
  add_inplace(dx, dz1);
  return dx;
}

void EncoderLayer::collect(const std::string& prefix, std::vector<ParamRef>& params,
                           std::vector<BufferRef>& buffers) {
  mha_.collect(join_name(prefix, "mha"), params, buffers);
  ln1_.collect(join_name(prefix, "ln1"), params, buffers);
  ffn1_.collect(join_name(prefix, "ffn1"), params, buffers);
  ffn2_.collect(join_name(prefix, "ffn2"), params, buffers);
  ln2_.collect(join_name(prefix, "ln2"), params, buffers);
}

BertBackend::BertBackend(const BackendConfig& cfg, std::size_t in_channels, Rng& rng, std::uint64_t seed)
    : width_(cfg.width) {
  if (cfg.width == 0 || cfg.heads == 0 || cfg.width % cfg.heads != 0) {
    throw ValidationError("backend: bert width " + std::to_string(cfg.width) + " must be a positive multiple of " +
                          std::to_string(cfg.heads) + " heads");
  }
  if (cfg.layers == 0 || cfg.ffn == 0) throw ValidationError("backend: bert needs >= 1 layer and ffn width");
  if (!(cfg.dropout >= 0.0 && cfg.dropout < 1.0)) throw ValidationError("backend: dropout must satisfy 0 <= r < 1");
  if (in_channels != cfg.width) proj_ = std::make_unique<Dense>(in_channels, cfg.width, rng);
  Tensor cls({cfg.width});
  fill_normal(cls, rng, 0.0, 0.02);
  cls_ = Param(std::move(cls));
  for (std::size_t i = 0; i < cfg.layers; ++i) {
    layers_.push_back(std::make_unique<EncoderLayer>(cfg.width, cfg.heads, cfg.ffn, cfg.dropout, cfg.max_distance,
                                                     rng, derive_seed(seed, i)));
  }
}

Tensor BertBackend::forward(const Tensor& x, Mode mode) {
  if (x.rank() != 3 || x.dim(2) == 0) {
    throw std::invalid_argument("bert backend: expected (B, C, T >= 1) features, got " + shape_str(x.shape()));
  }
  Tensor t = swap_last2(x);  // (B, T, C)
  if (proj_) t = proj_->forward(t, mode);
  if (t.dim(2) != width_) {
    throw std::invalid_argument("bert backend: token width " + std::to_string(t.dim(2)) + " != " +
                                std::to_string(width_));
  }
  const std::size_t batch = t.dim(0), len = t.dim(1);
  tokens_ = len + 1;
  Tensor h({batch, tokens_, width_});
  for (std::size_t b = 0; b < batch; ++b) {
    std::copy_n(cls_.value.data(), width_, h.data() + b * tokens_ * width_);
    std::copy_n(t.data() + b * len * width_, len * width_, h.data() + (b * tokens_ + 1) * width_);
  }
  for (auto& layer : layers_) h = layer->forward(h, mode);
  Tensor out({batch, width_});
  for (std::size_t b = 0; b < batch; ++b) std::copy_n(h.data() + b * tokens_ * width_, width_, out.data() + b * width_);
  return out;
}

Tensor BertBackend::backward(const Tensor& grad_out) {
  const std::size_t batch = grad_out.dim(0);
  Tensor g({batch, tokens_, width_});
  for (std::size_t b = 0; b < batch; ++b)
    std::copy_n(grad_out.data() + b * width_, width_, g.data() + b * tokens_ * width_);
  for (std::size_t i = layers_.size(); i-- > 0;) g = layers_[i]->backward(g);
  const std::size_t len = tokens_ - 1;
  Tensor dt({batch, len, width_});
  for (std::size_t b = 0; b < batch; ++b) {
    const double* row = g.data() + b * tokens_ * width_;
    for (std::size_t c = 0; c < width_; ++c) cls_.grad[c] += row[c];
    std::copy_n(row + width_, len * width_, dt.data() + b * len * width_);
  }
  if (proj_) dt = proj_->backward(dt);
  return swap_last2(dt);
}

void BertBackend::collect(const std::string& prefix, std::vector<ParamRef>& params, std::vector<BufferRef>& buffers) {
  if (proj_) proj_->collect(join_name(prefix, "projection"), params, buffers);
  params.push_back({join_name(prefix, "cls"), &cls_});
  for (std::size_t i = 0; i < layers_.size(); ++i)
    layers_[i]->collect(join_name(prefix, "encoder" + std::to_string(i + 1)), params, buffers);
}

namespace {
AACConfig backend_aac_config(const BackendConfig& cfg, std::size_t in_channels) {
  const AACConfig c = aac_config(in_channels, cfg.channels ? cfg.channels : in_channels, cfg.kernel,
                                 cfg.attention, cfg.attention.max_distance);
  validate_aac(c, "backend aac");
  return c;
}
}  // namespace

AACBackend::AACBackend(const BackendConfig& cfg, std::size_t in_channels, Rng& rng)
    : aac_(backend_aac_config(cfg, in_channels), rng) {}

Tensor AACBackend::forward(const Tensor& x, Mode mode) { return pool_.forward(aac_.forward(x, mode), mode); }

Tensor AACBackend::backward(const Tensor& grad_out) { return aac_.backward(pool_.backward(grad_out)); }

void AACBackend::collect(const std::string& prefix, std::vector<ParamRef>& params, std::vector<BufferRef>& buffers) {
  aac_.collect(join_name(prefix, "aac"), params, buffers);
}

// ---------------------------------------------------------------------------
// Model

Model::Model(const ModelConfig& cfg) : cfg_(cfg) {
  if (cfg_.branches.empty()) throw ValidationError("model: at least one branch is required");
  std::size_t channels = 0;
  for (std::size_t i = 0; i < cfg_.branches.size(); ++i) {
    Rng rng(derive_seed(cfg_.seed, 1 + i));
    branches_.push_back(std::make_unique<CAN>(cfg_.branches[i], cfg_.input_length, rng));
    const std::size_t c = branches_.back()->output_channels();
    if (i > 0 && c != channels) {
      throw ValidationError("model: multi-scale fusion needs equal branch widths; " + cfg_.branches[0].branch +
                            " has " + std::to_string(channels) + ", " + cfg_.branches[i].branch + " has " +
                            std::to_string(c));
    }
    channels = c;
    branch_lengths_.push_back(branches_.back()->output_length());
  }
  Rng rng(derive_seed(cfg_.seed, 64));
  std::size_t features = channels;
  switch (cfg_.backend.kind) {
    case BackendKind::kBert: {
      auto b = std::make_unique<BertBackend>(cfg_.backend, channels, rng, derive_seed(cfg_.seed, 65));
      features = b->output_width();
      backend_ = std::move(b);
      break;
    }
    case BackendKind::kAAC: {
      auto b = std::make_unique<AACBackend>(cfg_.backend, channels, rng);
      features = b->output_width();
      backend_ = std::move(b);
      break;
    }
    case BackendKind::kPool:
      backend_ = std::make_unique<TemporalMean>();
      break;
  }
  Rng crng(derive_seed(cfg_.seed, 66));
  classifier_.emplace<Dense>("fc1", features, cfg_.classifier_hidden, crng);
  classifier_.emplace<ReLU>("relu");
  classifier_.emplace<Dense>("fc2", cfg_.classifier_hidden, cfg_.n_tags, crng);
}

std::size_t Model::backend_length() const {
  std::size_t total = 0;
  for (std::size_t l : branch_lengths_) total += l;
  return total;
}

Tensor Model::forward(const Tensor& x, Mode mode) {
  if (x.rank() != 3 || x.dim(1) != 1 || x.dim(2) != cfg_.input_length) {
    throw std::invalid_argument("model: expected waveform (B, 1, " + std::to_string(cfg_.input_length) +
                                "), got " + shape_str(x.shape()));
  }
  Tensor fused = branches_[0]->forward(x, mode);
  for (std::size_t i = 1; i < branches_.size(); ++i) fused = fuse_multiscale(fused, branches_[i]->forward(x, mode));
  return classifier_.forward(backend_->forward(fused, mode), mode);
}

Tensor Model::backward(const Tensor& grad_logits) {
  const Tensor dfused = backend_->backward(classifier_.backward(grad_logits));
  Tensor dx;
  std::size_t off = 0;
  for (std::size_t i = 0; i < branches_.size(); ++i) {
    Tensor g = branches_[i]->backward(slice(dfused, 2, off, off + branch_lengths_[i]));
    off += branch_lengths_[i];
    if (i == 0) {
      dx = std::move(g);
    } else {
      add_inplace(dx, g);
    }
  }
  return dx;
}

void Model::collect(const std::string& prefix, std::vector<ParamRef>& params, std::vector<BufferRef>& buffers) {
  for (std::size_t i = 0; i < branches_.size(); ++i)
    branches_[i]->collect(join_name(prefix, cfg_.branches[i].branch), params, buffers);
  backend_->collect(join_name(prefix, "backend"), params, buffers);
  classifier_.collect(join_name(prefix, "classifier"), params, buffers);
}

Tensor model_forward(Model& model, const Tensor& waveform) {
  Tensor y = model.forward(waveform, Mode::kEval);
  for (double& v : y.values()) v = sigmoid(v);
  return y;
}

// ---------------------------------------------------------------------------
// Audit

double ParamAudit::deviation() const {
  return reference_params > 0 ? (static_cast<double>(total) - reference_params) / reference_params : 0.0;
}

double ParamAudit::reduction() const {
  return baseline_params > 0 ? 1.0 - static_cast<double>(total) / baseline_params : 0.0;
}

namespace {

std::size_t count_prefixed(Model& model, const std::string& prefix) {
  std::size_t n = 0;
  for (const auto& p : parameters_of(model)) {
    if (p.name == prefix || p.name.rfind(prefix + ".", 0) == 0) n += p.param->value.size();
  }
  return n;
}

AACDiagnostic diagnose(const std::string& name, AACBlock& block) {
  const AACConfig& c = block.config();
  AACDiagnostic d;
  d.block = name;
  d.in_channels = c.in_channels;
  d.out_channels = c.out_channels;
  d.kernel = c.kernel;
  d.key_ratio = c.key_ratio;
  d.value_ratio = c.value_ratio;
  d.exact_params = count_parameters(block);
  const MHAParams& p = block.attention().params();
  const std::size_t weights = block.conv().params().weight.value.size() + p.wq.value.size() + p.wk.value.size() +
                              p.wv.value.size() + p.wo.value.size();
  d.weight_delta = static_cast<long long>(weights) -
                   static_cast<long long>(c.out_channels * c.in_channels * c.kernel);
  d.estimate = aac_param_estimate(double(c.in_channels), double(c.out_channels), c.key_ratio, c.value_ratio,
                                  double(c.kernel));
  return d;
}

std::string thousands(long long v) {
  std::string s = std::to_string(v < 0 ? -v : v);
  for (int i = static_cast<int>(s.size()) - 3; i > 0; i -= 3) s.insert(static_cast<std::size_t>(i), ",");
  return v < 0 ? "-" + s : s;
}

}  // namespace

ParamAudit audit_params(Model& model) {
  ParamAudit a;
  const ModelConfig& cfg = model.config();
  a.model = cfg.name;
  a.reference_params = cfg.reference_params;
  a.baseline_params = cfg.baseline_params;
  a.claimed_reduction = cfg.claimed_reduction;
  for (std::size_t b = 0; b < model.branch_count(); ++b) {
    CAN& can = model.branch(b);
    const std::string base = can.config().branch;
    for (std::size_t i = 0; i < can.layer_count(); ++i) {
      const std::string n = base + ".layer" + std::to_string(i + 1);
      a.components.push_back({n, count_prefixed(model, n)});
    }
    if (can.fusion()) a.components.push_back({base + ".fusion", count_prefixed(model, base + ".fusion")});
    for (auto& [name, block] : can.aac_blocks()) a.aac.push_back(diagnose(name, *block));
  }
  if (auto* bert = dynamic_cast<BertBackend*>(&model.backend())) {
    if (bert->projection()) a.components.push_back({"backend.projection", count_prefixed(model, "backend.projection")});
    a.components.push_back({"backend.cls", count_prefixed(model, "backend.cls")});
    for (std::size_t i = 0; i < bert->layer_count(); ++i) {
      const std::string n = "backend.encoder" + std::to_string(i + 1);
      a.components.push_back({n, count_prefixed(model, n)});
    }
  } else if (auto* aac = dynamic_cast<AACBackend*>(&model.backend())) {
    a.components.push_back({"backend.aac", count_prefixed(model, "backend.aac")});
    a.aac.push_back(diagnose("backend.aac", aac->block()));
  }
  a.components.push_back({"classifier", count_prefixed(model, "classifier")});
  for (const AuditRow& r : a.components) a.total += r.params;
  const std::size_t direct = count_parameters(model);
  if (direct != a.total) {
    throw std::logic_error("audit: components sum to " + std::to_string(a.total) + " but the model holds " +
                           std::to_string(direct));
  }
  return a;
}

std::string format_audit(const ParamAudit& a) {
  std::ostringstream os;
  os << "model: " << a.model << "\n";
  os << std::left << std::setw(28) << "component" << std::right << std::setw(14) << "params" << "\n";
  for (const AuditRow& r : a.components)
    os << std::left << std::setw(28) << r.component << std::right << std::setw(14) << thousands((long long)r.params)
       << "\n";
  os << std::left << std::setw(28) << "total" << std::right << std::setw(14) << thousands((long long)a.total) << "\n";
  os << std::fixed << std::setprecision(1);
  if (a.reference_params > 0) {
    os << "reference " << std::setprecision(2) << a.reference_params / 1e6 << "M, deviation " << std::showpos
       << std::setprecision(1) << 100.0 * a.deviation() << std::noshowpos << "% (tolerance +/-15%)\n";
  }
  if (a.baseline_params > 0) {
    os << "baseline " << std::setprecision(2) << a.baseline_params / 1e6 << "M, reduction " << std::setprecision(1)
       << 100.0 * a.reduction() << "%";
    if (a.claimed_reduction > 0) os << " vs claimed " << 100.0 * a.claimed_reduction << "%";
    os << "\n";
  }
  if (!a.aac.empty()) {
    os << "\nAAC blocks: printed estimate C_in*C_out*(2k+(1-r^2)v+(C_out/C_in)v^2) beside exact counts\n";
    os << std::left << std::setw(16) << "block" << std::right << std::setw(6) << "C_in" << std::setw(7) << "C_out"
       << std::setw(3) << "r" << std::setw(7) << "k" << std::setw(7) << "v" << std::setw(12) << "exact"
       << std::setw(14) << "exact_delta" << std::setw(14) << "estimate" << "\n";
    for (const AACDiagnostic& d : a.aac) {
      os << std::left << std::setw(16) << d.block << std::right << std::setw(6) << d.in_channels << std::setw(7)
         << d.out_channels << std::setw(3) << d.kernel << std::setprecision(3) << std::setw(7) << d.key_ratio
         << std::setw(7) << d.value_ratio << std::setw(12) << thousands((long long)d.exact_params) << std::setw(14)
         << thousands(d.weight_delta) << std::setprecision(1) << std::setw(14) << d.estimate << "\n";
    }
    os << "exact_delta: conv + projection weights minus a plain r-tap C_in->C_out convolution\n";
  }
  return os.str();
}

nlohmann::json audit_to_json(const ParamAudit& a) {
  json comps = json::array();
  for (const AuditRow& r : a.components) comps.push_back({{"component", r.component}, {"params", r.params}});
  json aac = json::array();
  for (const AACDiagnostic& d : a.aac) {
    aac.push_back({{"block", d.block},
                   {"in_channels", d.in_channels},
                   {"out_channels", d.out_channels},
                   {"kernel", d.kernel},
                   {"key_ratio", d.key_ratio},
                   {"value_ratio", d.value_ratio},
                   {"exact_params", d.exact_params},
                   {"exact_weight_delta", d.weight_delta},
                   {"estimate", d.estimate}});
  }
  return {{"model", a.model},
          {"components", comps},
          {"total", a.total},
          {"reference_params", a.reference_params},
          {"deviation", a.deviation()},
          {"baseline_params", a.baseline_params},
          {"reduction", a.reduction()},
          {"claimed_reduction", a.claimed_reduction},
          {"aac", aac}};
}

// ---------------------------------------------------------------------------
// Checkpoint

namespace {

constexpr char kMagic[8] = {'M', 'S', 'L', 'C', 'K', 'P', 'T', '\0'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void put(std::ostream& os, T v) {
  if constexpr (std::endian::native == std::endian::big) {
    auto bytes = std::bit_cast<std::array<char, sizeof(T)>>(v);
    std::reverse(bytes.begin(), bytes.end());
    os.write(bytes.data(), sizeof(T));
  } else {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
  }
}

template <typename T>
T take(std::istream& is, const std::string& path, const char* field) {
  std::array<char, sizeof(T)> bytes{};
  const auto at = is.tellg();
  if (!is.read(bytes.data(), sizeof(T))) {
    throw ValidationError("checkpoint '" + path + "': truncated while reading " + field + " at offset " +
                          std::to_string(static_cast<long long>(at)));
  }
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
  return std::bit_cast<T>(bytes);
}

}  // namespace

void save_checkpoint(const std::string& path, Model& model) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("checkpoint: cannot write '" + path + "'");
  os.write(kMagic, sizeof(kMagic));
  put<std::uint32_t>(os, kVersion);
  const std::string cfg = to_json(model.config()).dump();
  put<std::uint64_t>(os, cfg.size());
  os.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));

  std::vector<std::pair<std::string, const Tensor*>> tensors;
  for (const auto& p : parameters_of(model)) tensors.emplace_back(p.name, &p.param->value);
  for (const auto& b : buffers_of(model)) tensors.emplace_back(b.name, b.tensor);
  put<std::uint64_t>(os, tensors.size());
  for (const auto& [name, t] : tensors) {
    put<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    put<std::uint8_t>(os, 0);  // f64
    put<std::uint32_t>(os, static_cast<std::uint32_t>(t->rank()));
    for (std::size_t d : t->shape()) put<std::uint64_t>(os, d);
    for (double v : t->values()) put<double>(os, v);
  }
  if (!os) throw std::runtime_error("checkpoint: write to '" + path + "' failed");
}

std::unique_ptr<Model> load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ValidationError("cannot open checkpoint '" + path + "'");
  char magic[8];
  if (!is.read(magic, 8) || std::memcmp(magic, kMagic, 8) != 0) {
    throw ValidationError("checkpoint '" + path + "': bad magic at offset 0");
  }
  const auto version = take<std::uint32_t>(is, path, "version");
  if (version != kVersion) {
    throw ValidationError("checkpoint '" + path + "': unsupported version " + std::to_string(version));
  }
  const auto cfg_len = take<std::uint64_t>(is, path, "config length");
  if (cfg_len > (1u << 26)) throw ValidationError("checkpoint '" + path + "': implausible config length");
  std::string cfg_text(cfg_len, '\0');
  if (!is.read(cfg_text.data(), static_cast<std::streamsize>(cfg_len))) {
    throw ValidationError("checkpoint '" + path + "': truncated config");
  }
  json cfg_json;
  try {
    cfg_json = json::parse(cfg_text);
  } catch (const json::parse_error& e) {
    throw ValidationError("checkpoint '" + path + "': config: " + e.what());
  }
  auto model = std::make_unique<Model>(model_config_from_json(cfg_json));

  std::map<std::string, Tensor*> slots;
  for (const auto& p : parameters_of(*model)) slots[p.name] = &p.param->value;
  for (const auto& b : buffers_of(*model)) slots[b.name] = b.tensor;

  const auto count = take<std::uint64_t>(is, path, "tensor count");
  std::set<std::string> filled;
  for (std::uint64_t n = 0; n < count; ++n) {
    const auto name_len = take<std::uint32_t>(is, path, "name length");
    if (name_len > 4096) throw ValidationError("checkpoint '" + path + "': implausible name length");
    std::string name(name_len, '\0');
    if (!is.read(name.data(), name_len)) throw ValidationError("checkpoint '" + path + "': truncated name");
    const auto dtype = take<std::uint8_t>(is, path, "dtype");
    const auto rank = take<std::uint32_t>(is, path, "rank");
    if (rank > 8) throw ValidationError("checkpoint '" + path + "': tensor '" + name + "' has rank " + std::to_string(rank));
    Shape shape(rank);
    for (auto& d : shape) d = take<std::uint64_t>(is, path, "dims");
    auto it = slots.find(name);
    if (it == slots.end()) throw ValidationError("checkpoint '" + path + "': unexpected tensor '" + name + "'");
    if (it->second->shape() != shape) {
      throw ValidationError("checkpoint '" + path + "': tensor '" + name + "' has shape " + shape_str(shape) +
                            ", model expects " + shape_str(it->second->shape()));
    }
    Tensor& dst = *it->second;
    for (double& v : dst.values()) {
      if (dtype == 0) {
        v = take<double>(is, path, "f64 data");
      } else if (dtype == 1) {
        v = static_cast<double>(take<float>(is, path, "f32 data"));
      } else {
        throw ValidationError("checkpoint '" + path + "': tensor '" + name + "' has unknown dtype " +
                              std::to_string(dtype));
      }
    }
    filled.insert(name);
  }
  for (const auto& [name, t] : slots) {
    (void)t;
    if (!filled.count(name)) throw ValidationError("checkpoint '" + path + "': missing tensor '" + name + "'");
  }
  return model;
}

}  // namespace muslcat
