#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "muslcat/attention.hpp"
#include "muslcat/layers.hpp"
#include "muslcat/tensor.hpp"

namespace muslcat {

// ---------------------------------------------------------------------------
// Configuration

struct AttentionSpec {
  std::size_t heads = 8;
  double key_ratio = 0.25;
  double value_ratio = 0.25;
  std::size_t max_distance = 512;
  bool relative = true;
};

enum class BlockKind { kConv, kSE, kAAC };

// One CAN layer. conv: conv + BN + ReLU. se: conv + BN + ReLU + SE.
// aac: attention-augmented convolution (layer norm inside). Any kind may be
// followed by a max-pool of the branch's pool size.
struct LayerSpec {
  BlockKind kind = BlockKind::kSE;
  std::size_t channels = 0;
  std::size_t filter = 3;
  std::size_t stride = 1;
  bool pool = false;
  std::optional<std::size_t> max_distance;  // aac only; overrides the branch default
};

struct CANConfig {
  std::string branch = "high";
  std::vector<LayerSpec> layers;  // layers[0] sees the waveform
  std::size_t multilevel = 4;     // top layers concatenated along time
  std::size_t se_reduction = 16;
  std::size_t pool_size = 3;
  AttentionSpec attention;
  bool fusion = true;  // AAC over the multi-level concatenation
  std::optional<std::size_t> fusion_max_distance;

  std::size_t depth() const { return layers.size(); }
  std::size_t top_channels() const;
};

enum class BackendKind { kBert, kAAC, kPool };

struct BackendConfig {
  BackendKind kind = BackendKind::kAAC;
  // bert
  std::size_t layers = 6;
  std::size_t width = 512;
  std::size_t heads = 8;
  std::size_t ffn = 1024;
  double dropout = 0.2;
  std::size_t max_distance = 512;
  // aac; channels 0 keeps the frontend width
  std::size_t channels = 0;
  std::size_t kernel = 3;
  AttentionSpec attention;
};

struct ModelConfig {
  std::string name = "model";
  std::size_t n_tags = 50;
  std::size_t input_length = 48000;
  std::vector<CANConfig> branches;  // fused low then high, in listed order
  BackendConfig backend;
  std::size_t classifier_hidden = 512;
  std::uint64_t seed = 0;
  // Audit references (0 means none): published total and a baseline total.
  double reference_params = 0.0;
  double baseline_params = 0.0;
  double claimed_reduction = 0.0;  // fraction, e.g. 0.342
};

nlohmann::json to_json(const ModelConfig& cfg);
// Throws ValidationError naming the offending field.
ModelConfig model_config_from_json(const nlohmann::json& j);
ModelConfig load_model_config(const std::string& path);

std::string to_string(BlockKind k);
std::string to_string(BackendKind k);

// ---------------------------------------------------------------------------
// Frontend

// Channel count and length after each layer for an input of the given length.
struct LayerShape {
  std::size_t channels;
  std::size_t length;
};
std::vector<LayerShape> can_layer_shapes(const CANConfig& cfg, std::size_t input_length);

// A convolutional attention network branch with multi-level fusion.
class CAN : public Module {
 public:
  // Throws ValidationError when the layer schedule cannot process input_length.
  CAN(const CANConfig& cfg, std::size_t input_length, Rng& rng);

  // (B, 1, L) -> (B, C_top, sum of the top layers' lengths)
  Tensor forward(const Tensor& x, Mode mode) override;
  Tensor backward(const Tensor& grad_out) override;
  void collect(const std::string& prefix, std::vector<ParamRef>& params,
               std::vector<BufferRef>& buffers) override;

  const CANConfig& config() const { return cfg_; }
  const std::vector<LayerShape>& layer_shapes() const { return shapes_; }
  std::size_t output_channels() const { return cfg_.top_channels(); }
  std::size_t output_length() const;

  std::size_t layer_count() const { return layers_.size(); }
  Sequential& layer(std::size_t i) { return *layers_.at(i); }
  AACBlock* fusion() { return fusion_.get(); }
  // Every AAC block in the branch with its parameter-name prefix.
  std::vector<std::pair<std::string, AACBlock*>> aac_blocks();

 private:
  CANConfig cfg_;
  std::vector<LayerShape> shapes_;
  std::vector<std::unique_ptr<Sequential>> layers_;
  std::unique_ptr<AACBlock> fusion_;
};

// Temporal concatenation low-then-high; an empty (zero-length) side is a no-op.
Tensor fuse_multiscale(const Tensor& low, const Tensor& high);

// ---------------------------------------------------------------------------
// Backends: (B, C, L) -> (B, F)

// Post-LN encoder layer over (B, T, D): relative MHA, dropout, residual, LN,
// then FFN (GELU), dropout, residual, LN.
class EncoderLayer : public Module {
 public:
  EncoderLayer(std::size_t width, std::size_t heads, std::size_t ffn, double dropout,
               std::size_t max_distance, Rng& rng, std::uint64_t dropout_seed);

  Tensor forward(const Tensor& x, Mode mode) override;
  Tensor backward(const Tensor& grad_out) override;
  void collect(const std::string& prefix, std::vector<ParamRef>& params,
               std::vector<BufferRef>& buffers) override;

  MultiHeadAttention& attention() { return mha_; }
  Dense& ffn_in() { return ffn1_; }
  Dense& ffn_out() { return ffn2_; }
  LayerNorm& norm1() { return ln1_; }
  LayerNorm& norm2() { return ln2_; }

 private:
  MultiHeadAttention mha_;
  Dropout drop1_;
  LayerNorm ln1_;
  Dense ffn1_;
  GELU gelu_;
  Dense ffn2_;
  Dropout drop2_;
  LayerNorm ln2_;
};

class BertBackend : public Module {
 public:
  BertBackend(const BackendConfig& cfg, std::size_t in_channels, Rng& rng, std::uint64_t seed);

  // (B, C, T) -> (B, width): top-layer activation at the prepended [CLS].
  Tensor forward(const Tensor& x, Mode mode) override;
  Tensor backward(const Tensor& grad_out) override;
  void collect(const std::string& prefix, std::vector<ParamRef>& params,
               std::vector<BufferRef>& buffers) override;

  std::size_t output_width() const { return width_; }
  Param& cls() { return cls_; }
  Dense* projection() { return proj_.get(); }
  std::size_t layer_count() const { return layers_.size(); }
  EncoderLayer& layer(std::size_t i) { return *layers_.at(i); }

 private:
  std::size_t width_;
  std::unique_ptr<Dense> proj_;
  Param cls_;
  std::vector<std::unique_ptr<EncoderLayer>> layers_;
  std::size_t tokens_ = 0;
};

class AACBackend : public Module {
 public:
  AACBackend(const BackendConfig& cfg, std::size_t in_channels, Rng& rng);
  Tensor forward(const Tensor& x, Mode mode) override;
  Tensor backward(const Tensor& grad_out) override;
  void collect(const std::string& prefix, std::vector<ParamRef>& params,
               std::vector<BufferRef>& buffers) override;
  std::size_t output_width() const { return aac_.config().out_channels; }
  AACBlock& block() { return aac_; }

 private:
  AACBlock aac_;
  TemporalMean pool_;
};

// ---------------------------------------------------------------------------

class Model : public Module {
 public:
  explicit Model(const ModelConfig& cfg);

  // (B, 1, input_length) -> logits (B, n_tags)
  Tensor forward(const Tensor& x, Mode mode) override;
  // Takes dL/dlogits.
  Tensor backward(const Tensor& grad_logits) override;
  void collect(const std::string& prefix, std::vector<ParamRef>& params,
               std::vector<BufferRef>& buffers) override;

  const ModelConfig& config() const { return cfg_; }
  std::size_t branch_count() const { return branches_.size(); }
  CAN& branch(std::size_t i) { return *branches_.at(i); }
  Module& backend() { return *backend_; }
  Sequential& classifier() { return classifier_; }
  // Length of the sequence handed to the backend.
  std::size_t backend_length() const;

 private:
  ModelConfig cfg_;
  std::vector<std::unique_ptr<CAN>> branches_;
  std::unique_ptr<Module> backend_;
  Sequential classifier_;
  std::vector<std::size_t> branch_lengths_;
};

// Sigmoid tag probabilities in evaluation mode.
Tensor model_forward(Model& model, const Tensor& waveform);

// ---------------------------------------------------------------------------
// Parameter audit

struct AuditRow {
  std::string component;
  std::size_t params = 0;
};

// A built AAC block next to the printed estimate for the same shape.
struct AACDiagnostic {
  std::string block;
  std::size_t in_channels = 0, out_channels = 0, kernel = 0;
  double key_ratio = 0.0, value_ratio = 0.0;
  std::size_t exact_params = 0;  // everything the block owns
  long long weight_delta = 0;    // projection + conv weights minus a plain C_out-filter conv
  double estimate = 0.0;         // aac_param_estimate(...)
};

struct ParamAudit {
  std::string model;
  std::vector<AuditRow> components;
  std::size_t total = 0;
  double reference_params = 0.0;
  double baseline_params = 0.0;
  double claimed_reduction = 0.0;
  std::vector<AACDiagnostic> aac;

  // (total - reference) / reference; 0 when no reference.
  double deviation() const;
  // 1 - total / baseline; 0 when no baseline.
  double reduction() const;
};

ParamAudit audit_params(Model& model);
std::string format_audit(const ParamAudit& audit);
nlohmann::json audit_to_json(const ParamAudit& audit);

// ---------------------------------------------------------------------------
// Checkpoint container: magic, version, config JSON, then named tensors.

void save_checkpoint(const std::string& path, Model& model);
std::unique_ptr<Model> load_checkpoint(const std::string& path);

}  // namespace muslcat
