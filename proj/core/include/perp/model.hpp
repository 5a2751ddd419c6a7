#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "perp/autograd.hpp"
#include "perp/tensor.hpp"

namespace perp {

/// Shape of the miniature pre-norm decoder.
///
/// Parameter count (biases on, head bias off), with d = d_model, f = d_ff,
/// V = vocab_size, L = n_layers:
///
///   V*d                          token embedding
///   + L * (4*d*d + 4*d           q, k, v, o projections with biases
///          + 2*d*f + f + d       two MLP projections with biases
///          + 4*d)                two LayerNorms (scale + shift)
///   + 2*d                        final LayerNorm
///   + V*d                        linear head
///
/// Disabling biases drops the 4*d + f + d per block; a head bias adds V.
/// Positions use fixed sinusoidal encodings and hold no parameters.
struct MiniGPTConfig {
  std::size_t vocab_size = 256;
  std::size_t context_length = 32;
  std::size_t d_model = 224;
  std::size_t n_heads = 4;
  std::size_t n_layers = 1;
  std::size_t d_ff = 896;
  bool bias = true;
  bool head_bias = false;
  std::uint64_t seed = 0;

  void validate() const;
  std::size_t parameter_count() const;

  bool operator==(const MiniGPTConfig&) const = default;
};

enum class GroupTag : std::uint8_t { bias = 0, ln = 1, head = 2, embedding = 3, linear_weight = 4, adapter = 5 };

std::string_view to_string(GroupTag tag);
GroupTag parse_group_tag(std::string_view name);
std::set<GroupTag> all_group_tags();

struct Parameter {
  std::string name;
  Var<float> var;
  GroupTag tag;
};

/// Where a linear layer reads its input from inside a block.
enum class CapturePoint : std::uint8_t { attn_input, attn_output, mlp_input, mlp_hidden };

/// A prunable linear layer: weight [out x in] applied as x * W^T (+ bias).
struct LinearSite {
  std::string name;
  std::string weight;
  std::string bias;  // empty when the model has no biases
  std::size_t block;
  CapturePoint input;
};

class TaggedModel {
 public:
  TaggedModel() = default;
  TaggedModel(MiniGPTConfig config, std::vector<Parameter> params);

  const MiniGPTConfig& config() const noexcept { return config_; }
  std::vector<Parameter>& parameters() noexcept { return params_; }
  const std::vector<Parameter>& parameters() const noexcept { return params_; }
  const std::vector<LinearSite>& linear_sites() const noexcept { return sites_; }

  Parameter& param(std::string_view name);
  const Parameter& param(std::string_view name) const;
  bool has_param(std::string_view name) const;

  std::size_t parameter_count() const;

  /// Deep copy with fresh, gradient-free leaves carrying the same trainable flags.
  TaggedModel clone() const;

  void freeze_all();
  /// Freezes everything, then marks parameters whose tag is in selector trainable.
  void set_trainable(const std::set<GroupTag>& selector);

 private:
  MiniGPTConfig config_;
  std::vector<Parameter> params_;
  std::vector<LinearSite> sites_;
};

TaggedModel init_model(MiniGPTConfig config, std::uint64_t seed);
inline TaggedModel init_model(const MiniGPTConfig& config) { return init_model(config, config.seed); }

/// Row-major [rows x cols] token ids.
struct TokenBatch {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::int32_t> tokens;

  static TokenBatch from_rows(const std::vector<std::vector<std::int32_t>>& rows);
};

/// Intercepts for the forward pass: input capture for calibration and
/// replacement of the weight product of individual linear sites (adapters).
struct ForwardHooks {
  /// Called with the exact [N x in] input of each linear site.
  std::function<void(std::size_t site, const Tensor<float>& input)> capture;
  /// Returns x * W_eff^T for the site, replacing the plain product. Bias is added afterwards.
  std::function<std::optional<Var<float>>(std::size_t site, const Var<float>& x, const Var<float>& weight)> linear;
};

struct ForwardOptions {
  bool ln_affine = true;
};

/// Sinusoidal position table [context_length x d_model].
Tensor<float> positional_encoding(std::size_t context_length, std::size_t d_model);

/// Logits [rows*cols x vocab] for every position of the batch.
Var<float> forward_logits(const TaggedModel& model, const TokenBatch& batch, const ForwardHooks* hooks = nullptr,
                          ForwardOptions opts = {});

/// Mean next-token cross-entropy over all rows * (cols - 1) predictions.
Var<float> forward_loss(const TaggedModel& model, const TokenBatch& batch, const ForwardHooks* hooks = nullptr,
                        ForwardOptions opts = {});

/// exp(mean NLL) over non-overlapping context_length windows of the stream.
double perplexity(const TaggedModel& model, std::span<const std::int32_t> corpus, const ForwardHooks* hooks = nullptr);

/// exp(mean NLL) over an explicit list of windows (each of length >= 2).
double perplexity(const TaggedModel& model, const std::vector<std::vector<std::int32_t>>& windows,
                  const ForwardHooks* hooks = nullptr);

struct GroupSelection {
  std::vector<std::string> names;
  std::size_t count = 0;
  std::size_t total = 0;
  double fraction = 0.0;
};

GroupSelection param_groups(const TaggedModel& model, const std::set<GroupTag>& selector);

}  // namespace perp
