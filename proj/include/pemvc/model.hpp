#pragma once

// Patch-tokenized encoder-decoder transformer with channel mixing.
//
// Both the operational context (encoder) and the controlled-channel input
// (decoder) are cut into overlapping patches; each patch, with its channels
// interleaved, is projected to one token. The decoder head maps each token
// back to `patch` values that are averaged where patches overlap. The vanilla
// baseline is the same network with one token per timestep (patch = stride = 1).

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "pemvc/json_util.hpp"
#include "pemvc/tensor.hpp"

namespace pemvc::model {

struct PatchConfig {
  std::size_t length = 1024;
  std::size_t patch = 64;
  std::size_t stride = 32;

  std::size_t n_patches() const;
  /// p <= l and 1 <= s <= p.
  void validate() const;
};

/// floor((l - p) / s) + 1
std::size_t n_patches(std::size_t length, std::size_t patch, std::size_t stride);

/// seq is [length][channels] row-major; result is [n_patches][patch * channels]
/// with each patch's samples channel-interleaved.
template <typename T>
std::vector<T> patchify(std::span<const T> seq, std::size_t channels, const PatchConfig& cfg);

/// Number of patches covering each timestep.
std::vector<std::size_t> coverage_counts(const PatchConfig& cfg);

/// Sinusoidal encoding [positions][d_model].
template <typename T>
std::vector<T> sinusoidal_positions(std::size_t positions, std::size_t d_model);

struct ModelConfig {
  std::size_t d_model = 128;
  std::size_t n_heads = 4;
  std::size_t n_enc_layers = 3;
  std::size_t n_dec_layers = 3;
  std::size_t d_ff = 256;
  double dropout = 0.0;
  std::size_t channels = 2;
  PatchConfig patch;
  bool baseline = false;  // vanilla transformer: one token per timestep
  std::uint64_t init_seed = 0;

  /// Tokenization actually used (the baseline overrides patch/stride with 1).
  PatchConfig tokens() const;
  void validate() const;
};

Json to_json(const ModelConfig& c);
ModelConfig model_config_from_json(const Json& j, const std::string& path);
/// FNV-1a over the canonical JSON form; excludes init_seed.
std::string config_hash(const ModelConfig& c);

template <typename T>
class Transformer {
 public:
  using Tensor = nn::Tensor<T>;

  explicit Transformer(const ModelConfig& cfg);

  const ModelConfig& config() const { return cfg_; }

  /// x_enc: [length, channels] -> Z: [n_tokens, d_model]
  Tensor encode(const Tensor& x_enc);
  /// x_dec: [length, channels], z from encode -> [length, 1]
  Tensor decode(const Tensor& x_dec, const Tensor& z);
  Tensor forward(const Tensor& x_enc, const Tensor& x_dec) { return decode(x_dec, encode(x_enc)); }

  std::vector<Tensor>& parameters() { return params_; }
  const std::vector<Tensor>& parameters() const { return params_; }
  const std::vector<std::string>& parameter_names() const { return names_; }
  std::size_t parameter_count() const;
  void zero_grad();

  void set_training(bool training) { training_ = training; }
  bool training() const { return training_; }
  void reseed_dropout(std::uint64_t seed) { dropout_rng_.seed(seed); }

 private:
  struct Norm {
    Tensor gamma, beta;
  };
  struct Attention {
    Tensor wq, bq, wk, bk, wv, bv, wo, bo;
  };
  struct FeedForward {
    Tensor w1, b1, w2, b2;
  };
  struct EncoderLayer {
    Norm ln1;
    Attention self_attn;
    Norm ln2;
    FeedForward ff;
  };
  struct DecoderLayer {
    Norm ln1;
    Attention self_attn;
    Norm ln2;
    Attention cross_attn;
    Norm ln3;
    FeedForward ff;
  };

  Tensor add_param(const std::string& name, nn::Shape shape, T init_bound, std::mt19937_64& rng);
  Tensor add_const_param(const std::string& name, nn::Shape shape, T value);
  Norm make_norm(const std::string& prefix, std::mt19937_64& rng);
  Attention make_attention(const std::string& prefix, std::mt19937_64& rng);
  FeedForward make_ff(const std::string& prefix, std::mt19937_64& rng);

  Tensor tokens_from(const Tensor& x, const Tensor& w, const Tensor& b) const;
  Tensor attend(const Attention& a, const Tensor& xq, const Tensor& xkv);
  Tensor feed_forward(const FeedForward& f, const Tensor& x);
  Tensor norm(const Norm& n, const Tensor& x) const;
  Tensor drop(const Tensor& x);

  ModelConfig cfg_;
  PatchConfig tok_;
  std::vector<Tensor> params_;
  std::vector<std::string> names_;
  Tensor enc_embed_w_, enc_embed_b_, dec_embed_w_, dec_embed_b_;
  std::vector<EncoderLayer> enc_layers_;
  std::vector<DecoderLayer> dec_layers_;
  Norm enc_final_, dec_final_;
  Tensor head_w_, head_b_;
  Tensor positions_;
  bool training_ = false;
  std::mt19937_64 dropout_rng_;
};

/// Token embedding: affine projection of each flattened patch plus the
/// positional encoding. patches [n, width], w [width, d], b [d], pos [n, d].
template <typename T>
nn::Tensor<T> embed_patches(const nn::Tensor<T>& patches, const nn::Tensor<T>& w,
                            const nn::Tensor<T>& b, const nn::Tensor<T>& pos);

}  // namespace pemvc::model
