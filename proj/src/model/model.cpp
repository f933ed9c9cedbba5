#include "pemvc/model.hpp"

#include <cmath>
#include <cstdio>

#include "pemvc/ops.hpp"

namespace pemvc::model {

std::size_t n_patches(std::size_t length, std::size_t patch, std::size_t stride) {
  if (patch == 0 || stride == 0 || patch > length) {
    throw ConfigError("patching needs 1 <= stride, 1 <= patch <= length");
  }
  return (length - patch) / stride + 1;
}

std::size_t PatchConfig::n_patches() const { return model::n_patches(length, patch, stride); }

void PatchConfig::validate() const {
  if (!(patch >= 1 && patch <= length)) throw ConfigError("patch: need 1 <= p <= l");
  if (!(stride >= 1 && stride <= patch)) throw ConfigError("patch: need 1 <= s <= p");
}

template <typename T>
std::vector<T> patchify(std::span<const T> seq, std::size_t channels, const PatchConfig& cfg) {
  cfg.validate();
  if (seq.size() != cfg.length * channels) {
    throw ShapeError("patchify: sequence of " + std::to_string(seq.size()) + " values is not [" +
                     std::to_string(cfg.length) + ", " + std::to_string(channels) + "]");
  }
  const std::size_t n = cfg.n_patches();
  const std::size_t width = cfg.patch * channels;
  std::vector<T> out(n * width);
  for (std::size_t i = 0; i < n; ++i)
    std::copy_n(seq.begin() + static_cast<std::ptrdiff_t>(i * cfg.stride * channels), width,
                out.begin() + static_cast<std::ptrdiff_t>(i * width));
  return out;
}

std::vector<std::size_t> coverage_counts(const PatchConfig& cfg) {
  std::vector<std::size_t> cover(cfg.length, 0);
  for (std::size_t i = 0; i < cfg.n_patches(); ++i)
    for (std::size_t j = 0; j < cfg.patch; ++j) ++cover[i * cfg.stride + j];
  return cover;
}

template <typename T>
std::vector<T> sinusoidal_positions(std::size_t positions, std::size_t d_model) {
  std::vector<T> pe(positions * d_model);
  for (std::size_t pos = 0; pos < positions; ++pos) {
    for (std::size_t i = 0; i < d_model; ++i) {
      const double rate = std::pow(10000.0, -static_cast<double>(i - i % 2) / static_cast<double>(d_model));
      const double angle = static_cast<double>(pos) * rate;
      pe[pos * d_model + i] = static_cast<T>(i % 2 == 0 ? std::sin(angle) : std::cos(angle));
    }
  }
  return pe;
}

PatchConfig ModelConfig::tokens() const {
  return baseline ? PatchConfig{patch.length, 1, 1} : patch;
}

void ModelConfig::validate() const {
  if (d_model == 0 || n_heads == 0 || d_model % n_heads != 0)
    throw ConfigError("model: d_model must be a positive multiple of n_heads");
  if (d_ff == 0) throw ConfigError("model: d_ff must be > 0");
  if (channels == 0) throw ConfigError("model: channels must be > 0");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("model: dropout must lie in [0, 1)");
  patch.validate();
  const PatchConfig t = tokens();
  if ((t.length - t.patch) % t.stride != 0) {
    throw ConfigError("model: patches must tile the sequence exactly ((l - p) divisible by s)");
  }
}

Json to_json(const ModelConfig& c) {
  return Json{{"d_model", c.d_model},
              {"n_heads", c.n_heads},
              {"n_enc_layers", c.n_enc_layers},
              {"n_dec_layers", c.n_dec_layers},
              {"d_ff", c.d_ff},
              {"dropout", c.dropout},
              {"channels", c.channels},
              {"patch", {{"length", c.patch.length}, {"patch", c.patch.patch}, {"stride", c.patch.stride}}},
              {"baseline", c.baseline},
              {"init_seed", c.init_seed}};
}

ModelConfig model_config_from_json(const Json& j, const std::string& path) {
  JsonFields f(j, path,
               {"d_model", "n_heads", "n_enc_layers", "n_dec_layers", "d_ff", "dropout", "channels",
                "patch", "baseline", "init_seed"});
  ModelConfig c;
  f.get("d_model", c.d_model);
  f.get("n_heads", c.n_heads);
  f.get("n_enc_layers", c.n_enc_layers);
  f.get("n_dec_layers", c.n_dec_layers);
  f.get("d_ff", c.d_ff);
  f.get("dropout", c.dropout);
  f.get("channels", c.channels);
  f.get("baseline", c.baseline);
  f.get("init_seed", c.init_seed);
  if (f.has("patch")) {
    JsonFields p(f.at("patch"), f.child("patch"), {"length", "patch", "stride"});
    p.get("length", c.patch.length);
    p.get("patch", c.patch.patch);
    p.get("stride", c.patch.stride);
  }
  return c;
}

std::string config_hash(const ModelConfig& c) {
  Json j = to_json(c);
  j.erase("init_seed");
  const std::string text = j.dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

template <typename T>
nn::Tensor<T> embed_patches(const nn::Tensor<T>& patches, const nn::Tensor<T>& w,
                            const nn::Tensor<T>& b, const nn::Tensor<T>& pos) {
  return nn::add(nn::linear(patches, w, b), pos);
}

template <typename T>
Transformer<T>::Transformer(const ModelConfig& cfg) : cfg_(cfg), tok_(cfg.tokens()) {
  cfg_.validate();
  std::mt19937_64 rng(cfg_.init_seed);
  const std::size_t d = cfg_.d_model;
  const std::size_t width = tok_.patch * cfg_.channels;
  auto xavier = [](std::size_t in, std::size_t out) {
    return static_cast<T>(std::sqrt(6.0 / static_cast<double>(in + out)));
  };

  enc_embed_w_ = add_param("enc.embed.w", {width, d}, xavier(width, d), rng);
  enc_embed_b_ = add_const_param("enc.embed.b", {d}, T(0));
  for (std::size_t i = 0; i < cfg_.n_enc_layers; ++i) {
    const std::string pre = "enc.layer" + std::to_string(i) + ".";
    EncoderLayer layer;
    layer.ln1 = make_norm(pre + "ln1", rng);
    layer.self_attn = make_attention(pre + "self_attn", rng);
    layer.ln2 = make_norm(pre + "ln2", rng);
    layer.ff = make_ff(pre + "ff", rng);
    enc_layers_.push_back(std::move(layer));
  }
  enc_final_ = make_norm("enc.final_ln", rng);

  dec_embed_w_ = add_param("dec.embed.w", {width, d}, xavier(width, d), rng);
  dec_embed_b_ = add_const_param("dec.embed.b", {d}, T(0));
  for (std::size_t i = 0; i < cfg_.n_dec_layers; ++i) {
    const std::string pre = "dec.layer" + std::to_string(i) + ".";
    DecoderLayer layer;
    layer.ln1 = make_norm(pre + "ln1", rng);
    layer.self_attn = make_attention(pre + "self_attn", rng);
    layer.ln2 = make_norm(pre + "ln2", rng);
    layer.cross_attn = make_attention(pre + "cross_attn", rng);
    layer.ln3 = make_norm(pre + "ln3", rng);
    layer.ff = make_ff(pre + "ff", rng);
    dec_layers_.push_back(std::move(layer));
  }
  dec_final_ = make_norm("dec.final_ln", rng);
  head_w_ = add_param("dec.head.w", {d, tok_.patch}, xavier(d, tok_.patch), rng);
  head_b_ = add_const_param("dec.head.b", {tok_.patch}, T(0));

  const std::size_t n = tok_.n_patches();
  positions_ = Tensor::from({n, d}, sinusoidal_positions<T>(n, d));
  dropout_rng_.seed(cfg_.init_seed ^ 0x5bd1e995ULL);
}

template <typename T>
typename Transformer<T>::Tensor Transformer<T>::add_param(const std::string& name, nn::Shape shape,
                                                          T init_bound, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(-static_cast<double>(init_bound), static_cast<double>(init_bound));
  std::vector<T> values(nn::shape_numel(shape));
  for (auto& v : values) v = static_cast<T>(dist(rng));
  params_.push_back(Tensor::from(std::move(shape), std::move(values), true));
  names_.push_back(name);
  return params_.back();
}

template <typename T>
typename Transformer<T>::Tensor Transformer<T>::add_const_param(const std::string& name, nn::Shape shape,
                                                                T value) {
  const std::size_t count = nn::shape_numel(shape);
  params_.push_back(Tensor::from(std::move(shape), std::vector<T>(count, value), true));
  names_.push_back(name);
  return params_.back();
}

template <typename T>
typename Transformer<T>::Norm Transformer<T>::make_norm(const std::string& prefix, std::mt19937_64&) {
  return Norm{add_const_param(prefix + ".gamma", {cfg_.d_model}, T(1)),
              add_const_param(prefix + ".beta", {cfg_.d_model}, T(0))};
}

template <typename T>
typename Transformer<T>::Attention Transformer<T>::make_attention(const std::string& prefix,
                                                                  std::mt19937_64& rng) {
  const std::size_t d = cfg_.d_model;
  const T bound = static_cast<T>(std::sqrt(6.0 / static_cast<double>(2 * d)));
  Attention a;
  a.wq = add_param(prefix + ".wq", {d, d}, bound, rng);
  a.bq = add_const_param(prefix + ".bq", {d}, T(0));
  a.wk = add_param(prefix + ".wk", {d, d}, bound, rng);
  a.bk = add_const_param(prefix + ".bk", {d}, T(0));
  a.wv = add_param(prefix + ".wv", {d, d}, bound, rng);
  a.bv = add_const_param(prefix + ".bv", {d}, T(0));
  a.wo = add_param(prefix + ".wo", {d, d}, bound, rng);
  a.bo = add_const_param(prefix + ".bo", {d}, T(0));
  return a;
}

template <typename T>
typename Transformer<T>::FeedForward Transformer<T>::make_ff(const std::string& prefix,
                                                             std::mt19937_64& rng) {
  const std::size_t d = cfg_.d_model, h = cfg_.d_ff;
  const T bound = static_cast<T>(std::sqrt(6.0 / static_cast<double>(d + h)));
  FeedForward f;
  f.w1 = add_param(prefix + ".w1", {d, h}, bound, rng);
  f.b1 = add_const_param(prefix + ".b1", {h}, T(0));
  f.w2 = add_param(prefix + ".w2", {h, d}, bound, rng);
  f.b2 = add_const_param(prefix + ".b2", {d}, T(0));
  return f;
}

template <typename T>
typename Transformer<T>::Tensor Transformer<T>::tokens_from(const Tensor& x, const Tensor& w,
                                                            const Tensor& b) const {
  if (x.shape() != nn::Shape{tok_.length, cfg_.channels}) {
    throw ShapeError("transformer input " + nn::shape_str(x.shape()) + " is not [" +
                     std::to_string(tok_.length) + ", " + std::to_string(cfg_.channels) + "]");
  }
  const std::size_t n = tok_.n_patches();
  auto patches = patchify<T>(x.data(), cfg_.channels, tok_);
  return embed_patches(Tensor::from({n, tok_.patch * cfg_.channels}, std::move(patches)), w, b,
                       positions_);
}

template <typename T>
typename Transformer<T>::Tensor Transformer<T>::norm(const Norm& n, const Tensor& x) const {
  return nn::layer_norm(x, n.gamma, n.beta, 1);
}

template <typename T>
typename Transformer<T>::Tensor Transformer<T>::drop(const Tensor& x) {
  if (!training_ || cfg_.dropout == 0.0) return x;
  return nn::dropout(x, static_cast<T>(cfg_.dropout), dropout_rng_);
}

template <typename T>
typename Transformer<T>::Tensor Transformer<T>::attend(const Attention& a, const Tensor& xq,
                                                       const Tensor& xkv) {
  const std::size_t heads = cfg_.n_heads;
  const std::size_t dh = cfg_.d_model / heads;
  const Tensor q = nn::linear(xq, a.wq, a.bq);
  const Tensor k = nn::linear(xkv, a.wk, a.bk);
  const Tensor v = nn::linear(xkv, a.wv, a.bv);
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
  std::vector<Tensor> outs;
  outs.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    outs.push_back(nn::scaled_dot_attention(nn::slice(q, 1, h * dh, dh), nn::slice(k, 1, h * dh, dh),
                                            nn::slice(v, 1, h * dh, dh), scale));
  }
  const Tensor merged = heads == 1 ? outs.front() : nn::concat(outs, 1);
  return nn::linear(merged, a.wo, a.bo);
}

template <typename T>
typename Transformer<T>::Tensor Transformer<T>::feed_forward(const FeedForward& f, const Tensor& x) {
  return nn::linear(nn::gelu(nn::linear(x, f.w1, f.b1)), f.w2, f.b2);
}

template <typename T>
typename Transformer<T>::Tensor Transformer<T>::encode(const Tensor& x_enc) {
  Tensor x = tokens_from(x_enc, enc_embed_w_, enc_embed_b_);
  for (const auto& layer : enc_layers_) {
    const Tensor h = norm(layer.ln1, x);
    x = nn::add(x, drop(attend(layer.self_attn, h, h)));
    x = nn::add(x, drop(feed_forward(layer.ff, norm(layer.ln2, x))));
  }
  return norm(enc_final_, x);
}

template <typename T>
typename Transformer<T>::Tensor Transformer<T>::decode(const Tensor& x_dec, const Tensor& z) {
  const nn::Shape z_shape{tok_.n_patches(), cfg_.d_model};
  if (z.shape() != z_shape) {
    throw ShapeError("decode: latent " + nn::shape_str(z.shape()) + " does not match expected " +
                     nn::shape_str(z_shape));
  }
  Tensor x = tokens_from(x_dec, dec_embed_w_, dec_embed_b_);
  for (const auto& layer : dec_layers_) {
    const Tensor h = norm(layer.ln1, x);
    x = nn::add(x, drop(attend(layer.self_attn, h, h)));
    x = nn::add(x, drop(attend(layer.cross_attn, norm(layer.ln2, x), z)));
    x = nn::add(x, drop(feed_forward(layer.ff, norm(layer.ln3, x))));
  }
  const Tensor per_token = nn::linear(norm(dec_final_, x), head_w_, head_b_);
  return nn::overlap_average(per_token, tok_.length, tok_.stride);
}

template <typename T>
std::size_t Transformer<T>::parameter_count() const {
  std::size_t total = 0;
  for (const auto& p : params_) total += p.numel();
  return total;
}

template <typename T>
void Transformer<T>::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

template std::vector<float> patchify<float>(std::span<const float>, std::size_t, const PatchConfig&);
template std::vector<double> patchify<double>(std::span<const double>, std::size_t, const PatchConfig&);
template std::vector<float> sinusoidal_positions<float>(std::size_t, std::size_t);
template std::vector<double> sinusoidal_positions<double>(std::size_t, std::size_t);
template nn::Tensor<float> embed_patches(const nn::Tensor<float>&, const nn::Tensor<float>&,
                                         const nn::Tensor<float>&, const nn::Tensor<float>&);
template nn::Tensor<double> embed_patches(const nn::Tensor<double>&, const nn::Tensor<double>&,
                                          const nn::Tensor<double>&, const nn::Tensor<double>&);
template class Transformer<float>;
template class Transformer<double>;

}  // namespace pemvc::model
