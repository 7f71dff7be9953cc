#pragma once

// The architecture zoo: base models and auxiliary heads assembled from one
// "token mixer + channel MLP" block template. Every mixer maps a token
// sequence [B,T,C] to [B,T,C]. Blocks are templated on the scalar type so
// the gradient-check oracle can build a double-precision twin; production
// models run the float instantiation.

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "hssl/common.hpp"
#include "hssl/params.hpp"
#include "hssl/tensor.hpp"

namespace hssl {

enum class MixerKind {
  Attention,     // multi-head self-attention
  DepthwiseConv, // 3x3 depthwise convolution on the token grid
  TokenMLP,      // linear layer across the token axis
  Pooling,       // 3x3 average pool minus identity, parameter-free
  ResidualConv,  // two full 3x3 convolutions with a ReLU between
};

inline MixerKind mixer_from_string(const std::string& s) {
  if (s == "attention") return MixerKind::Attention;
  if (s == "depthwise_conv") return MixerKind::DepthwiseConv;
  if (s == "token_mlp") return MixerKind::TokenMLP;
  if (s == "pooling") return MixerKind::Pooling;
  if (s == "residual_conv") return MixerKind::ResidualConv;
  throw config_error("unknown mixer kind: " + s);
}

inline std::string mixer_to_string(MixerKind k) {
  switch (k) {
    case MixerKind::Attention: return "attention";
    case MixerKind::DepthwiseConv: return "depthwise_conv";
    case MixerKind::TokenMLP: return "token_mlp";
    case MixerKind::Pooling: return "pooling";
    case MixerKind::ResidualConv: return "residual_conv";
  }
  throw config_error("invalid mixer kind");
}

struct BlockSpec {
  MixerKind mixer = MixerKind::Attention;
  int width = 64;
  double mlp_ratio = 4.0;
  bool keep_shortcut = true;  // the mixer-side (first) shortcut of the block

  void validate() const {
    if (width <= 0) throw config_error("block width must be positive");
    if (mlp_ratio <= 0.0) throw config_error("mlp_ratio must be positive");
  }
};

struct AuxiliaryHeadSpec {
  int id = 0;
  std::vector<BlockSpec> blocks;
  bool remove_first_shortcut = false;

  int depth() const { return static_cast<int>(blocks.size()); }

  // Uniform-block sugar matching the config schema.
  static AuxiliaryHeadSpec uniform(int id, MixerKind mixer, int depth, int width, double mlp_ratio,
                                   bool remove_first_shortcut) {
    if (depth < 1) throw config_error("auxiliary head depth must be >= 1");
    AuxiliaryHeadSpec s;
    s.id = id;
    s.remove_first_shortcut = remove_first_shortcut;
    for (int i = 0; i < depth; ++i) s.blocks.push_back(BlockSpec{mixer, width, mlp_ratio, true});
    if (remove_first_shortcut) s.blocks.front().keep_shortcut = false;
    return s;
  }

  void validate() const {
    if (blocks.empty()) throw config_error("auxiliary head depth must be >= 1");
    for (const auto& b : blocks) b.validate();
    if (remove_first_shortcut && blocks.front().keep_shortcut)
      throw config_error("remove_first_shortcut requires blocks[0].keep_shortcut == false");
  }
};

enum class PoolPolicy { MeanPool, ClassToken };

struct BaseModelSpec {
  int patch_size = 4;
  int image_size = 32;
  int embed_width = 64;
  int depth = 4;
  MixerKind mixer = MixerKind::Attention;
  double mlp_ratio = 4.0;
  bool class_token = false;
  int attn_heads = 0;  // 0 = width / 16, at least 1

  int grid() const { return image_size / patch_size; }
  int patch_tokens() const { return grid() * grid(); }
  int tokens() const { return patch_tokens() + (class_token ? 1 : 0); }

  void validate() const {
    if (embed_width <= 0) throw config_error("embed_width must be positive");
    if (depth < 1) throw config_error("base depth must be >= 1");
    if (patch_size <= 0 || image_size <= 0 || image_size % patch_size != 0)
      throw config_error("image_size must be divisible by patch_size");
    if (mlp_ratio <= 0.0) throw config_error("mlp_ratio must be positive");
  }
};

// [B, T, C] -> [B, C, g, g]; requires a square token count.
template <class T>
TensorT<T> token_grid_reshape(const TensorT<T>& tokens) {
  if (tokens.rank() != 3) throw dimension_error("token_grid_reshape: expected [B,T,C]");
  const int Tn = tokens.shape[1];
  const int g = static_cast<int>(std::lround(std::sqrt(static_cast<double>(Tn))));
  if (g * g != Tn)
    throw dimension_error("token_grid_reshape: token count " + std::to_string(Tn) + " is not a perfect square");
  TensorT<T> grid = permute(tokens, {0, 2, 1});  // [B, C, T]
  return reshape(grid, {tokens.shape[0], tokens.shape[2], g, g});
}

template <class T>
TensorT<T> token_grid_inverse(const TensorT<T>& grid) {
  if (grid.rank() != 4) throw dimension_error("token_grid_inverse: expected [B,C,g,g]");
  TensorT<T> flat = reshape(grid, {grid.shape[0], grid.shape[1], grid.shape[2] * grid.shape[3]});
  return permute(flat, {0, 2, 1});  // [B, T, C]
}

// [B, T, C] -> [B, C]
template <class T>
TensorT<T> pooled_representation(const TensorT<T>& tokens, PoolPolicy policy, bool has_class_token) {
  if (tokens.rank() != 3) throw dimension_error("pooled_representation: expected [B,T,C]");
  if (tokens.shape[1] < 1) throw contract_error("pooled_representation: zero tokens");
  if (policy == PoolPolicy::ClassToken) {
    if (!has_class_token) throw config_error("pooled_representation: class-token policy without a class token");
    TensorT<T> cls = slice(tokens, 1, 0, 1);
    return reshape(cls, {tokens.shape[0], tokens.shape[2]});
  }
  return mean_axis1(tokens);
}

// ---------------------------------------------------------------------------
// Linear and norm layers
// ---------------------------------------------------------------------------

template <class T>
struct LinearLayerT {
  ParameterT<T>* w = nullptr;
  ParameterT<T>* b = nullptr;

  static LinearLayerT create(ParamStoreT<T>& ps, const std::string& name, int in, int out, Rng& rng,
                             bool bias = true) {
    LinearLayerT l;
    l.w = &ps.create(name + ".w", {in, out});
    init_trunc_normal(*l.w, rng);
    if (bias) l.b = &ps.create(name + ".b", {out});
    return l;
  }

  TensorT<T> forward(TapeT<T>* tape, const TensorT<T>& x) const {
    TensorT<T> y = matmul_last(x, param_leaf(tape, *w));
    if (b) y = add_bias(y, param_leaf(tape, *b));
    return y;
  }
};

template <class T>
struct NormLayerT {
  ParameterT<T>* gamma = nullptr;
  ParameterT<T>* beta = nullptr;

  static NormLayerT create(ParamStoreT<T>& ps, const std::string& name, int c) {
    NormLayerT n;
    n.gamma = &ps.create(name + ".gamma", {c});
    init_constant(*n.gamma, T(1));
    n.beta = &ps.create(name + ".beta", {c});
    return n;
  }

  TensorT<T> forward(TapeT<T>* tape, const TensorT<T>& x) const {
    return layer_norm(x, param_leaf(tape, *gamma), param_leaf(tape, *beta), 1e-5);
  }
};

using LinearLayer = LinearLayerT<float>;
using NormLayer = NormLayerT<float>;

namespace detail {

// Runs a spatial-mixer body on the patch grid, detaching a leading class
// token when present and re-appending it unchanged.
template <class T, class Fn>
TensorT<T> with_token_grid(const TensorT<T>& x, bool has_class_token, Fn body) {
  TensorT<T> spatial = x;
  std::optional<TensorT<T>> cls;
  if (has_class_token) {
    cls = slice(x, 1, 0, 1);
    spatial = slice(x, 1, 1, x.shape[1] - 1);
  }
  TensorT<T> grid = token_grid_reshape(spatial);
  TensorT<T> mixed = body(grid);
  TensorT<T> out = token_grid_inverse(mixed);
  if (cls) return concat<T>({*cls, out}, 1);
  return out;
}

}  // namespace detail

// One pre-norm block: x (+)= mixer(LN(x)); y += mlp(LN(y)). The first (mixer
// side) shortcut is the one `keep_shortcut` controls.
template <class T>
class BlockT {
 public:
  BlockT(ParamStoreT<T>& ps, const std::string& prefix, const BlockSpec& spec, int attn_heads, Rng& rng)
      : spec_(spec), heads_(attn_heads) {
    spec.validate();
    const int c = spec.width;
    norm1_ = NormLayerT<T>::create(ps, prefix + ".norm1", c);
    norm2_ = NormLayerT<T>::create(ps, prefix + ".norm2", c);
    const int hidden = std::max(1, static_cast<int>(std::lround(spec.mlp_ratio * c)));
    mlp_fc1_ = LinearLayerT<T>::create(ps, prefix + ".mlp.fc1", c, hidden, rng);
    mlp_fc2_ = LinearLayerT<T>::create(ps, prefix + ".mlp.fc2", hidden, c, rng);
    switch (spec.mixer) {
      case MixerKind::Attention:
        qkv_ = LinearLayerT<T>::create(ps, prefix + ".attn.qkv", c, 3 * c, rng);
        attn_out_ = LinearLayerT<T>::create(ps, prefix + ".attn.out", c, c, rng);
        break;
      case MixerKind::DepthwiseConv:
        dw_w_ = &ps.create(prefix + ".dw.w", {c, 1, 3, 3});
        init_fan_in_normal(*dw_w_, rng, 9);
        dw_b_ = &ps.create(prefix + ".dw.b", {c});
        break;
      case MixerKind::TokenMLP:
        token_store_ = &ps;
        token_prefix_ = prefix;
        token_seed_ = rng.next_u64();
        break;
      case MixerKind::Pooling:
        break;
      case MixerKind::ResidualConv:
        conv1_w_ = &ps.create(prefix + ".conv1.w", {c, c, 3, 3});
        init_fan_in_normal(*conv1_w_, rng, c * 9);
        conv1_b_ = &ps.create(prefix + ".conv1.b", {c});
        conv2_w_ = &ps.create(prefix + ".conv2.w", {c, c, 3, 3});
        init_fan_in_normal(*conv2_w_, rng, c * 9);
        conv2_b_ = &ps.create(prefix + ".conv2.b", {c});
        break;
    }
  }

  // TokenMLP mixes across a fixed token axis; the owner declares it once.
  void set_token_count(int patch_tokens) {
    if (spec_.mixer != MixerKind::TokenMLP || token_w_ != nullptr) return;
    Rng rng(token_seed_);
    token_w_ = &token_store_->create(token_prefix_ + ".token.w", {patch_tokens, patch_tokens});
    init_trunc_normal(*token_w_, rng);
    token_b_ = &token_store_->create(token_prefix_ + ".token.b", {patch_tokens});
  }

  TensorT<T> forward(TapeT<T>* tape, const TensorT<T>& x, bool has_class_token) const {
    TensorT<T> branch = mixer_branch(tape, norm1_.forward(tape, x), has_class_token);
    TensorT<T> y = spec_.keep_shortcut ? add(x, branch) : branch;
    TensorT<T> m = mlp_fc2_.forward(tape, gelu(mlp_fc1_.forward(tape, norm2_.forward(tape, y))));
    return add(y, m);
  }

  const BlockSpec& spec() const { return spec_; }

 private:
  TensorT<T> mixer_branch(TapeT<T>* tape, const TensorT<T>& x, bool has_class_token) const {
    switch (spec_.mixer) {
      case MixerKind::Attention:
        return attention(tape, x);
      case MixerKind::DepthwiseConv:
        return detail::with_token_grid(x, has_class_token, [&](const TensorT<T>& g) {
          return conv2d(g, param_leaf(tape, *dw_w_), param_leaf(tape, *dw_b_), 1, 1, g.shape[1]);
        });
      case MixerKind::TokenMLP: {
        if (token_w_ == nullptr) throw contract_error("token_mlp block used before set_token_count");
        return detail::with_token_grid(x, has_class_token, [&](const TensorT<T>& g) {
          // The token-mixing matrix is tied to the native grid; other
          // resolutions (local crops) are mixed at the native grid and
          // resized back.
          const int native = static_cast<int>(std::lround(std::sqrt(static_cast<double>(token_w_->shape[0]))));
          TensorT<T> grid = g;
          const bool off_native = g.shape[2] != native || g.shape[3] != native;
          if (off_native) grid = resize_bilinear(g, native, native);
          const int B = grid.shape[0], C = grid.shape[1], Tn = grid.shape[2] * grid.shape[3];
          TensorT<T> flat = reshape(grid, {B, C, Tn});
          TensorT<T> mixed = add_bias(matmul_last(flat, param_leaf(tape, *token_w_)), param_leaf(tape, *token_b_));
          TensorT<T> back = reshape(mixed, {B, C, native, native});
          if (off_native) back = resize_bilinear(back, g.shape[2], g.shape[3]);
          return back;
        });
      }
      case MixerKind::Pooling:
        return detail::with_token_grid(x, has_class_token,
                                       [&](const TensorT<T>& g) { return sub(avg_pool2d(g, 3, 1, 1), g); });
      case MixerKind::ResidualConv:
        return detail::with_token_grid(x, has_class_token, [&](const TensorT<T>& g) {
          TensorT<T> h = relu(conv2d(g, param_leaf(tape, *conv1_w_), param_leaf(tape, *conv1_b_), 1, 1, 1));
          return conv2d(h, param_leaf(tape, *conv2_w_), param_leaf(tape, *conv2_b_), 1, 1, 1);
        });
    }
    throw contract_error("invalid mixer kind");
  }

  TensorT<T> attention(TapeT<T>* tape, const TensorT<T>& x) const {
    const int B = x.shape[0], Tn = x.shape[1], C = x.shape[2];
    const int nh = heads_;
    const int dh = C / nh;
    TensorT<T> qkv = qkv_.forward(tape, x);  // [B, T, 3C]
    TensorT<T> q = slice(qkv, 2, 0, C);
    TensorT<T> k = slice(qkv, 2, C, C);
    TensorT<T> v = slice(qkv, 2, 2 * C, C);
    auto to_heads = [&](const TensorT<T>& t) {
      TensorT<T> r = reshape(t, {B, Tn, nh, dh});
      r = permute(r, {0, 2, 1, 3});  // [B, nh, T, dh]
      return reshape(r, {B * nh, Tn, dh});
    };
    TensorT<T> qh = to_heads(q), kh = to_heads(k), vh = to_heads(v);
    TensorT<T> scores = scale(bmm(qh, kh, false, true), 1.0 / std::sqrt(static_cast<double>(dh)));
    TensorT<T> attn = softmax(scores, 1.0);
    TensorT<T> ctx = bmm(attn, vh);  // [B*nh, T, dh]
    TensorT<T> merged = reshape(ctx, {B, nh, Tn, dh});
    merged = permute(merged, {0, 2, 1, 3});
    merged = reshape(merged, {B, Tn, C});
    return attn_out_.forward(tape, merged);
  }

  BlockSpec spec_;
  int heads_ = 1;
  NormLayerT<T> norm1_, norm2_;
  LinearLayerT<T> mlp_fc1_, mlp_fc2_;
  LinearLayerT<T> qkv_, attn_out_;
  ParameterT<T>* dw_w_ = nullptr;
  ParameterT<T>* dw_b_ = nullptr;
  ParameterT<T>* conv1_w_ = nullptr;
  ParameterT<T>* conv1_b_ = nullptr;
  ParameterT<T>* conv2_w_ = nullptr;
  ParameterT<T>* conv2_b_ = nullptr;
  ParameterT<T>* token_w_ = nullptr;
  ParameterT<T>* token_b_ = nullptr;
  ParamStoreT<T>* token_store_ = nullptr;
  std::string token_prefix_;
  uint64_t token_seed_ = 0;
};

using Block = BlockT<float>;

// ---------------------------------------------------------------------------
// Base model
// ---------------------------------------------------------------------------

struct TokenOutputs {
  Tensor tokens;  // [B, T, C]
  Tensor pooled;  // [B, C]
};

class BaseModel {
 public:
  BaseModel(const BaseModelSpec& spec, ParamStore& ps, const std::string& prefix, uint64_t seed)
      : spec_(spec) {
    spec.validate();
    Rng rng(seed);
    const int c = spec.embed_width;
    const int in_dim = 3 * spec.patch_size * spec.patch_size;
    patch_embed_ = LinearLayer::create(ps, prefix + ".patch_embed", in_dim, c, rng);
    pos_embed_ = &ps.create(prefix + ".pos_embed", {spec.patch_tokens(), c});
    init_trunc_normal(*pos_embed_, rng);
    if (spec.class_token) {
      cls_token_ = &ps.create(prefix + ".cls_token", {1, c});
      init_trunc_normal(*cls_token_, rng);
      cls_pos_ = &ps.create(prefix + ".cls_pos", {1, c});
      init_trunc_normal(*cls_pos_, rng);
    }
    const int nh = spec.attn_heads > 0 ? spec.attn_heads : std::max(1, c / 16);
    if (c % nh != 0) throw config_error("embed_width must be divisible by attention head count");
    for (int i = 0; i < spec.depth; ++i) {
      BlockSpec b{spec.mixer, c, spec.mlp_ratio, true};
      blocks_.emplace_back(std::make_unique<Block>(ps, prefix + ".blocks." + std::to_string(i), b, nh, rng));
      blocks_.back()->set_token_count(spec.patch_tokens());
    }
    final_norm_ = NormLayer::create(ps, prefix + ".norm", c);
    mask_token_ = &ps.create(prefix + ".mask_token", {c});
    init_trunc_normal(*mask_token_, rng);
  }

  // images: [B, 3, H, W]; H and W must divide by the patch size. Local crops
  // smaller than the training size are handled by interpolating the
  // positional grid.
  TokenOutputs forward(Tape* tape, const Tensor& images, const std::vector<uint8_t>* token_mask = nullptr) const {
    if (images.rank() != 4 || images.shape[1] != 3) throw dimension_error("base model expects [B,3,H,W] input");
    const int B = images.shape[0];
    Tensor tokens = patch_embed_.forward(tape, extract_patches(images, spec_.patch_size));
    Tensor pos = positional(tape, images.shape[2], images.shape[3]);
    if (token_mask != nullptr) tokens = mask_tokens(tokens, *token_mask, param_leaf(tape, *mask_token_));
    tokens = add_broadcast0(tokens, pos);
    if (spec_.class_token) {
      Tensor cls = add(param_leaf(tape, *cls_token_), param_leaf(tape, *cls_pos_));
      Tensor cls3 = reshape(cls, {1, 1, spec_.embed_width});
      std::vector<Tensor> rows(static_cast<size_t>(B), cls3);
      Tensor cls_batch = B == 1 ? cls3 : concat<float>(rows, 0);
      tokens = concat<float>({cls_batch, tokens}, 1);
    }
    for (const auto& blk : blocks_) tokens = blk->forward(tape, tokens, spec_.class_token);
    tokens = final_norm_.forward(tape, tokens);
    Tensor pooled = pooled_representation(tokens, spec_.class_token ? PoolPolicy::ClassToken : PoolPolicy::MeanPool,
                                          spec_.class_token);
    return {tokens, pooled};
  }

  const BaseModelSpec& spec() const { return spec_; }

 private:
  Tensor positional(Tape* tape, int h, int w) const {
    const int g = spec_.grid();
    const int gh = h / spec_.patch_size, gw = w / spec_.patch_size;
    Tensor pos = param_leaf(tape, *pos_embed_);  // [T, C]
    if (gh == g && gw == g) return pos;
    Tensor grid = reshape(permute(reshape(pos, {1, g, g, spec_.embed_width}), {0, 3, 1, 2}),
                          {1, spec_.embed_width, g, g});
    Tensor resized = resize_bilinear(grid, gh, gw);
    Tensor back = permute(resized, {0, 2, 3, 1});
    return reshape(back, {gh * gw, spec_.embed_width});
  }

  BaseModelSpec spec_;
  LinearLayer patch_embed_;
  Parameter* pos_embed_ = nullptr;
  Parameter* cls_token_ = nullptr;
  Parameter* cls_pos_ = nullptr;
  Parameter* mask_token_ = nullptr;
  std::vector<std::unique_ptr<Block>> blocks_;
  NormLayer final_norm_;
};

// ---------------------------------------------------------------------------
// Auxiliary head
// ---------------------------------------------------------------------------

class AuxiliaryHead {
 public:
  AuxiliaryHead(const AuxiliaryHeadSpec& spec, int input_width, ParamStore& ps, const std::string& prefix,
                uint64_t seed, int patch_tokens)
      : spec_(spec) {
    spec.validate();
    Rng rng(seed);
    width_ = spec.blocks.front().width;
    for (const auto& b : spec.blocks)
      if (b.width != width_) throw config_error("auxiliary head blocks must share one width");
    if (input_width != width_) adapter_ = LinearLayer::create(ps, prefix + ".adapter", input_width, width_, rng);
    const int nh = std::max(1, width_ / 16);
    if (width_ % nh != 0) throw config_error("head width must be divisible by attention head count");
    for (size_t i = 0; i < spec.blocks.size(); ++i) {
      blocks_.emplace_back(
          std::make_unique<Block>(ps, prefix + ".blocks." + std::to_string(i), spec.blocks[i], nh, rng));
      blocks_.back()->set_token_count(patch_tokens);
    }
    final_norm_ = NormLayer::create(ps, prefix + ".norm", width_);
  }

  Tensor forward(Tape* tape, const Tensor& tokens, bool has_class_token) const {
    Tensor x = tokens;
    if (adapter_.w != nullptr) x = adapter_.forward(tape, x);
    for (const auto& blk : blocks_) x = blk->forward(tape, x, has_class_token);
    return final_norm_.forward(tape, x);
  }

  int width() const { return width_; }
  const AuxiliaryHeadSpec& spec() const { return spec_; }

 private:
  AuxiliaryHeadSpec spec_;
  int width_ = 0;
  LinearLayer adapter_;
  std::vector<std::unique_ptr<Block>> blocks_;
  NormLayer final_norm_;
};

}  // namespace hssl
