#pragma once

// Promptable segmentation model: image encoder, prompt encoder and the two
// mask decoder variants (the original token dot-product head and the
// convolutional refinement head with global self-attention).

#include "samseg/autograd.hpp"
#include "samseg/core.hpp"

#include <filesystem>
#include <map>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace samseg {

enum class DecoderVariant { original, modified };
enum class Component { image_encoder, prompt_encoder, mask_decoder };

std::string to_string(DecoderVariant v);
DecoderVariant decoder_variant_from_string(const std::string& s);
std::string to_string(Component c);

constexpr Index kEncoderStride = 16;

struct DecoderConfig {
    DecoderVariant variant = DecoderVariant::modified;
    Index embed_channels = 32;
    Index attention_heads = 1;
    Index mlp_dim = 64;
    Index transformer_depth = 2;
    /// Modified variant only; switching it off is an ablation.
    bool global_attention = true;

    /// Block sequence of the modified upsampling path.
    std::vector<std::string> upsample_stages() const;
    /// Heads used at C = 256 are 8; smaller widths scale proportionally.
    static Index default_heads(Index channels) { return std::max<Index>(1, channels / 32); }
    void validate() const;
};

struct ModelConfig {
    DecoderConfig decoder;
    std::string encoder = "toy_conv";
    /// Side of the square encoder input; patches are resized to it.
    Index encoder_input = 128;
    /// For the "precomputed" encoder: directory of embedding blobs.
    std::string embedding_dir;
    std::uint64_t init_seed = 0;

    static ModelConfig toy(Index channels = 32, Index input = 128,
                           DecoderVariant variant = DecoderVariant::modified);
    nlohmann::json to_json() const;
    static ModelConfig from_json(const nlohmann::json& j);
};

struct NamedParameter {
    std::string name;
    ag::Var var;
    Component component;
};

/// Deterministic initializer shared by all modules of one model.
class Initializer {
  public:
    explicit Initializer(std::uint64_t seed) : rng_(seed) {}
    ag::Var normal(ag::Shape shape, double stddev);
    /// N(0, 1/fan_in).
    ag::Var fan_in(ag::Shape shape, Index fan_in);
    ag::Var zeros(ag::Shape shape);
    ag::Var ones(ag::Shape shape);

  private:
    std::mt19937_64 rng_;
};

/// Stride-16 image features; H_e == W_e == encoder input / 16.
struct ImageEmbedding {
    ag::Var features;  // [C, H_e, W_e]
    /// Side of the patch whose pixel grid click coordinates refer to.
    Index source_patch_size = 0;

    Index channels() const { return features.dim(0); }
    Index side() const { return features.dim(1); }
};

struct PromptEmbedding {
    ag::Var point_tokens;  // [N, C]; undefined when N == 0
    ag::Var mask_embedding;  // [C, H_e, W_e]
    Index token_count() const { return point_tokens.defined() ? point_tokens.dim(0) : 0; }
};

class ImageEncoder {
  public:
    virtual ~ImageEncoder() = default;
    virtual std::string kind() const = 0;
    virtual Index channels() const = 0;
    virtual Index input_size() const = 0;
    /// `image` is [3, S, S], already normalized.
    virtual ag::Var forward(const ag::Var& image) const = 0;
    virtual std::vector<NamedParameter> parameters() const = 0;
};

/// Patch embedding (16x16, stride 16), a residual 3x3 convolution and a
/// per-position layer-normalized 1x1 neck.
class ToyConvEncoder final : public ImageEncoder {
  public:
    ToyConvEncoder(Index channels, Index input_size, Initializer& init);
    std::string kind() const override { return "toy_conv"; }
    Index channels() const override { return channels_; }
    Index input_size() const override { return input_size_; }
    ag::Var forward(const ag::Var& image) const override;
    std::vector<NamedParameter> parameters() const override;

  private:
    Index channels_;
    Index input_size_;
    ag::Var patch_w_, patch_b_, mix_w_, mix_b_, neck_w_, neck_b_, neck_g_, neck_beta_;
};

/// Adapter slot for a pretrained foundation encoder run out of process.
/// Features are looked up as `<dir>/<fnv64 of the resized image>.bin`
/// (little-endian float32, [C, S/16, S/16]). Has no trainable parameters.
class PrecomputedEncoder final : public ImageEncoder {
  public:
    PrecomputedEncoder(std::filesystem::path dir, Index channels, Index input_size);
    std::string kind() const override { return "precomputed"; }
    Index channels() const override { return channels_; }
    Index input_size() const override { return input_size_; }
    ag::Var forward(const ag::Var& image) const override;
    std::vector<NamedParameter> parameters() const override { return {}; }
    static std::string key_for(const ag::Var& image);

  private:
    std::filesystem::path dir_;
    Index channels_;
    Index input_size_;
};

class PromptEncoder {
  public:
    PromptEncoder(Index channels, Initializer& init);

    PromptEmbedding forward(std::span<const Click> clicks, const Logits* prev_logits,
                            const ImageEmbedding& embedding) const;
    /// Random-Fourier positional encoding of the H x W grid as [H*W, C].
    ag::Var dense_positional_encoding(Index height, Index width) const;
    /// Encoding of normalized (y, x) in [0, 1].
    Eigen::RowVectorXd positional_encoding(double y, double x) const;
    std::vector<NamedParameter> parameters() const;
    Index channels() const { return channels_; }

  private:
    Index channels_;
    ag::Var gaussian_;  // [2, C/2], fixed
    ag::Var point_embeddings_;  // [2, C]: negative, positive
    ag::Var no_mask_;  // [C]
    ag::Var mask_w1_, mask_b1_, mask_w2_, mask_b2_, mask_w3_, mask_b3_;
};

/// Multi-head attention with an internal projection width.
struct Attention {
    Index heads = 1;
    Index internal = 0;
    ag::Var q_w, q_b, k_w, k_b, v_w, v_b, o_w, o_b;

    Attention() = default;
    Attention(Index channels, Index heads, Index downsample, Initializer& init);
    ag::Var operator()(const ag::Var& q, const ag::Var& k, const ag::Var& v) const;
    void collect(const std::string& prefix, std::vector<NamedParameter>& out) const;
};

struct LayerNorm {
    ag::Var gamma, beta;
    LayerNorm() = default;
    LayerNorm(Index channels, Initializer& init);
    ag::Var operator()(const ag::Var& x) const { return ag::layer_norm_rows(x, gamma, beta); }
    void collect(const std::string& prefix, std::vector<NamedParameter>& out) const;
};

/// Two-way attention between prompt tokens and image positions.
class TwoWayTransformer {
  public:
    TwoWayTransformer(const DecoderConfig& cfg, Initializer& init);
    /// Returns (tokens [N, C], image sequence [H*W, C]).
    std::pair<ag::Var, ag::Var> operator()(const ag::Var& tokens, const ag::Var& image_seq,
                                           const ag::Var& image_pe) const;
    void collect(const std::string& prefix, std::vector<NamedParameter>& out) const;

  private:
    struct Layer {
        Attention self_attn, token_to_image, image_to_token;
        LayerNorm norm1, norm2, norm3, norm4;
        ag::Var mlp_w1, mlp_b1, mlp_w2, mlp_b2;
        bool skip_first_pe = false;
    };
    std::vector<Layer> layers_;
    Attention final_attn_;
    LayerNorm final_norm_;
};

/// conv3x3 -> norm -> GELU -> conv3x3 (halving channels) -> norm -> GELU,
/// optionally followed by a 2x2 up-convolution, plus a 1x1-projected
/// shortcut from the block input (nearest-upsampled for up blocks).
struct ConvBlock {
    Index in_channels = 0;
    bool upsample = false;
    ag::Var conv1_w, conv1_b, conv2_w, conv2_b, up_w, up_b, proj_w, proj_b;

    ConvBlock() = default;
    ConvBlock(Index in_channels, bool upsample, Initializer& init);
    ag::Var operator()(const ag::Var& x) const;
    ag::Var shortcut(const ag::Var& x) const;
    void collect(const std::string& prefix, std::vector<NamedParameter>& out) const;
    void zero_main_path();
};

class MaskDecoder {
  public:
    MaskDecoder(const DecoderConfig& cfg, Initializer& init);

    /// Low-resolution logits [1, 4*H_e, 4*W_e].
    ag::Var forward(const ImageEmbedding& embedding, const PromptEmbedding& prompts,
                    const PromptEncoder& prompt_encoder) const;
    /// Output of the two-way transformer on the image side, [C, H_e, W_e].
    ag::Var image_features(const ImageEmbedding& embedding, const PromptEmbedding& prompts,
                           const PromptEncoder& prompt_encoder) const;
    /// Modified variant: global self-attention over all positions of
    /// [C, H, W] features (identity when ablated).
    ag::Var global_context(const ag::Var& features, const ag::Var& image_pe) const;
    /// Modified variant: upsampling blocks and 1x1 head.
    ag::Var refine(const ag::Var& features) const;

    std::vector<NamedParameter> parameters() const;
    const DecoderConfig& config() const { return cfg_; }
    std::vector<ConvBlock>& blocks() { return blocks_; }
    const std::vector<ConvBlock>& blocks() const { return blocks_; }

  private:
    DecoderConfig cfg_;
    ag::Var mask_token_;  // [1, C]
    TwoWayTransformer transformer_;
    // modified
    Attention global_attn_;
    LayerNorm global_norm_;
    std::vector<ConvBlock> blocks_;
    ag::Var head_w_, head_b_;
    // original
    ag::Var up1_w_, up1_b_, up2_w_, up2_b_;
    LayerNorm up_norm_;
    ag::Var hyper_w1_, hyper_b1_, hyper_w2_, hyper_b2_, hyper_w3_, hyper_b3_;
};

/// Resizes an RGB patch to `side` x `side` and normalizes it into [3, S, S].
ag::Var prepare_image(const RgbImage& patch, Index side);

ImageEmbedding encode_image(const ag::Var& prepared, const ImageEncoder& encoder, Index source_patch_size);

PromptEmbedding encode_prompts(std::span<const Click> clicks, const Logits* prev_logits,
                               const ImageEmbedding& embedding, const PromptEncoder& encoder);

/// Both throw DimensionError unless the decoder matches the requested variant
/// and the embedding matches the decoder width.
ag::Var decode_original(const ImageEmbedding& embedding, const PromptEmbedding& prompts,
                        const MaskDecoder& decoder, const PromptEncoder& prompt_encoder);
ag::Var decode_modified(const ImageEmbedding& embedding, const PromptEmbedding& prompts,
                        const MaskDecoder& decoder, const PromptEncoder& prompt_encoder);

/// Bilinear upsampling of low-resolution logits back to the patch size.
Logits restore_to_patch(const Logits& low_res, Index patch_size);

/// [1, H, W] tensor to a logit grid.
Logits to_logits(const ag::Var& map);

class SamModel {
  public:
    explicit SamModel(const ModelConfig& cfg);

    const ModelConfig& config() const { return cfg_; }
    const ImageEncoder& image_encoder() const { return *image_encoder_; }
    const PromptEncoder& prompt_encoder() const { return prompt_encoder_; }
    const MaskDecoder& mask_decoder() const { return mask_decoder_; }
    MaskDecoder& mask_decoder() { return mask_decoder_; }

    /// Resize + encode. Click coordinates refer to a patch of `source_patch_size`.
    ImageEmbedding embed(const RgbImage& patch) const;
    ImageEmbedding embed_prepared(const ag::Var& prepared, Index source_patch_size) const;
    /// Low-resolution logits [1, 4*H_e, 4*W_e].
    ag::Var decode(const ImageEmbedding& embedding, std::span<const Click> clicks, const Logits* prev_logits) const;

    std::vector<NamedParameter> parameters() const;
    std::map<std::string, ag::Var> parameter_map() const;

    void save(const std::filesystem::path& dir) const;
    static SamModel load(const std::filesystem::path& dir);

  private:
    SamModel(const ModelConfig& cfg, Initializer&& init);

    ModelConfig cfg_;
    std::shared_ptr<ImageEncoder> image_encoder_;
    PromptEncoder prompt_encoder_;
    MaskDecoder mask_decoder_;
};

/// Deep copy (parameters are cloned, not shared).
SamModel clone(const SamModel& model);

/// FNV-1a over the float64 values of every parameter of a component.
std::uint64_t parameter_checksum(const SamModel& model, Component component);

}  // namespace samseg
