#include "samseg/nets.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>

namespace samseg {

using ag::Var;

namespace {

void add_param(std::vector<NamedParameter>& out, const std::string& name, const Var& v, Component c) {
    out.push_back({name, v, c});
}

Var conv(const Var& x, const Var& w, const Var& b, Index stride = 1, Index pad = 0) {
    return ag::conv2d(x, w, b, stride, pad);
}

Var mlp_relu(const Var& x, const Var& w1, const Var& b1, const Var& w2, const Var& b2) {
    return ag::linear(ag::relu(ag::linear(x, w1, b1)), w2, b2);
}

}  // namespace

std::string to_string(DecoderVariant v) { return v == DecoderVariant::original ? "original" : "modified"; }

DecoderVariant decoder_variant_from_string(const std::string& s) {
    if (s == "original") return DecoderVariant::original;
    if (s == "modified") return DecoderVariant::modified;
    throw ArgumentError("unknown decoder variant '" + s + "'");
}

std::string to_string(Component c) {
    switch (c) {
        case Component::image_encoder: return "image_encoder";
        case Component::prompt_encoder: return "prompt_encoder";
        case Component::mask_decoder: return "mask_decoder";
    }
    return "unknown";
}

std::vector<std::string> DecoderConfig::upsample_stages() const {
    if (variant == DecoderVariant::modified) return {"UpConvBlock", "UpConvBlock", "ConvBlock"};
    return {"ConvTranspose2x2", "ConvTranspose2x2"};
}

void DecoderConfig::validate() const {
    if (embed_channels < 8 || embed_channels % 8 != 0)
        throw ArgumentError("decoder: embed_channels must be a positive multiple of 8");
    if (attention_heads < 1 || (embed_channels / 2) % attention_heads != 0)
        throw ArgumentError("decoder: attention_heads must divide embed_channels / 2");
    if (mlp_dim < 1 || transformer_depth < 1) throw ArgumentError("decoder: mlp_dim and depth must be positive");
}

ModelConfig ModelConfig::toy(Index channels, Index input, DecoderVariant variant) {
    ModelConfig cfg;
    cfg.decoder.variant = variant;
    cfg.decoder.embed_channels = channels;
    cfg.decoder.attention_heads = DecoderConfig::default_heads(channels);
    cfg.decoder.mlp_dim = 2 * channels;
    cfg.encoder_input = input;
    return cfg;
}

nlohmann::json ModelConfig::to_json() const {
    return {{"variant", samseg::to_string(decoder.variant)},
            {"embed_channels", decoder.embed_channels},
            {"attention_heads", decoder.attention_heads},
            {"mlp_dim", decoder.mlp_dim},
            {"transformer_depth", decoder.transformer_depth},
            {"global_attention", decoder.global_attention},
            {"stages", decoder.upsample_stages()},
            {"encoder", encoder},
            {"encoder_input", encoder_input},
            {"embedding_dir", embedding_dir},
            {"init_seed", init_seed}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
    ModelConfig cfg;
    cfg.decoder.variant = decoder_variant_from_string(j.at("variant").get<std::string>());
    cfg.decoder.embed_channels = j.at("embed_channels").get<Index>();
    cfg.decoder.attention_heads = j.value("attention_heads", DecoderConfig::default_heads(cfg.decoder.embed_channels));
    cfg.decoder.mlp_dim = j.value("mlp_dim", 2 * cfg.decoder.embed_channels);
    cfg.decoder.transformer_depth = j.value("transformer_depth", Index{2});
    cfg.decoder.global_attention = j.value("global_attention", true);
    cfg.encoder = j.value("encoder", std::string("toy_conv"));
    cfg.encoder_input = j.value("encoder_input", Index{128});
    cfg.embedding_dir = j.value("embedding_dir", std::string());
    cfg.init_seed = j.value("init_seed", std::uint64_t{0});
    if (j.contains("stages") && j["stages"].get<std::vector<std::string>>() != cfg.decoder.upsample_stages())
        throw ArgumentError("model manifest: stage list does not match variant");
    return cfg;
}

// ---------------------------------------------------------------------------
// Initializer

Var Initializer::normal(ag::Shape shape, double stddev) {
    std::normal_distribution<double> dist(0.0, stddev);
    ag::Vector v(ag::numel(shape));
    for (Index i = 0; i < v.size(); ++i) v(i) = dist(rng_);
    return Var::parameter(std::move(shape), std::move(v));
}

Var Initializer::fan_in(ag::Shape shape, Index fan_in) {
    return normal(std::move(shape), 1.0 / std::sqrt(static_cast<double>(fan_in)));
}

Var Initializer::zeros(ag::Shape shape) {
    Var v = Var::zeros(std::move(shape));
    v.set_requires_grad(true);
    return v;
}

Var Initializer::ones(ag::Shape shape) {
    const Index n = ag::numel(shape);
    return Var::parameter(std::move(shape), ag::Vector::Ones(n));
}

// ---------------------------------------------------------------------------
// Image encoders

ToyConvEncoder::ToyConvEncoder(Index channels, Index input_size, Initializer& init)
    : channels_(channels), input_size_(input_size) {
    patch_w_ = init.fan_in({channels, 3, kEncoderStride, kEncoderStride}, 3 * kEncoderStride * kEncoderStride);
    patch_b_ = init.zeros({channels});
    mix_w_ = init.fan_in({channels, channels, 3, 3}, 9 * channels);
    mix_b_ = init.zeros({channels});
    neck_w_ = init.fan_in({channels, channels, 1, 1}, channels);
    neck_b_ = init.zeros({channels});
    neck_g_ = init.ones({channels});
    neck_beta_ = init.zeros({channels});
}

namespace {
void check_encoder_input(const Var& image) {
    if (image.rank() != 3 || image.dim(0) != 3) throw ArgumentError("encoder input must be [3, S, S]");
    const Index h = image.dim(1), w = image.dim(2);
    if (h != w) throw ArgumentError("encoder input must be square");
    if (h < 64 || h > 1024 || h % kEncoderStride != 0)
        throw ArgumentError("encoder input side must be a multiple of 16 in [64, 1024], got " + std::to_string(h));
}
}  // namespace

Var ToyConvEncoder::forward(const Var& image) const {
    check_encoder_input(image);
    Var x = conv(image, patch_w_, patch_b_, kEncoderStride, 0);
    x = ag::add(x, conv(ag::gelu(x), mix_w_, mix_b_, 1, 1));
    x = conv(x, neck_w_, neck_b_);
    const Index side = x.dim(1);
    Var seq = ag::layer_norm_rows(ag::image_to_sequence(x), neck_g_, neck_beta_, 1e-6);
    return ag::sequence_to_image(seq, side, side);
}

std::vector<NamedParameter> ToyConvEncoder::parameters() const {
    const auto c = Component::image_encoder;
    return {{"image_encoder.patch_embed.weight", patch_w_, c}, {"image_encoder.patch_embed.bias", patch_b_, c},
            {"image_encoder.mix.weight", mix_w_, c},           {"image_encoder.mix.bias", mix_b_, c},
            {"image_encoder.neck.weight", neck_w_, c},         {"image_encoder.neck.bias", neck_b_, c},
            {"image_encoder.neck_norm.weight", neck_g_, c},    {"image_encoder.neck_norm.bias", neck_beta_, c}};
}

PrecomputedEncoder::PrecomputedEncoder(std::filesystem::path dir, Index channels, Index input_size)
    : dir_(std::move(dir)), channels_(channels), input_size_(input_size) {}

std::string PrecomputedEncoder::key_for(const Var& image) {
    std::uint64_t h = 1469598103934665603ULL;
    const auto* p = reinterpret_cast<const unsigned char*>(image.value().data());
    for (std::size_t i = 0; i < static_cast<std::size_t>(image.numel()) * sizeof(double); ++i) {
        h ^= p[i];
        h *= 1099511628211ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

Var PrecomputedEncoder::forward(const Var& image) const {
    check_encoder_input(image);
    const Index side = image.dim(1) / kEncoderStride;
    const auto path = dir_ / (key_for(image) + ".bin");
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ArgumentError("precomputed encoder: no embedding at " + path.string());
    std::vector<float> buf(static_cast<std::size_t>(channels_ * side * side));
    in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float)));
    if (in.gcount() != static_cast<std::streamsize>(buf.size() * sizeof(float)))
        throw ArgumentError("precomputed encoder: truncated embedding " + path.string());
    ag::Vector v(static_cast<Index>(buf.size()));
    for (std::size_t i = 0; i < buf.size(); ++i) {
        float f = buf[i];
        if constexpr (std::endian::native == std::endian::big) {
            std::uint32_t u;
            std::memcpy(&u, &f, 4);
            u = __builtin_bswap32(u);
            std::memcpy(&f, &u, 4);
        }
        v(static_cast<Index>(i)) = f;
    }
    return Var::constant({channels_, side, side}, std::move(v));
}

// ---------------------------------------------------------------------------
// Prompt encoder

PromptEncoder::PromptEncoder(Index channels, Initializer& init) : channels_(channels) {
    gaussian_ = init.normal({2, channels / 2}, 1.0);
    gaussian_.set_requires_grad(false);
    point_embeddings_ = init.normal({2, channels}, 1.0);
    no_mask_ = init.normal({channels}, 1.0);
    mask_w1_ = init.fan_in({4, 1, 2, 2}, 4);
    mask_b1_ = init.zeros({4});
    mask_w2_ = init.fan_in({16, 4, 2, 2}, 16);
    mask_b2_ = init.zeros({16});
    mask_w3_ = init.fan_in({channels, 16, 1, 1}, 16);
    mask_b3_ = init.zeros({channels});
}

Eigen::RowVectorXd PromptEncoder::positional_encoding(double y, double x) const {
    const Index half = channels_ / 2;
    const auto g = gaussian_.matrix();
    Eigen::RowVectorXd out(channels_);
    const double cx = 2.0 * x - 1.0;
    const double cy = 2.0 * y - 1.0;
    for (Index i = 0; i < half; ++i) {
        const double proj = 2.0 * std::numbers::pi * (cx * g(0, i) + cy * g(1, i));
        out(i) = std::sin(proj);
        out(half + i) = std::cos(proj);
    }
    return out;
}

Var PromptEncoder::dense_positional_encoding(Index height, Index width) const {
    ag::Vector v(height * width * channels_);
    ag::MatMap m(v.data(), height * width, channels_);
    for (Index r = 0; r < height; ++r)
        for (Index c = 0; c < width; ++c)
            m.row(r * width + c) = positional_encoding((static_cast<double>(r) + 0.5) / static_cast<double>(height),
                                                       (static_cast<double>(c) + 0.5) / static_cast<double>(width));
    return Var::constant({height * width, channels_}, std::move(v));
}

PromptEmbedding PromptEncoder::forward(std::span<const Click> clicks, const Logits* prev_logits,
                                       const ImageEmbedding& embedding) const {
    if (embedding.channels() != channels_) throw DimensionError("prompt encoder: embedding width mismatch");
    PromptEmbedding out;
    const Index n = static_cast<Index>(clicks.size());
    const double src = static_cast<double>(embedding.source_patch_size);
    if (n > 0) {
        ag::Vector pe(n * channels_);
        ag::Vector onehot = ag::Vector::Zero(n * 2);
        ag::MatMap pm(pe.data(), n, channels_);
        for (Index i = 0; i < n; ++i) {
            const auto& c = clicks[static_cast<std::size_t>(i)];
            require_in_bounds(c.row, c.col, embedding.source_patch_size, embedding.source_patch_size);
            pm.row(i) = positional_encoding((static_cast<double>(c.row) + 0.5) / src,
                                            (static_cast<double>(c.col) + 0.5) / src);
            onehot(i * 2 + (c.polarity == Polarity::positive ? 1 : 0)) = 1.0;
        }
        Var selected = ag::matmul(Var::constant({n, 2}, std::move(onehot)), point_embeddings_);
        out.point_tokens = ag::add(Var::constant({n, channels_}, std::move(pe)), selected);
    }
    const Index side = embedding.side();
    if (prev_logits != nullptr && prev_logits->size() > 0) {
        const Index mask_side = 4 * side;
        Logits m = (prev_logits->rows() == mask_side && prev_logits->cols() == mask_side)
                       ? *prev_logits
                       : resize_bilinear(*prev_logits, mask_side, mask_side);
        ag::Vector v = Eigen::Map<const ag::Vector>(m.data(), m.size());
        Var x = Var::constant({1, mask_side, mask_side}, std::move(v));
        x = ag::gelu(conv(x, mask_w1_, mask_b1_, 2));
        x = ag::gelu(conv(x, mask_w2_, mask_b2_, 2));
        out.mask_embedding = conv(x, mask_w3_, mask_b3_);
    } else {
        out.mask_embedding = ag::broadcast_channels(no_mask_, side, side);
    }
    return out;
}

std::vector<NamedParameter> PromptEncoder::parameters() const {
    const auto c = Component::prompt_encoder;
    return {{"prompt_encoder.pe_gaussian", gaussian_, c},
            {"prompt_encoder.point_embeddings", point_embeddings_, c},
            {"prompt_encoder.no_mask_embed", no_mask_, c},
            {"prompt_encoder.mask_downscaling.0.weight", mask_w1_, c},
            {"prompt_encoder.mask_downscaling.0.bias", mask_b1_, c},
            {"prompt_encoder.mask_downscaling.1.weight", mask_w2_, c},
            {"prompt_encoder.mask_downscaling.1.bias", mask_b2_, c},
            {"prompt_encoder.mask_downscaling.2.weight", mask_w3_, c},
            {"prompt_encoder.mask_downscaling.2.bias", mask_b3_, c}};
}

// ---------------------------------------------------------------------------
// Attention blocks

Attention::Attention(Index channels, Index heads_, Index downsample, Initializer& init)
    : heads(heads_), internal(channels / downsample) {
    if (internal % heads != 0) throw ArgumentError("attention: heads must divide the internal width");
    q_w = init.fan_in({internal, channels}, channels);
    q_b = init.zeros({internal});
    k_w = init.fan_in({internal, channels}, channels);
    k_b = init.zeros({internal});
    v_w = init.fan_in({internal, channels}, channels);
    v_b = init.zeros({internal});
    o_w = init.fan_in({channels, internal}, internal);
    o_b = init.zeros({channels});
}

Var Attention::operator()(const Var& q_in, const Var& k_in, const Var& v_in) const {
    const Var q = ag::linear(q_in, q_w, q_b);
    const Var k = ag::linear(k_in, k_w, k_b);
    const Var v = ag::linear(v_in, v_w, v_b);
    const Index d = internal / heads;
    const double s = 1.0 / std::sqrt(static_cast<double>(d));
    std::vector<Var> outs;
    for (Index h = 0; h < heads; ++h) {
        const Var qh = heads == 1 ? q : ag::slice_cols(q, h * d, d);
        const Var kh = heads == 1 ? k : ag::slice_cols(k, h * d, d);
        const Var vh = heads == 1 ? v : ag::slice_cols(v, h * d, d);
        const Var attn = ag::softmax_rows(ag::scale(ag::matmul(qh, ag::transpose(kh)), s));
        outs.push_back(ag::matmul(attn, vh));
    }
    const Var merged = heads == 1 ? outs[0] : ag::concat_cols(outs);
    return ag::linear(merged, o_w, o_b);
}

void Attention::collect(const std::string& prefix, std::vector<NamedParameter>& out) const {
    const auto c = Component::mask_decoder;
    add_param(out, prefix + ".q_proj.weight", q_w, c);
    add_param(out, prefix + ".q_proj.bias", q_b, c);
    add_param(out, prefix + ".k_proj.weight", k_w, c);
    add_param(out, prefix + ".k_proj.bias", k_b, c);
    add_param(out, prefix + ".v_proj.weight", v_w, c);
    add_param(out, prefix + ".v_proj.bias", v_b, c);
    add_param(out, prefix + ".out_proj.weight", o_w, c);
    add_param(out, prefix + ".out_proj.bias", o_b, c);
}

LayerNorm::LayerNorm(Index channels, Initializer& init) : gamma(init.ones({channels})), beta(init.zeros({channels})) {}

void LayerNorm::collect(const std::string& prefix, std::vector<NamedParameter>& out) const {
    add_param(out, prefix + ".weight", gamma, Component::mask_decoder);
    add_param(out, prefix + ".bias", beta, Component::mask_decoder);
}

TwoWayTransformer::TwoWayTransformer(const DecoderConfig& cfg, Initializer& init) {
    const Index c = cfg.embed_channels;
    for (Index i = 0; i < cfg.transformer_depth; ++i) {
        Layer l;
        l.self_attn = Attention(c, cfg.attention_heads, 1, init);
        l.norm1 = LayerNorm(c, init);
        l.token_to_image = Attention(c, cfg.attention_heads, 2, init);
        l.norm2 = LayerNorm(c, init);
        l.mlp_w1 = init.fan_in({cfg.mlp_dim, c}, c);
        l.mlp_b1 = init.zeros({cfg.mlp_dim});
        l.mlp_w2 = init.fan_in({c, cfg.mlp_dim}, cfg.mlp_dim);
        l.mlp_b2 = init.zeros({c});
        l.norm3 = LayerNorm(c, init);
        l.image_to_token = Attention(c, cfg.attention_heads, 2, init);
        l.norm4 = LayerNorm(c, init);
        l.skip_first_pe = i == 0;
        layers_.push_back(std::move(l));
    }
    final_attn_ = Attention(c, cfg.attention_heads, 2, init);
    final_norm_ = LayerNorm(c, init);
}

std::pair<Var, Var> TwoWayTransformer::operator()(const Var& tokens, const Var& image_seq, const Var& image_pe) const {
    Var queries = tokens;
    Var keys = image_seq;
    const Var& query_pe = tokens;
    for (const auto& l : layers_) {
        if (l.skip_first_pe) {
            queries = l.self_attn(queries, queries, queries);
        } else {
            const Var q = ag::add(queries, query_pe);
            queries = ag::add(queries, l.self_attn(q, q, queries));
        }
        queries = l.norm1(queries);

        Var q = ag::add(queries, query_pe);
        Var k = ag::add(keys, image_pe);
        queries = l.norm2(ag::add(queries, l.token_to_image(q, k, keys)));

        queries = l.norm3(ag::add(queries, mlp_relu(queries, l.mlp_w1, l.mlp_b1, l.mlp_w2, l.mlp_b2)));

        q = ag::add(queries, query_pe);
        k = ag::add(keys, image_pe);
        keys = l.norm4(ag::add(keys, l.image_to_token(k, q, queries)));
    }
    const Var q = ag::add(queries, query_pe);
    const Var k = ag::add(keys, image_pe);
    queries = final_norm_(ag::add(queries, final_attn_(q, k, keys)));
    return {queries, keys};
}

void TwoWayTransformer::collect(const std::string& prefix, std::vector<NamedParameter>& out) const {
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        const auto& l = layers_[i];
        const std::string p = prefix + ".layers." + std::to_string(i);
        l.self_attn.collect(p + ".self_attn", out);
        l.norm1.collect(p + ".norm1", out);
        l.token_to_image.collect(p + ".cross_attn_token_to_image", out);
        l.norm2.collect(p + ".norm2", out);
        add_param(out, p + ".mlp.lin1.weight", l.mlp_w1, Component::mask_decoder);
        add_param(out, p + ".mlp.lin1.bias", l.mlp_b1, Component::mask_decoder);
        add_param(out, p + ".mlp.lin2.weight", l.mlp_w2, Component::mask_decoder);
        add_param(out, p + ".mlp.lin2.bias", l.mlp_b2, Component::mask_decoder);
        l.norm3.collect(p + ".norm3", out);
        l.image_to_token.collect(p + ".cross_attn_image_to_token", out);
        l.norm4.collect(p + ".norm4", out);
    }
    final_attn_.collect(prefix + ".final_attn_token_to_image", out);
    final_norm_.collect(prefix + ".norm_final_attn", out);
}

// ---------------------------------------------------------------------------
// Refinement blocks

ConvBlock::ConvBlock(Index in, bool up, Initializer& init) : in_channels(in), upsample(up) {
    const Index half = in / 2;
    conv1_w = init.fan_in({in, in, 3, 3}, 9 * in);
    conv1_b = init.zeros({in});
    conv2_w = init.fan_in({half, in, 3, 3}, 9 * in);
    conv2_b = init.zeros({half});
    if (upsample) {
        up_w = init.fan_in({half, half, 2, 2}, half);
        up_b = init.zeros({half});
    }
    proj_w = init.fan_in({half, in, 1, 1}, in);
    proj_b = init.zeros({half});
}

Var ConvBlock::shortcut(const Var& x) const {
    Var s = conv(x, proj_w, proj_b);
    return upsample ? ag::upsample_nearest2x(s) : s;
}

Var ConvBlock::operator()(const Var& x) const {
    Var h = ag::gelu(ag::instance_norm(conv(x, conv1_w, conv1_b, 1, 1)));
    h = ag::gelu(ag::instance_norm(conv(h, conv2_w, conv2_b, 1, 1)));
    if (upsample) h = ag::conv_transpose2x2(h, up_w, up_b);
    return ag::add(h, shortcut(x));
}

void ConvBlock::collect(const std::string& prefix, std::vector<NamedParameter>& out) const {
    const auto c = Component::mask_decoder;
    add_param(out, prefix + ".conv1.weight", conv1_w, c);
    add_param(out, prefix + ".conv1.bias", conv1_b, c);
    add_param(out, prefix + ".conv2.weight", conv2_w, c);
    add_param(out, prefix + ".conv2.bias", conv2_b, c);
    if (upsample) {
        add_param(out, prefix + ".upconv.weight", up_w, c);
        add_param(out, prefix + ".upconv.bias", up_b, c);
    }
    add_param(out, prefix + ".shortcut.weight", proj_w, c);
    add_param(out, prefix + ".shortcut.bias", proj_b, c);
}

void ConvBlock::zero_main_path() {
    for (Var* v : {&conv1_w, &conv1_b, &conv2_w, &conv2_b, &up_w, &up_b})
        if (v->defined()) v->mutable_value().setZero();
}

// ---------------------------------------------------------------------------
// Mask decoder

MaskDecoder::MaskDecoder(const DecoderConfig& cfg, Initializer& init)
    : cfg_(cfg), mask_token_(init.normal({1, cfg.embed_channels}, 1.0)), transformer_(cfg, init) {
    cfg_.validate();
    const Index c = cfg.embed_channels;
    if (cfg.variant == DecoderVariant::modified) {
        global_attn_ = Attention(c, cfg.attention_heads, 1, init);
        global_norm_ = LayerNorm(c, init);
        blocks_.emplace_back(c, true, init);
        blocks_.emplace_back(c / 2, true, init);
        blocks_.emplace_back(c / 4, false, init);
        head_w_ = init.fan_in({1, c / 8, 1, 1}, c / 8);
        head_b_ = init.zeros({1});
    } else {
        up1_w_ = init.fan_in({c, c / 4, 2, 2}, c);
        up1_b_ = init.zeros({c / 4});
        up_norm_ = LayerNorm(c / 4, init);
        up2_w_ = init.fan_in({c / 4, c / 8, 2, 2}, c / 4);
        up2_b_ = init.zeros({c / 8});
        hyper_w1_ = init.fan_in({c, c}, c);
        hyper_b1_ = init.zeros({c});
        hyper_w2_ = init.fan_in({c, c}, c);
        hyper_b2_ = init.zeros({c});
        hyper_w3_ = init.fan_in({c / 8, c}, c);
        hyper_b3_ = init.zeros({c / 8});
    }
}

namespace {
struct TransformerOut {
    Var tokens;
    Var image;  // [H*W, C]
    Var image_pe;
};

TransformerOut run_transformer(const ImageEmbedding& e, const PromptEmbedding& p, const PromptEncoder& pe,
                               const Var& mask_token, const TwoWayTransformer& transformer, Index channels) {
    if (e.channels() != channels) throw DimensionError("decoder: embedding has " + std::to_string(e.channels()) +
                                                       " channels, decoder expects " + std::to_string(channels));
    if (p.mask_embedding.shape() != e.features.shape())
        throw DimensionError("decoder: mask embedding shape " + ag::shape_string(p.mask_embedding.shape()) +
                             " vs image embedding " + ag::shape_string(e.features.shape()));
    if (p.token_count() > 0 && p.point_tokens.dim(1) != channels)
        throw DimensionError("decoder: point token width mismatch");
    const Index side = e.side();
    const Var tokens = p.token_count() > 0 ? ag::concat_rows({mask_token, p.point_tokens}) : mask_token;
    const Var image_seq = ag::image_to_sequence(ag::add(e.features, p.mask_embedding));
    const Var image_pe = pe.dense_positional_encoding(side, side);
    auto [t, img] = transformer(tokens, image_seq, image_pe);
    return {t, img, image_pe};
}
}  // namespace

Var MaskDecoder::image_features(const ImageEmbedding& e, const PromptEmbedding& p, const PromptEncoder& pe) const {
    auto out = run_transformer(e, p, pe, mask_token_, transformer_, cfg_.embed_channels);
    return ag::sequence_to_image(out.image, e.side(), e.side());
}

Var MaskDecoder::global_context(const Var& features, const Var& image_pe) const {
    if (cfg_.variant != DecoderVariant::modified) throw ArgumentError("global_context: modified variant only");
    if (!cfg_.global_attention) return features;
    const Index h = features.dim(1), w = features.dim(2);
    const Var seq = ag::image_to_sequence(features);
    const Var q = ag::add(seq, image_pe);
    const Var out = global_norm_(ag::add(seq, global_attn_(q, q, seq)));
    return ag::sequence_to_image(out, h, w);
}

Var MaskDecoder::refine(const Var& features) const {
    if (cfg_.variant != DecoderVariant::modified) throw ArgumentError("refine: modified variant only");
    Var x = features;
    for (const auto& b : blocks_) x = b(x);
    return conv(x, head_w_, head_b_);
}

Var MaskDecoder::forward(const ImageEmbedding& e, const PromptEmbedding& p, const PromptEncoder& pe) const {
    auto out = run_transformer(e, p, pe, mask_token_, transformer_, cfg_.embed_channels);
    const Index side = e.side();
    const Var image = ag::sequence_to_image(out.image, side, side);
    if (cfg_.variant == DecoderVariant::modified) return refine(global_context(image, out.image_pe));

    Var up = ag::conv_transpose2x2(image, up1_w_, up1_b_);
    up = ag::sequence_to_image(up_norm_(ag::image_to_sequence(up)), 2 * side, 2 * side);
    up = ag::gelu(ag::conv_transpose2x2(ag::gelu(up), up2_w_, up2_b_));
    const Index c8 = cfg_.embed_channels / 8;
    Var token = ag::slice_rows(out.tokens, 0, 1);
    token = ag::relu(ag::linear(token, hyper_w1_, hyper_b1_));
    token = ag::relu(ag::linear(token, hyper_w2_, hyper_b2_));
    token = ag::linear(token, hyper_w3_, hyper_b3_);
    const Var masks = ag::matmul(token, ag::reshape(up, {c8, 16 * side * side}));
    return ag::reshape(masks, {1, 4 * side, 4 * side});
}

std::vector<NamedParameter> MaskDecoder::parameters() const {
    std::vector<NamedParameter> out;
    const auto c = Component::mask_decoder;
    add_param(out, "mask_decoder.mask_token", mask_token_, c);
    transformer_.collect("mask_decoder.transformer", out);
    if (cfg_.variant == DecoderVariant::modified) {
        global_attn_.collect("mask_decoder.global_attn", out);
        global_norm_.collect("mask_decoder.global_norm", out);
        const char* names[] = {"up_block1", "up_block2", "conv_block"};
        for (std::size_t i = 0; i < blocks_.size(); ++i) blocks_[i].collect(std::string("mask_decoder.") + names[i], out);
        add_param(out, "mask_decoder.head.weight", head_w_, c);
        add_param(out, "mask_decoder.head.bias", head_b_, c);
    } else {
        add_param(out, "mask_decoder.output_upscaling.0.weight", up1_w_, c);
        add_param(out, "mask_decoder.output_upscaling.0.bias", up1_b_, c);
        up_norm_.collect("mask_decoder.output_upscaling.1", out);
        add_param(out, "mask_decoder.output_upscaling.3.weight", up2_w_, c);
        add_param(out, "mask_decoder.output_upscaling.3.bias", up2_b_, c);
        add_param(out, "mask_decoder.output_hypernetwork_mlp.0.weight", hyper_w1_, c);
        add_param(out, "mask_decoder.output_hypernetwork_mlp.0.bias", hyper_b1_, c);
        add_param(out, "mask_decoder.output_hypernetwork_mlp.1.weight", hyper_w2_, c);
        add_param(out, "mask_decoder.output_hypernetwork_mlp.1.bias", hyper_b2_, c);
        add_param(out, "mask_decoder.output_hypernetwork_mlp.2.weight", hyper_w3_, c);
        add_param(out, "mask_decoder.output_hypernetwork_mlp.2.bias", hyper_b3_, c);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Free functions

Var prepare_image(const RgbImage& patch, Index side) {
    static constexpr double mean[3] = {123.675, 116.28, 103.53};
    static constexpr double stddev[3] = {58.395, 57.12, 57.375};
    ag::Vector v(3 * side * side);
    for (int c = 0; c < 3; ++c) {
        const Grid<double> r = (patch.height() == side && patch.width() == side)
                                   ? Grid<double>(patch.channels[c].cast<double>())
                                   : resize_bilinear(patch.channels[c], side, side);
        for (Index i = 0; i < side * side; ++i) v(c * side * side + i) = (r.data()[i] - mean[c]) / stddev[c];
    }
    return Var::constant({3, side, side}, std::move(v));
}

ImageEmbedding encode_image(const Var& prepared, const ImageEncoder& encoder, Index source_patch_size) {
    ImageEmbedding e;
    e.features = encoder.forward(prepared);
    e.source_patch_size = source_patch_size;
    if (!e.features.value().allFinite()) throw ArgumentError("encoder produced non-finite features");
    return e;
}

PromptEmbedding encode_prompts(std::span<const Click> clicks, const Logits* prev_logits,
                               const ImageEmbedding& embedding, const PromptEncoder& encoder) {
    return encoder.forward(clicks, prev_logits, embedding);
}

Var decode_original(const ImageEmbedding& e, const PromptEmbedding& p, const MaskDecoder& d, const PromptEncoder& pe) {
    if (d.config().variant != DecoderVariant::original) throw DimensionError("decode_original: decoder is modified");
    return d.forward(e, p, pe);
}

Var decode_modified(const ImageEmbedding& e, const PromptEmbedding& p, const MaskDecoder& d, const PromptEncoder& pe) {
    if (d.config().variant != DecoderVariant::modified) throw DimensionError("decode_modified: decoder is original");
    return d.forward(e, p, pe);
}

Logits restore_to_patch(const Logits& low_res, Index patch_size) {
    if (low_res.rows() == patch_size && low_res.cols() == patch_size) return low_res;
    return resize_bilinear(low_res, patch_size, patch_size);
}

Logits to_logits(const Var& map) {
    if (map.rank() != 3 || map.dim(0) != 1) throw DimensionError("to_logits: expected [1, H, W]");
    Logits l(map.dim(1), map.dim(2));
    std::copy(map.value().data(), map.value().data() + map.numel(), l.data());
    return l;
}

// ---------------------------------------------------------------------------
// Model

namespace {
std::shared_ptr<ImageEncoder> make_encoder(const ModelConfig& cfg, Initializer& init) {
    if (cfg.encoder == "toy_conv")
        return std::make_shared<ToyConvEncoder>(cfg.decoder.embed_channels, cfg.encoder_input, init);
    if (cfg.encoder == "precomputed")
        return std::make_shared<PrecomputedEncoder>(cfg.embedding_dir, cfg.decoder.embed_channels, cfg.encoder_input);
    throw ArgumentError("unknown encoder '" + cfg.encoder + "'");
}

}  // namespace

SamModel::SamModel(const ModelConfig& cfg) : SamModel(cfg, Initializer(cfg.init_seed)) {}

SamModel::SamModel(const ModelConfig& cfg, Initializer&& init)
    : cfg_(cfg),
      image_encoder_(make_encoder(cfg, init)),
      prompt_encoder_(cfg.decoder.embed_channels, init),
      mask_decoder_(cfg.decoder, init) {}

ImageEmbedding SamModel::embed(const RgbImage& patch) const {
    if (patch.height() != patch.width()) throw ArgumentError("embed: patch must be square");
    return embed_prepared(prepare_image(patch, cfg_.encoder_input), patch.height());
}

ImageEmbedding SamModel::embed_prepared(const Var& prepared, Index source_patch_size) const {
    return encode_image(prepared, *image_encoder_, source_patch_size);
}

Var SamModel::decode(const ImageEmbedding& embedding, std::span<const Click> clicks, const Logits* prev_logits) const {
    const auto prompts = encode_prompts(clicks, prev_logits, embedding, prompt_encoder_);
    return cfg_.decoder.variant == DecoderVariant::modified
               ? decode_modified(embedding, prompts, mask_decoder_, prompt_encoder_)
               : decode_original(embedding, prompts, mask_decoder_, prompt_encoder_);
}

std::vector<NamedParameter> SamModel::parameters() const {
    auto out = image_encoder_->parameters();
    for (auto& p : prompt_encoder_.parameters()) out.push_back(p);
    for (auto& p : mask_decoder_.parameters()) out.push_back(p);
    return out;
}

std::map<std::string, Var> SamModel::parameter_map() const {
    std::map<std::string, Var> m;
    for (auto& p : parameters()) m.emplace(p.name, p.var);
    return m;
}

namespace {
void write_f32_le(std::ostream& os, const ag::Vector& v) {
    for (Index i = 0; i < v.size(); ++i) {
        const float f = static_cast<float>(v(i));
        std::uint32_t u;
        std::memcpy(&u, &f, 4);
        if constexpr (std::endian::native == std::endian::big) u = __builtin_bswap32(u);
        const unsigned char b[4] = {static_cast<unsigned char>(u), static_cast<unsigned char>(u >> 8),
                                    static_cast<unsigned char>(u >> 16), static_cast<unsigned char>(u >> 24)};
        os.write(reinterpret_cast<const char*>(b), 4);
    }
}

ag::Vector read_f32_le(std::istream& is, Index n) {
    ag::Vector v(n);
    for (Index i = 0; i < n; ++i) {
        unsigned char b[4];
        if (!is.read(reinterpret_cast<char*>(b), 4)) throw ArgumentError("checkpoint: truncated parameter blob");
        const std::uint32_t u = static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
                                (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
        float f;
        std::memcpy(&f, &u, 4);
        v(i) = f;
    }
    return v;
}
}  // namespace

void SamModel::save(const std::filesystem::path& dir) const {
    std::filesystem::create_directories(dir / "params");
    nlohmann::json params = nlohmann::json::array();
    for (const auto& p : parameters()) {
        const std::string file = "params/" + p.name + ".bin";
        std::ofstream os(dir / file, std::ios::binary);
        if (!os) throw std::runtime_error("checkpoint: cannot write " + (dir / file).string());
        write_f32_le(os, p.var.value());
        params.push_back({{"name", p.name},
                          {"shape", p.var.shape()},
                          {"component", to_string(p.component)},
                          {"trainable", p.var.requires_grad()},
                          {"file", file}});
    }
    nlohmann::json manifest = {{"format", "samseg-checkpoint"},
                               {"version", 1},
                               {"dtype", "float32-le"},
                               {"architecture", cfg_.to_json()},
                               {"parameters", params}};
    std::ofstream os(dir / "manifest.json");
    os << manifest.dump(2) << '\n';
}

SamModel SamModel::load(const std::filesystem::path& dir) {
    std::ifstream is(dir / "manifest.json");
    if (!is) throw ArgumentError("checkpoint: no manifest.json in " + dir.string());
    const auto manifest = nlohmann::json::parse(is);
    SamModel model(ModelConfig::from_json(manifest.at("architecture")));
    auto params = model.parameter_map();
    std::size_t loaded = 0;
    for (const auto& entry : manifest.at("parameters")) {
        const auto name = entry.at("name").get<std::string>();
        auto it = params.find(name);
        if (it == params.end()) throw ArgumentError("checkpoint: unexpected parameter " + name);
        const auto shape = entry.at("shape").get<ag::Shape>();
        if (shape != it->second.shape())
            throw DimensionError("checkpoint: shape mismatch for " + name + ": " + ag::shape_string(shape));
        std::ifstream blob(dir / entry.at("file").get<std::string>(), std::ios::binary);
        if (!blob) throw ArgumentError("checkpoint: missing blob for " + name);
        it->second.mutable_value() = read_f32_le(blob, ag::numel(shape));
        ++loaded;
    }
    if (loaded != params.size()) throw ArgumentError("checkpoint: manifest lists too few parameters");
    return model;
}

SamModel clone(const SamModel& model) {
    SamModel copy(model.config());
    auto dst = copy.parameter_map();
    for (const auto& p : model.parameters()) dst.at(p.name).mutable_value() = p.var.value();
    return copy;
}

std::uint64_t parameter_checksum(const SamModel& model, Component component) {
    std::uint64_t h = 1469598103934665603ULL;
    for (const auto& p : model.parameters()) {
        if (p.component != component) continue;
        const auto* b = reinterpret_cast<const unsigned char*>(p.var.value().data());
        for (std::size_t i = 0; i < static_cast<std::size_t>(p.var.numel()) * sizeof(double); ++i) {
            h ^= b[i];
            h *= 1099511628211ULL;
        }
    }
    return h;
}

}  // namespace samseg
