#include "samseg/segmenter.hpp"

namespace samseg {

std::shared_ptr<const EncodedImage> Segmenter::encode(const RgbImage& patch) {
    ++encode_calls_;
    return do_encode(patch);
}

Decoded Segmenter::decode(const EncodedImage& image, std::span<const Click> clicks, const Logits* feedback) {
    ++decode_calls_;
    for (const auto& c : clicks) require_in_bounds(c.row, c.col, image.patch_size(), image.patch_size());
    return do_decode(image, clicks, feedback);
}

namespace {

class SamEncoded final : public EncodedImage {
  public:
    SamEncoded(ImageEmbedding e, Index patch_size) : EncodedImage(patch_size), embedding(std::move(e)) {}
    Index embedding_side() const override { return embedding.side(); }
    ImageEmbedding embedding;
};

class ImageCopy final : public EncodedImage {
  public:
    explicit ImageCopy(const RgbImage& img) : EncodedImage(img.height()), image(img) {}
    RgbImage image;
};

}  // namespace

SamSegmenter::SamSegmenter(std::shared_ptr<const SamModel> model, std::string name)
    : model_(std::move(model)), name_(std::move(name)) {}

std::shared_ptr<const EncodedImage> SamSegmenter::do_encode(const RgbImage& patch) {
    ag::NoGradGuard no_grad;
    return std::make_shared<SamEncoded>(model_->embed(patch), patch.height());
}

Decoded SamSegmenter::do_decode(const EncodedImage& image, std::span<const Click> clicks, const Logits* feedback) {
    const auto* enc = dynamic_cast<const SamEncoded*>(&image);
    if (enc == nullptr) throw ArgumentError("SamSegmenter: foreign encoded image");
    ag::NoGradGuard no_grad;
    Logits low = to_logits(model_->decode(enc->embedding, clicks, feedback));
    Decoded d;
    d.logits = restore_to_patch(low, image.patch_size());
    d.feedback = std::move(low);
    return d;
}

std::shared_ptr<const EncodedImage> FunctionSegmenter::do_encode(const RgbImage& patch) {
    if (patch.height() != patch.width()) throw ArgumentError("segmenter: patch must be square");
    return std::make_shared<ImageCopy>(patch);
}

Decoded FunctionSegmenter::do_decode(const EncodedImage& image, std::span<const Click> clicks, const Logits* feedback) {
    const auto& copy = dynamic_cast<const ImageCopy&>(image);
    Decoded d;
    d.logits = fn_(copy.image, clicks, feedback);
    d.feedback = d.logits;
    return d;
}

std::shared_ptr<Segmenter> make_builtin_adapter(const std::string& name) {
    if (name == "empty")
        return std::make_shared<FunctionSegmenter>("adapter:empty", [](const RgbImage& img, auto, auto) {
            return Logits::Constant(img.height(), img.width(), -1.0);
        });
    if (name == "full")
        return std::make_shared<FunctionSegmenter>("adapter:full", [](const RgbImage& img, auto, auto) {
            return Logits::Constant(img.height(), img.width(), 1.0);
        });
    throw ArgumentError("unknown adapter '" + name + "' (known: empty, full)");
}

Logits mask_to_logits(const Mask& m) { return (m != 0).select(Logits::Constant(m.rows(), m.cols(), 1.0), -1.0); }

}  // namespace samseg
