#pragma once

// Encode-once / decode-per-click interface that every interactive model
// (the SAM-style model, scripted fakes, remote adapters) implements.

#include "samseg/core.hpp"
#include "samseg/nets.hpp"

#include <atomic>
#include <functional>
#include <memory>
#include <span>
#include <string>

namespace samseg {

class EncodedImage {
  public:
    explicit EncodedImage(Index patch_size) : patch_size_(patch_size) {}
    virtual ~EncodedImage() = default;
    Index patch_size() const { return patch_size_; }
    /// Spatial side of the cached embedding, 0 when not applicable.
    virtual Index embedding_side() const { return 0; }

  private:
    Index patch_size_;
};

struct Decoded {
    /// Logits at patch resolution.
    Logits logits;
    /// Fed back as the mask prompt on the next click (may be empty).
    Logits feedback;
};

class Segmenter {
  public:
    virtual ~Segmenter() = default;
    virtual std::string name() const = 0;

    std::shared_ptr<const EncodedImage> encode(const RgbImage& patch);
    /// Decodes with the full click list and the previous feedback.
    /// Safe to call concurrently for distinct encoded images.
    Decoded decode(const EncodedImage& image, std::span<const Click> clicks, const Logits* feedback);

    std::size_t encode_calls() const { return encode_calls_.load(); }
    std::size_t decode_calls() const { return decode_calls_.load(); }

  protected:
    virtual std::shared_ptr<const EncodedImage> do_encode(const RgbImage& patch) = 0;
    virtual Decoded do_decode(const EncodedImage& image, std::span<const Click> clicks, const Logits* feedback) = 0;

  private:
    std::atomic<std::size_t> encode_calls_{0};
    std::atomic<std::size_t> decode_calls_{0};
};

/// Inference wrapper around a SamModel. Parameters are read-only here.
class SamSegmenter final : public Segmenter {
  public:
    SamSegmenter(std::shared_ptr<const SamModel> model, std::string name = "sam");
    std::string name() const override { return name_; }
    const SamModel& model() const { return *model_; }

  protected:
    std::shared_ptr<const EncodedImage> do_encode(const RgbImage& patch) override;
    Decoded do_decode(const EncodedImage& image, std::span<const Click> clicks, const Logits* feedback) override;

  private:
    std::shared_ptr<const SamModel> model_;
    std::string name_;
};

/// Segmenter backed by a callable; the encoded image keeps a copy of the
/// patch. Used for scripted models and simple built-in adapters.
class FunctionSegmenter final : public Segmenter {
  public:
    using Fn = std::function<Logits(const RgbImage& image, std::span<const Click> clicks, const Logits* feedback)>;
    FunctionSegmenter(std::string name, Fn fn) : name_(std::move(name)), fn_(std::move(fn)) {}
    std::string name() const override { return name_; }

  protected:
    std::shared_ptr<const EncodedImage> do_encode(const RgbImage& patch) override;
    Decoded do_decode(const EncodedImage& image, std::span<const Click> clicks, const Logits* feedback) override;

  private:
    std::string name_;
    Fn fn_;
};

/// Built-in adapters addressable as "adapter:<name>": "empty" (always
/// background) and "full" (always foreground).
std::shared_ptr<Segmenter> make_builtin_adapter(const std::string& name);

/// Logits of +1 on the mask and -1 elsewhere.
Logits mask_to_logits(const Mask& m);

}  // namespace samseg
