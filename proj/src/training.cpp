#include "samseg/training.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <iostream>
#include <numeric>

namespace samseg {

std::string to_string(FreezeScenario s) {
    switch (s) {
        case FreezeScenario::md_only: return "MD_only";
        case FreezeScenario::ie_and_md: return "IE_and_MD";
        case FreezeScenario::whole: return "Whole";
    }
    return "MD_only";
}

FreezeScenario freeze_scenario_from_string(const std::string& s) {
    std::string lower(s);
    std::transform(lower.begin(), lower.end(), lower.begin(), [](unsigned char c) { return std::tolower(c); });
    if (lower == "md_only" || lower == "md") return FreezeScenario::md_only;
    if (lower == "ie_and_md" || lower == "ie_md") return FreezeScenario::ie_and_md;
    if (lower == "whole") return FreezeScenario::whole;
    throw ArgumentError("unknown freeze scenario '" + s + "' (expected MD_only, IE_and_MD or Whole)");
}

bool FreezePolicy::trains(Component c) const {
    switch (scenario) {
        case FreezeScenario::md_only: return c == Component::mask_decoder;
        case FreezeScenario::ie_and_md: return c != Component::prompt_encoder;
        case FreezeScenario::whole: return true;
    }
    return false;
}

void TrainConfig::validate() const {
    if (!(initial_lr > 0.0)) throw ArgumentError("initial_lr must be positive");
    if (!(lr_drop_factor > 0.0)) throw ArgumentError("lr_drop_factor must be positive");
    if (total_epochs < 1) throw ArgumentError("total_epochs must be at least 1");
    if (focal_gamma < 0.0) throw ArgumentError("focal_gamma must be non-negative");
    if (max_train_clicks_per_sample < 1) throw ArgumentError("max_train_clicks_per_sample must be at least 1");
    if (batch_size < 1) throw ArgumentError("batch_size must be at least 1");
    if (!std::is_sorted(lr_drop_epochs.begin(), lr_drop_epochs.end()))
        throw ArgumentError("lr_drop_epochs must be ascending");
}

nlohmann::json TrainConfig::to_json() const {
    return {{"initial_lr", initial_lr},
            {"lr_drop_epochs", lr_drop_epochs},
            {"lr_drop_factor", lr_drop_factor},
            {"total_epochs", total_epochs},
            {"focal_gamma", focal_gamma},
            {"max_train_clicks_per_sample", max_train_clicks_per_sample},
            {"rng_seed", rng_seed},
            {"batch_size", batch_size},
            {"augment_flips", augment_flips},
            {"adam_beta1", adam_beta1},
            {"adam_beta2", adam_beta2},
            {"adam_eps", adam_eps}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
    TrainConfig c;
    c.initial_lr = j.value("initial_lr", c.initial_lr);
    c.lr_drop_epochs = j.value("lr_drop_epochs", c.lr_drop_epochs);
    c.lr_drop_factor = j.value("lr_drop_factor", c.lr_drop_factor);
    c.total_epochs = j.value("total_epochs", c.total_epochs);
    c.focal_gamma = j.value("focal_gamma", c.focal_gamma);
    c.max_train_clicks_per_sample = j.value("max_train_clicks_per_sample", c.max_train_clicks_per_sample);
    c.rng_seed = j.value("rng_seed", c.rng_seed);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.augment_flips = j.value("augment_flips", c.augment_flips);
    c.adam_beta1 = j.value("adam_beta1", c.adam_beta1);
    c.adam_beta2 = j.value("adam_beta2", c.adam_beta2);
    c.adam_eps = j.value("adam_eps", c.adam_eps);
    c.validate();
    return c;
}

double lr_at_epoch(int epoch, const TrainConfig& cfg) {
    if (epoch < 0 || epoch >= cfg.total_epochs)
        throw ArgumentError("epoch " + std::to_string(epoch) + " outside [0, " + std::to_string(cfg.total_epochs) +
                            ")");
    double lr = cfg.initial_lr;
    for (int drop : cfg.lr_drop_epochs)
        if (epoch >= drop) lr /= cfg.lr_drop_factor;
    return lr;
}

namespace {

// Per-pixel terms of the focal loss for z = s * x, s = +1 on foreground.
struct FocalTerms {
    double log_pt;  // log p_t
    double pt;      // p_t
    double q;       // 1 - p_t
};

FocalTerms focal_terms(double z) {
    FocalTerms t;
    if (z >= 0.0) {
        const double e = std::exp(-z);
        t.log_pt = -std::log1p(e);
        t.pt = 1.0 / (1.0 + e);
        t.q = e / (1.0 + e);
    } else {
        const double e = std::exp(z);
        t.log_pt = z - std::log1p(e);
        t.pt = e / (1.0 + e);
        t.q = 1.0 / (1.0 + e);
    }
    return t;
}

double weight(double q, double gamma) { return gamma == 0.0 ? 1.0 : std::pow(q, gamma); }

void check_loss_inputs(Index n, const Mask& gt, double gamma) {
    if (n != gt.size())
        throw DimensionError("normalized_focal_loss: " + std::to_string(n) + " logits for a " +
                             std::to_string(gt.rows()) + "x" + std::to_string(gt.cols()) + " mask");
    if (!(gamma >= 0.0)) throw ArgumentError("normalized_focal_loss: gamma must be non-negative");
}

}  // namespace

ag::Var normalized_focal_loss(const ag::Var& logits, const Mask& gt, double gamma) {
    const Index n = logits.numel();
    check_loss_inputs(n, gt, gamma);
    if (logits.rank() >= 2 && (logits.shape()[logits.rank() - 2] != gt.rows() || logits.shape().back() != gt.cols()))
        throw DimensionError("normalized_focal_loss: logits " + ag::shape_string(logits.shape()) +
                             " do not match the mask");
    const auto& x = logits.value();
    ag::Vector dloss(n);
    double num = 0.0, den = 0.0;
    for (Index i = 0; i < n; ++i) {
        const double s = gt.data()[i] ? 1.0 : -1.0;
        const auto t = focal_terms(s * x(i));
        const double w = weight(t.q, gamma);
        num -= w * t.log_pt;
        den += w;
        dloss(i) = -s * (-gamma * w * t.pt * t.log_pt + w * t.q);
    }
    ag::Vector value(1);
    value(0) = den > 0.0 ? num / den : 0.0;
    if (den > 0.0) dloss /= den;
    else dloss.setZero();
    return ag::make_result({1}, std::move(value), {logits},
                           [dloss](ag::Node& self) { self.parents[0]->accumulate_expr(dloss * self.grad(0)); });
}

double normalized_focal_loss(const Logits& logits, const Mask& gt, double gamma) {
    require_same_shape(logits, gt, "normalized_focal_loss");
    check_loss_inputs(logits.size(), gt, gamma);
    double num = 0.0, den = 0.0;
    for (Index i = 0; i < logits.size(); ++i) {
        const double s = gt.data()[i] ? 1.0 : -1.0;
        const auto t = focal_terms(s * logits.data()[i]);
        const double w = weight(t.q, gamma);
        num -= w * t.log_pt;
        den += w;
    }
    return den > 0.0 ? num / den : 0.0;
}

Mask area_downsample(const Mask& m, Index side) {
    if (side <= 0) throw ArgumentError("area_downsample: side must be positive");
    auto weights = [side](Index n) {
        // Row i averages source interval [i * n / side, (i + 1) * n / side).
        Eigen::MatrixXd a = Eigen::MatrixXd::Zero(side, n);
        const double scale = static_cast<double>(n) / static_cast<double>(side);
        for (Index i = 0; i < side; ++i) {
            const double lo = static_cast<double>(i) * scale, hi = lo + scale;
            for (auto j = static_cast<Index>(std::floor(lo)); j < n && static_cast<double>(j) < hi; ++j) {
                const double overlap = std::min(hi, static_cast<double>(j + 1)) - std::max(lo, static_cast<double>(j));
                if (overlap > 0.0) a(i, j) = overlap / scale;
            }
        }
        return a;
    };
    const Eigen::MatrixXd rows = weights(m.rows());
    const Eigen::MatrixXd cols = weights(m.cols());
    const Eigen::MatrixXd frac = rows * m.cast<double>().matrix() * cols.transpose();
    return (frac.array() >= 0.5).cast<std::uint8_t>();
}

TrainSample make_train_sample(const Patch& patch, const ModelConfig& cfg) {
    if (patch.image.height() != patch.image.width()) throw ArgumentError("training patches must be square");
    TrainSample s;
    s.id = patch.patch_id;
    s.image = prepare_image(patch.image, cfg.encoder_input);
    s.gt = area_downsample(patch.gt, 4 * (cfg.encoder_input / kEncoderStride));
    return s;
}

namespace {

ag::Var flip_image(const ag::Var& image, bool horizontal, bool vertical) {
    if (!horizontal && !vertical) return image;
    const Index c = image.dim(0), h = image.dim(1), w = image.dim(2);
    ag::Vector v = image.value();
    for (Index ch = 0; ch < c; ++ch) {
        ag::MatMap plane(v.data() + ch * h * w, h, w);
        if (horizontal) plane = plane.rowwise().reverse().eval();
        if (vertical) plane = plane.colwise().reverse().eval();
    }
    return ag::Var::constant(image.shape(), std::move(v));
}

Mask flip_mask(const Mask& m, bool horizontal, bool vertical) {
    Mask out = m;
    if (horizontal) out = out.rowwise().reverse().eval();
    if (vertical) out = out.colwise().reverse().eval();
    return out;
}

}  // namespace

Trainer::Trainer(SamModel& model, FreezePolicy policy, TrainConfig cfg)
    : model_(model), policy_(policy), cfg_(std::move(cfg)), rng_(cfg_.rng_seed) {
    cfg_.validate();
    for (auto& p : model_.parameters()) {
        const bool on = policy_.trains(p.component) && p.name != "prompt_encoder.pe_gaussian";
        p.var.set_requires_grad(on);
        p.var.mutable_grad().resize(0);
        if (on) trainable_.push_back(p);
    }
}

double Trainer::sample_loss(const TrainSample& sample, StepResult& result) {
    bool flip_h = false, flip_v = false;
    if (cfg_.augment_flips) {
        std::bernoulli_distribution coin(0.5);
        flip_h = coin(rng_);
        flip_v = coin(rng_);
    }
    const Mask gt = flip_mask(sample.gt, flip_h, flip_v);
    if (count(gt) == 0) {
        std::cerr << "warning: skipping all-background training sample " << sample.id << '\n';
        ++result.skipped;
        return 0.0;
    }
    std::uniform_int_distribution<int> k_dist(1, cfg_.max_train_clicks_per_sample);
    const int k = k_dist(rng_);
    const ImageEmbedding embedding = model_.embed_prepared(flip_image(sample.image, flip_h, flip_v), gt.rows());
    const ClickPolicy click_policy = ClickPolicy::train(cfg_.rng_seed);

    InteractionState state;
    state.patch_id = sample.id;
    auto first = next_click(state, gt, click_policy, rng_);
    state.push_click(first->row, first->col, first->polarity);
    for (int i = 1; i < k; ++i) {
        Logits low;
        {
            ag::NoGradGuard no_grad;
            low = to_logits(model_.decode(embedding, state.clicks, state.prev_logits ? &*state.prev_logits : nullptr));
        }
        state.prev_prediction = binarize(low);
        state.prev_logits = std::move(low);
        const auto click = next_click(state, gt, click_policy, rng_);
        if (!click) break;
        state.push_click(click->row, click->col, click->polarity);
    }
    const ag::Var logits =
        model_.decode(embedding, state.clicks, state.prev_logits ? &*state.prev_logits : nullptr);
    const ag::Var loss = normalized_focal_loss(logits, gt, cfg_.focal_gamma);
    ag::backward(loss);
    ++result.used;
    result.sample_losses.push_back(loss.item());
    result.clicks.push_back(state.clicks);
    return loss.item();
}

StepResult Trainer::step(std::span<const TrainSample> batch, double lr) {
    if (batch.empty()) throw ArgumentError("train step: empty batch");
    StepResult result;
    double total = 0.0;
    for (const auto& sample : batch) total += sample_loss(sample, result);
    if (result.used == 0) return result;
    result.loss = total / static_cast<double>(result.used);

    ++t_;
    const double b1 = cfg_.adam_beta1, b2 = cfg_.adam_beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
    const double inv_n = 1.0 / static_cast<double>(result.used);
    for (auto& p : trainable_) {
        auto& grad = p.var.mutable_grad();
        auto& [m, v] = moments_[p.name];
        if (m.size() == 0) {
            m = ag::Vector::Zero(p.var.numel());
            v = ag::Vector::Zero(p.var.numel());
        }
        const ag::Vector g = grad.size() == 0 ? ag::Vector::Zero(p.var.numel()) : ag::Vector(grad * inv_n);
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g.cwiseProduct(g);
        p.var.mutable_value().array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + cfg_.adam_eps);
        grad.resize(0);
    }
    return result;
}

FitResult Trainer::fit(const std::vector<TrainSample>& samples, const FitOptions& opts) {
    if (samples.empty()) throw ArgumentError("fit: no training samples");
    FitResult out;
    std::vector<std::size_t> order(samples.size());
    std::iota(order.begin(), order.end(), 0);
    auto save = [&](const std::string& tag) {
        if (opts.checkpoint_dir.empty()) return;
        const auto dir = opts.checkpoint_dir / tag;
        model_.save(dir);
        out.checkpoints.push_back(dir);
    };
    for (int epoch = 0; epoch < cfg_.total_epochs; ++epoch) {
        if (std::find(cfg_.lr_drop_epochs.begin(), cfg_.lr_drop_epochs.end(), epoch) != cfg_.lr_drop_epochs.end()) {
            char tag[32];
            std::snprintf(tag, sizeof(tag), "epoch_%03d", epoch);
            save(tag);
        }
        const double lr = lr_at_epoch(epoch, cfg_);
        std::shuffle(order.begin(), order.end(), rng_);
        double epoch_sum = 0.0;
        std::size_t epoch_used = 0;
        for (std::size_t begin = 0; begin < order.size(); begin += static_cast<std::size_t>(cfg_.batch_size)) {
            const std::size_t end = std::min(order.size(), begin + static_cast<std::size_t>(cfg_.batch_size));
            std::vector<TrainSample> batch;
            for (std::size_t i = begin; i < end; ++i) batch.push_back(samples[order[i]]);
            const StepResult r = step(batch, lr);
            out.skipped += r.skipped;
            if (r.used == 0) continue;
            ++out.steps;
            epoch_sum += r.loss * static_cast<double>(r.used);
            epoch_used += r.used;
            if (opts.log != nullptr) {
                *opts.log << nlohmann::json{{"epoch", epoch}, {"step", out.steps}, {"lr", lr},
                                            {"loss", r.loss}, {"seed", cfg_.rng_seed}}
                                 .dump()
                          << '\n';
            }
        }
        const double mean = epoch_used > 0 ? epoch_sum / static_cast<double>(epoch_used) : 0.0;
        out.epoch_loss.push_back(mean);
        if (opts.on_epoch) opts.on_epoch(epoch, mean);
    }
    save("final");
    return out;
}

}  // namespace samseg
