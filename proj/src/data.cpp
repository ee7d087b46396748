#include "samseg/data.hpp"

#include "samseg/image_io.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

namespace samseg {

std::string to_string(Split s) {
    switch (s) {
        case Split::train: return "train";
        case Split::val: return "val";
        case Split::test: return "test";
    }
    return "train";
}

Split split_from_string(const std::string& s) {
    if (s == "train") return Split::train;
    if (s == "val") return Split::val;
    if (s == "test") return Split::test;
    throw ArgumentError("unknown split '" + s + "'");
}

std::vector<ManifestEntry> CorpusManifest::entries_in(Split s) const {
    std::vector<ManifestEntry> out;
    std::copy_if(entries.begin(), entries.end(), std::back_inserter(out), [s](const auto& e) { return e.split == s; });
    return out;
}

std::map<Split, std::size_t> CorpusManifest::counts() const {
    std::map<Split, std::size_t> c{{Split::train, 0}, {Split::val, 0}, {Split::test, 0}};
    for (const auto& e : entries) ++c[e.split];
    return c;
}

nlohmann::json to_json(const ManifestEntry& e) {
    return {{"patch_id", e.patch_id},
            {"image", e.image_path},
            {"gt", e.gt_path},
            {"slide_id", e.slide_id},
            {"magnification", e.magnification},
            {"tile_row", e.tile_row},
            {"tile_col", e.tile_col},
            {"tumor_fraction", e.tumor_fraction},
            {"split", to_string(e.split)}};
}

ManifestEntry manifest_entry_from_json(const nlohmann::json& j) {
    ManifestEntry e;
    e.patch_id = j.at("patch_id").get<std::string>();
    e.image_path = j.at("image").get<std::string>();
    e.gt_path = j.at("gt").get<std::string>();
    e.slide_id = j.value("slide_id", std::string{});
    e.magnification = j.value("magnification", 5);
    e.tile_row = j.value("tile_row", Index{0});
    e.tile_col = j.value("tile_col", Index{0});
    e.tumor_fraction = j.at("tumor_fraction").get<double>();
    e.split = split_from_string(j.value("split", std::string("train")));
    return e;
}

std::vector<Patch> tile_and_filter(const RgbImage& slide, const Mask& gt, Index tile, FractionBounds bounds,
                                   const std::string& slide_id, int magnification) {
    require_same_shape(slide.channels[0], gt, "tile_and_filter");
    if (tile <= 0) throw ArgumentError("tile_and_filter: tile must be positive");
    if (gt.rows() < tile || gt.cols() < tile)
        throw DimensionError("tile_and_filter: slide smaller than one tile");
    std::vector<Patch> out;
    for (Index r = 0; r + tile <= gt.rows(); r += tile) {
        for (Index c = 0; c + tile <= gt.cols(); c += tile) {
            Mask g = gt.block(r, c, tile, tile);
            if (!bounds.contains(tumor_fraction(g))) continue;
            Patch p;
            p.patch_id = slide_id + "_r" + std::to_string(r) + "_c" + std::to_string(c);
            p.image = RgbImage(tile, tile);
            for (int ch = 0; ch < 3; ++ch) p.image.channels[ch] = slide.channels[ch].block(r, c, tile, tile);
            p.gt = std::move(g);
            p.slide_id = slide_id;
            p.magnification = magnification;
            p.tile_row = r;
            p.tile_col = c;
            out.push_back(std::move(p));
        }
    }
    return out;
}

namespace {

// Largest 8-connected component; blobs are required to be contiguous.
Mask largest_component_8(const Mask& m) {
    const Index h = m.rows(), w = m.cols();
    Grid<int> label = Grid<int>::Zero(h, w);
    std::vector<std::pair<Index, Index>> stack;
    int best_label = 0;
    std::size_t best_size = 0;
    int next = 0;
    for (Index r = 0; r < h; ++r) {
        for (Index c = 0; c < w; ++c) {
            if (!m(r, c) || label(r, c)) continue;
            ++next;
            std::size_t size = 0;
            stack.assign(1, {r, c});
            label(r, c) = next;
            while (!stack.empty()) {
                auto [y, x] = stack.back();
                stack.pop_back();
                ++size;
                for (Index dy = -1; dy <= 1; ++dy) {
                    for (Index dx = -1; dx <= 1; ++dx) {
                        const Index ny = y + dy, nx = x + dx;
                        if (ny < 0 || nx < 0 || ny >= h || nx >= w) continue;
                        if (m(ny, nx) && !label(ny, nx)) {
                            label(ny, nx) = next;
                            stack.emplace_back(ny, nx);
                        }
                    }
                }
            }
            if (size > best_size) {
                best_size = size;
                best_label = next;
            }
        }
    }
    if (best_label == 0) return Mask::Zero(h, w);
    return (label == best_label).cast<std::uint8_t>();
}

Mask draw_blob(std::mt19937_64& rng, Index size) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const double s = static_cast<double>(size);
    const double cy = (0.15 + 0.7 * u(rng)) * s;
    const double cx = (0.15 + 0.7 * u(rng)) * s;
    const double ra = (0.15 + 0.30 * u(rng)) * s;
    const double rb = (0.15 + 0.30 * u(rng)) * s;
    const double theta = std::numbers::pi * u(rng);
    std::array<double, 4> amp{}, phase{};
    for (std::size_t k = 0; k < amp.size(); ++k) {
        amp[k] = 0.08 * u(rng);
        phase[k] = 2.0 * std::numbers::pi * u(rng);
    }
    const double ct = std::cos(theta), st = std::sin(theta);
    Mask m(size, size);
    for (Index r = 0; r < size; ++r) {
        for (Index c = 0; c < size; ++c) {
            const double dy = static_cast<double>(r) + 0.5 - cy;
            const double dx = static_cast<double>(c) + 0.5 - cx;
            const double a = (dx * ct + dy * st) / ra;
            const double b = (-dx * st + dy * ct) / rb;
            const double rho = std::sqrt(a * a + b * b);
            const double phi = std::atan2(b, a);
            double boundary = 1.0;
            for (std::size_t k = 0; k < amp.size(); ++k)
                boundary += amp[k] * std::sin(static_cast<double>(k + 2) * phi + phase[k]);
            m(r, c) = rho < boundary ? 1 : 0;
        }
    }
    return largest_component_8(m);
}

std::uint8_t clamp_u8(double v) { return static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L)); }

RgbImage render(std::mt19937_64& rng, const Mask& gt) {
    const Index size = gt.rows();
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::normal_distribution<double> noise(0.0, 10.0);
    const double f1 = 0.02 + 0.04 * u(rng), f2 = 0.02 + 0.04 * u(rng);
    const double p1 = 2.0 * std::numbers::pi * u(rng), p2 = 2.0 * std::numbers::pi * u(rng);
    const double f_nuc = 0.35 + 0.15 * u(rng);
    const std::array<double, 3> stroma{232.0, 182.0, 205.0};
    const std::array<double, 3> tumor{150.0, 88.0, 165.0};
    RgbImage img(size, size);
    for (Index r = 0; r < size; ++r) {
        for (Index c = 0; c < size; ++c) {
            const double y = static_cast<double>(r), x = static_cast<double>(c);
            const double fibres = 12.0 * std::sin(f1 * x + p1) * std::cos(f2 * y + p2);
            const bool in = gt(r, c) != 0;
            const double nuclei = in ? 22.0 * std::max(0.0, std::sin(f_nuc * x) * std::sin(f_nuc * y)) : 0.0;
            const double shared = noise(rng);
            for (int ch = 0; ch < 3; ++ch) {
                const double base = in ? tumor[ch] : stroma[ch];
                img.channels[ch](r, c) = clamp_u8(base + fibres - nuclei + shared + 0.4 * noise(rng));
            }
        }
    }
    return img;
}

std::mt19937_64 patch_rng(std::uint64_t seed, std::size_t i) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(i), 0x5eedu};
    return std::mt19937_64(seq);
}

}  // namespace

Patch synth_patch(std::mt19937_64& rng, Index size, FractionBounds bounds) {
    if (size < 16) throw ArgumentError("synth_patch: size must be at least 16");
    std::uniform_int_distribution<int> blob_count(1, 3);
    for (int attempt = 0; attempt < 10000; ++attempt) {
        Mask gt = Mask::Zero(size, size);
        const int n = blob_count(rng);
        for (int b = 0; b < n; ++b) gt = gt.max(draw_blob(rng, size));
        if (!bounds.contains(tumor_fraction(gt))) continue;
        Patch p;
        p.image = render(rng, gt);
        p.gt = std::move(gt);
        p.slide_id = "synthetic";
        return p;
    }
    throw ArgumentError("synth_patch: could not satisfy fraction bounds");
}

std::vector<Patch> synth_patches(std::size_t n, std::uint64_t seed, Index size) {
    if (n == 0) throw ArgumentError("synth_patches: n must be at least 1");
    std::vector<Patch> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        auto rng = patch_rng(seed, i);
        Patch p = synth_patch(rng, size);
        char id[32];
        std::snprintf(id, sizeof(id), "synth_%05zu", i);
        p.patch_id = id;
        p.slide_id = "synthetic_" + std::to_string(seed);
        out.push_back(std::move(p));
    }
    return out;
}

CorpusManifest write_corpus(const std::vector<Patch>& patches, const std::filesystem::path& out_dir,
                            SplitFractions fractions, FractionBounds filter) {
    namespace fs = std::filesystem;
    fs::create_directories(out_dir / "images");
    fs::create_directories(out_dir / "masks");
    CorpusManifest m;
    m.root = out_dir;
    m.filter = filter;
    const std::size_t n = patches.size();
    const auto n_test = static_cast<std::size_t>(std::lround(fractions.test * static_cast<double>(n)));
    const auto n_val = static_cast<std::size_t>(std::lround(fractions.val * static_cast<double>(n)));
    std::ofstream os(m.manifest_path());
    if (!os) throw ArgumentError("cannot write " + m.manifest_path().string());
    for (std::size_t i = 0; i < n; ++i) {
        const auto& p = patches[i];
        ManifestEntry e;
        e.patch_id = p.patch_id;
        e.image_path = "images/" + p.patch_id + ".png";
        e.gt_path = "masks/" + p.patch_id + ".png";
        e.slide_id = p.slide_id;
        e.magnification = p.magnification;
        e.tile_row = p.tile_row;
        e.tile_col = p.tile_col;
        e.tumor_fraction = tumor_fraction(p.gt);
        e.split = i >= n - n_test ? Split::test : (i >= n - n_test - n_val ? Split::val : Split::train);
        write_png(out_dir / e.image_path, p.image);
        write_mask_png(out_dir / e.gt_path, p.gt);
        os << to_json(e).dump() << '\n';
        m.entries.push_back(std::move(e));
    }
    return m;
}

CorpusManifest synth_corpus(std::size_t n, std::uint64_t seed, const std::filesystem::path& out_dir, Index size,
                            SplitFractions fractions) {
    return write_corpus(synth_patches(n, seed, size), out_dir, fractions);
}

CorpusManifest load_manifest(const std::filesystem::path& path) {
    CorpusManifest m;
    const auto file = std::filesystem::is_directory(path) ? path / "manifest.jsonl" : path;
    m.root = file.parent_path();
    std::ifstream is(file);
    if (!is) throw ArgumentError("cannot open manifest " + file.string());
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            m.entries.push_back(manifest_entry_from_json(nlohmann::json::parse(line)));
        } catch (const std::exception& ex) {
            throw ArgumentError(file.string() + ":" + std::to_string(lineno) + ": " + ex.what());
        }
    }
    return m;
}

ValidationReport validate_manifest(const CorpusManifest& m) {
    ValidationReport rep;
    for (const auto& e : m.entries) {
        ++rep.checked;
        const auto img_path = m.root / e.image_path;
        const auto gt_path = m.root / e.gt_path;
        const std::string who = e.patch_id + ": ";
        if (e.magnification != 5 && e.magnification != 10)
            rep.failures.push_back(who + "magnification " + std::to_string(e.magnification) + " is not 5 or 10");
        bool files_ok = true;
        for (const auto& p : {img_path, gt_path}) {
            if (!std::filesystem::exists(p)) {
                rep.failures.push_back(who + "missing file " + p.string());
                files_ok = false;
            }
        }
        if (!files_ok) continue;
        try {
            const RgbImage img = read_png_rgb(img_path);
            const Grid<std::uint8_t> gray = read_png_gray(gt_path);
            if (gray.rows() != img.height() || gray.cols() != img.width()) {
                rep.failures.push_back(who + "shape mismatch between image and gt");
                continue;
            }
            Mask gt;
            try {
                gt = mask_from_gray(gray);
            } catch (const ImageIoError& ex) {
                rep.failures.push_back(who + "binary violation in " + gt_path.string() + ": " + ex.what());
                continue;
            }
            const double f = tumor_fraction(gt);
            if (!m.filter.contains(f))
                rep.failures.push_back(who + "tumor fraction " + std::to_string(f) + " outside filter bounds");
            if (std::abs(f - e.tumor_fraction) > 1e-6)
                rep.failures.push_back(who + "recorded tumor fraction disagrees with gt");
        } catch (const std::exception& ex) {
            rep.failures.push_back(who + ex.what());
        }
    }
    return rep;
}

Patch load_patch(const CorpusManifest& m, const ManifestEntry& e) {
    Patch p;
    p.patch_id = e.patch_id;
    p.image = read_png_rgb(m.root / e.image_path);
    p.gt = read_mask_png(m.root / e.gt_path);
    require_same_shape(p.image.channels[0], p.gt, "load_patch");
    p.slide_id = e.slide_id;
    p.magnification = e.magnification;
    p.tile_row = e.tile_row;
    p.tile_col = e.tile_col;
    return p;
}

std::vector<Patch> load_split(const CorpusManifest& m, Split s) {
    std::vector<Patch> out;
    for (const auto& e : m.entries_in(s)) out.push_back(load_patch(m, e));
    return out;
}

}  // namespace samseg
