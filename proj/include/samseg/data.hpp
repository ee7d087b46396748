#pragma once

#include "samseg/core.hpp"

#include <filesystem>
#include <map>
#include <random>
#include <string>
#include <vector>

namespace samseg {

enum class Split { train, val, test };

std::string to_string(Split s);
Split split_from_string(const std::string& s);

struct Patch {
    std::string patch_id;
    RgbImage image;
    Mask gt;
    std::string slide_id;
    int magnification = 5;
    Index tile_row = 0;
    Index tile_col = 0;
};

/// Inclusive tumor-fraction bounds.
struct FractionBounds {
    double min = 0.20;
    double max = 0.80;
    bool contains(double f) const { return f >= min && f <= max; }
};

struct ManifestEntry {
    std::string patch_id;
    std::string image_path;  // relative to the manifest directory
    std::string gt_path;
    std::string slide_id;
    int magnification = 5;
    Index tile_row = 0;
    Index tile_col = 0;
    double tumor_fraction = 0.0;
    Split split = Split::train;
};

struct CorpusManifest {
    std::filesystem::path root;  // directory holding manifest.jsonl
    std::vector<ManifestEntry> entries;
    FractionBounds filter;

    std::vector<ManifestEntry> entries_in(Split s) const;
    std::map<Split, std::size_t> counts() const;
    std::filesystem::path manifest_path() const { return root / "manifest.jsonl"; }
};

nlohmann::json to_json(const ManifestEntry& e);
ManifestEntry manifest_entry_from_json(const nlohmann::json& j);

/// Non-overlapping tiles in scan order; a tile is kept when its tumor
/// fraction lies inside `bounds`.
std::vector<Patch> tile_and_filter(const RgbImage& slide, const Mask& gt, Index tile = 400,
                                   FractionBounds bounds = {}, const std::string& slide_id = "slide",
                                   int magnification = 5);

/// One synthetic patch: stroma-like textured background with 1-3 smooth
/// tumor blobs, tumor fraction rejection-sampled into `bounds`.
Patch synth_patch(std::mt19937_64& rng, Index size = 400, FractionBounds bounds = {});

/// In-memory corpus; patch i is drawn from a generator seeded by (seed, i).
std::vector<Patch> synth_patches(std::size_t n, std::uint64_t seed, Index size = 400);

struct SplitFractions {
    double val = 0.1;
    double test = 0.1;
};

/// Writes images/, masks/ and manifest.jsonl under `out_dir`. Splits are
/// assigned by position: the last `test` fraction is test, the preceding
/// `val` fraction is val.
CorpusManifest write_corpus(const std::vector<Patch>& patches, const std::filesystem::path& out_dir,
                            SplitFractions fractions = {}, FractionBounds filter = {});

CorpusManifest synth_corpus(std::size_t n, std::uint64_t seed, const std::filesystem::path& out_dir,
                            Index size = 400, SplitFractions fractions = {});

/// Parses manifest.jsonl (the path may name the file or its directory).
/// Throws ArgumentError naming the line on malformed input.
CorpusManifest load_manifest(const std::filesystem::path& path);

struct ValidationReport {
    std::size_t checked = 0;
    std::vector<std::string> failures;
    bool ok() const { return failures.empty(); }
};

ValidationReport validate_manifest(const CorpusManifest& m);

Patch load_patch(const CorpusManifest& m, const ManifestEntry& e);
std::vector<Patch> load_split(const CorpusManifest& m, Split s);

}  // namespace samseg
