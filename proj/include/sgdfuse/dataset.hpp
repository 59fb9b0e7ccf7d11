#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "sgdfuse/image.hpp"

namespace sgdfuse {

enum class Split { Train, Test };

struct IndexEntry {
    std::string id;
    std::filesystem::path ir_path;
    std::filesystem::path vis_path;
    std::optional<std::filesystem::path> m_ir_path;
    std::optional<std::filesystem::path> m_vis_path;

    bool has_masks() const { return m_ir_path && m_vis_path; }
};

// Directory convention: root/ir/*.png and root/vis/*.png matched by basename,
// optionally root/masks_ir/ and root/masks_vis/ with the same basenames.
struct DatasetIndex {
    std::filesystem::path root;
    std::vector<IndexEntry> entries; // sorted by id
    Split split = Split::Train;
    int mask_exclusions = 0; // entries dropped because require_masks was set

    std::size_t size() const { return entries.size(); }
    const IndexEntry& at(std::size_t i) const { return entries[i]; }
    const IndexEntry& by_id(const std::string& id) const;
};

DatasetIndex scan_dataset(const std::filesystem::path& root, bool require_masks = false,
                          Split split = Split::Train);

ImagePair load_pair(const IndexEntry& entry);

// Same crop window applied to IR, VIS and both masks; deterministic per seed.
// `multiple_of` constrains the patch size (denoiser stride divisibility).
std::pair<ImagePair, MaskPair> random_patch(const ImagePair& pair, const MaskPair& masks,
                                            int size, std::uint64_t rng_seed,
                                            int multiple_of = 1);

} // namespace sgdfuse
