#include "sgdfuse/dataset.hpp"

#include <algorithm>
#include <map>

#include "sgdfuse/errors.hpp"
#include "sgdfuse/png_io.hpp"
#include "sgdfuse/rng.hpp"

namespace sgdfuse {

namespace fs = std::filesystem;

namespace {

std::map<std::string, fs::path> list_pngs(const fs::path& dir) {
    std::map<std::string, fs::path> out;
    if (!fs::is_directory(dir)) return out;
    for (const auto& e : fs::directory_iterator(dir)) {
        if (!e.is_regular_file()) continue;
        fs::path p = e.path();
        if (p.extension() == ".png") out.emplace(p.stem().string(), p);
    }
    return out;
}

} // namespace

const IndexEntry& DatasetIndex::by_id(const std::string& id) const {
    auto it = std::lower_bound(entries.begin(), entries.end(), id,
                               [](const IndexEntry& e, const std::string& v) { return e.id < v; });
    if (it == entries.end() || it->id != id) throw IoError("dataset: unknown id '" + id + "'");
    return *it;
}

DatasetIndex scan_dataset(const fs::path& root, bool require_masks, Split split) {
    auto ir = list_pngs(root / "ir");
    auto vis = list_pngs(root / "vis");
    auto m_ir = list_pngs(root / "masks_ir");
    auto m_vis = list_pngs(root / "masks_vis");

    DatasetIndex idx;
    idx.root = root;
    idx.split = split;
    for (const auto& [id, ir_path] : ir) {
        auto v = vis.find(id);
        if (v == vis.end()) continue;
        IndexEntry e;
        e.id = id;
        e.ir_path = ir_path;
        e.vis_path = v->second;
        if (auto mi = m_ir.find(id); mi != m_ir.end()) e.m_ir_path = mi->second;
        if (auto mv = m_vis.find(id); mv != m_vis.end()) e.m_vis_path = mv->second;
        if (require_masks && !e.has_masks()) {
            ++idx.mask_exclusions;
            continue;
        }
        // validate decodability and matching sizes up front
        int ih = 0, iw = 0, vh = 0, vw = 0;
        png_size(e.ir_path, ih, iw);
        png_size(e.vis_path, vh, vw);
        if (ih != vh || iw != vw)
            throw DimensionError("pair '" + id + "': ir " + std::to_string(iw) + "x" +
                                 std::to_string(ih) + " vs vis " + std::to_string(vw) + "x" +
                                 std::to_string(vh));
        idx.entries.push_back(std::move(e));
    }
    // std::map iteration is already id-sorted; keep the guarantee explicit
    std::sort(idx.entries.begin(), idx.entries.end(),
              [](const IndexEntry& a, const IndexEntry& b) { return a.id < b.id; });
    if (idx.entries.empty())
        throw EmptyDatasetError("no complete ir/vis pairs under '" + root.string() + "'");
    return idx;
}

ImagePair load_pair(const IndexEntry& entry) {
    Image ir = read_png(entry.ir_path);
    if (ir.channels() == 3) throw IoError("ir image '" + entry.ir_path.string() + "' is not grayscale");
    Image vis = read_png(entry.vis_path);
    if (vis.channels() == 1) throw IoError("vis image '" + entry.vis_path.string() + "' is not RGB");
    return ImagePair(std::move(ir), std::move(vis), entry.id);
}

namespace {

Tensor crop(const Tensor& t, int y0, int x0, int size) {
    int c = t.dim(0);
    Tensor out(std::vector<int>{c, size, size});
    for (int ci = 0; ci < c; ++ci)
        for (int y = 0; y < size; ++y)
            for (int x = 0; x < size; ++x) out.at(ci, y, x) = t.at(ci, y0 + y, x0 + x);
    return out;
}

} // namespace

std::pair<ImagePair, MaskPair> random_patch(const ImagePair& pair, const MaskPair& masks,
                                            int size, std::uint64_t rng_seed, int multiple_of) {
    int h = pair.height(), w = pair.width();
    if (size > std::min(h, w))
        throw DimensionError("patch size " + std::to_string(size) + " exceeds image " +
                             std::to_string(w) + "x" + std::to_string(h));
    if (multiple_of > 1 && size % multiple_of != 0)
        throw DimensionError("patch size " + std::to_string(size) + " not divisible by " +
                             std::to_string(multiple_of));
    if (masks.height() != h || masks.width() != w)
        throw DimensionError("random_patch: masks do not match pair size");

    Rng rng(rng_seed);
    int y0 = static_cast<int>(rng.uniform_int(0, h - size));
    int x0 = static_cast<int>(rng.uniform_int(0, w - size));

    ImagePair cropped(Image(crop(pair.ir.data, y0, x0, size), pair.ir.range),
                      Image(crop(pair.vis.data, y0, x0, size), pair.vis.range), pair.id);
    MaskPair cmasks(Image(crop(masks.m_ir.data, y0, x0, size), ValueRange::Unit),
                    Image(crop(masks.m_vis.data, y0, x0, size), ValueRange::Unit),
                    masks.provenance);
    return {std::move(cropped), std::move(cmasks)};
}

} // namespace sgdfuse
