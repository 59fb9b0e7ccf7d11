#pragma once

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "sgdfuse/dataset.hpp"
#include "sgdfuse/image.hpp"

namespace sgdfuse::metrics {

using WarnFn = std::function<void(const std::string&)>;

// Metrics operate on 8-bit grayscale rasters; RGB inputs collapse to BT.601
// luminance before quantization.
struct GrayU8 {
    int h = 0, w = 0;
    std::vector<std::uint8_t> v;

    std::size_t size() const { return v.size(); }
};

GrayU8 to_gray_u8(const Image& img);

// Edge-model constants for Qabf. gamma defaults are normalized so a perfect
// match (ratio 1, zero orientation difference) scores exactly 1.
struct QabfConstants {
    double kappa_g = -15.0;
    double sigma_g = 0.5;
    double kappa_a = -22.0;
    double sigma_a = 0.8;
    double gamma_g;
    double gamma_a;

    QabfConstants();
};

double en(const GrayU8& f);
double sd(const GrayU8& f);
double sf(const GrayU8& f);
double mi(const GrayU8& f, const GrayU8& a, const GrayU8& b);
double scd(const GrayU8& f, const GrayU8& a, const GrayU8& b, const WarnFn& warn = nullptr);
double vif(const GrayU8& f, const GrayU8& a, const GrayU8& b);
double qabf(const GrayU8& f, const GrayU8& a, const GrayU8& b,
            const QabfConstants& c = QabfConstants(), const WarnFn& warn = nullptr);

struct MetricRow {
    std::string id;
    double en = 0, sd = 0, sf = 0, mi = 0, scd = 0, vif = 0, qabf = 0;
};

struct MetricReport {
    std::vector<MetricRow> rows;     // one per evaluated image, index order
    MetricRow aggregate;             // arithmetic means, id = "mean"
    std::vector<std::string> missing; // ids without a fused image

    bool complete() const { return missing.empty(); }
};

// Fused images are looked up as fused_dir/<id>.png.
MetricReport evaluate_all(const DatasetIndex& index, const std::filesystem::path& fused_dir,
                          int jobs = 1, const WarnFn& warn = nullptr);

void write_csv(const MetricReport& report, const std::filesystem::path& path);
MetricReport read_csv(const std::filesystem::path& path);

} // namespace sgdfuse::metrics
