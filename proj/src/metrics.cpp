#include "sgdfuse/metrics.hpp"

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <future>
#include <sstream>

#include "sgdfuse/errors.hpp"
#include "sgdfuse/png_io.hpp"

namespace sgdfuse::metrics {

GrayU8 to_gray_u8(const Image& img) {
    Tensor gray = img.channels() == 3 ? luma_bt601(img.data) : img.data;
    GrayU8 out;
    out.h = img.height();
    out.w = img.width();
    out.v.resize(static_cast<std::size_t>(out.h) * out.w);
    for (std::size_t i = 0; i < out.v.size(); ++i) {
        long b = std::lround(gray[static_cast<std::int64_t>(i)] * 255.0);
        out.v[i] = static_cast<std::uint8_t>(std::clamp<long>(b, 0, 255));
    }
    return out;
}

QabfConstants::QabfConstants() {
    gamma_g = 1.0 + std::exp(kappa_g * (1.0 - sigma_g));
    gamma_a = 1.0 + std::exp(kappa_a * (1.0 - sigma_a));
}

namespace {

void require_same(const GrayU8& a, const GrayU8& b, const char* what) {
    if (a.h != b.h || a.w != b.w) throw DimensionError(std::string(what) + ": size mismatch");
}

std::array<double, 256> histogram(const GrayU8& f) {
    std::array<double, 256> h{};
    for (std::uint8_t v : f.v) h[v] += 1.0;
    double inv = 1.0 / static_cast<double>(f.v.size());
    for (double& x : h) x *= inv;
    return h;
}

} // namespace

double en(const GrayU8& f) {
    auto h = histogram(f);
    double e = 0.0;
    for (double p : h)
        if (p > 0.0) e -= p * std::log2(p);
    return e;
}

double sd(const GrayU8& f) {
    // integer moments: exact and invariant to pixel reordering
    std::int64_t s = 0, s2 = 0;
    for (std::uint8_t v : f.v) {
        s += v;
        s2 += static_cast<std::int64_t>(v) * v;
    }
    double n = static_cast<double>(f.v.size());
    double mu = static_cast<double>(s) / n;
    return std::sqrt(static_cast<double>(s2) / n - mu * mu);
}

double sf(const GrayU8& f) {
    std::int64_t rf = 0, cf = 0;
    for (int y = 0; y < f.h; ++y)
        for (int x = 1; x < f.w; ++x) {
            std::int64_t d = static_cast<std::int64_t>(f.v[static_cast<std::size_t>(y) * f.w + x]) -
                             f.v[static_cast<std::size_t>(y) * f.w + x - 1];
            rf += d * d;
        }
    for (int y = 1; y < f.h; ++y)
        for (int x = 0; x < f.w; ++x) {
            std::int64_t d = static_cast<std::int64_t>(f.v[static_cast<std::size_t>(y) * f.w + x]) -
                             f.v[static_cast<std::size_t>(y - 1) * f.w + x];
            cf += d * d;
        }
    double rf2 = static_cast<double>(rf) / (static_cast<double>(f.h) * (f.w - 1));
    double cf2 = static_cast<double>(cf) / (static_cast<double>(f.h - 1) * f.w);
    return std::sqrt(rf2 + cf2);
}

namespace {

double mutual_information(const GrayU8& x, const GrayU8& y) {
    std::vector<std::int64_t> joint(256 * 256, 0);
    std::array<std::int64_t, 256> px{}, py{};
    for (std::size_t i = 0; i < x.v.size(); ++i) {
        joint[static_cast<std::size_t>(x.v[i]) * 256 + y.v[i]] += 1;
        px[x.v[i]] += 1;
        py[y.v[i]] += 1;
    }
    double n = static_cast<double>(x.v.size());
    double m = 0.0;
    for (int i = 0; i < 256; ++i) {
        if (px[i] == 0) continue;
        for (int j = 0; j < 256; ++j) {
            std::int64_t c = joint[static_cast<std::size_t>(i) * 256 + j];
            if (c > 0 && py[j] > 0)
                m += (c / n) * std::log2(c * n / (static_cast<double>(px[i]) * py[j]));
        }
    }
    return m;
}

} // namespace

double mi(const GrayU8& f, const GrayU8& a, const GrayU8& b) {
    require_same(f, a, "mi");
    require_same(f, b, "mi");
    return mutual_information(f, a) + mutual_information(f, b);
}

namespace {

// Pearson correlation; returns 0 (and warns) on zero variance.
double pearson(const std::vector<double>& x, const std::vector<double>& y, const WarnFn& warn) {
    double mx = 0.0, my = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        mx += x[i];
        my += y[i];
    }
    mx /= static_cast<double>(x.size());
    my /= static_cast<double>(x.size());
    double sxx = 0.0, syy = 0.0, sxy = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        double dx = x[i] - mx, dy = y[i] - my;
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    if (sxx < 1e-12 || syy < 1e-12) {
        if (warn) warn("scd: zero-variance argument, correlation term set to 0");
        return 0.0;
    }
    return sxy / std::sqrt(sxx * syy);
}

} // namespace

double scd(const GrayU8& f, const GrayU8& a, const GrayU8& b, const WarnFn& warn) {
    require_same(f, a, "scd");
    require_same(f, b, "scd");
    // degenerate fused image: both difference correlations are meaningless
    auto degenerate = [](const GrayU8& g) {
        for (std::uint8_t v : g.v)
            if (v != g.v[0]) return false;
        return true;
    };
    if (degenerate(f)) {
        if (warn) {
            warn("scd: constant fused image, term r(F-B, A) set to 0");
            warn("scd: constant fused image, term r(F-A, B) set to 0");
        }
        return 0.0;
    }
    std::size_t n = f.v.size();
    std::vector<double> fa(n), fb(n), av(n), bv(n);
    for (std::size_t i = 0; i < n; ++i) {
        fa[i] = static_cast<double>(f.v[i]) - a.v[i]; // F - A
        fb[i] = static_cast<double>(f.v[i]) - b.v[i]; // F - B
        av[i] = a.v[i];
        bv[i] = b.v[i];
    }
    return pearson(fb, av, warn) + pearson(fa, bv, warn);
}

// ---------------------------------------------------------------------------
// pixel-domain multi-scale VIF
// ---------------------------------------------------------------------------

namespace {

struct Mat {
    int h = 0, w = 0;
    std::vector<double> v;

    Mat() = default;
    Mat(int hh, int ww) : h(hh), w(ww), v(static_cast<std::size_t>(hh) * ww, 0.0) {}
    double& at(int y, int x) { return v[static_cast<std::size_t>(y) * w + x]; }
    double at(int y, int x) const { return v[static_cast<std::size_t>(y) * w + x]; }
};

Mat gaussian_window(int n, double sigma) {
    Mat win(n, n);
    double c = (n - 1) / 2.0;
    double sum = 0.0;
    for (int y = 0; y < n; ++y)
        for (int x = 0; x < n; ++x) {
            double dy = y - c, dx = x - c;
            double g = std::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma));
            win.at(y, x) = g;
            sum += g;
        }
    for (double& g : win.v) g /= sum;
    return win;
}

Mat filter_valid(const Mat& img, const Mat& win) {
    int oh = img.h - win.h + 1, ow = img.w - win.w + 1;
    if (oh <= 0 || ow <= 0)
        throw DimensionError("vif: image smaller than the filter window at some scale");
    Mat out(oh, ow);
    for (int y = 0; y < oh; ++y)
        for (int x = 0; x < ow; ++x) {
            double s = 0.0;
            for (int ky = 0; ky < win.h; ++ky)
                for (int kx = 0; kx < win.w; ++kx)
                    s += win.at(ky, kx) * img.at(y + ky, x + kx);
            out.at(y, x) = s;
        }
    return out;
}

Mat downsample2(const Mat& img) {
    Mat out((img.h + 1) / 2, (img.w + 1) / 2);
    for (int y = 0; y < out.h; ++y)
        for (int x = 0; x < out.w; ++x) out.at(y, x) = img.at(2 * y, 2 * x);
    return out;
}

Mat hadamard(const Mat& a, const Mat& b) {
    Mat out(a.h, a.w);
    for (std::size_t i = 0; i < out.v.size(); ++i) out.v[i] = a.v[i] * b.v[i];
    return out;
}

double vif_single(const GrayU8& ref_u8, const GrayU8& dist_u8) {
    constexpr double kSigmaNsq = 2.0;
    constexpr double kFloor = 1e-10;
    Mat ref(ref_u8.h, ref_u8.w), dist(dist_u8.h, dist_u8.w);
    for (std::size_t i = 0; i < ref.v.size(); ++i) {
        ref.v[i] = ref_u8.v[i];
        dist.v[i] = dist_u8.v[i];
    }
    double num = 0.0, den = 0.0;
    for (int scale = 1; scale <= 4; ++scale) {
        int n = (1 << (4 - scale + 1)) + 1;
        Mat win = gaussian_window(n, n / 5.0);
        if (scale > 1) {
            ref = downsample2(filter_valid(ref, win));
            dist = downsample2(filter_valid(dist, win));
        }
        Mat mu1 = filter_valid(ref, win);
        Mat mu2 = filter_valid(dist, win);
        Mat s11 = filter_valid(hadamard(ref, ref), win);
        Mat s22 = filter_valid(hadamard(dist, dist), win);
        Mat s12 = filter_valid(hadamard(ref, dist), win);
        for (std::size_t i = 0; i < mu1.v.size(); ++i) {
            double m1 = mu1.v[i], m2 = mu2.v[i];
            double sigma1 = std::max(0.0, s11.v[i] - m1 * m1);
            double sigma2 = std::max(0.0, s22.v[i] - m2 * m2);
            double sigma12 = s12.v[i] - m1 * m2;
            double g = sigma12 / (sigma1 + kFloor);
            double sv = sigma2 - g * sigma12;
            if (sigma1 < kFloor) {
                g = 0.0;
                sv = sigma2;
                sigma1 = 0.0;
            }
            if (sigma2 < kFloor) {
                g = 0.0;
                sv = 0.0;
            }
            if (g < 0.0) {
                sv = sigma2;
                g = 0.0;
            }
            sv = std::max(sv, kFloor);
            num += std::log10(1.0 + g * g * sigma1 / (sv + kSigmaNsq));
            den += std::log10(1.0 + sigma1 / kSigmaNsq);
        }
    }
    return den > 0.0 ? num / den : 0.0;
}

} // namespace

double vif(const GrayU8& f, const GrayU8& a, const GrayU8& b) {
    require_same(f, a, "vif");
    require_same(f, b, "vif");
    return vif_single(a, f) + vif_single(b, f);
}

// ---------------------------------------------------------------------------
// Qabf
// ---------------------------------------------------------------------------

namespace {

struct EdgeField {
    std::vector<double> strength;
    std::vector<double> angle; // undirected orientation in [0, pi)
};

EdgeField edge_field(const GrayU8& img) {
    EdgeField e;
    std::size_t n = img.v.size();
    e.strength.resize(n);
    e.angle.resize(n);
    auto clampi = [](int v, int hi) { return v < 0 ? 0 : (v > hi ? hi : v); };
    for (int y = 0; y < img.h; ++y)
        for (int x = 0; x < img.w; ++x) {
            double n[3][3];
            for (int ky = 0; ky < 3; ++ky)
                for (int kx = 0; kx < 3; ++kx)
                    n[ky][kx] = img.v[static_cast<std::size_t>(clampi(y + ky - 1, img.h - 1)) *
                                          img.w +
                                      clampi(x + kx - 1, img.w - 1)];
            double gx =
                (n[0][2] + 2.0 * n[1][2] + n[2][2]) - (n[0][0] + 2.0 * n[1][0] + n[2][0]);
            double gy =
                (n[2][0] + 2.0 * n[2][1] + n[2][2]) - (n[0][0] + 2.0 * n[0][1] + n[0][2]);
            std::size_t i = static_cast<std::size_t>(y) * img.w + x;
            e.strength[i] = std::sqrt(gx * gx + gy * gy);
            double ang = std::atan2(gy, gx);
            if (ang < 0.0) ang += M_PI; // edges are undirected
            if (ang >= M_PI) ang -= M_PI;
            e.angle[i] = ang;
        }
    return e;
}

// edge-preservation factor between a source and the fused image at one pixel
double q_factor(double gs, double as, double gf, double af, const QabfConstants& c) {
    if (gs <= 0.0 && gf <= 0.0) return 1.0; // nothing to transfer
    double ratio = (std::max(gs, gf) > 0.0) ? std::min(gs, gf) / std::max(gs, gf) : 0.0;
    double d = std::fabs(as - af);
    d = std::min(d, M_PI - d); // circular distance on [0, pi)
    double align = 1.0 - d / (M_PI / 2.0);
    double qg = c.gamma_g / (1.0 + std::exp(c.kappa_g * (ratio - c.sigma_g)));
    double qa = c.gamma_a / (1.0 + std::exp(c.kappa_a * (align - c.sigma_a)));
    return qg * qa;
}

} // namespace

double qabf(const GrayU8& f, const GrayU8& a, const GrayU8& b, const QabfConstants& c,
            const WarnFn& warn) {
    require_same(f, a, "qabf");
    require_same(f, b, "qabf");
    EdgeField ef = edge_field(f), ea = edge_field(a), eb = edge_field(b);
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < ef.strength.size(); ++i) {
        double wa = ea.strength[i], wb = eb.strength[i];
        double qaf = q_factor(ea.strength[i], ea.angle[i], ef.strength[i], ef.angle[i], c);
        double qbf = q_factor(eb.strength[i], eb.angle[i], ef.strength[i], ef.angle[i], c);
        num += qaf * wa + qbf * wb;
        den += wa + wb;
    }
    if (den <= 0.0) {
        if (warn) warn("qabf: both sources have zero edge strength, metric defined as 0");
        return 0.0;
    }
    return num / den;
}

// ---------------------------------------------------------------------------
// batch evaluation / CSV
// ---------------------------------------------------------------------------

namespace {

MetricRow evaluate_one(const IndexEntry& entry, const std::filesystem::path& fused_path,
                       const WarnFn& warn) {
    ImagePair pair = load_pair(entry);
    Image fused = read_png(fused_path);
    if (fused.height() != pair.height() || fused.width() != pair.width())
        throw DimensionError("fused image '" + entry.id + "' size differs from the pair");
    GrayU8 f = to_gray_u8(fused);
    GrayU8 a = to_gray_u8(pair.ir);
    GrayU8 b = to_gray_u8(pair.vis);
    MetricRow row;
    row.id = entry.id;
    row.en = en(f);
    row.sd = sd(f);
    row.sf = sf(f);
    row.mi = mi(f, a, b);
    row.scd = scd(f, a, b, warn);
    row.vif = vif(f, a, b);
    row.qabf = qabf(f, a, b, QabfConstants(), warn);
    return row;
}

} // namespace

MetricReport evaluate_all(const DatasetIndex& index, const std::filesystem::path& fused_dir,
                          int jobs, const WarnFn& warn) {
    MetricReport report;
    std::vector<std::pair<std::size_t, std::filesystem::path>> todo;
    for (std::size_t i = 0; i < index.size(); ++i) {
        auto path = fused_dir / (index.at(i).id + ".png");
        if (!std::filesystem::exists(path)) {
            report.missing.push_back(index.at(i).id);
            continue;
        }
        todo.emplace_back(i, path);
    }

    std::vector<MetricRow> rows(todo.size());
    jobs = std::max(1, jobs);
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (;;) {
            std::size_t j = next.fetch_add(1);
            if (j >= todo.size()) break;
            rows[j] = evaluate_one(index.at(todo[j].first), todo[j].second, warn);
        }
    };
    if (jobs == 1) {
        worker();
    } else {
        std::vector<std::future<void>> futs;
        for (int t = 0; t < jobs; ++t) futs.push_back(std::async(std::launch::async, worker));
        for (auto& fu : futs) fu.get();
    }
    report.rows = std::move(rows);

    MetricRow& m = report.aggregate;
    m.id = "mean";
    for (const MetricRow& r : report.rows) {
        m.en += r.en;
        m.sd += r.sd;
        m.sf += r.sf;
        m.mi += r.mi;
        m.scd += r.scd;
        m.vif += r.vif;
        m.qabf += r.qabf;
    }
    if (!report.rows.empty()) {
        double inv = 1.0 / static_cast<double>(report.rows.size());
        m.en *= inv;
        m.sd *= inv;
        m.sf *= inv;
        m.mi *= inv;
        m.scd *= inv;
        m.vif *= inv;
        m.qabf *= inv;
    }
    return report;
}

namespace {

std::string fmt_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

void write_row(std::ofstream& out, const MetricRow& r) {
    out << r.id << ',' << fmt_double(r.en) << ',' << fmt_double(r.sd) << ',' << fmt_double(r.sf)
        << ',' << fmt_double(r.mi) << ',' << fmt_double(r.scd) << ',' << fmt_double(r.vif) << ','
        << fmt_double(r.qabf) << '\n';
}

} // namespace

void write_csv(const MetricReport& report, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write '" + path.string() + "'");
    out << "id,EN,SD,SF,MI,SCD,VIF,Qabf\n";
    for (const MetricRow& r : report.rows) write_row(out, r);
    write_row(out, report.aggregate);
}

MetricReport read_csv(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read '" + path.string() + "'");
    std::string line;
    if (!std::getline(in, line) || line != "id,EN,SD,SF,MI,SCD,VIF,Qabf")
        throw IoError("bad metric CSV header in '" + path.string() + "'");
    MetricReport report;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::stringstream ss(line);
        MetricRow r;
        std::string tok;
        std::getline(ss, r.id, ',');
        auto next = [&](double& v) {
            if (!std::getline(ss, tok, ',')) throw IoError("short metric CSV row");
            v = std::stod(tok);
        };
        next(r.en);
        next(r.sd);
        next(r.sf);
        next(r.mi);
        next(r.scd);
        next(r.vif);
        next(r.qabf);
        if (r.id == "mean")
            report.aggregate = r;
        else
            report.rows.push_back(r);
    }
    return report;
}

} // namespace sgdfuse::metrics
