#include "cdsr/metrics.hpp"

#include "cdsr/data.hpp"
#include "cdsr/errors.hpp"

#include <cmath>
#include <iomanip>
#include <sstream>

namespace cdsr {

namespace {

void require_same(const ImageBuffer& a, const ImageBuffer& b, const char* what) {
    if (!a.same_dims(b)) throw ShapeError(std::string(what) + ": image dimensions differ");
    if (a.empty()) throw ShapeError(std::string(what) + ": empty image");
}

double mse255(const ImageBuffer& a, const ImageBuffer& b) {
    const auto pa = a.samples();
    const auto pb = b.samples();
    double acc = 0.0;
    for (std::size_t i = 0; i < pa.size(); ++i) {
        const double d = (static_cast<double>(pa[i]) - pb[i]) * 255.0;
        acc += d * d;
    }
    return acc / static_cast<double>(pa.size());
}

constexpr int kWin = 11;
constexpr double kSigma = 1.5;

std::vector<double> gaussian_window() {
    std::vector<double> g(kWin);
    double sum = 0.0;
    for (int i = 0; i < kWin; ++i) {
        const double d = i - kWin / 2;
        g[i] = std::exp(-d * d / (2.0 * kSigma * kSigma));
        sum += g[i];
    }
    for (double& v : g) v /= sum;
    return g;
}

// Separable 'valid' filtering of one plane.
std::vector<double> filter_valid(const std::vector<double>& src, int h, int w, const std::vector<double>& g) {
    const int oh = h - kWin + 1, ow = w - kWin + 1;
    std::vector<double> rows(static_cast<std::size_t>(h) * ow);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < ow; ++x) {
            double acc = 0.0;
            for (int k = 0; k < kWin; ++k) acc += g[k] * src[static_cast<std::size_t>(y) * w + x + k];
            rows[static_cast<std::size_t>(y) * ow + x] = acc;
        }
    std::vector<double> out(static_cast<std::size_t>(oh) * ow);
    for (int y = 0; y < oh; ++y)
        for (int x = 0; x < ow; ++x) {
            double acc = 0.0;
            for (int k = 0; k < kWin; ++k) acc += g[k] * rows[static_cast<std::size_t>(y + k) * ow + x];
            out[static_cast<std::size_t>(y) * ow + x] = acc;
        }
    return out;
}

} // namespace

double rmse(const ImageBuffer& a, const ImageBuffer& b) {
    require_same(a, b, "rmse");
    return std::sqrt(mse255(a, b));
}

double psnr(const ImageBuffer& a, const ImageBuffer& b) {
    require_same(a, b, "psnr");
    const double m = mse255(a, b);
    if (m == 0.0) return kPsnrIdentical;
    return 10.0 * std::log10(255.0 * 255.0 / m);
}

double ssim(const ImageBuffer& a, const ImageBuffer& b) {
    require_same(a, b, "ssim");
    const int H = a.height(), W = a.width(), C = a.channels();
    if (H < kWin || W < kWin) throw ShapeError("ssim: image smaller than the 11x11 window");
    const double c1 = (0.01 * 255.0) * (0.01 * 255.0);
    const double c2 = (0.03 * 255.0) * (0.03 * 255.0);
    const auto g = gaussian_window();
    const std::size_t n = static_cast<std::size_t>(H) * W;

    double total = 0.0;
    for (int c = 0; c < C; ++c) {
        std::vector<double> pa(n), pb(n), aa(n), bb(n), ab(n);
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) {
                const std::size_t i = static_cast<std::size_t>(y) * W + x;
                pa[i] = a.at(y, x, c) * 255.0;
                pb[i] = b.at(y, x, c) * 255.0;
                aa[i] = pa[i] * pa[i];
                bb[i] = pb[i] * pb[i];
                ab[i] = pa[i] * pb[i];
            }
        const auto mu_a = filter_valid(pa, H, W, g);
        const auto mu_b = filter_valid(pb, H, W, g);
        const auto s_aa = filter_valid(aa, H, W, g);
        const auto s_bb = filter_valid(bb, H, W, g);
        const auto s_ab = filter_valid(ab, H, W, g);
        double acc = 0.0;
        for (std::size_t i = 0; i < mu_a.size(); ++i) {
            const double ma = mu_a[i], mb = mu_b[i];
            const double va = s_aa[i] - ma * ma, vb = s_bb[i] - mb * mb, cov = s_ab[i] - ma * mb;
            acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
        total += acc / static_cast<double>(mu_a.size());
    }
    return total / C;
}

MetricRow evaluate_pair(const ImageBuffer& pred, const ImageBuffer& gt, const std::string& name) {
    return {name, psnr(pred, gt), ssim(pred, gt), rmse(pred, gt)};
}

MetricRow mean_row(const std::vector<MetricRow>& rows) {
    MetricRow m{"MEAN"};
    if (rows.empty()) return m;
    for (const auto& r : rows) {
        m.psnr += r.psnr;
        m.ssim += r.ssim;
        m.rmse += r.rmse;
    }
    const double n = static_cast<double>(rows.size());
    m.psnr /= n;
    m.ssim /= n;
    m.rmse /= n;
    return m;
}

MetricReport evaluate_dir(const std::filesystem::path& pred_dir, const std::filesystem::path& gt_dir, int resolution) {
    if (resolution < kWin) throw ArgumentError("evaluate_dir: resolution must be >= 11");
    const auto pairs = load_paired_dir(pred_dir, gt_dir);
    MetricReport report;
    report.unmatched = pairs.unmatched;
    for (const auto& s : pairs.samples) {
        const std::string name = std::filesystem::path(s.provenance.substr(0, s.provenance.find('|'))).filename().string();
        const ImageBuffer p = resize_bilinear(s.shadow, resolution, resolution);
        const ImageBuffer g = resize_bilinear(s.clean, resolution, resolution);
        report.rows.push_back(evaluate_pair(p, g, name));
    }
    report.mean = mean_row(report.rows);
    return report;
}

void write_report_csv(const MetricReport& report, std::ostream& out) {
    auto num = [](double v) {
        if (std::isinf(v)) return std::string(v > 0 ? "inf" : "-inf");
        std::ostringstream s;
        s << std::setprecision(10) << v;
        return s.str();
    };
    out << "filename,psnr,ssim,rmse\n";
    for (const auto& r : report.rows) out << r.filename << ',' << num(r.psnr) << ',' << num(r.ssim) << ',' << num(r.rmse) << '\n';
    const auto& m = report.mean;
    out << "MEAN," << num(m.psnr) << ',' << num(m.ssim) << ',' << num(m.rmse) << '\n';
}

} // namespace cdsr
