#pragma once

#include "cdsr/image.hpp"

#include <filesystem>
#include <limits>
#include <ostream>
#include <string>
#include <vector>

namespace cdsr {

/// Returned by psnr() for identical images.
inline constexpr double kPsnrIdentical = std::numeric_limits<double>::infinity();

/// All metrics take [0, 1] images and work on the 0-255 scale.
double psnr(const ImageBuffer& a, const ImageBuffer& b);
double rmse(const ImageBuffer& a, const ImageBuffer& b);
/// Mean SSIM over 'valid' 11x11 Gaussian windows (sigma 1.5), averaged over
/// channels.
double ssim(const ImageBuffer& a, const ImageBuffer& b);

struct MetricRow {
    std::string filename;
    double psnr = 0.0;
    double ssim = 0.0;
    double rmse = 0.0;
};

struct MetricReport {
    std::vector<MetricRow> rows;
    MetricRow mean;
    std::size_t unmatched = 0;
};

MetricRow evaluate_pair(const ImageBuffer& pred, const ImageBuffer& gt, const std::string& name = {});

/// Unweighted mean over rows in the given order. A +inf PSNR row makes the
/// mean +inf.
MetricRow mean_row(const std::vector<MetricRow>& rows);

/// Pairs by filename, resizes both sides to resolution x resolution and
/// scores every pair.
MetricReport evaluate_dir(const std::filesystem::path& pred_dir, const std::filesystem::path& gt_dir, int resolution);

/// `filename,psnr,ssim,rmse` rows followed by a MEAN row.
void write_report_csv(const MetricReport& report, std::ostream& out);

} // namespace cdsr
