#include "cdsr/errors.hpp"
#include "cdsr/metrics.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

using namespace cdsr;
using cdsr::test::random_image;
using cdsr::test::TempDir;

namespace {

// Direct scalar-loop references at 64-bit, written independently of the
// separable implementation.
double naive_psnr(const ImageBuffer& a, const ImageBuffer& b) {
    long double acc = 0.0L;
    for (int y = 0; y < a.height(); ++y)
        for (int x = 0; x < a.width(); ++x)
            for (int c = 0; c < a.channels(); ++c) {
                const long double d = (static_cast<long double>(a.at(y, x, c)) - b.at(y, x, c)) * 255.0L;
                acc += d * d;
            }
    const long double mse = acc / (static_cast<long double>(a.height()) * a.width() * a.channels());
    return static_cast<double>(10.0L * std::log10(255.0L * 255.0L / mse));
}

double naive_ssim(const ImageBuffer& a, const ImageBuffer& b) {
    double w[11][11];
    double wsum = 0.0;
    for (int i = 0; i < 11; ++i)
        for (int j = 0; j < 11; ++j) {
            const double r2 = (i - 5) * (i - 5) + (j - 5) * (j - 5);
            w[i][j] = std::exp(-r2 / (2.0 * 1.5 * 1.5));
            wsum += w[i][j];
        }
    const double c1 = std::pow(0.01 * 255.0, 2), c2 = std::pow(0.03 * 255.0, 2);
    double total = 0.0;
    for (int c = 0; c < a.channels(); ++c) {
        double acc = 0.0;
        int count = 0;
        for (int y0 = 0; y0 + 11 <= a.height(); ++y0)
            for (int x0 = 0; x0 + 11 <= a.width(); ++x0) {
                double ma = 0, mb = 0;
                for (int i = 0; i < 11; ++i)
                    for (int j = 0; j < 11; ++j) {
                        const double k = w[i][j] / wsum;
                        ma += k * a.at(y0 + i, x0 + j, c) * 255.0;
                        mb += k * b.at(y0 + i, x0 + j, c) * 255.0;
                    }
                double va = 0, vb = 0, cov = 0;
                for (int i = 0; i < 11; ++i)
                    for (int j = 0; j < 11; ++j) {
                        const double k = w[i][j] / wsum;
                        const double da = a.at(y0 + i, x0 + j, c) * 255.0 - ma;
                        const double db = b.at(y0 + i, x0 + j, c) * 255.0 - mb;
                        va += k * da * da;
                        vb += k * db * db;
                        cov += k * da * db;
                    }
                acc += ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                ++count;
            }
        total += acc / count;
    }
    return total / a.channels();
}

// Samples on a 1/1024 grid, so adding a multiple of 1/64 is exact.
ImageBuffer grid_image(int h, int w, int c, std::uint64_t seed) {
    ImageBuffer img = random_image(h, w, c, seed, 0.2f, 0.6f);
    for (float& v : img.samples()) v = std::round(v * 1024.0f) / 1024.0f;
    return img;
}

ImageBuffer offset(const ImageBuffer& img, float delta) {
    ImageBuffer out = img;
    for (float& v : out.samples()) v += delta;
    return out;
}

} // namespace

TEST(Psnr, UniformDifferenceOfTwentyFivePointFive) {
    // 0.1 is not a float, so 20 dB holds to the rounding of 0.1f (~1e-7 dB).
    EXPECT_NEAR(psnr(ImageBuffer(16, 16, 3, 0.0f), ImageBuffer(16, 16, 3, 0.1f)), 20.0, 1e-6);
    const double stored = static_cast<double>(0.1f) * 255.0;
    EXPECT_NEAR(psnr(ImageBuffer(16, 16, 3, 0.0f), ImageBuffer(16, 16, 3, 0.1f)), 20.0 * std::log10(255.0 / stored),
                1e-12);
}

TEST(Psnr, IdenticalGivesSentinel) {
    const ImageBuffer a = random_image(12, 12, 3, 1);
    EXPECT_EQ(psnr(a, a), kPsnrIdentical);
    EXPECT_TRUE(std::isinf(psnr(a, a)));
}

TEST(Psnr, MatchesScalarLoop) {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        const ImageBuffer a = random_image(33, 21, 3, seed), b = random_image(33, 21, 3, seed + 50);
        EXPECT_NEAR(psnr(a, b), naive_psnr(a, b), 1e-6);
    }
}

TEST(Rmse, ClosedForms) {
    EXPECT_NEAR(rmse(ImageBuffer(8, 8, 3, 0.2f), ImageBuffer(8, 8, 3, 0.2f + 10.0f / 255.0f)), 10.0, 1e-5);
    EXPECT_NEAR(rmse(ImageBuffer(8, 8, 1, 0.0f), ImageBuffer(8, 8, 1, 10.0f / 255.0f)), 10.0, 1e-5);
    const ImageBuffer a = random_image(8, 8, 3, 2);
    EXPECT_EQ(rmse(a, a), 0.0);
}

TEST(Ssim, IdenticalIsExactlyOne) {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        const ImageBuffer a = random_image(20, 17, 3, seed);
        EXPECT_EQ(ssim(a, a), 1.0);
    }
    EXPECT_EQ(ssim(ImageBuffer(11, 11, 1, 0.3f), ImageBuffer(11, 11, 1, 0.3f)), 1.0);
}

TEST(Ssim, BlackVersusWhiteNearZero) {
    const double v = ssim(ImageBuffer(16, 16, 3, 0.0f), ImageBuffer(16, 16, 3, 1.0f));
    EXPECT_LT(v, 0.01);
    EXPECT_GE(v, 0.0);
    const double c1 = std::pow(0.01 * 255.0, 2);
    EXPECT_NEAR(v, c1 / (255.0 * 255.0 + c1), 1e-12);
}

TEST(Ssim, MatchesNaiveWindowedOracle) {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const ImageBuffer a = random_image(64, 64, 3, 100 + seed);
        ImageBuffer b = a;
        const ImageBuffer n = random_image(64, 64, 3, 200 + seed, -0.2f, 0.2f);
        for (std::size_t i = 0; i < b.size(); ++i) b.samples()[i] += n.samples()[i];
        ASSERT_NEAR(ssim(a, b), naive_ssim(a, b), 1e-6) << "seed " << seed;
    }
}

TEST(Ssim, BoundedByOne) {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        const double v = ssim(random_image(16, 16, 3, seed), random_image(16, 16, 3, seed + 9));
        EXPECT_LE(v, 1.0);
        EXPECT_GE(v, -1.0);
    }
}

TEST(Metrics, Symmetric) {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        const ImageBuffer a = random_image(24, 24, 3, seed), b = random_image(24, 24, 3, seed + 7);
        EXPECT_NEAR(psnr(a, b), psnr(b, a), 1e-9);
        EXPECT_NEAR(rmse(a, b), rmse(b, a), 1e-9);
        EXPECT_NEAR(ssim(a, b), ssim(b, a), 1e-9);
    }
}

TEST(Metrics, RmseDoublesWithUniformDifference) {
    const ImageBuffer a = grid_image(16, 16, 3, 4);
    for (float d : {0.0625f, 0.125f, 0.1875f}) {
        EXPECT_EQ(rmse(a, offset(a, 2.0f * d)) / rmse(a, offset(a, d)), 2.0) << d;
    }
}

TEST(Metrics, PsnrRmseIdentityForUniformError) {
    const ImageBuffer a = grid_image(16, 16, 3, 5);
    for (float d : {0.015625f, 0.0625f, 0.125f, 0.3125f}) {
        const ImageBuffer b = offset(a, d);
        EXPECT_NEAR(psnr(a, b), 20.0 * std::log10(255.0 / rmse(a, b)), 1e-9) << d;
    }
}

TEST(Metrics, RejectDimensionMismatchAndTinyImages) {
    EXPECT_THROW(psnr(ImageBuffer(4, 4, 3), ImageBuffer(4, 5, 3)), ShapeError);
    EXPECT_THROW(rmse(ImageBuffer(4, 4, 3), ImageBuffer(4, 4, 1)), ShapeError);
    EXPECT_THROW(ssim(ImageBuffer(10, 12, 3), ImageBuffer(10, 12, 3)), ShapeError);
}

TEST(EvaluateDir, IdenticalPredictions) {
    TempDir dir("eval_same");
    std::filesystem::create_directories(dir / "pred");
    std::filesystem::create_directories(dir / "gt");
    for (int i = 0; i < 3; ++i) {
        const ImageBuffer img = random_image(20, 30, 3, i);
        const std::string name = "img" + std::to_string(i) + ".png";
        save_image(img, dir / "pred" / name);
        save_image(img, dir / "gt" / name);
    }
    const MetricReport r = evaluate_dir(dir / "pred", dir / "gt", 32);
    ASSERT_EQ(r.rows.size(), 3u);
    for (const auto& row : r.rows) {
        EXPECT_EQ(row.rmse, 0.0);
        EXPECT_EQ(row.ssim, 1.0);
        EXPECT_EQ(row.psnr, kPsnrIdentical);
    }
    EXPECT_EQ(r.mean.rmse, 0.0);
    EXPECT_EQ(r.mean.ssim, 1.0);
    EXPECT_EQ(r.mean.psnr, kPsnrIdentical);
}

TEST(EvaluateDir, SinglePairAggregateEqualsRow) {
    TempDir dir("eval_single");
    std::filesystem::create_directories(dir / "pred");
    std::filesystem::create_directories(dir / "gt");
    save_image(random_image(24, 24, 3, 1), dir / "pred" / "a.png");
    save_image(random_image(24, 24, 3, 2), dir / "gt" / "a.png");
    const MetricReport r = evaluate_dir(dir / "pred", dir / "gt", 24);
    ASSERT_EQ(r.rows.size(), 1u);
    EXPECT_EQ(r.rows[0].filename, "a.png");
    EXPECT_EQ(r.mean.psnr, r.rows[0].psnr);
    EXPECT_EQ(r.mean.ssim, r.rows[0].ssim);
    EXPECT_EQ(r.mean.rmse, r.rows[0].rmse);
}

TEST(EvaluateDir, MeanIsArithmeticMeanAndResizes) {
    TempDir dir("eval_mean");
    std::filesystem::create_directories(dir / "pred");
    std::filesystem::create_directories(dir / "gt");
    for (int i = 0; i < 4; ++i) {
        const std::string name = "p" + std::to_string(i) + ".png";
        save_image(random_image(16 + i, 20, 3, i), dir / "pred" / name);
        save_image(random_image(16 + i, 20, 3, i + 10), dir / "gt" / name);
    }
    const MetricReport r = evaluate_dir(dir / "pred", dir / "gt", 40);
    ASSERT_EQ(r.rows.size(), 4u);
    double p = 0, s = 0, e = 0;
    for (const auto& row : r.rows) {
        p += row.psnr;
        s += row.ssim;
        e += row.rmse;
    }
    EXPECT_NEAR(r.mean.psnr, p / 4, 1e-9);
    EXPECT_NEAR(r.mean.ssim, s / 4, 1e-9);
    EXPECT_NEAR(r.mean.rmse, e / 4, 1e-9);

    const ImageBuffer a = resize_bilinear(load_image(dir / "pred" / "p2.png"), 40, 40);
    const ImageBuffer b = resize_bilinear(load_image(dir / "gt" / "p2.png"), 40, 40);
    EXPECT_EQ(r.rows[2].psnr, psnr(a, b));
    EXPECT_EQ(r.rows[2].ssim, ssim(a, b));
}

TEST(EvaluateDir, CsvLayout) {
    MetricReport r;
    r.rows = {{"a.png", 20.0, 0.5, 25.5}, {"b.png", kPsnrIdentical, 1.0, 0.0}};
    r.mean = mean_row(r.rows);
    std::ostringstream out;
    write_report_csv(r, out);
    EXPECT_EQ(out.str(), "filename,psnr,ssim,rmse\na.png,20,0.5,25.5\nb.png,inf,1,0\nMEAN,inf,0.75,12.75\n");
}
