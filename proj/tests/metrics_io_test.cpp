#include <gtest/gtest.h>

#include <filesystem>
#include <random>

#include "cotr/io.hpp"
#include "cotr/metrics.hpp"

namespace cotr {
namespace {

namespace fs = std::filesystem;

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "cotr_metrics_io_test";
  fs::create_directories(dir);
  return dir / name;
}

FlowField filled(std::size_t w, std::size_t h, float u, float v) {
  FlowField f(w, h);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) f.set(x, y, u, v);
  return f;
}

TEST(Metrics, AepeExample) {
  FlowField gt = filled(2, 1, 0, 0), pred = filled(2, 1, 0, 0);
  pred.set(0, 0, 3, 4);
  pred.set(1, 0, 0, 1);
  EXPECT_DOUBLE_EQ(aepe(pred, gt), 3.0);
}

TEST(Metrics, InvalidPixelsIgnored) {
  FlowField gt = filled(2, 1, 0, 0), pred = filled(2, 1, 0, 0);
  pred.set(0, 0, 100, 0);
  gt.set(0, 0, 0, 0, false);
  EXPECT_DOUBLE_EQ(aepe(pred, gt), 0.0);
  gt.set(1, 0, 0, 0, false);
  EXPECT_THROW(aepe(pred, gt), DomainError);
}

TEST(Metrics, PckAndFl) {
  FlowField gt = filled(4, 1, 100, 0), pred = filled(4, 1, 100, 0);
  pred.set(0, 0, 100.5, 0);  // 0.5
  pred.set(1, 0, 102, 0);    // 2
  pred.set(2, 0, 104, 0);    // 4, under 5% of 100
  pred.set(3, 0, 110, 0);    // 10
  EXPECT_DOUBLE_EQ(pck(pred, gt, 1), 0.25);
  EXPECT_DOUBLE_EQ(pck(pred, gt, 3), 0.5);
  EXPECT_DOUBLE_EQ(pck(pred, gt, 5), 0.75);
  EXPECT_DOUBLE_EQ(fl_ratio(pred, gt), 0.25);
  EXPECT_DOUBLE_EQ(fl_ratio(pred, gt, true), 0.5);
  EXPECT_THROW(pck(pred, gt, -1), std::invalid_argument);
}

TEST(Metrics, DimensionMismatch) {
  EXPECT_THROW(aepe(filled(2, 2, 0, 0), filled(2, 3, 0, 0)), std::invalid_argument);
}

TEST(Flo, OneByOneIsTwentyBytes) {
  const auto b = encode_flo(filled(1, 1, 1.5f, -2));
  ASSERT_EQ(b.size(), 20u);
  EXPECT_EQ(std::string(b.begin(), b.begin() + 4), "PIEH");
  EXPECT_EQ(b[4], 1);
  EXPECT_EQ(b[8], 1);
}

TEST(Flo, FileRoundTripIsByteExact) {
  FlowField f(5, 3);
  std::mt19937_64 rng(1);
  std::normal_distribution<float> n(0, 20);
  for (std::size_t y = 0; y < 3; ++y)
    for (std::size_t x = 0; x < 5; ++x) f.set(x, y, n(rng), n(rng), (x + y) % 3 != 0);
  const fs::path p = scratch("rt.flo");
  write_flo(f, p.string());
  const auto bytes = read_bytes(p.string());
  const FlowField g = read_flo(p.string());
  EXPECT_EQ(f, g);
  write_flo(g, p.string());
  EXPECT_EQ(read_bytes(p.string()), bytes);
}

TEST(Flo, Errors) {
  auto b = encode_flo(filled(2, 2, 0, 0));
  auto bad = b;
  bad[0] ^= 1;
  EXPECT_THROW(decode_flo(bad, "x"), BadMagicError);
  EXPECT_THROW(decode_flo({b.begin(), b.end() - 1}, "x"), TruncatedFileError);
  EXPECT_THROW(decode_flo({b.begin(), b.begin() + 6}, "x"), TruncatedFileError);
  EXPECT_THROW(read_flo(scratch("missing.flo").string()), std::runtime_error);
}

TEST(Image, PpmHeaderExample) {
  Image img(2, 1, 3);
  img.data = {1, 0, 0, 0, 0.5f, 1};
  const fs::path p = scratch("a.ppm");
  write_image(img, p.string());
  const auto b = read_bytes(p.string());
  const std::string header = "P6\n2 1\n255\n";
  ASSERT_EQ(b.size(), header.size() + 6);
  EXPECT_EQ(std::string(b.begin(), b.begin() + std::ptrdiff_t(header.size())), header);
  EXPECT_EQ(b[header.size() + 4], 128);
}

TEST(Image, RoundTripIsByteExact) {
  Image img(7, 5, 3);
  std::mt19937_64 rng(2);
  for (float& v : img.data) v = float(rng() % 256) / 255.f;
  const fs::path p = scratch("b.ppm");
  write_image(img, p.string());
  const auto bytes = read_bytes(p.string());
  const Image back = read_image(p.string());
  EXPECT_EQ(back.data, img.data);
  write_image(back, p.string());
  EXPECT_EQ(read_bytes(p.string()), bytes);
}

TEST(Image, GrayscaleAndComments) {
  const fs::path p = scratch("g.pgm");
  const std::string s = "P5\n# made by hand\n2 2\n255\n";
  std::vector<std::uint8_t> b(s.begin(), s.end());
  for (std::uint8_t v : {0, 51, 102, 255}) b.push_back(v);
  write_bytes(p.string(), b);
  const Image g = read_image(p.string());
  EXPECT_EQ(g.channels, 1u);
  EXPECT_FLOAT_EQ(g.data[1], 0.2f);
  const Image rgb = to_rgb(g);
  EXPECT_EQ(rgb.channels, 3u);
  EXPECT_EQ(rgb.data[3], rgb.data[5]);
}

TEST(Image, Errors) {
  const fs::path p = scratch("bad.ppm");
  auto put = [&](const std::string& s) { write_bytes(p.string(), {s.begin(), s.end()}); };
  put("P3\n1 1\n255\n0 0 0");
  EXPECT_THROW(read_image(p.string()), BadMagicError);
  put("P6\n1 1\n65535\n");
  EXPECT_THROW(read_image(p.string()), FormatError);
  put("P6\n2 2\n255\nabc");
  EXPECT_THROW(read_image(p.string()), TruncatedFileError);
  put("P6\n2");
  EXPECT_THROW(read_image(p.string()), TruncatedFileError);
}

TEST(Correspondences, RoundTrip) {
  const std::vector<Correspondence> c{{{1.5, 2}, {3.25, 4}, 0.5}, {{10, 20}, {30, 40}, 0}};
  const std::string text = format_correspondences(c);
  EXPECT_EQ(text, "1.5 2 3.25 4 0.5\n10 20 30 40 0\n");
  const auto back = parse_correspondences(text);
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[0].target, (Vec2{3.25, 4}));
  EXPECT_EQ(format_correspondences(back), text);
}

TEST(Correspondences, CommentsAndBlankLines) {
  const auto c = parse_correspondences("# header\n\n1 2 3 4 5  # trailing\n   \n");
  ASSERT_EQ(c.size(), 1u);
  EXPECT_EQ(c[0].cycle_error, 5);
}

TEST(Correspondences, ErrorsNameTheLine) {
  auto message = [](const std::string& text) {
    try {
      parse_correspondences(text);
    } catch (const FormatError& e) {
      return std::string(e.what());
    }
    return std::string();
  };
  EXPECT_NE(message("1 2 3 4 5\n1 2 3\n").find("line 2"), std::string::npos);
  EXPECT_NE(message("1 2 3 4 5\n\n1 2 x 4 5\n").find("line 3"), std::string::npos);
  EXPECT_NE(message("1 2 3 4 5 6\n").find("line 1"), std::string::npos);
}

}  // namespace
}  // namespace cotr
