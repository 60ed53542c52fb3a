#include <gtest/gtest.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <random>
#include <sstream>

#include "dtopo/dataset.hpp"
#include "dtopo/npy.hpp"
#include "test_support.hpp"

namespace {

using namespace dtopo;

// Writes a container with a hand-built header, independent of npy::write.
void write_raw(const std::filesystem::path& path, const std::string& descr, bool fortran, const std::string& shape,
               const std::vector<unsigned char>& payload, unsigned char major = 1) {
  std::string dict = "{'descr': '" + descr + "', 'fortran_order': " + (fortran ? "True" : "False") +
                     ", 'shape': " + shape + ", }";
  while ((10 + dict.size() + 1) % 64 != 0) dict += ' ';
  dict += '\n';
  std::ofstream out(path, std::ios::binary);
  out.write("\x93NUMPY", 6);
  const unsigned char pre[4] = {major, 0, static_cast<unsigned char>(dict.size() & 0xff),
                                static_cast<unsigned char>(dict.size() >> 8)};
  out.write(reinterpret_cast<const char*>(pre), 4);
  out << dict;
  out.write(reinterpret_cast<const char*>(payload.data()), static_cast<std::streamsize>(payload.size()));
}

template <class T>
std::vector<unsigned char> encode(const std::vector<T>& values, bool big_endian) {
  std::vector<unsigned char> out(values.size() * sizeof(T));
  for (std::size_t i = 0; i < values.size(); ++i) {
    unsigned char b[sizeof(T)];
    std::memcpy(b, &values[i], sizeof(T));
    if (big_endian == (std::endian::native == std::endian::little)) std::reverse(b, b + sizeof(T));
    std::memcpy(out.data() + i * sizeof(T), b, sizeof(T));
  }
  return out;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

class DatasetIo : public ::testing::Test {
 protected:
  void SetUp() override { dir = synth::scratch_dir(::testing::UnitTest::GetInstance()->current_test_info()->name()); }
  std::filesystem::path dir;
};

TEST_F(DatasetIo, LoadsShapeAndPayload) {
  write_raw(dir / "x.npy", "<f8", false, "(3, 2)", encode<double>({0, 0, 1, 0, 0, 1}, false));
  const ActivationMatrix x = load_activation_matrix(dir / "x.npy");
  EXPECT_EQ(x.n_points(), 3u);
  EXPECT_EQ(x.n_features(), 2u);
  EXPECT_EQ(x.layer_id(), "x");
  EXPECT_EQ(x(1, 0), 1.0);
  EXPECT_EQ(x(2, 1), 1.0);
  EXPECT_EQ(x(2, 0), 0.0);
}

TEST_F(DatasetIo, ColumnMajorMatchesRowMajorTwin) {
  const std::size_t rows = 5, cols = 3;
  std::vector<float> row_major(rows * cols);
  std::mt19937 rng(7);
  std::normal_distribution<float> g;
  for (float& v : row_major) v = g(rng);
  std::vector<float> col_major(rows * cols);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) col_major[j * rows + i] = row_major[i * cols + j];

  write_raw(dir / "c.npy", "<f4", false, "(5, 3)", encode(row_major, false));
  write_raw(dir / "f.npy", ">f4", true, "(5, 3)", encode(col_major, true));
  const ActivationMatrix c = load_activation_matrix(dir / "c.npy");
  const ActivationMatrix f = load_activation_matrix(dir / "f.npy");
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < cols; ++j) {
      EXPECT_EQ(c(i, j), static_cast<double>(row_major[i * cols + j]));
      EXPECT_EQ(f(i, j), c(i, j));
    }
  }
}

TEST_F(DatasetIo, RejectsNonFiniteWithFlatIndex) {
  const double nan = std::numeric_limits<double>::quiet_NaN();
  write_raw(dir / "x.npy", "<f8", false, "(2, 2)", encode<double>({0, 1, nan, 3}, false));
  try {
    load_activation_matrix(dir / "x.npy");
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("flat index 2"), std::string::npos) << e.what();
  }
  write_raw(dir / "inf.npy", "<f8", false, "(2, 2)",
            encode<double>({0, 1, 2, std::numeric_limits<double>::infinity()}, false));
  EXPECT_THROW(load_activation_matrix(dir / "inf.npy"), DataError);
}

TEST_F(DatasetIo, RejectsMalformedContainers) {
  EXPECT_THROW(load_activation_matrix(dir / "missing.npy"), DataError);

  std::ofstream(dir / "garbage.npy") << "not a numpy file at all";
  EXPECT_THROW(load_activation_matrix(dir / "garbage.npy"), DataError);

  write_raw(dir / "v2.npy", "<f8", false, "(2, 1)", encode<double>({0, 1}, false), 2);
  EXPECT_THROW(load_activation_matrix(dir / "v2.npy"), DataError);

  write_raw(dir / "c16.npy", "<c16", false, "(1, 1)", std::vector<unsigned char>(16, 0));
  EXPECT_THROW(load_activation_matrix(dir / "c16.npy"), DataError);

  write_raw(dir / "rank1.npy", "<f8", false, "(3,)", encode<double>({0, 1, 2}, false));
  EXPECT_THROW(load_activation_matrix(dir / "rank1.npy"), DataError);

  write_raw(dir / "ints.npy", "<i8", false, "(2, 2)", encode<std::int64_t>({0, 1, 2, 3}, false));
  EXPECT_THROW(load_activation_matrix(dir / "ints.npy"), DataError);

  write_raw(dir / "short.npy", "<f8", false, "(3, 2)", encode<double>({0, 1, 2}, false));
  EXPECT_THROW(load_activation_matrix(dir / "short.npy"), DataError);

  write_raw(dir / "single.npy", "<f8", false, "(1, 2)", encode<double>({0, 1}, false));
  EXPECT_THROW(load_activation_matrix(dir / "single.npy"), DataError);
}

TEST_F(DatasetIo, LoadsLabels) {
  write_raw(dir / "a.npy", "<i8", false, "(3,)", encode<std::int64_t>({0, 0, 1}, false));
  const LabelSet a = load_labels(dir / "a.npy");
  EXPECT_EQ(a.size(), 3u);
  EXPECT_EQ(a.n_classes(), 2u);

  write_raw(dir / "b.npy", ">i4", false, "(3,)", encode<std::int32_t>({5, 5, 5}, true));
  EXPECT_EQ(load_labels(dir / "b.npy").n_classes(), 1u);

  write_raw(dir / "neg.npy", "<i8", false, "(3,)", encode<std::int64_t>({0, -1, 1}, false));
  EXPECT_THROW(load_labels(dir / "neg.npy"), DataError);

  write_raw(dir / "float.npy", "<f8", false, "(2,)", encode<double>({0, 1}, false));
  EXPECT_THROW(load_labels(dir / "float.npy"), DataError);
}

TEST_F(DatasetIo, LabelLengthMismatchReportedAtPairing) {
  const ActivationMatrix x("l", 3, 1, {0, 1, 2});
  EXPECT_NO_THROW(require_paired(x, LabelSet({0, 1, 1})));
  EXPECT_THROW(require_paired(x, LabelSet({0, 1})), DataError);
}

// write(load(f)) reproduces f for every supported dtype and byte order.
TEST_F(DatasetIo, RoundTripIsBitExact) {
  std::mt19937_64 rng(11);
  const std::vector<npy::Dtype> dtypes = {
      npy::f4, npy::f8, npy::i4, npy::i8, npy::u1,
      {npy::ElementKind::Float, 4, std::endian::big},     {npy::ElementKind::Float, 8, std::endian::big},
      {npy::ElementKind::SignedInt, 4, std::endian::big}, {npy::ElementKind::SignedInt, 8, std::endian::big}};
  for (int trial = 0; trial < 20; ++trial) {
    for (const npy::Dtype& dt : dtypes) {
      const std::size_t rows = 1 + rng() % 7, cols = 1 + rng() % 5;
      std::vector<double> values(rows * cols);
      const bool is_float = dt.kind == npy::ElementKind::Float;
      const int shift = dt.kind == npy::ElementKind::UnsignedInt ? 0 : 100;
      for (double& v : values) v = static_cast<double>(static_cast<int>(rng() % 200) - shift) / (is_float ? 7.0 : 1.0);
      const auto original = dir / "orig.npy";
      const auto copy = dir / "copy.npy";
      npy::write_values(original, std::span<const double>(values), {rows, cols}, dt);
      const npy::Array loaded = npy::read(original);
      EXPECT_EQ(loaded.dtype, dt);
      npy::write(copy, loaded);
      ASSERT_EQ(slurp(original), slurp(copy)) << dt.descr();
      if (is_float && rows >= 2) {
        // Through the widened double representation and back.
        save_activation_matrix(copy, load_activation_matrix(original), dt);
        ASSERT_EQ(slurp(original), slurp(copy)) << dt.descr();
      }
    }
  }
}

TEST_F(DatasetIo, HeaderIsPaddedTo64Bytes) {
  npy::write_values(dir / "x.npy", std::span<const double>(std::vector<double>{1, 2, 3}), {3}, npy::f8);
  const std::string bytes = slurp(dir / "x.npy");
  const std::size_t header_len = static_cast<unsigned char>(bytes[8]) | (static_cast<unsigned char>(bytes[9]) << 8);
  EXPECT_EQ((10 + header_len) % 64, 0u);
  EXPECT_EQ(bytes[10 + header_len - 1], '\n');
  EXPECT_EQ(bytes.size(), 10 + header_len + 3 * 8);
}

LabelSet balanced_labels(std::size_t classes, std::size_t per_class) {
  std::vector<std::int64_t> y;
  for (std::size_t i = 0; i < classes * per_class; ++i) y.push_back(static_cast<std::int64_t>(i % classes));
  return LabelSet(std::move(y));
}

TEST(StratifiedSubsample, CardinalityAndDeterminism) {
  const LabelSet y = balanced_labels(3, 10);
  const ActivationMatrix x = synth::uniform_cube(30, 2, 1);
  const SampleSpec spec{2, 2, 42};
  const Subsample a = stratified_subsample(x, y, spec);
  EXPECT_EQ(a.x.n_points(), 4u);
  EXPECT_EQ(a.y.n_classes(), 2u);
  EXPECT_TRUE(std::is_sorted(a.index_map.begin(), a.index_map.end()));
  for (std::size_t r = 0; r < a.index_map.size(); ++r) {
    EXPECT_EQ(a.y[r], y[a.index_map[r]]);
    EXPECT_EQ(a.x(r, 0), x(a.index_map[r], 0));
  }
  const Subsample b = stratified_subsample(x, y, spec);
  EXPECT_EQ(a.index_map, b.index_map);
  const Subsample c = stratified_subsample(x, y, SampleSpec{2, 2, 43});
  EXPECT_EQ(c.x.n_points(), 4u);
}

TEST(StratifiedSubsample, FullSizeSelection) {
  const LabelSet y = balanced_labels(1000, 320);
  const auto idx = stratified_indices(y, {300, 300, 2020});
  EXPECT_EQ(idx.size(), 90000u);
  EXPECT_EQ(y.select(idx).n_classes(), 300u);
}

TEST(StratifiedSubsample, ErrorsOnInsufficientData) {
  const LabelSet y({0, 0, 0, 1, 1, 2});
  EXPECT_THROW(stratified_indices(y, {4, 1, 0}), DataError);
  EXPECT_THROW(stratified_indices(y, {3, 2, 0}), DataError);  // class 2 has one member
  EXPECT_NO_THROW(stratified_indices(y, {1, 1, 0}));
}

TEST(StratifiedSubsample, IdempotentOnOwnOutput) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 25; ++trial) {
    std::vector<std::int64_t> raw;
    for (int i = 0; i < 200; ++i) raw.push_back(static_cast<std::int64_t>(rng() % 6));
    const LabelSet y(raw);
    const ActivationMatrix x = synth::uniform_cube(200, 3, trial);
    const SampleSpec spec{3, 10, rng()};
    const Subsample once = stratified_subsample(x, y, spec);
    const Subsample twice = stratified_subsample(once.x, once.y, {once.y.n_classes(), spec.n_per_class, spec.rng_seed});
    ASSERT_EQ(twice.index_map.size(), once.index_map.size());
    for (std::size_t r = 0; r < twice.index_map.size(); ++r) EXPECT_EQ(twice.index_map[r], r);
  }
}

}  // namespace
