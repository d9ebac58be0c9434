#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <random>

#include "protoxplain/dataio.hpp"
#include "protoxplain/synthgen.hpp"

namespace protoxplain {
namespace {

namespace fs = std::filesystem;

class TempDir {
 public:
  explicit TempDir(const std::string& name) : path_(fs::temp_directory_path() / name) {
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
};

void write_text(const fs::path& p, const std::string& text) {
  fs::create_directories(p.parent_path());
  std::ofstream(p) << text;
}

/// Tiny dataset: `n` samples per class, 8x8 gray images, square masks.
void write_dataset(const fs::path& root, const std::vector<std::string>& classes, std::size_t n) {
  std::string index = "sample_id,label,image,mask\n";
  for (const auto& c : classes) {
    for (std::size_t i = 0; i < n; ++i) {
      const auto id = c + "_" + std::to_string(i);
      Grid img = Grid::Zero(8, 8);
      img(1, 1) = 0.2;
      img(i % 8, 2) = 1.0;
      Grid mask = Grid::Zero(8, 8);
      mask.block(2, 2, 3, 3) = 1.0;
      write_gray_png((root / "images" / (id + ".png")).string(), img);
      write_gray_png((root / "masks" / (id + ".png")).string(), mask);
      index += id + "," + c + ",images/" + id + ".png,masks/" + id + ".png\n";
    }
  }
  write_text(root / "index.csv", index);
}

TEST(RasterizeBoxes, HandExamples) {
  EXPECT_EQ(rasterize_boxes({}, 4, 4).mask.sum(), 0.0);
  const auto one = rasterize_boxes({{0, 0, 2, 2}}, 4, 4).mask;
  EXPECT_EQ(one.sum(), 4.0);
  EXPECT_EQ(one.block(0, 0, 2, 2).sum(), 4.0);
  EXPECT_EQ(rasterize_boxes({{0, 0, 2, 2}, {1, 1, 3, 3}}, 4, 4).mask.sum(), 7.0);
}

TEST(RasterizeBoxes, DegenerateBoxIsSkippedWithWarning) {
  const auto r = rasterize_boxes({{2, 2, 2, 5}, {10, 10, 12, 12}, {0, 0, 1, 1}}, 4, 4);
  EXPECT_EQ(r.warnings.size(), 2u);
  EXPECT_EQ(r.mask.sum(), 1.0);
}

TEST(RasterizeBoxes, MatchesPointInBoxOracle) {
  std::mt19937_64 rng(42);
  for (int trial = 0; trial < 300; ++trial) {
    const long h = std::uniform_int_distribution<long>(1, 32)(rng);
    const long w = std::uniform_int_distribution<long>(1, 32)(rng);
    std::uniform_int_distribution<long> coord(-4, 36);
    std::vector<BoundingBox> boxes(std::uniform_int_distribution<std::size_t>(0, 6)(rng));
    for (auto& b : boxes) b = {coord(rng), coord(rng), coord(rng), coord(rng)};
    const auto mask = rasterize_boxes(boxes, static_cast<std::size_t>(h), static_cast<std::size_t>(w)).mask;
    for (long y = 0; y < h; ++y) {
      for (long x = 0; x < w; ++x) {
        bool inside = false;
        for (const auto& b : boxes) inside |= x >= b.x_min && x < b.x_max && y >= b.y_min && y < b.y_max;
        ASSERT_EQ(mask(y, x), inside ? 1.0 : 0.0) << "trial " << trial << " at " << y << "," << x;
      }
    }
  }
}

TEST(StackChannels, MinMaxPerChannel) {
  Grid a(1, 3);
  a << 0, 5, 10;
  const Grid constant = Grid::Constant(1, 3, 7.0);
  const auto t = stack_channels({a, constant, a}, 3);
  EXPECT_DOUBLE_EQ(t.at(0, 0, 0), 0.0);
  EXPECT_DOUBLE_EQ(t.at(0, 0, 1), 0.5);
  EXPECT_DOUBLE_EQ(t.at(0, 0, 2), 1.0);
  EXPECT_EQ(t.channel(1).sum(), 0.0);
  EXPECT_TRUE((t.channel(0) == t.channel(2)).all());
}

TEST(StackChannels, IdempotentAndOrderPreserving) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(-3.0, 9.0);
  std::vector<Grid> planes;
  for (int c = 0; c < 3; ++c) {
    Grid g(5, 6);
    for (long i = 0; i < g.size(); ++i) g.data()[i] = u(rng) * (c + 1);
    planes.push_back(g);
  }
  const auto once = stack_channels(planes, 3);
  const auto twice = stack_channels({once.channel(0), once.channel(1), once.channel(2)}, 3);
  for (std::size_t k = 0; k < once.size(); ++k) EXPECT_NEAR(once.data[k], twice.data[k], 1e-12);
  const auto reordered = stack_channels({planes[2], planes[0], planes[1]}, 3);
  EXPECT_TRUE((reordered.channel(0) == once.channel(2)).all());
}

TEST(StackChannels, RejectsMismatches) {
  EXPECT_THROW(stack_channels({Grid::Zero(2, 2), Grid::Zero(2, 3)}, 2), ContractError);
  EXPECT_THROW(stack_channels({Grid::Zero(2, 2)}, 3), ContractError);
}

TEST(LoadIndex, ThreeClassesOfTen) {
  TempDir dir("protoxplain_index_ok");
  write_dataset(dir.path(), {"a", "b", "c"}, 10);
  const auto idx = load_index(dir.path());
  EXPECT_EQ(idx.class_catalog, (std::vector<std::string>{"a", "b", "c"}));
  EXPECT_EQ(idx.entries.size(), 30u);
  EXPECT_EQ(idx.entries.front().sample_id, "a_0");
  EXPECT_TRUE(idx == load_index(dir.path()));

  const auto ds = load_dataset(dir.path(), 3);
  EXPECT_TRUE(ds.warnings.empty());
  ASSERT_EQ(ds.samples.size(), 30u);
  const auto& s = *ds.samples[0];
  EXPECT_EQ(s.image.channels, 3u);
  EXPECT_TRUE((s.image.channel(0) == s.image.channel(2)).all());
  EXPECT_EQ(s.roi_mask.sum(), 9.0);
  EXPECT_DOUBLE_EQ(s.image.channel(0).maxCoeff(), 1.0);
}

TEST(LoadIndex, MissingMaskNamesSample) {
  TempDir dir("protoxplain_index_missing");
  write_dataset(dir.path(), {"a", "b"}, 3);
  fs::remove(dir.path() / "masks" / "b_1.png");
  try {
    load_index(dir.path());
    FAIL();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("b_1"), std::string::npos) << e.what();
  }
}

TEST(LoadIndex, DuplicateIdsAndUnknownLabels) {
  TempDir dir("protoxplain_index_bad");
  write_dataset(dir.path(), {"a"}, 2);
  std::ifstream in(dir.path() / "index.csv");
  std::string text((std::istreambuf_iterator<char>(in)), {});
  in.close();
  write_text(dir.path() / "index.csv", text + "a_0,a,images/a_0.png,masks/a_0.png\n");
  EXPECT_THROW(load_index(dir.path()), DataError);

  write_text(dir.path() / "index.csv", text);
  write_text(dir.path() / "classes.txt", "a\n");
  EXPECT_NO_THROW(load_index(dir.path()));
  write_text(dir.path() / "index.csv", text + "z_0,zebra,images/a_0.png,masks/a_0.png\n");
  try {
    load_index(dir.path());
    FAIL();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("zebra"), std::string::npos);
  }
  write_text(dir.path() / "index.csv", "id,label,image,mask\n");
  EXPECT_THROW(load_index(dir.path()), DataError);
}

TEST(LoadIndex, BoxesBecomeMasks) {
  TempDir dir("protoxplain_index_boxes");
  write_dataset(dir.path(), {"a"}, 2);
  write_text(dir.path() / "index.csv",
             "sample_id,label,image,mask\na_0,a,images/a_0.png,\na_1,a,images/a_1.png,masks/a_1.png\n");
  write_text(dir.path() / "boxes.csv", "sample_id,x_min,y_min,x_max,y_max\na_0,0,0,2,2\na_0,1,1,3,3\na_0,5,5,5,9\n");
  const auto ds = load_dataset(dir.path(), 1);
  EXPECT_EQ(ds.samples[0]->roi_mask.sum(), 7.0);
  EXPECT_EQ(ds.warnings.size(), 1u);
}

TEST(LoadIndex, EmptyMasksNeedOptIn) {
  TempDir dir("protoxplain_index_empty");
  write_dataset(dir.path(), {"a"}, 2);
  write_text(dir.path() / "index.csv", "sample_id,label,image,mask\na_0,a,images/a_0.png,\n");
  EXPECT_THROW(load_index(dir.path()), DataError);
  write_text(dir.path() / "dataset.cfg", "allow_empty_masks=1\n");
  const auto ds = load_dataset(dir.path(), 1);
  EXPECT_FALSE(ds.samples[0]->has_mask());
}

TEST(LoadIndex, StackedSequences) {
  TempDir dir("protoxplain_index_stack");
  Grid t1 = Grid::Zero(4, 4);
  t1(0, 0) = 1.0;
  Grid t2 = Grid::Zero(4, 4);
  t2(3, 3) = 1.0;
  write_gray_png((dir.path() / "t1.png").string(), t1);
  write_gray_png((dir.path() / "t2.png").string(), t2);
  write_gray_png((dir.path() / "m.png").string(), t1);
  write_text(dir.path() / "index.csv", "sample_id,label,image,mask\ns,a,t1.png;t2.png,m.png\n");
  const auto ds = load_dataset(dir.path(), 2);
  EXPECT_EQ(ds.samples[0]->image.at(0, 0, 0), 1.0);
  EXPECT_EQ(ds.samples[0]->image.at(1, 3, 3), 1.0);
  EXPECT_EQ(ds.samples[0]->image.at(1, 0, 0), 0.0);
  EXPECT_THROW(load_dataset(dir.path(), 3), DataError);
}

TEST(LoadIndex, SyntheticRoundTripHasNoWarnings) {
  TempDir dir("protoxplain_index_synth");
  SynthConfig cfg;
  cfg.samples_per_class = 4;
  const auto out = generate(cfg, dir.path());
  const auto ds = load_dataset(dir.path() / "train", 3);
  EXPECT_TRUE(ds.warnings.empty());
  EXPECT_EQ(ds.samples.size(), 12u);
  EXPECT_EQ(ds.index.source, SampleSource::synthetic);
  EXPECT_TRUE(out.train == ds.index);
}

}  // namespace
}  // namespace protoxplain
