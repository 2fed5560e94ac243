#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include "contextflow/core/error.hpp"
#include "contextflow/data/datasets.hpp"
#include "doctest.h"
#include "testutil.hpp"

using namespace contextflow;

namespace {

std::string tmp_path(const std::string& name) {
  static const std::filesystem::path dir = [] {
    auto d = std::filesystem::temp_directory_path() / "cfx_dataset_tests";
    std::filesystem::create_directories(d);
    return d;
  }();
  return (dir / name).string();
}

void write_bytes(const std::string& path, const std::vector<unsigned char>& bytes) {
  std::ofstream f(path, std::ios::binary);
  f.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  f.write(text.data(), std::streamsize(text.size()));
}

// data column 0 = row id, so shuffled splits stay traceable
Dataset id_dataset(std::size_t n) {
  Dataset ds;
  ds.data = NdArray({n, 2});
  ds.contexts = NdArray({n, 0});
  ds.labels.resize(n);
  ds.has_labels = true;
  for (std::size_t i = 0; i < n; ++i) {
    ds.data.data()[i * 2] = double(i);
    ds.data.data()[i * 2 + 1] = double(i) * 0.5;
    ds.labels[i] = i % 3;
  }
  return ds;
}

std::set<std::size_t> id_set(const Dataset& ds) {
  std::set<std::size_t> out;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    out.insert(std::size_t(ds.data.data()[i * 2]));
  }
  return out;
}

}  // namespace

TEST_CASE("datasets: idx files round trip, gz included") {
  NdArray imgs({3, 1, 4, 4});
  Rng rng(3);
  for (std::size_t i = 0; i < imgs.numel(); ++i) {
    imgs.data()[i] = double(rng.uniform_int(256));
  }
  const std::string plain = tmp_path("imgs.idx");
  save_idx(plain, imgs);
  NdArray back = load_idx(plain);
  REQUIRE(back.shape() == imgs.shape());
  CHECK(testutil::max_abs_diff(back, imgs) == 0.0);

  // rank-3 saves as images and comes back with the channel axis
  NdArray flat({2, 3, 3});
  for (std::size_t i = 0; i < flat.numel(); ++i) flat.data()[i] = double(i * 7 % 256);
  const std::string r3 = tmp_path("imgs3.idx");
  save_idx(r3, flat);
  NdArray back3 = load_idx(r3);
  REQUIRE(back3.shape() == Shape{2, 1, 3, 3});
  for (std::size_t i = 0; i < flat.numel(); ++i) CHECK(back3.data()[i] == flat.data()[i]);

  // labels
  NdArray labels({5}, {0.0, 1.0, 9.0, 3.0, 2.0});
  const std::string lp = tmp_path("labels.idx");
  save_idx(lp, labels);
  NdArray lback = load_idx(lp);
  REQUIRE(lback.shape() == Shape{5});
  CHECK(testutil::max_abs_diff(lback, labels) == 0.0);

  // gz path round trip
  const std::string gz = tmp_path("imgs.idx.gz");
  save_idx(gz, imgs);
  NdArray gback = load_idx(gz);
  CHECK(testutil::max_abs_diff(gback, imgs) == 0.0);

  // byte conversion rounds and clamps
  NdArray messy({3}, {3.7, 300.0, -2.0});
  const std::string mp = tmp_path("messy.idx");
  save_idx(mp, messy);
  NdArray mback = load_idx(mp);
  CHECK(mback.data()[0] == 4.0);
  CHECK(mback.data()[1] == 255.0);
  CHECK(mback.data()[2] == 0.0);

  NdArray bad({2, 2});  // rank 2 is neither labels nor images
  CHECK_THROWS_AS(save_idx(tmp_path("bad.idx"), bad), DataError);
}

TEST_CASE("datasets: idx rejects malformed files") {
  const std::string bad_magic = tmp_path("bad_magic.idx");
  write_bytes(bad_magic, {'h', 'e', 'l', 'l', 'o', '!'});
  CHECK_THROWS_WITH_AS(load_idx(bad_magic), doctest::Contains("at offset 0"), DataError);

  const std::string tiny = tmp_path("tiny.idx");
  write_bytes(tiny, {0, 0});
  CHECK_THROWS_WITH_AS(load_idx(tiny), doctest::Contains("truncated"), DataError);

  // a valid image header that promises more payload than the file holds
  std::vector<unsigned char>hdr;
  auto push32 = [&](std::uint32_t v) {
    hdr.push_back((v >> 24) & 0xff);
    hdr.push_back((v >> 16) & 0xff);
    hdr.push_back((v >> 8) & 0xff);
    hdr.push_back(v & 0xff);
  };
  push32(2051);
  push32(2);
  push32(4);
  push32(4);
  hdr.push_back(1);  // 1 byte instead of 32
  const std::string trunc = tmp_path("trunc.idx");
  write_bytes(trunc, hdr);
  CHECK_THROWS_WITH_AS(load_idx(trunc), doctest::Contains("truncated"), DataError);

  CHECK_THROWS_AS(load_idx(tmp_path("does_not_exist.idx")), DataError);
}

TEST_CASE("datasets: csv quoting round trips") {
  Csv csv;
  csv.header = {"name", "value", "note"};
  csv.rows = {
      {"plain", "1.5", "ok"},
      {"comma,inside", "2", "a\"quote\""},
      {"line\nbreak", "3", ""},
  };
  const std::string p = tmp_path("table.csv");
  save_csv(p, csv);
  Csv back = load_csv(p);
  REQUIRE(back.header == csv.header);
  REQUIRE(back.rows.size() == 3);
  CHECK(back.rows[1][0] == "comma,inside");
  CHECK(back.rows[1][2] == "a\"quote\"");
  CHECK(back.rows[2][0] == "line\nbreak");
  CHECK(back.col("value") == 1);
  CHECK_THROWS_WITH_AS(back.col("missing"), doctest::Contains("no column 'missing'"), DataError);

  // hand-written CRLF file with doubled quotes
  const std::string crlf = tmp_path("crlf.csv");
  write_text(crlf, "a,b\r\n\"he said \"\"hi\"\"\",2\r\n");
  Csv win = load_csv(crlf);
  REQUIRE(win.rows.size() == 1);
  CHECK(win.rows[0][0] == "he said \"hi\"");
  CHECK(win.rows[0][1] == "2");

  // trailing newline optional
  const std::string noeol = tmp_path("noeol.csv");
  write_text(noeol, "a,b\n1,2");
  CHECK(load_csv(noeol).rows.size() == 1);

  const std::string unterm = tmp_path("unterm.csv");
  write_text(unterm, "a,b\n\"oops,2\n");
  CHECK_THROWS_WITH_AS(load_csv(unterm), doctest::Contains("unterminated"), DataError);

  const std::string ragged = tmp_path("ragged.csv");
  write_text(ragged, "a,b\n1,2,3\n");
  CHECK_THROWS_WITH_AS(load_csv(ragged), doctest::Contains("header has 2"), DataError);

  const std::string empty = tmp_path("empty.csv");
  write_text(empty, "");
  CHECK_THROWS_WITH_AS(load_csv(empty), doctest::Contains("empty csv"), DataError);

  Csv bad_save;
  bad_save.header = {"a", "b"};
  bad_save.rows = {{"1"}};
  CHECK_THROWS_AS(save_csv(tmp_path("badsave.csv"), bad_save), DataError);

  // gz round trip
  const std::string gzp = tmp_path("table.csv.gz");
  save_csv(gzp, csv);
  CHECK(load_csv(gzp).rows[1][0] == "comma,inside");
}

TEST_CASE("datasets: split carves 80/10/10 without losing a row") {
  Dataset ds = id_dataset(100);
  DatasetSplits sp = split_dataset(ds, 7);
  CHECK(sp.train.size() == 80);
  CHECK(sp.val.size() == 10);
  CHECK(sp.test.size() == 10);
  CHECK(sp.train.split == Split::kTrain);
  CHECK(sp.val.split == Split::kVal);
  CHECK(sp.test.split == Split::kTest);

  std::set<std::size_t> seen = id_set(sp.train);
  for (std::size_t id : id_set(sp.val)) CHECK(seen.insert(id).second);
  for (std::size_t id : id_set(sp.test)) CHECK(seen.insert(id).second);
  CHECK(seen.size() == 100);

  // labels ride along with their rows
  for (std::size_t i = 0; i < sp.val.size(); ++i) {
    const std::size_t id = std::size_t(sp.val.data.data()[i * 2]);
    CHECK(sp.val.labels[i] == id % 3);
  }

  // deterministic in the seed, different across seeds
  DatasetSplits sp2 = split_dataset(ds, 7);
  CHECK(id_set(sp2.val) == id_set(sp.val));
  DatasetSplits sp3 = split_dataset(ds, 8);
  CHECK(id_set(sp3.val) != id_set(sp.val));

  Dataset two = id_dataset(2);
  CHECK_THROWS_AS(split_dataset(two, 1), DataError);
}

TEST_CASE("datasets: k-fold covers every row exactly once") {
  Dataset ds = id_dataset(10);
  std::set<std::size_t> seen;
  for (std::size_t fold = 0; fold < 4; ++fold) {
    FoldPair fp = kfold_split(ds, 4, fold, 3);
    CHECK(fp.train.size() + fp.test.size() == 10);
    // fold f holds rows [f*n/k, (f+1)*n/k) of the shuffle
    const std::size_t want = (fold + 1) * 10 / 4 - fold * 10 / 4;
    CHECK(fp.test.size() == want);
    for (std::size_t id : id_set(fp.test)) CHECK(seen.insert(id).second);
    // train and test never share a row
    std::set<std::size_t> train_ids = id_set(fp.train);
    for (std::size_t id : id_set(fp.test)) CHECK(train_ids.count(id) == 0);
  }
  CHECK(seen.size() == 10);

  CHECK_THROWS_AS(kfold_split(ds, 1, 0, 3), DataError);
  CHECK_THROWS_AS(kfold_split(ds, 11, 0, 3), DataError);
  CHECK_THROWS_WITH_AS(kfold_split(ds, 4, 4, 3), doctest::Contains("fold index"), DataError);
}

TEST_CASE("datasets: rotation is exact on the grid") {
  NdArray img({3, 3}, {1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0});

  NdArray still = rotate_image(img, 3, 3, 0.0);
  CHECK(testutil::max_abs_diff(still, img) == 0.0);

  // quarter turn about the center: out[y][x] picks up img[2-x][y]
  NdArray quarter = rotate_image(img, 3, 3, 90.0);
  for (std::size_t y = 0; y < 3; ++y) {
    for (std::size_t x = 0; x < 3; ++x) {
      CHECK(std::abs(quarter.data()[y * 3 + x] - img.data()[(2 - x) * 3 + y]) < 1e-9);
    }
  }

  // the center of an odd grid is a fixed point, and bilinear output is convex
  NdArray blob({5, 5});
  blob.data()[12] = 8.0;  // center pixel
  NdArray turned = rotate_image(blob, 5, 5, 33.0);
  CHECK(turned.data()[12] == 8.0);
  for (std::size_t i = 0; i < 25; ++i) {
    CHECK(turned.data()[i] >= 0.0);
    CHECK(turned.data()[i] <= 8.0);
  }

  CHECK_THROWS_AS(rotate_image(img, 2, 3, 10.0), DataError);
}

TEST_CASE("datasets: rotate_context builds an aligned benchmark") {
  Rng rng(5);
  NdArray imgs = NdArray::normal({6, 1, 5, 5}, rng, 40.0);
  Rng crng(9);
  Dataset ds = rotate_context(imgs, 8, crng);
  CHECK(ds.data.shape() == imgs.shape());
  REQUIRE(ds.contexts.shape() == Shape{6, 1});
  REQUIRE(ds.context_spec.vars.size() == 1);
  CHECK(ds.context_spec.vars[0].name == "rotation");
  CHECK(ds.context_spec.vars[0].cardinality == 8);
  CHECK_FALSE(ds.has_labels);
  ds.validate();
  for (std::size_t i = 0; i < 6; ++i) {
    const double c = ds.contexts.data()[i];
    CHECK(c == std::floor(c));
    CHECK(c >= 0.0);
    CHECK(c < 8.0);
  }

  // a single context level means a 0-degree turn: the data is untouched
  Rng crng1(9);
  Dataset one = rotate_context(imgs, 1, crng1);
  CHECK(testutil::max_abs_diff(one.data, imgs) == 0.0);

  NdArray rect({2, 1, 3, 4});
  Rng crng2(9);
  CHECK_THROWS_AS(rotate_context(rect, 4, crng2), DataError);
  CHECK_THROWS_AS(rotate_context(imgs, 0, crng2), DataError);
}

TEST_CASE("datasets: corruption magnitude grows with severity") {
  Rng r0(1);
  CHECK_THROWS_WITH_AS(apply_corruption(NdArray({1, 4, 4}), 0, 1, r0),
                       doctest::Contains("type"), DataError);
  CHECK_THROWS_AS(apply_corruption(NdArray({1, 4, 4}), 16, 1, r0), DataError);
  CHECK_THROWS_WITH_AS(apply_corruption(NdArray({1, 4, 4}), 1, 0, r0),
                       doctest::Contains("severity"), DataError);
  CHECK_THROWS_AS(apply_corruption(NdArray({1, 4, 4}), 1, 6, r0), DataError);

  // checkerboard batch: structure for the blur+contrast families to chew on
  NdArray base({4, 1, 6, 6});
  for (std::size_t i = 0; i < 4; ++i) {
    for (std::size_t y = 0; y < 6; ++y) {
      for (std::size_t x = 0; x < 6; ++x) {
        base.data()[(i * 6 + y) * 6 + x] = ((x + y) % 2) ? 255.0 : 0.0;
      }
    }
  }
  for (std::size_t type : {1, 2, 3}) {
    double prev = -1.0;
    for (std::size_t sev = 1; sev <= 5; ++sev) {
      Rng rng(42);  // same noise stream for every severity level
      NdArray hit = apply_corruption(base, type, sev, rng);
      double diff = 0.0;
      for (std::size_t i = 0; i < base.numel(); ++i) {
        diff += std::abs(hit.data()[i] - base.data()[i]);
        CHECK(hit.data()[i] >= 0.0);
        CHECK(hit.data()[i] <= 255.0);
        CHECK(hit.data()[i] == std::floor(hit.data()[i]));
      }
      diff /= double(base.numel());
      CHECK(diff > prev);
      prev = diff;
    }
  }

  Rng crng(11);
  Dataset ds = corrupt_context(base, 5, 3, crng);
  REQUIRE(ds.contexts.shape() == Shape{4, 2});
  REQUIRE(ds.context_spec.vars.size() == 2);
  CHECK(ds.context_spec.vars[0].name == "type");
  CHECK(ds.context_spec.vars[0].cardinality == 6);  // raw values 1..5
  CHECK(ds.context_spec.vars[1].name == "severity");
  CHECK(ds.context_spec.vars[1].cardinality == 4);
  ds.validate();
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(ds.contexts.data()[i * 2] >= 1.0);
    CHECK(ds.contexts.data()[i * 2] <= 5.0);
    CHECK(ds.contexts.data()[i * 2 + 1] >= 1.0);
    CHECK(ds.contexts.data()[i * 2 + 1] <= 3.0);
  }

  Rng crng2(11);
  CHECK_THROWS_AS(corrupt_context(base, 0, 3, crng2), DataError);
  CHECK_THROWS_AS(corrupt_context(base, 16, 3, crng2), DataError);
  CHECK_THROWS_AS(corrupt_context(base, 5, 6, crng2), DataError);
}

TEST_CASE("datasets: sliding windows replicate the left edge") {
  NdArray series({4, 1}, {0.0, 1.0, 2.0, 3.0});
  NdArray win = sliding_windows(series, 3);
  REQUIRE(win.shape() == Shape{4, 3, 1});
  const double want[4][3] = {{0, 0, 0}, {0, 0, 1}, {0, 1, 2}, {1, 2, 3}};
  for (std::size_t t = 0; t < 4; ++t) {
    for (std::size_t j = 0; j < 3; ++j) {
      CHECK(win.data()[t * 3 + j] == want[t][j]);
    }
  }

  // multi-feature rows move together
  NdArray wide({3, 2}, {0.0, 10.0, 1.0, 11.0, 2.0, 12.0});
  NdArray w2 = sliding_windows(wide, 2);
  REQUIRE(w2.shape() == Shape{3, 2, 2});
  CHECK(w2.data()[0] == 0.0);   // t=0, lag: replicated row 0
  CHECK(w2.data()[1] == 10.0);
  CHECK(w2.data()[4] == 0.0);   // t=1 window = rows {0, 1}
  CHECK(w2.data()[7] == 11.0);

  NdArray unit = sliding_windows(series, 1);
  REQUIRE(unit.shape() == Shape{4, 1, 1});
  CHECK(testutil::max_abs_diff(NdArray({4}, {unit.data()[0], unit.data()[1], unit.data()[2],
                                             unit.data()[3]}),
                               NdArray({4}, {0.0, 1.0, 2.0, 3.0})) == 0.0);

  CHECK_THROWS_AS(sliding_windows(NdArray({4}), 2), DataError);
  CHECK_THROWS_AS(sliding_windows(series, 0), DataError);
  CHECK_THROWS_AS(sliding_windows(NdArray({0, 2}), 2), DataError);
}

TEST_CASE("datasets: two moons stay labeled and bounded") {
  Rng rng(31);
  Dataset ds = two_moons_context(2000, 4, rng);
  REQUIRE(ds.data.shape() == Shape{2000, 2});
  REQUIRE(ds.contexts.shape() == Shape{2000, 1});
  REQUIRE(ds.has_labels);
  ds.validate();

  std::size_t zeros = 0;
  for (std::size_t i = 0; i < 2000; ++i) {
    CHECK(ds.labels[i] < 2);
    if (ds.labels[i] == 0) ++zeros;
    CHECK(std::abs(ds.data.data()[i * 2]) < 2.5);
    CHECK(std::abs(ds.data.data()[i * 2 + 1]) < 2.5);
    CHECK(ds.contexts.data()[i] < 4.0);
  }
  CHECK(zeros > 800);
  CHECK(zeros < 1200);

  Rng r1(31);
  Dataset again = two_moons_context(2000, 4, r1);
  CHECK(testutil::max_abs_diff(again.data, ds.data) == 0.0);

  Rng r2(31);
  CHECK_THROWS_AS(two_moons_context(10, 0, r2), DataError);
}

TEST_CASE("datasets: synthetic glyphs quantize to bytes") {
  Rng rng(77);
  Dataset ds = synthetic_digits(40, 8, 12, rng);
  REQUIRE(ds.data.shape() == Shape{40, 1, 12, 12});
  REQUIRE(ds.has_labels);
  ds.validate();
  for (std::size_t i = 0; i < ds.data.numel(); ++i) {
    const double v = ds.data.data()[i];
    CHECK(v == std::floor(v));
    CHECK(v >= 0.0);
    CHECK(v <= 255.0);
  }
  for (std::size_t i = 0; i < 40; ++i) {
    CHECK(ds.labels[i] < 10);
    CHECK(ds.contexts.data()[i] < 8.0);
  }

  Rng r1(77);
  Dataset again = synthetic_digits(40, 8, 12, r1);
  CHECK(testutil::max_abs_diff(again.data, ds.data) == 0.0);

  Rng r2(77);
  CHECK_THROWS_AS(synthetic_digits(10, 0, 12, r2), DataError);
  CHECK_THROWS_AS(synthetic_digits(10, 4, 3, r2), DataError);
}

TEST_CASE("datasets: row selection and validation") {
  Dataset ds = id_dataset(6);
  Dataset sub = select_rows(ds, {3, 1, 3});
  REQUIRE(sub.size() == 3);
  CHECK(sub.data.data()[0] == 3.0);
  CHECK(sub.data.data()[2] == 1.0);
  CHECK(sub.data.data()[4] == 3.0);
  CHECK(sub.labels[0] == 0);  // 3 % 3
  CHECK(sub.labels[1] == 1);
  CHECK_THROWS_AS(select_rows(ds, {6}), DataError);

  Dataset bad = id_dataset(4);
  bad.labels.pop_back();
  CHECK_THROWS_WITH_AS(bad.validate(), doctest::Contains("label count"), DataError);

  Dataset ctx = id_dataset(3);
  ContextVar var;
  var.name = "site";
  var.discrete = true;
  var.cardinality = 2;
  ctx.context_spec.vars = {var};
  ctx.contexts = NdArray({3, 1}, {0.0, 1.0, 2.0});  // 2 is out of range
  CHECK_THROWS_WITH_AS(ctx.validate(), doctest::Contains("'site'"), DataError);
  ctx.contexts.data()[2] = 1.0;
  CHECK_NOTHROW(ctx.validate());
  ctx.contexts = NdArray({2, 1});
  CHECK_THROWS_AS(ctx.validate(), DataError);
}
