#include <doctest.h>

#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "gotcha/error.hpp"
#include "gotcha/gallery.hpp"
#include "gotcha/rng.hpp"
#include "support.hpp"

using namespace gotcha;

namespace {

void write_text(const std::filesystem::path& p, const std::string& text) {
  std::ofstream(p) << text;
}

std::string record_line(const std::string& id, std::vector<int> attrs, std::vector<double> feats) {
  return nlohmann::json{{"id", id}, {"attributes", attrs}, {"features", feats}}.dump() + "\n";
}

std::string read_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

template <typename E>
std::string message_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const E& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST_CASE("ingest preserves file order") {
  test::TempDir dir;
  write_text(dir / "g.jsonl", record_line("c", {1, -1}, {0.5, 1.0}) + record_line("a", {-1, -1}, {2, 3}) +
                                  "\n" + record_line("b", {1, 1}, {-1, 0.25}));
  const auto g = ingest_jsonl(dir / "g.jsonl");
  REQUIRE(g.size() == 3);
  CHECK(g.id(0) == "c");
  CHECK(g.id(1) == "a");
  CHECK(g.id(2) == "b");
  CHECK(g.attr_dim() == 2);
  CHECK(g.feat_dim() == 2);
  CHECK(g.features(2)[1] == 0.25f);
  CHECK(g.find("a") == std::optional<std::size_t>(1));
  CHECK_FALSE(g.find("zz").has_value());
}

TEST_CASE("ingest errors name the line") {
  test::TempDir dir;
  std::string lines;
  for (int i = 1; i <= 6; ++i) lines += record_line("id" + std::to_string(i), {1, -1}, {0.0, 1.0});

  write_text(dir / "zero.jsonl", record_line("x", {1, 0}, {1, 1}));
  const auto zero = message_of<ParseError>([&] { ingest_jsonl(dir / "zero.jsonl"); });
  CHECK(zero.find("attributes must be ±1") != std::string::npos);

  write_text(dir / "dup.jsonl", lines + record_line("id3", {1, 1}, {0, 0}));
  const auto dup = message_of<IntegrityError>([&] { ingest_jsonl(dir / "dup.jsonl"); });
  CHECK(dup.find("line 7") != std::string::npos);

  write_text(dir / "bad.jsonl", lines + "{not json\n");
  CHECK(message_of<ParseError>([&] { ingest_jsonl(dir / "bad.jsonl"); }).find("line 7") !=
        std::string::npos);

  write_text(dir / "shape.jsonl", lines + record_line("z", {1, 1, 1}, {0, 0}));
  CHECK(message_of<ShapeError>([&] { ingest_jsonl(dir / "shape.jsonl"); }).find("line 7") !=
        std::string::npos);

  write_text(dir / "missing.jsonl", R"({"id":"q","attributes":[1]})" "\n");
  CHECK_THROWS_AS(ingest_jsonl(dir / "missing.jsonl"), ParseError);
  CHECK_THROWS_AS(ingest_jsonl(dir / "nope.jsonl"), ParseError);
}

TEST_CASE("ingest optionally normalizes rows") {
  test::TempDir dir;
  write_text(dir / "g.jsonl", record_line("a", {1}, {3, 4}));
  CHECK(ingest_jsonl(dir / "g.jsonl").features(0)[0] == 3.0f);
  const auto n = ingest_jsonl(dir / "g.jsonl", IngestOptions{true});
  CHECK(n.features(0)[0] == doctest::Approx(0.6));
  CHECK(n.features(0)[1] == doctest::Approx(0.8));
}

TEST_CASE("records are validated on insert") {
  Gallery g(2, 1);
  const std::vector<float> f{1.f};
  g.add("a", std::vector<std::int8_t>{1, -1}, f);
  CHECK_THROWS_AS(g.add("a", std::vector<std::int8_t>{1, 1}, f), IntegrityError);
  CHECK_THROWS_AS(g.add("b", std::vector<std::int8_t>{1}, f), ShapeError);
  CHECK_THROWS_AS(g.add("b", std::vector<std::int8_t>{1, 2}, f), ShapeError);
  CHECK_THROWS_AS(g.add("b", std::vector<std::int8_t>{1, 1}, std::vector<float>{NAN}), NumericError);
  CHECK(g.size() == 1);
}

TEST_CASE("packed layout is bit exact") {
  test::TempDir dir;
  Gallery g(3, 2);
  g.add("ab", std::vector<std::int8_t>{1, -1, 1}, std::vector<float>{1.5f, -2.0f});
  save_packed(g, dir / "g.bin");
  const auto bytes = read_bytes(dir / "g.bin");
  REQUIRE(bytes.size() == 4 + 4 + 8 + 4 + 4 + (4 + 2 + 3 + 8));
  CHECK(bytes.substr(0, 4) == "GGAL");
  auto u32 = [&](std::size_t at) {
    std::uint32_t v;
    std::memcpy(&v, bytes.data() + at, 4);
    return v;
  };
  std::uint64_t n;
  std::memcpy(&n, bytes.data() + 8, 8);
  CHECK(u32(4) == 1);
  CHECK(n == 1);
  CHECK(u32(16) == 3);
  CHECK(u32(20) == 2);
  CHECK(u32(24) == 2);
  CHECK(bytes.substr(28, 2) == "ab");
  CHECK(bytes.substr(30, 3) == std::string("\x01\x00\x01", 3));
  float f0;
  std::memcpy(&f0, bytes.data() + 33, 4);
  CHECK(f0 == 1.5f);
}

TEST_CASE("empty gallery packs to a header") {
  test::TempDir dir;
  Gallery g(40, 8);
  save_packed(g, dir / "e.bin");
  CHECK(std::filesystem::file_size(dir / "e.bin") == 24);
  const auto back = load_packed(dir / "e.bin");
  CHECK(back.size() == 0);
  CHECK(back == g);
}

TEST_CASE("packed round trip on random galleries") {
  test::TempDir dir;
  Rng rng(2024);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = rng.index(65);
    const std::size_t a = 1 + rng.index(40);
    const std::size_t f = 1 + rng.index(32);
    Gallery g(a, f);
    std::vector<std::int8_t> attrs(a);
    std::vector<float> feats(f);
    for (std::size_t i = 0; i < n; ++i) {
      for (auto& x : attrs) x = rng.bernoulli(0.5) ? 1 : -1;
      for (auto& x : feats) x = static_cast<float>(rng.normal() * std::pow(10.0, rng.uniform(-30, 30)));
      g.add("id-" + std::to_string(trial) + "-" + std::to_string(i) + (i % 3 ? "é" : ""), attrs, feats);
    }
    const auto path = dir / ("g" + std::to_string(trial) + ".bin");
    save_packed(g, path);
    const auto back = load_packed(path);
    REQUIRE(back == g);
    save_packed(back, dir / "again.bin");
    REQUIRE(read_bytes(path) == read_bytes(dir / "again.bin"));
  }
}

TEST_CASE("JSONL to packed to JSONL keeps every float") {
  test::TempDir dir;
  const auto g = test::random_gallery(50, 7, 9, 77);
  write_jsonl(g, dir / "a.jsonl");
  const auto first = ingest_jsonl(dir / "a.jsonl");
  CHECK(first == g);
  save_packed(first, dir / "a.bin");
  const auto packed = load_gallery(dir / "a.bin");
  write_jsonl(packed, dir / "b.jsonl");
  CHECK(read_bytes(dir / "a.jsonl") == read_bytes(dir / "b.jsonl"));
  CHECK(load_gallery(dir / "b.jsonl") == g);
}

TEST_CASE("corrupt packed files are rejected") {
  test::TempDir dir;
  const auto g = test::random_gallery(5, 4, 3, 1);
  save_packed(g, dir / "g.bin");
  const auto bytes = read_bytes(dir / "g.bin");

  auto write_bytes = [&](const std::string& name, std::string b) {
    std::ofstream(dir / name, std::ios::binary) << b;
    return dir / name;
  };
  std::string bad_magic = bytes;
  bad_magic.replace(0, 4, "XXXX");
  CHECK_THROWS_AS(load_packed(write_bytes("m.bin", bad_magic)), FormatError);
  std::string bad_version = bytes;
  bad_version[4] = 9;
  CHECK_THROWS_AS(load_packed(write_bytes("v.bin", bad_version)), FormatError);
  for (std::size_t cut : {2ul, 10ul, 30ul, bytes.size() - 1}) {
    CHECK_THROWS_AS(load_packed(write_bytes("t.bin", bytes.substr(0, cut))), FormatError);
  }
  std::string bad_attr = bytes;
  bad_attr[24 + 4 + 2] = 7;  // first attribute byte of record "r0"
  CHECK_THROWS_AS(load_packed(write_bytes("a.bin", bad_attr)), FormatError);
}

TEST_CASE("synthetic galleries") {
  const auto a = gen_synthetic(50, 6, 5, 0.1, 3);
  const auto b = gen_synthetic(50, 6, 5, 0.1, 3);
  CHECK(a == b);
  CHECK_FALSE(a == gen_synthetic(50, 6, 5, 0.1, 4));
  for (std::size_t i = 0; i < a.size(); ++i) {
    for (float f : a.features(i)) {
      CHECK(f > -1.0f);
      CHECK(f < 1.0f);
    }
  }
  CHECK_THROWS_AS(gen_synthetic(0, 6, 5, 0.1, 3), ConfigError);
  CHECK_THROWS_AS(gen_synthetic(5, 0, 5, 0.1, 3), ConfigError);
  CHECK_THROWS_AS(gen_synthetic(5, 6, 5, -1.0, 3), ConfigError);
}

TEST_CASE("noise-free synthetic features are a function of the attributes") {
  // Two attributes: only 4 signatures among 40 records.
  const auto g = gen_synthetic(40, 2, 6, 0.0, 9);
  const auto m = synthetic_mixing_matrix(2, 6, 9);
  for (std::size_t i = 0; i < g.size(); ++i) {
    const auto attrs = g.attributes(i);
    for (std::size_t k = 0; k < 6; ++k) {
      const double pre = m[k * 2] * attrs[0] + m[k * 2 + 1] * attrs[1];
      CHECK(g.features(i)[k] == static_cast<float>(std::tanh(pre)));
    }
    for (std::size_t j = 0; j < i; ++j) {
      if (std::equal(attrs.begin(), attrs.end(), g.attributes(j).begin())) {
        CHECK(std::equal(g.features(i).begin(), g.features(i).end(), g.features(j).begin()));
      }
    }
  }
}

TEST_CASE("feature channels correlate with attributes in the sign of the mixing weight") {
  const std::size_t a = 8, f = 12;
  const auto g = gen_synthetic(4000, a, f, 0.0, 17);
  const auto m = synthetic_mixing_matrix(a, f, 17);
  for (std::size_t k = 0; k < f; ++k) {
    for (std::size_t j = 0; j < a; ++j) {
      double cov = 0.0;
      for (std::size_t i = 0; i < g.size(); ++i) cov += g.attributes(i)[j] * g.features(i)[k];
      if (std::abs(m[k * a + j]) > 0.05) CHECK((cov > 0) == (m[k * a + j] > 0));
    }
  }
}

TEST_CASE("split by prefix") {
  const auto g = test::random_gallery(10, 2, 2, 5);
  const auto [train, test] = split(g, 0.8);
  CHECK(train.size() == 8);
  CHECK(test.size() == 2);
  CHECK(test.offset() == 8);
  CHECK(test.id(0) == g.id(8));
  for (std::size_t i = 0; i < g.size(); ++i) {
    CHECK((i < 8 ? train.id(i) : test.id(i - 8)) == g.id(i));
  }
  CHECK(test.find("r9") == std::optional<std::size_t>(1));
  CHECK_FALSE(test.find("r1").has_value());
  CHECK_THROWS_AS(split(g, 0.0), ConfigError);
  CHECK_THROWS_AS(split(g, 1.0), ConfigError);
}

TEST_CASE("202599-record split yields 180000 and 22599") {
  Gallery g(1, 1);
  const std::vector<std::int8_t> a{1};
  const std::vector<float> f{0.f};
  for (std::size_t i = 0; i < 202599; ++i) g.add(std::to_string(i), a, f);
  const auto [train, test] = split(g, 180000.0 / 202599.0);
  CHECK(train.size() == 180000);
  CHECK(test.size() == 22599);
}
