#include <catch2/catch_amalgamated.hpp>

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "sard/io.hpp"

using namespace sard;

namespace {

struct TempDir {
  std::filesystem::path path;
  TempDir() {
    path = std::filesystem::temp_directory_path() /
           ("sard_io_test_" + std::to_string(::getpid()));
    std::filesystem::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path, ec);
  }
  std::string file(const std::string& name) const {
    return (path / name).string();
  }
};

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

bool same_bits(double a, double b) {
  std::uint64_t ba, bb;
  std::memcpy(&ba, &a, 8);
  std::memcpy(&bb, &b, 8);
  return ba == bb;
}

}  // namespace

TEST_CASE("fmt17 round-trips doubles exactly", "[io]") {
  const double values[] = {0.0,       -0.0,        1.0 / 3.0, 0.1,
                           -2.5e-308, 1.79e308,    3.14159,   -123456.789,
                           1e-17,     0.0012345678901234567};
  for (double v : values) {
    const double back = parse_double(fmt17(v), "test");
    REQUIRE(same_bits(back, v));
  }
}

TEST_CASE("number parsing rejects malformed input", "[io]") {
  REQUIRE(parse_double(" 2.5 ", "t") == 2.5);
  REQUIRE(parse_long("  -42\r", "t") == -42);
  REQUIRE_THROWS_AS(parse_double("", "t"), IoError);
  REQUIRE_THROWS_AS(parse_double("1.5x", "t"), IoError);
  REQUIRE_THROWS_AS(parse_double("nope", "t"), IoError);
  REQUIRE_THROWS_AS(parse_long("1.5", "t"), IoError);
  REQUIRE_THROWS_AS(parse_long("", "t"), IoError);
}

TEST_CASE("config parses keys, comments and lists", "[io]") {
  const std::string text =
      "# experiment\n"
      "tau = 0.5\n"
      "\n"
      "grid_sizes = 12, 20,30\n"
      "out_dir = /tmp/run # trailing comment\n"
      "verbose = yes\n"
      "tau = 0.25\n";
  Config c = Config::parse_string(text);

  REQUIRE(c.has("tau"));
  REQUIRE(c.require_double("tau") == 0.25);
  REQUIRE(c.get_double("missing", 7.0) == 7.0);
  REQUIRE(c.get_string("out_dir", "") == "/tmp/run");
  REQUIRE(c.get_bool("verbose", false));
  REQUIRE(c.get_bool("absent", true));

  const auto sizes = c.get_int_list("grid_sizes");
  REQUIRE(sizes == std::vector<long>{12, 20, 30});
  REQUIRE(c.get_double_list("nothing").empty());

  // overrides stay at the original position so the echo is stable
  REQUIRE(c.items()[0].first == "tau");
  REQUIRE(c.items()[0].second == "0.25");
  REQUIRE(c.items().size() == 4);
}

TEST_CASE("config rejects malformed input", "[io]") {
  REQUIRE_THROWS_AS(Config::parse_string("just words\n"), ConfigError);
  REQUIRE_THROWS_AS(Config::parse_string("= value\n"), ConfigError);
  REQUIRE_THROWS_AS(Config::parse_string("k = v\n").require_string("other"),
                    ConfigError);
  REQUIRE_THROWS_AS(Config::parse_string("k = abc\n").require_double("k"),
                    ConfigError);
  REQUIRE_THROWS_AS(Config::parse_string("b = maybe\n").get_bool("b", true),
                    ConfigError);
  REQUIRE_THROWS_AS(Config::parse_file("/nonexistent/path.cfg"), IoError);

  try {
    Config::parse_string("a = 1\nbroken line\n", "test.cfg");
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    REQUIRE(std::string(e.what()).find("test.cfg:2") != std::string::npos);
  }
}

TEST_CASE("tables round-trip through files", "[io]") {
  TempDir tmp;
  TextTable t;
  t.names = {"name", "value"};
  t.rows = {{"a", fmt17(1.0 / 3.0)}, {"b", fmt17(-0.125)}};
  const std::string path = tmp.file("table.csv");
  write_table(path, t);

  TextTable back = read_table(path);
  REQUIRE(back.names == t.names);
  REQUIRE(back.rows == t.rows);
  REQUIRE(back.col("value") == 1);
  REQUIRE(back.col("missing") == -1);
  REQUIRE_THROWS_AS(back.require_col("missing"), IoError);

  const Eigen::VectorXd v = back.numeric_column("value");
  REQUIRE(same_bits(v[0], 1.0 / 3.0));
  REQUIRE(same_bits(v[1], -0.125));
  REQUIRE_THROWS_AS(back.numeric_column("name"), IoError);

  TextTable ragged;
  ragged.names = {"a", "b"};
  ragged.rows = {{"1"}};
  REQUIRE_THROWS_AS(write_table(tmp.file("ragged.csv"), ragged), IoError);

  std::ofstream(tmp.file("bad.csv")) << "a,b\n1,2,3\n";
  REQUIRE_THROWS_AS(read_table(tmp.file("bad.csv")), IoError);
  std::ofstream(tmp.file("empty.csv"));
  REQUIRE_THROWS_AS(read_table(tmp.file("empty.csv")), IoError);
}

TEST_CASE("domain files round-trip all fields", "[io]") {
  TempDir tmp;
  DomainData d;
  d.domain = uniform_torus_grid(3, 2);
  const int n = d.domain.size();
  d.y0 = Eigen::VectorXd::LinSpaced(n, 0.5, 2.0);
  d.y1 = d.y0.array() * 1.1 + 0.01;
  d.s = Eigen::VectorXd::LinSpaced(n, -1.0, 1.0);
  d.alt = Eigen::VectorXd::Constant(n, 300.0);

  const std::string path = tmp.file("domain.csv");
  write_domain_csv(path, d);
  DomainData back = read_domain_csv(path, Topology::torus, 1.0, 1.0);

  REQUIRE(back.domain.size() == n);
  REQUIRE(back.domain.topology == Topology::torus);
  REQUIRE(back.has_s());
  REQUIRE(back.has_alt());
  for (int i = 0; i < n; ++i) {
    REQUIRE(same_bits(back.domain.z(i, 0), d.domain.z(i, 0)));
    REQUIRE(same_bits(back.domain.z(i, 1), d.domain.z(i, 1)));
    REQUIRE(same_bits(back.domain.area[i], d.domain.area[i]));
    REQUIRE(same_bits(back.y0[i], d.y0[i]));
    REQUIRE(same_bits(back.y1[i], d.y1[i]));
    REQUIRE(same_bits(back.s[i], d.s[i]));
    REQUIRE(same_bits(back.alt[i], d.alt[i]));
  }

  // optional columns may be absent
  DomainData bare = d;
  bare.s.resize(0);
  bare.alt.resize(0);
  write_domain_csv(tmp.file("bare.csv"), bare);
  DomainData bare_back = read_domain_csv(tmp.file("bare.csv"));
  REQUIRE_FALSE(bare_back.has_s());
  REQUIRE_FALSE(bare_back.has_alt());
  REQUIRE(bare_back.domain.topology == Topology::planar);

  std::ofstream(tmp.file("short.csv")) << "id,x,y,area,y_t0\n0,0,0,1,1\n";
  REQUIRE_THROWS_AS(read_domain_csv(tmp.file("short.csv")), IoError);
  std::ofstream(tmp.file("nan.csv"))
      << "id,x,y,area,y_t0,y_t1\n0,0,0,1,oops,1\n";
  REQUIRE_THROWS_AS(read_domain_csv(tmp.file("nan.csv")), IoError);

  DomainData mismatched = d;
  mismatched.y1.resize(n - 1);
  REQUIRE_THROWS_AS(write_domain_csv(tmp.file("m.csv"), mismatched),
                    DimensionMismatch);
}

TEST_CASE("manifests echo config and provenance deterministically", "[io]") {
  TempDir tmp;
  Config c = Config::parse_string("tau = 1\nseed = 42\n");
  const std::vector<std::pair<std::string, std::string>> prov = {
      {"tool_version", "1.0"}, {"seed", "42"}};

  const std::string p1 = tmp.file("run1.manifest");
  const std::string p2 = tmp.file("run2.manifest");
  write_manifest(p1, c, prov);
  write_manifest(p2, c, prov);

  const std::string body = slurp(p1);
  REQUIRE(body == slurp(p2));
  REQUIRE(body ==
          "# configuration\n"
          "tau = 1\n"
          "seed = 42\n"
          "# provenance\n"
          "tool_version = 1.0\n"
          "seed = 42\n");
}
