#pragma once

#include <charconv>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "sard/common.hpp"
#include "sard/geometry.hpp"

namespace sard {

// 17 significant digits round-trip an IEEE double exactly, so files written
// with fmt17 and read back with parse_double reproduce the bits.
inline std::string fmt17(double v) {
  char buf[40];
  auto r = std::to_chars(buf, buf + sizeof(buf), v,
                         std::chars_format::general, 17);
  return std::string(buf, r.ptr);
}

inline double parse_double(const std::string& text, const std::string& where) {
  const char* b = text.data();
  const char* e = b + text.size();
  while (b < e && (*b == ' ' || *b == '\t')) ++b;
  while (e > b && (e[-1] == ' ' || e[-1] == '\t' || e[-1] == '\r')) --e;
  double v = 0.0;
  auto r = std::from_chars(b, e, v);
  if (r.ec != std::errc() || r.ptr != e)
    throw IoError(where + ": not a number: '" + text + "'");
  return v;
}

inline long parse_long(const std::string& text, const std::string& where) {
  const char* b = text.data();
  const char* e = b + text.size();
  while (b < e && (*b == ' ' || *b == '\t')) ++b;
  while (e > b && (e[-1] == ' ' || e[-1] == '\t' || e[-1] == '\r')) --e;
  long v = 0;
  auto r = std::from_chars(b, e, v);
  if (r.ec != std::errc() || r.ptr != e)
    throw IoError(where + ": not an integer: '" + text + "'");
  return v;
}

namespace detail {

inline std::string trim(const std::string& s) {
  std::size_t b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  std::size_t e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == sep) {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

}  // namespace detail

// Flat key = value configuration. '#' starts a comment, blank lines are
// skipped, later assignments override earlier ones in place so the echoed
// file keeps a stable line order.
class Config {
 public:
  Config() = default;

  static Config parse_string(const std::string& text,
                             const std::string& origin = "<string>") {
    Config c;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      const std::size_t hash = line.find('#');
      if (hash != std::string::npos) line.erase(hash);
      line = detail::trim(line);
      if (line.empty()) continue;
      const std::size_t eq = line.find('=');
      if (eq == std::string::npos)
        throw ConfigError(origin + ":" + std::to_string(lineno) +
                          ": expected 'key = value', got '" + line + "'");
      const std::string key = detail::trim(line.substr(0, eq));
      const std::string value = detail::trim(line.substr(eq + 1));
      if (key.empty())
        throw ConfigError(origin + ":" + std::to_string(lineno) +
                          ": empty key");
      c.set(key, value);
    }
    return c;
  }

  static Config parse_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config file: " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_string(buf.str(), path);
  }

  bool has(const std::string& key) const { return find(key) >= 0; }

  void set(const std::string& key, const std::string& value) {
    const int i = find(key);
    if (i >= 0)
      items_[static_cast<std::size_t>(i)].second = value;
    else
      items_.emplace_back(key, value);
  }

  std::string require_string(const std::string& key) const {
    const int i = find(key);
    if (i < 0) throw ConfigError("missing config key: " + key);
    return items_[static_cast<std::size_t>(i)].second;
  }

  std::string get_string(const std::string& key,
                         const std::string& fallback) const {
    const int i = find(key);
    return i < 0 ? fallback : items_[static_cast<std::size_t>(i)].second;
  }

  double require_double(const std::string& key) const {
    return to_double(key, require_string(key));
  }

  double get_double(const std::string& key, double fallback) const {
    const int i = find(key);
    return i < 0 ? fallback
                 : to_double(key, items_[static_cast<std::size_t>(i)].second);
  }

  long require_int(const std::string& key) const {
    return to_long(key, require_string(key));
  }

  long get_int(const std::string& key, long fallback) const {
    const int i = find(key);
    return i < 0 ? fallback
                 : to_long(key, items_[static_cast<std::size_t>(i)].second);
  }

  bool get_bool(const std::string& key, bool fallback) const {
    const int i = find(key);
    if (i < 0) return fallback;
    const std::string& v = items_[static_cast<std::size_t>(i)].second;
    if (v == "1" || v == "true" || v == "yes" || v == "on") return true;
    if (v == "0" || v == "false" || v == "no" || v == "off") return false;
    throw ConfigError("config key '" + key + "': not a boolean: '" + v + "'");
  }

  // comma-separated numeric list
  std::vector<double> get_double_list(const std::string& key) const {
    std::vector<double> out;
    const int i = find(key);
    if (i < 0) return out;
    for (const std::string& part :
         detail::split(items_[static_cast<std::size_t>(i)].second, ',')) {
      const std::string t = detail::trim(part);
      if (t.empty()) continue;
      out.push_back(to_double(key, t));
    }
    return out;
  }

  std::vector<long> get_int_list(const std::string& key) const {
    std::vector<long> out;
    const int i = find(key);
    if (i < 0) return out;
    for (const std::string& part :
         detail::split(items_[static_cast<std::size_t>(i)].second, ',')) {
      const std::string t = detail::trim(part);
      if (t.empty()) continue;
      out.push_back(to_long(key, t));
    }
    return out;
  }

  const std::vector<std::pair<std::string, std::string>>& items() const {
    return items_;
  }

 private:
  int find(const std::string& key) const {
    for (std::size_t i = 0; i < items_.size(); ++i)
      if (items_[i].first == key) return static_cast<int>(i);
    return -1;
  }

  static double to_double(const std::string& key, const std::string& v) {
    try {
      return parse_double(v, "config key '" + key + "'");
    } catch (const IoError& e) {
      throw ConfigError(e.what());
    }
  }

  static long to_long(const std::string& key, const std::string& v) {
    try {
      return parse_long(v, "config key '" + key + "'");
    } catch (const IoError& e) {
      throw ConfigError(e.what());
    }
  }

  std::vector<std::pair<std::string, std::string>> items_;
};

// Comma-separated table with one header line; all numeric payloads are
// written with fmt17 by the callers.
struct TextTable {
  std::vector<std::string> names;
  std::vector<std::vector<std::string>> rows;

  int col(const std::string& name) const {
    for (std::size_t i = 0; i < names.size(); ++i)
      if (names[i] == name) return static_cast<int>(i);
    return -1;
  }

  int require_col(const std::string& name) const {
    const int i = col(name);
    if (i < 0) throw IoError("missing column: " + name);
    return i;
  }

  Eigen::VectorXd numeric_column(const std::string& name) const {
    const int c = require_col(name);
    Eigen::VectorXd v(static_cast<Eigen::Index>(rows.size()));
    for (std::size_t r = 0; r < rows.size(); ++r)
      v[static_cast<Eigen::Index>(r)] =
          parse_double(rows[r][static_cast<std::size_t>(c)],
                       "column '" + name + "' row " + std::to_string(r + 2));
    return v;
  }
};

inline void write_table(const std::string& path, const TextTable& t) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open for writing: " + path);
  for (std::size_t i = 0; i < t.names.size(); ++i) {
    if (i) out << ',';
    out << t.names[i];
  }
  out << '\n';
  for (const auto& row : t.rows) {
    if (row.size() != t.names.size())
      throw IoError("row width mismatch writing " + path);
    for (std::size_t i = 0; i < row.size(); ++i) {
      if (i) out << ',';
      out << row[i];
    }
    out << '\n';
  }
  if (!out) throw IoError("write failed: " + path);
}

inline TextTable read_table(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open: " + path);
  TextTable t;
  std::string line;
  if (!std::getline(in, line)) throw IoError("empty file: " + path);
  for (const std::string& h : detail::split(line, ','))
    t.names.push_back(detail::trim(h));
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> row = detail::split(line, ',');
    if (row.size() != t.names.size())
      throw IoError(path + ": row has " + std::to_string(row.size()) +
                    " fields, header has " + std::to_string(t.names.size()));
    t.rows.push_back(std::move(row));
  }
  return t;
}

// Observed panel: locations with two income snapshots, the topography field
// and an optional alternative covariate. Columns id,x,y,area,y_t0,y_t1 are
// required; s and alt are optional and reported by the flags.
struct DomainData {
  SpatialDomain domain;
  Eigen::VectorXd y0;
  Eigen::VectorXd y1;
  Eigen::VectorXd s;    // empty when the file has no s column
  Eigen::VectorXd alt;  // empty when the file has no alt column

  bool has_s() const { return s.size() > 0; }
  bool has_alt() const { return alt.size() > 0; }
};

inline DomainData read_domain_csv(const std::string& path,
                                  Topology topology = Topology::planar,
                                  double width = 0.0, double height = 0.0) {
  const TextTable t = read_table(path);
  for (const char* req : {"id", "x", "y", "area", "y_t0", "y_t1"})
    t.require_col(req);
  const int cid = t.col("id");
  const Eigen::VectorXd x = t.numeric_column("x");
  const Eigen::VectorXd y = t.numeric_column("y");
  const Eigen::VectorXd area = t.numeric_column("area");

  const std::size_t n = t.rows.size();
  if (n == 0) throw IoError(path + ": no data rows");
  std::vector<Eigen::Vector2d> pts(n);
  std::vector<double> areas(n);
  std::vector<std::string> ids(n);
  for (std::size_t i = 0; i < n; ++i) {
    pts[i] = Eigen::Vector2d(x[static_cast<Eigen::Index>(i)],
                             y[static_cast<Eigen::Index>(i)]);
    areas[i] = area[static_cast<Eigen::Index>(i)];
    ids[i] = t.rows[i][static_cast<std::size_t>(cid)];
  }

  DomainData d;
  d.domain = build_domain(pts, areas, topology, width, height, std::move(ids));
  d.y0 = t.numeric_column("y_t0");
  d.y1 = t.numeric_column("y_t1");
  if (t.col("s") >= 0) d.s = t.numeric_column("s");
  if (t.col("alt") >= 0) d.alt = t.numeric_column("alt");
  return d;
}

inline void write_domain_csv(const std::string& path, const DomainData& d) {
  const int n = d.domain.size();
  if (d.y0.size() != n || d.y1.size() != n)
    throw DimensionMismatch("write_domain_csv: field length mismatch");
  if (d.s.size() != 0 && d.s.size() != n)
    throw DimensionMismatch("write_domain_csv: s length mismatch");
  if (d.alt.size() != 0 && d.alt.size() != n)
    throw DimensionMismatch("write_domain_csv: alt length mismatch");

  TextTable t;
  t.names = {"id", "x", "y", "area", "y_t0", "y_t1"};
  if (d.has_s()) t.names.push_back("s");
  if (d.has_alt()) t.names.push_back("alt");
  t.rows.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    std::vector<std::string> row;
    row.push_back(d.domain.id.empty() ? std::to_string(i) : d.domain.id[i]);
    row.push_back(fmt17(d.domain.z(i, 0)));
    row.push_back(fmt17(d.domain.z(i, 1)));
    row.push_back(fmt17(d.domain.area[i]));
    row.push_back(fmt17(d.y0[i]));
    row.push_back(fmt17(d.y1[i]));
    if (d.has_s()) row.push_back(fmt17(d.s[i]));
    if (d.has_alt()) row.push_back(fmt17(d.alt[i]));
    t.rows.push_back(std::move(row));
  }
  write_table(path, t);
}

// Run manifest: the configuration echo followed by provenance entries
// (tool version, library versions, seeds). Deliberately no timestamps or
// host names so identical runs emit identical bytes.
inline void write_manifest(
    const std::string& path, const Config& config,
    const std::vector<std::pair<std::string, std::string>>& provenance) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open for writing: " + path);
  out << "# configuration\n";
  for (const auto& [k, v] : config.items()) out << k << " = " << v << '\n';
  out << "# provenance\n";
  for (const auto& [k, v] : provenance) out << k << " = " << v << '\n';
  if (!out) throw IoError("write failed: " + path);
}

}  // namespace sard
