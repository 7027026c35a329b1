// spikeseg/io.cpp

#include "spikeseg/io.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "spikeseg/errors.hpp"

namespace spikeseg {

std::string format_double(double x) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", x);
  return buf;
}

std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("write failed for " + path.string());
}

nlohmann::json read_json(const std::filesystem::path& path) {
  const std::string text = read_text(path);
  try {
    return nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ContractError("malformed JSON in " + path.string() + ": " + e.what());
  }
}

void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
  write_text(path, j.dump(2) + "\n");
}

Matrix read_matrix_csv(const std::filesystem::path& path) {
  const std::string text = read_text(path);
  Matrix m;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::size_t cols = 0;
    const char* p = line.data();
    const char* end = line.data() + line.size();
    while (p <= end) {
      const char* comma = std::find(p, end, ',');
      double v = 0.0;
      // from_chars for double is available in libstdc++ 11.
      auto [ptr, ec] = std::from_chars(p, comma, v);
      if (ec != std::errc() || ptr != comma) {
        throw ContractError(path.string() + ":" + std::to_string(lineno) + ": bad number");
      }
      m.data.push_back(v);
      ++cols;
      p = comma + 1;
    }
    if (m.rows == 0) {
      m.cols = cols;
    } else if (cols != m.cols) {
      throw DimensionError(path.string() + ":" + std::to_string(lineno) + ": expected " +
                           std::to_string(m.cols) + " columns, got " + std::to_string(cols));
    }
    ++m.rows;
  }
  return m;
}

void write_matrix_csv(const std::filesystem::path& path, const Matrix& m) {
  std::string out;
  out.reserve(m.data.size() * 24);
  for (std::size_t r = 0; r < m.rows; ++r) {
    for (std::size_t c = 0; c < m.cols; ++c) {
      if (c) out += ',';
      out += format_double(m(r, c));
    }
    out += '\n';
  }
  write_text(path, out);
}

}  // namespace spikeseg
