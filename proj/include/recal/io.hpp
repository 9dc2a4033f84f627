#pragma once

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "recal/errors.hpp"
#include "recal/text.hpp"

namespace recal::io {

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open file: " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Write via temp file + rename so interrupted runs never leave a torn file.
inline void atomic_write(const std::filesystem::path& path, const std::string& content) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw ConfigError("cannot write file: " + tmp.string());
    out << content;
    out.flush();
    if (!out) throw ConfigError("write failed: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

// Minimal CSV accumulator. All numbers go through format_double so output is
// deterministic and round-trips exactly.
class CsvWriter {
 public:
  explicit CsvWriter(std::vector<std::string> header) : columns_(header.size()) {
    for (size_t i = 0; i < header.size(); ++i) {
      if (i) buf_ += ',';
      buf_ += header[i];
    }
    buf_ += '\n';
  }

  void row(const std::vector<double>& values) {
    if (values.size() != columns_) throw ShapeError("csv row width mismatch");
    for (size_t i = 0; i < values.size(); ++i) {
      if (i) buf_ += ',';
      buf_ += text::format_double(values[i]);
    }
    buf_ += '\n';
  }

  void raw_row(const std::vector<std::string>& cells) {
    if (cells.size() != columns_) throw ShapeError("csv row width mismatch");
    for (size_t i = 0; i < cells.size(); ++i) {
      if (i) buf_ += ',';
      buf_ += cells[i];
    }
    buf_ += '\n';
  }

  const std::string& str() const { return buf_; }
  void save(const std::filesystem::path& path) const { atomic_write(path, buf_); }

 private:
  size_t columns_;
  std::string buf_;
};

}  // namespace recal::io
