#pragma once

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "hssl/common.hpp"

namespace hssl {

// write-temp-then-rename; readers never observe a partial file
inline void atomic_write_file(const std::string& path, const std::string& bytes) {
  namespace fs = std::filesystem;
  const fs::path target(path);
  if (target.has_parent_path()) fs::create_directories(target.parent_path());
  const fs::path tmp = target.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw io_error("cannot open " + tmp.string() + " for writing");
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw io_error("write failure on " + tmp.string());
  }
  fs::rename(tmp, target);
}

inline std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw io_error("cannot open " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

// Buffered CSV with a fixed header; contents land atomically on close().
class CsvWriter {
 public:
  CsvWriter(std::string path, std::vector<std::string> columns) : path_(std::move(path)), ncols_(columns.size()) {
    for (size_t i = 0; i < columns.size(); ++i) {
      if (i) buf_ += ',';
      buf_ += columns[i];
    }
    buf_ += '\n';
  }

  void row(const std::vector<std::string>& cells) {
    if (cells.size() != ncols_) throw contract_error("CSV row width does not match header");
    for (size_t i = 0; i < cells.size(); ++i) {
      if (i) buf_ += ',';
      buf_ += cells[i];
    }
    buf_ += '\n';
    ++rows_;
  }

  void close() {
    if (closed_) return;
    atomic_write_file(path_, buf_);
    closed_ = true;
  }

  int64_t rows() const { return rows_; }
  ~CsvWriter() {
    try {
      close();
    } catch (...) {
    }
  }

 private:
  std::string path_;
  size_t ncols_;
  std::string buf_;
  int64_t rows_ = 0;
  bool closed_ = false;
};

struct CsvTable {
  std::vector<std::string> columns;
  std::vector<std::vector<std::string>> rows;

  int column(const std::string& name) const {
    for (size_t i = 0; i < columns.size(); ++i)
      if (columns[i] == name) return static_cast<int>(i);
    return -1;
  }
};

inline CsvTable read_csv(const std::string& path) {
  std::string text = read_file(path);
  CsvTable t;
  std::istringstream ss(text);
  std::string line;
  bool header = true;
  while (std::getline(ss, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::string cell;
    std::istringstream ls(line);
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    if (line.back() == ',') cells.push_back("");
    if (header) {
      t.columns = cells;
      header = false;
    } else {
      if (cells.size() != t.columns.size()) throw format_error("ragged CSV row in " + path);
      t.rows.push_back(cells);
    }
  }
  if (header) throw format_error("CSV file " + path + " has no header row");
  return t;
}

inline std::string fmt_double(double v, int precision = 8) {
  std::ostringstream ss;
  ss.precision(precision);
  ss << v;
  return ss.str();
}

}  // namespace hssl
