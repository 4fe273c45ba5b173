#pragma once

#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "mmkn/common.hpp"

namespace mmkn {

// RFC 4180 CSV writer: CRLF row endings, quoting only where needed.
class CsvWriter {
 public:
  explicit CsvWriter(const std::string& path) : out_(path, std::ios::binary) {
    if (!out_) throw IoError("cannot write csv: " + path);
    path_ = path;
  }

  void row(const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) {
      if (i) out_ << ',';
      out_ << escape(cells[i]);
    }
    out_ << "\r\n";
    if (!out_) throw IoError("short csv write: " + path_);
  }

  static std::string escape(const std::string& cell) {
    bool needs_quotes = false;
    for (char c : cell)
      if (c == ',' || c == '"' || c == '\n' || c == '\r') needs_quotes = true;
    if (!needs_quotes) return cell;
    std::string out = "\"";
    for (char c : cell) {
      if (c == '"') out += "\"\"";
      else out.push_back(c);
    }
    out += "\"";
    return out;
  }

  static std::string num(double v, int precision = 6) {
    std::ostringstream ss;
    ss.setf(std::ios::fixed);
    ss.precision(precision);
    ss << v;
    return ss.str();
  }

 private:
  std::ofstream out_;
  std::string path_;
};

}  // namespace mmkn
