// Small text I/O helpers shared by the scene, checkpoint and CSV writers.
#pragma once

#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace qseg {

// Shortest decimal with the given significant digits; %g keeps files compact
// and round-trips exactly back to the printed precision.
inline std::string fmt_g(double x, int sig_digits) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*g", sig_digits, x);
  return buf;
}

struct LineReader {
  std::ifstream in;
  std::string path;
  int line_no = 0;

  explicit LineReader(const std::string& p) : in(p), path(p) {
    if (!in) throw std::runtime_error(path + ": cannot open");
  }

  // Returns false at EOF.
  bool next(std::string& out) {
    if (!std::getline(in, out)) return false;
    ++line_no;
    if (!out.empty() && out.back() == '\r') out.pop_back();
    return true;
  }

  [[noreturn]] void fail(const std::string& msg) const {
    throw std::runtime_error(path + ":" + std::to_string(line_no) + ": " + msg);
  }
};

inline std::vector<std::string> split_ws(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream iss(s);
  std::string tok;
  while (iss >> tok) out.push_back(tok);
  return out;
}

inline double parse_double(const std::string& tok, bool& ok) {
  char* end = nullptr;
  const double val = std::strtod(tok.c_str(), &end);
  ok = end != nullptr && *end == '\0' && end != tok.c_str();
  return val;
}

inline long long parse_int(const std::string& tok, bool& ok) {
  char* end = nullptr;
  const long long val = std::strtoll(tok.c_str(), &end, 10);
  ok = end != nullptr && *end == '\0' && end != tok.c_str();
  return val;
}

}  // namespace qseg
