// Text checkpoints. Repeated blocks of
//   name
//   rank d1 ... dk
//   row-major values, one matrix row per line
// at 17 significant digits, which round-trips IEEE doubles exactly: a
// restored run continues bit for bit.
//
// A checkpoint holds every parameter, the optimizer moments under
// "adam_m.<name>" / "adam_v.<name>", and scalars "meta.step", "meta.epoch".
#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "qseg/optim.hpp"
#include "qseg/tape.hpp"
#include "qseg/text_io.hpp"

namespace qseg {

struct CheckpointMeta {
  int64_t step = 0;
  int64_t epoch = 0;
};

namespace detail {

inline void write_block(std::ofstream& out, const std::string& name, const Mat& m) {
  out << name << '\n' << 2 << ' ' << m.rows << ' ' << m.cols << '\n';
  for (int r = 0; r < m.rows; ++r) {
    const double* row = m.row(r);
    for (int c = 0; c < m.cols; ++c) {
      if (c) out << ' ';
      out << fmt_g(row[c], 17);
    }
    out << '\n';
  }
}

inline void write_scalar_block(std::ofstream& out, const std::string& name, double v) {
  out << name << '\n' << 1 << ' ' << 1 << '\n' << fmt_g(v, 17) << '\n';
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, const ParameterStore& params,
                            const Adam* opt, const CheckpointMeta& meta) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error(path + ": cannot open for writing");
  detail::write_scalar_block(out, "meta.step", static_cast<double>(meta.step));
  detail::write_scalar_block(out, "meta.epoch", static_cast<double>(meta.epoch));
  params.for_each([&](const Parameter& p) { detail::write_block(out, p.name, p.value); });
  if (opt) {
    for (const auto& [name, st] : opt->state()) {
      detail::write_block(out, "adam_m." + name, st.m);
      detail::write_block(out, "adam_v." + name, st.v);
    }
  }
  if (!out) throw std::runtime_error(path + ": write failed");
}

// Raw read of all blocks; shape-checked placement happens in load_checkpoint.
inline std::map<std::string, Mat> read_checkpoint_blocks(const std::string& path) {
  LineReader rd(path);
  std::map<std::string, Mat> blocks;
  std::string line;
  while (rd.next(line)) {
    if (split_ws(line).empty()) continue;  // tolerate blank separator lines
    const std::string name = line;
    if (!rd.next(line)) rd.fail("missing shape line after block name '" + name + "'");
    auto toks = split_ws(line);
    bool ok;
    if (toks.empty()) rd.fail("empty shape line");
    const long long rank = parse_int(toks[0], ok);
    if (!ok || rank < 1 || rank > 2 || toks.size() != static_cast<size_t>(rank) + 1)
      rd.fail("shape line must be 'rank d1 ... dk' with rank 1 or 2");
    long long dims[2] = {1, 1};
    for (long long k = 0; k < rank; ++k) {
      dims[k] = parse_int(toks[static_cast<size_t>(k) + 1], ok);
      if (!ok || dims[k] < 0) rd.fail("bad dimension in block '" + name + "'");
    }
    const int rows = static_cast<int>(rank == 2 ? dims[0] : 1);
    const int cols = static_cast<int>(rank == 2 ? dims[1] : dims[0]);
    Mat m(rows, cols);
    for (int r = 0; r < rows; ++r) {
      if (!rd.next(line)) rd.fail("unexpected end of file in block '" + name + "'");
      toks = split_ws(line);
      if (static_cast<int>(toks.size()) != cols) rd.fail("expected " + std::to_string(cols) + " values");
      for (int c = 0; c < cols; ++c) {
        m.at(r, c) = parse_double(toks[static_cast<size_t>(c)], ok);
        if (!ok) rd.fail("bad value '" + toks[static_cast<size_t>(c)] + "'");
      }
    }
    if (!blocks.emplace(name, std::move(m)).second) rd.fail("duplicate block '" + name + "'");
  }
  return blocks;
}

// Fills an already-built store (and optionally optimizer state) from disk.
// Every parameter must be present with a matching shape, and adam moments
// must be complete if an optimizer is supplied.
inline CheckpointMeta load_checkpoint(const std::string& path, ParameterStore& params, Adam* opt) {
  auto blocks = read_checkpoint_blocks(path);
  const auto take = [&](const std::string& name) -> Mat {
    const auto it = blocks.find(name);
    if (it == blocks.end()) throw std::runtime_error(path + ": missing block '" + name + "'");
    Mat m = std::move(it->second);
    blocks.erase(it);
    return m;
  };

  CheckpointMeta meta;
  meta.step = static_cast<int64_t>(take("meta.step").at(0, 0));
  meta.epoch = static_cast<int64_t>(take("meta.epoch").at(0, 0));

  params.for_each([&](Parameter& p) {
    Mat m = take(p.name);
    if (!m.same_shape(p.value))
      throw std::runtime_error(path + ": shape mismatch for '" + p.name + "'");
    p.value = std::move(m);
  });
  if (opt) {
    opt->set_steps_taken(meta.step);
    params.for_each([&](Parameter& p) {
      AdamState& st = opt->state_for(p);
      Mat m = take("adam_m." + p.name);
      Mat v = take("adam_v." + p.name);
      if (!m.same_shape(p.value) || !v.same_shape(p.value))
        throw std::runtime_error(path + ": optimizer shape mismatch for '" + p.name + "'");
      st.m = std::move(m);
      st.v = std::move(v);
    });
  } else {
    for (auto it = blocks.begin(); it != blocks.end();) {
      if (it->first.rfind("adam_m.", 0) == 0 || it->first.rfind("adam_v.", 0) == 0)
        it = blocks.erase(it);
      else
        ++it;
    }
  }
  if (!blocks.empty())
    throw std::runtime_error(path + ": unknown block '" + blocks.begin()->first + "'");
  return meta;
}

// FNV-1a over a byte string; used for dataset/parameter checksums in reports.
inline uint64_t fnv1a64(const std::string& bytes, uint64_t h = 1469598103934665603ULL) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

inline std::string param_checksum(const ParameterStore& params) {
  std::string buf;
  params.for_each([&](const Parameter& p) {
    buf += p.name;
    buf += ':';
    for (double v : p.value.v) {
      buf += fmt_g(v, 17);
      buf += ',';
    }
    buf += ';';
  });
  char hex[32];
  std::snprintf(hex, sizeof(hex), "%016llx", static_cast<unsigned long long>(fnv1a64(buf)));
  return hex;
}

}  // namespace qseg
