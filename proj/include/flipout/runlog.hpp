#pragma once

// Per-iteration training records and their JSON-lines form.

#include "flipout/core.hpp"

#include <charconv>
#include <ostream>
#include <string>
#include <vector>

namespace flipout {

/// Shortest round-trip decimal form; '.' separator, no locale.
inline std::string format_double(double v) {
  if (v != v) return "nan";
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

struct RunRecord {
  long iter = 0;
  double loss = 0;  // training objective, or mean fitness for ES
  double error_rate = 0;
  long long samples_used = 0;
  double wall_ms = 0;
  std::string strategy;
  std::uint64_t seed = 0;
};

struct RunLog {
  std::string metric = "loss";  // "loss" or "fitness_mean"
  std::vector<RunRecord> records;
};

inline void write_jsonl(std::ostream& os, const RunLog& log) {
  for (const auto& r : log.records) {
    os << "{\"iter\":" << r.iter << ",\"" << log.metric << "\":" << format_double(r.loss)
       << ",\"error_rate\":" << format_double(r.error_rate) << ",\"samples_used\":" << r.samples_used
       << ",\"wall_ms\":" << format_double(r.wall_ms) << ",\"strategy\":\"" << r.strategy << "\",\"seed\":" << r.seed
       << "}\n";
  }
}

}  // namespace flipout
