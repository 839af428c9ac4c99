// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

#include "selcopy/bufcore.hpp"
#include "selcopy/harness.hpp"

namespace selcopy {

std::string sha256_hex(ByteView data);

/// Digest of one direction across all connections, framed by length so
/// that stream boundaries cannot alias.
std::string stream_digest(const Transcript& t, bool to_backend);
std::string transcript_digest(const Transcript& t);

struct ReportRow {
  std::string mode;
  std::uint64_t size = 0;
  std::uint64_t seed = 0;
  std::uint64_t connections = 0;
  std::uint64_t messages = 0;
  bool chunked = false;
  std::uint64_t max_frags = 0;
  Metrics metrics;
  double synthetic_cost = 0;
  std::uint64_t vpis_expected = 0;
  std::string to_backend_digest;
  std::string to_client_digest;
  std::string transcript_digest;
  bool ok = false;
};

ReportRow make_row(const std::string& mode, std::uint64_t size, std::uint64_t seed, const Workload& wl,
                   const ScenarioResult& res, const CostWeights& weights);

std::vector<std::string> report_columns();
void write_csv(std::ostream& out, const std::vector<ReportRow>& rows);
void write_jsonl(std::ostream& out, const std::vector<ReportRow>& rows);

}  // namespace selcopy
