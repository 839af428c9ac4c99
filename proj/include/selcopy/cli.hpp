// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "selcopy/harness.hpp"

namespace selcopy {

struct RunConfig {
  std::string mode = "both";  // baseline | selective | both
  std::vector<std::size_t> sizes{1024, 65536, 1u << 20};
  std::size_t messages = 4;  // exchanges per connection
  std::size_t connections = 4;
  std::size_t frag_capacity = kDefaultFragCapacity;
  std::size_t max_frags = kDefaultMaxFrags;
  std::size_t lookahead = kDefaultLookahead;
  std::size_t threshold = kDefaultAnchorThreshold;
  double grace_seconds = 5.0;
  std::int64_t rcvbuf = 256 * 1024;
  std::int64_t sndbuf = 256 * 1024;
  bool chunked = false;
  std::size_t chunk_size = 16 * 1024;
  std::size_t head_len = 200;
  std::uint64_t seed = 1;
  bool stress = false;
  std::string out;
  std::string format = "csv";
  std::string fault;  // "" or "vpi-corrupt"
  std::size_t iterations = 1000;
  std::size_t fuzz_max_body = 2u << 20;
};

/// Parses "1K,64K,1M" (binary suffixes K, M, G; case-insensitive).
std::vector<std::size_t> parse_sizes(const std::string& text);

std::vector<KernelMode> modes_of(const RunConfig& rc);
ScenarioConfig scenario_for(const RunConfig& rc, KernelMode mode);

int cmd_run(const RunConfig& rc, std::ostream& out, std::ostream& err);
int cmd_fuzz(const RunConfig& rc, std::ostream& out, std::ostream& err);

/// Entry point shared by the executable and the tests.
int cli_main(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace selcopy
