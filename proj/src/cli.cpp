// SPDX-License-Identifier: Apache-2.0
#include "selcopy/cli.hpp"

#include <cctype>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "CLI11.hpp"
#include "selcopy/report.hpp"

namespace selcopy {

std::vector<std::size_t> parse_sizes(const std::string& text) {
  std::vector<std::size_t> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    while (!item.empty() && std::isspace(static_cast<unsigned char>(item.back()))) item.pop_back();
    while (!item.empty() && std::isspace(static_cast<unsigned char>(item.front()))) item.erase(item.begin());
    if (item.empty()) throw std::invalid_argument("empty size in list '" + text + "'");
    std::size_t mult = 1;
    switch (std::toupper(static_cast<unsigned char>(item.back()))) {
      case 'K': mult = 1u << 10; break;
      case 'M': mult = 1u << 20; break;
      case 'G': mult = 1u << 30; break;
      default: break;
    }
    if (mult != 1) item.pop_back();
    if (item.empty() || item.find_first_not_of("0123456789") != std::string::npos)
      throw std::invalid_argument("bad size '" + item + "'");
    out.push_back(std::stoull(item) * mult);
  }
  if (out.empty()) throw std::invalid_argument("no sizes given");
  return out;
}

std::vector<KernelMode> modes_of(const RunConfig& rc) {
  if (rc.mode == "baseline") return {KernelMode::Baseline};
  if (rc.mode == "selective") return {KernelMode::Selective};
  if (rc.mode == "both") return {KernelMode::Baseline, KernelMode::Selective};
  throw std::invalid_argument("unknown mode '" + rc.mode + "'");
}

ScenarioConfig scenario_for(const RunConfig& rc, KernelMode mode) {
  ScenarioConfig sc;
  auto& k = sc.kernel;
  k.mode = mode;
  k.frag_capacity = rc.frag_capacity;
  k.max_frags = rc.max_frags;
  k.prog.lookahead = rc.lookahead;
  k.prog.tx_lookahead = std::max(rc.lookahead, kDefaultTxLookahead);
  k.prog.anchor_threshold = rc.threshold;
  k.prog.anchoring = rc.fault != "vpi-corrupt";
  k.grace_period = std::chrono::duration_cast<VirtualTime>(std::chrono::duration<double>(rc.grace_seconds));
  k.rcvbuf = rc.rcvbuf;
  k.sndbuf = rc.sndbuf;
  k.vpi_salt = rc.seed;
  k.record_messages = false;
  sc.schedule_seed = rc.seed;
  sc.stress = rc.stress;
  k.validate();
  return sc;
}

namespace {

void emit_rows(const RunConfig& rc, const std::vector<ReportRow>& rows, std::ostream& out) {
  auto write = [&](std::ostream& os) {
    if (rc.format == "jsonl") {
      write_jsonl(os, rows);
    } else {
      write_csv(os, rows);
    }
  };
  if (rc.out.empty()) {
    write(out);
    return;
  }
  std::ofstream f(rc.out, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open '" + rc.out + "' for writing");
  write(f);
}

void validate(const RunConfig& rc) {
  modes_of(rc);
  if (rc.format != "csv" && rc.format != "jsonl") throw std::invalid_argument("format must be csv or jsonl");
  if (!rc.fault.empty() && rc.fault != "vpi-corrupt") throw std::invalid_argument("unknown fault '" + rc.fault + "'");
  if (rc.connections == 0) throw std::invalid_argument("connections must be at least 1");
  if (rc.messages == 0) throw std::invalid_argument("messages must be at least 1");
  if (rc.chunked && rc.chunk_size == 0) throw std::invalid_argument("chunk size must be positive");
  if (rc.grace_seconds < 0) throw std::invalid_argument("grace period must not be negative");
}

}  // namespace

int cmd_run(const RunConfig& rc, std::ostream& out, std::ostream& err) {
  validate(rc);
  const CostWeights weights;
  std::vector<ReportRow> rows;
  bool ok = true;
  for (std::size_t size : rc.sizes) {
    const std::uint64_t wl_seed = rc.seed * 0x9e3779b97f4a7c15ULL + size;
    const Workload wl = uniform_workload(rc.connections, rc.messages, size, rc.chunked, rc.chunk_size, rc.head_len,
                                         wl_seed);
    std::optional<std::string> first_digest;
    for (KernelMode mode : modes_of(rc)) {
      auto res = run_scenario(scenario_for(rc, mode), wl);
      auto row = make_row(to_string(mode), size, rc.seed, wl, res, weights);
      row.max_frags = rc.max_frags;
      for (const auto& v : res.violations) err << "size " << size << " " << to_string(mode) << ": " << v << '\n';
      if (mode == KernelMode::Selective && res.metrics.fallback_connections == 0) {
        const bool fault = rc.fault == "vpi-corrupt";
        const std::uint64_t want = fault ? 0 : row.vpis_expected;
        if (res.metrics.vpis_issued != want) {
          err << "size " << size << ": issued " << res.metrics.vpis_issued << " identifiers, expected " << want << '\n';
          row.ok = false;
        }
        if (fault && row.vpis_expected > 0 && res.metrics.fastpath_messages != 0) {
          err << "size " << size << ": fast path reached despite identifier corruption\n";
          row.ok = false;
        }
      }
      if (first_digest && *first_digest != row.transcript_digest) {
        err << "size " << size << ": transcript digests differ between modes\n";
        row.ok = false;
      }
      first_digest = row.transcript_digest;
      ok = ok && row.ok;
      rows.push_back(std::move(row));
    }
  }
  emit_rows(rc, rows, out);
  return ok ? 0 : 1;
}

int cmd_fuzz(const RunConfig& rc, std::ostream& out, std::ostream& err) {
  validate(rc);
  const bool corrupt = rc.fault == "vpi-corrupt";
  std::ofstream seeds;
  if (!rc.out.empty()) {
    seeds.open(rc.out, std::ios::trunc);
    if (!seeds) throw std::runtime_error("cannot open '" + rc.out + "' for writing");
  }
  std::size_t bypassed = 0;
  for (std::size_t i = 0; i < rc.iterations; ++i) {
    const std::uint64_t seed = rc.seed + i;
    auto fc = make_fuzz_case(seed, rc.fuzz_max_body);
    auto res = run_fuzz_case(fc, corrupt);
    bypassed += res.selective.counters.bypass_messages;
    if (seeds.is_open()) seeds << seed << ' ' << (res.ok ? "ok" : "fail") << '\n';
    if (!res.ok) {
      err << "fuzz: seed " << seed << " failed: " << res.failure << '\n';
      out << "first failing seed: " << seed << '\n';
      return 1;
    }
  }
  out << "fuzz: " << rc.iterations << " workloads passed (seeds " << rc.seed << ".."
      << (rc.iterations ? rc.seed + rc.iterations - 1 : rc.seed) << ")";
  if (corrupt) out << ", " << bypassed << " messages took the bypass path";
  out << '\n';
  return 0;
}

int cli_main(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"selcopy: selective-copy proxy datapath simulator"};
  app.require_subcommand(1);
  app.set_config("--config", "", "flat key=value config file; flags on the command line win");

  RunConfig rc;
  std::string sizes = "1K,64K,1M";
  app.add_option("--mode", rc.mode, "baseline | selective | both")
      ->check(CLI::IsMember({"baseline", "selective", "both"}));
  app.add_option("--sizes", sizes, "comma-separated body sizes, K/M/G suffixes");
  app.add_option("--messages", rc.messages, "exchanges per connection");
  app.add_option("--connections", rc.connections, "concurrent connections");
  app.add_option("--frag-capacity", rc.frag_capacity, "bytes per fragment");
  app.add_option("--max-frags", rc.max_frags, "fragments per segment");
  app.add_option("--lookahead", rc.lookahead, "ingress metadata window in bytes");
  app.add_option("--threshold", rc.threshold, "anchoring threshold in bytes");
  app.add_option("--grace", rc.grace_seconds, "teardown grace period in virtual seconds");
  app.add_option("--rcvbuf", rc.rcvbuf, "receive budget per socket");
  app.add_option("--sndbuf", rc.sndbuf, "send budget per socket");
  app.add_flag("--chunked", rc.chunked, "chunked responses");
  app.add_option("--chunk-size", rc.chunk_size, "chunk size for --chunked");
  app.add_option("--head-len", rc.head_len, "response header block length");
  app.add_option("--seed", rc.seed, "workload and schedule seed");
  app.add_flag("--stress", rc.stress, "free-running multi-threaded scheduler");
  app.add_option("--out", rc.out, "report file (default: stdout)");
  app.add_option("--format", rc.format, "csv | jsonl")->check(CLI::IsMember({"csv", "jsonl"}));
  app.add_option("--fault", rc.fault, "fault injection: vpi-corrupt")->check(CLI::IsMember({"vpi-corrupt"}));
  app.add_option("--iterations", rc.iterations, "fuzz workloads to run");
  app.add_option("--fuzz-max-body", rc.fuzz_max_body, "largest fuzzed body");

  auto* run = app.add_subcommand("run", "run the scenario sweep and write a report")->fallthrough();
  auto* fuzz = app.add_subcommand("fuzz", "differential fuzzing of baseline against selective")->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err) == 0 ? 0 : 2;
  }

  try {
    rc.sizes = parse_sizes(sizes);
    if (run->parsed()) return cmd_run(rc, out, err);
    if (fuzz->parsed()) return cmd_fuzz(rc, out, err);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  }
  return 2;
}

}  // namespace selcopy
