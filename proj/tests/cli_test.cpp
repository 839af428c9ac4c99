#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "json.hpp"
#include "selcopy/cli.hpp"
#include "selcopy/report.hpp"

using namespace selcopy;
using json = nlohmann::json;

namespace {

struct Invocation {
  int code = 0;
  std::string out;
  std::string err;
};

Invocation invoke(std::vector<std::string> args) {
  args.insert(args.begin(), "selcopy");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  Invocation r;
  r.code = cli_main(static_cast<int>(argv.size()), argv.data(), out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

std::vector<json> rows_of(const std::string& jsonl) {
  std::vector<json> rows;
  std::istringstream in(jsonl);
  for (std::string line; std::getline(in, line);)
    if (!line.empty()) rows.push_back(json::parse(line));
  return rows;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(f), {});
}

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("selcopy_cli_test_" + name);
}

}  // namespace

TEST(ParseSizes, SuffixesAndErrors) {
  EXPECT_EQ(parse_sizes("1K,64k,1M"), (std::vector<std::size_t>{1024, 65536, 1u << 20}));
  EXPECT_EQ(parse_sizes(" 0 , 5 "), (std::vector<std::size_t>{0, 5}));
  EXPECT_EQ(parse_sizes("1G"), (std::vector<std::size_t>{1u << 30}));
  EXPECT_THROW(parse_sizes(""), std::invalid_argument);
  EXPECT_THROW(parse_sizes("1K,,2K"), std::invalid_argument);
  EXPECT_THROW(parse_sizes("12X"), std::invalid_argument);
  EXPECT_THROW(parse_sizes("K"), std::invalid_argument);
}

TEST(Sha256, KnownDigest) {
  const std::string abc = "abc";
  ByteView v(reinterpret_cast<const std::uint8_t*>(abc.data()), abc.size());
  EXPECT_EQ(sha256_hex(v), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST(CmdRun, PairedRowsHaveEqualDigests) {
  auto r = invoke({"run", "--mode", "both", "--sizes", "1K,64K,1M", "--seed", "7", "--format", "jsonl"});
  ASSERT_EQ(r.code, 0) << r.err;
  auto rows = rows_of(r.out);
  ASSERT_EQ(rows.size(), 6u);
  for (std::size_t i = 0; i < rows.size(); i += 2) {
    EXPECT_EQ(rows[i]["mode"], "baseline");
    EXPECT_EQ(rows[i + 1]["mode"], "selective");
    EXPECT_EQ(rows[i]["size"], rows[i + 1]["size"]);
    EXPECT_EQ(rows[i]["transcript_digest"], rows[i + 1]["transcript_digest"]);
    EXPECT_EQ(rows[i]["ok"], true);
    EXPECT_EQ(rows[i + 1]["ok"], true);
    EXPECT_EQ(rows[i + 1]["vpis_issued"], rows[i + 1]["vpis_expected"]);
  }
}

TEST(CmdRun, ChunkedIssuesOneIdentifierPerChunk) {
  auto r = invoke({"run", "--mode", "selective", "--chunked", "--sizes", "1M", "--format", "jsonl",
                   "--connections", "2", "--messages", "2"});
  ASSERT_EQ(r.code, 0) << r.err;
  auto rows = rows_of(r.out);
  ASSERT_EQ(rows.size(), 1u);
  // 1 MiB in 16 KiB chunks, four responses.
  EXPECT_EQ(rows[0]["vpis_expected"], 4 * 64);
  EXPECT_EQ(rows[0]["vpis_issued"], 4 * 64);
}

TEST(CmdRun, ZeroSizeMovesNoPayload) {
  auto r = invoke({"run", "--sizes", "0", "--format", "jsonl"});
  ASSERT_EQ(r.code, 0) << r.err;
  for (const auto& row : rows_of(r.out)) {
    EXPECT_EQ(row["vpis_issued"], 0);
    EXPECT_EQ(row["meta_skb_trans_count"], 0);
    EXPECT_EQ(row["meta_skb_trans_bytes"], 0);
    EXPECT_EQ(row["split_copy_bytes"], 0);
    EXPECT_EQ(row["ok"], true);
  }
}

TEST(CmdRun, CsvHeaderMatchesColumns) {
  auto r = invoke({"run", "--sizes", "1K", "--mode", "baseline"});
  ASSERT_EQ(r.code, 0) << r.err;
  std::istringstream in(r.out);
  std::string header;
  std::getline(in, header);
  std::string want;
  for (const auto& c : report_columns()) want += (want.empty() ? "" : ",") + c;
  EXPECT_EQ(header, want);
}

TEST(CmdRun, ReportsAreByteIdenticalAcrossRuns) {
  auto a = temp_path("a.csv"), b = temp_path("b.csv");
  ASSERT_EQ(invoke({"run", "--sizes", "1K,64K", "--seed", "3", "--out", a.string()}).code, 0);
  ASSERT_EQ(invoke({"run", "--sizes", "1K,64K", "--seed", "3", "--out", b.string()}).code, 0);
  EXPECT_FALSE(slurp(a).empty());
  EXPECT_EQ(slurp(a), slurp(b));
  std::filesystem::remove(a);
  std::filesystem::remove(b);
}

TEST(CmdRun, ConfigFileWithCommandLineOverride) {
  auto cfg = temp_path("run.ini");
  {
    std::ofstream f(cfg);
    f << "mode=selective\nsizes=\"2K\"\nformat=jsonl\nconnections=1\n";
  }
  auto r = invoke({"run", "--config", cfg.string(), "--sizes", "3K"});
  ASSERT_EQ(r.code, 0) << r.err;
  auto rows = rows_of(r.out);
  ASSERT_EQ(rows.size(), 1u);
  EXPECT_EQ(rows[0]["mode"], "selective");
  EXPECT_EQ(rows[0]["size"], 3072);
  EXPECT_EQ(rows[0]["connections"], 1);
  std::filesystem::remove(cfg);
}

TEST(CmdRun, FaultModeNeverReachesFastPath) {
  auto r = invoke({"run", "--fault", "vpi-corrupt", "--sizes", "64K", "--format", "jsonl"});
  ASSERT_EQ(r.code, 0) << r.err;
  auto rows = rows_of(r.out);
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[0]["transcript_digest"], rows[1]["transcript_digest"]);
  EXPECT_EQ(rows[1]["vpis_issued"], 0);
  EXPECT_EQ(rows[1]["fastpath_messages"], 0);
  EXPECT_GT(rows[1]["bypass_messages"].get<int>(), 0);
}

TEST(CmdFuzz, ZeroIterationsSucceeds) {
  auto r = invoke({"fuzz", "--iterations", "0"});
  EXPECT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("0 workloads passed"), std::string::npos);
}

TEST(CmdFuzz, SmallBatchWithSeedLog) {
  auto log = temp_path("seeds.txt");
  auto r = invoke({"fuzz", "--iterations", "20", "--seed", "500", "--fuzz-max-body", "65536", "--out", log.string()});
  EXPECT_EQ(r.code, 0) << r.err;
  auto text = slurp(log);
  EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 20);
  EXPECT_EQ(text.find("fail"), std::string::npos);
  std::filesystem::remove(log);
}

TEST(CliErrors, InvalidInputsAreUsageErrors) {
  EXPECT_EQ(invoke({"run", "--mode", "fast"}).code, 2);
  EXPECT_EQ(invoke({"run", "--format", "xml"}).code, 2);
  EXPECT_EQ(invoke({"run", "--fault", "drop"}).code, 2);
  EXPECT_EQ(invoke({"run", "--chunk-size", "16K"}).code, 2);
  EXPECT_EQ(invoke({"--help"}).code, 0);
  EXPECT_EQ(invoke({"run", "--sizes", "1Q"}).code, 2);
  EXPECT_EQ(invoke({"run", "--connections", "0"}).code, 2);
  EXPECT_EQ(invoke({"run", "--lookahead", "2"}).code, 2);
  EXPECT_NE(invoke({}).code, 0);
  EXPECT_NE(invoke({"bogus"}).code, 0);
}
