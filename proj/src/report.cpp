// SPDX-License-Identifier: Apache-2.0
#include "selcopy/report.hpp"

#include <openssl/evp.h>

#include <iomanip>
#include <memory>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace selcopy {
namespace {

struct DigestCtx {
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx{EVP_MD_CTX_new(), &EVP_MD_CTX_free};

  DigestCtx() {
    if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1)
      throw std::runtime_error("sha256: digest init failed");
  }
  void update(ByteView b) {
    if (EVP_DigestUpdate(ctx.get(), b.data(), b.size()) != 1) throw std::runtime_error("sha256: update failed");
  }
  void update_u64(std::uint64_t v) {
    std::uint8_t le[8];
    for (int i = 0; i < 8; ++i) le[i] = static_cast<std::uint8_t>(v >> (8 * i));
    update(le);
  }
  std::string hex() {
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_DigestFinal_ex(ctx.get(), md, &len) != 1) throw std::runtime_error("sha256: final failed");
    std::ostringstream os;
    for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << int(md[i]);
    return os.str();
  }
};

nlohmann::ordered_json row_json(const ReportRow& r) {
  const Metrics& m = r.metrics;
  nlohmann::ordered_json j;
  j["mode"] = r.mode;
  j["size"] = r.size;
  j["seed"] = r.seed;
  j["connections"] = r.connections;
  j["messages"] = r.messages;
  j["chunked"] = r.chunked;
  j["max_frags"] = r.max_frags;
  j["std_copy_bytes"] = m.std_copy_bytes;
  j["std_alloc_bytes"] = m.std_alloc_bytes;
  j["meta_selcopy_bytes"] = m.meta_selcopy_bytes;
  j["meta_alloc_bytes"] = m.meta_alloc_bytes;
  j["meta_prog_invocations"] = m.meta_prog_invocations;
  j["meta_skb_trans_count"] = m.meta_skb_trans_count;
  j["split_copy_bytes"] = m.split_copy_bytes;
  j["segments_forwarded"] = m.segments_forwarded;
  j["meta_skb_trans_bytes"] = m.meta_skb_trans_bytes;
  j["kernel_to_user_bytes"] = m.kernel_to_user_bytes;
  j["user_to_kernel_bytes"] = m.user_to_kernel_bytes;
  j["vpis_issued"] = m.vpis_issued;
  j["vpis_expected"] = r.vpis_expected;
  j["vpi_hits"] = m.vpi_hits;
  j["vpi_misses"] = m.vpi_misses;
  j["fastpath_messages"] = m.fastpath_messages;
  j["bypass_messages"] = m.bypass_messages;
  j["fallback_connections"] = m.fallback_connections;
  j["degraded_messages"] = m.degraded_messages;
  j["underflow_events"] = m.underflow_events;
  j["lock_double_holds"] = m.lock_double_holds;
  j["peak_anchored_bytes"] = m.peak_anchored_bytes;
  j["synthetic_cost"] = r.synthetic_cost;
  j["to_backend_digest"] = r.to_backend_digest;
  j["to_client_digest"] = r.to_client_digest;
  j["transcript_digest"] = r.transcript_digest;
  j["ok"] = r.ok;
  return j;
}

std::string csv_cell(const nlohmann::ordered_json& v) {
  if (v.is_string()) return v.get<std::string>();
  if (v.is_boolean()) return v.get<bool>() ? "true" : "false";
  if (v.is_number_float()) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(1) << v.get<double>();
    return os.str();
  }
  return v.dump();
}

}  // namespace

std::string sha256_hex(ByteView data) {
  DigestCtx d;
  d.update(data);
  return d.hex();
}

std::string stream_digest(const Transcript& t, bool to_backend) {
  DigestCtx d;
  d.update_u64(t.connections.size());
  for (const auto& c : t.connections) {
    const Bytes& s = to_backend ? c.to_backend : c.to_client;
    d.update_u64(s.size());
    d.update(s);
  }
  return d.hex();
}

std::string transcript_digest(const Transcript& t) {
  DigestCtx d;
  d.update_u64(t.connections.size());
  for (const auto& c : t.connections) {
    d.update_u64(c.to_backend.size());
    d.update(c.to_backend);
    d.update_u64(c.to_client.size());
    d.update(c.to_client);
  }
  return d.hex();
}

ReportRow make_row(const std::string& mode, std::uint64_t size, std::uint64_t seed, const Workload& wl,
                   const ScenarioResult& res, const CostWeights& weights) {
  ReportRow r;
  r.mode = mode;
  r.size = size;
  r.seed = seed;
  r.connections = wl.connections.size();
  for (const auto& c : wl.connections) {
    r.messages += c.exchanges.size();
    for (const auto& ex : c.exchanges) {
      r.chunked = r.chunked || ex.response.framing == Framing::Chunked;
      r.vpis_expected += anchorable_units(ex.request) + anchorable_units(ex.response);
    }
  }
  r.metrics = res.metrics;
  r.synthetic_cost = cost_model_eval(res.metrics, weights);
  r.to_backend_digest = stream_digest(res.transcript, true);
  r.to_client_digest = stream_digest(res.transcript, false);
  r.transcript_digest = transcript_digest(res.transcript);
  r.ok = res.ok();
  return r;
}

std::vector<std::string> report_columns() {
  std::vector<std::string> cols;
  const auto j = row_json(ReportRow{});
  for (const auto& item : j.items()) cols.push_back(item.key());
  return cols;
}

void write_csv(std::ostream& out, const std::vector<ReportRow>& rows) {
  const auto cols = report_columns();
  for (std::size_t i = 0; i < cols.size(); ++i) out << (i ? "," : "") << cols[i];
  out << '\n';
  for (const auto& r : rows) {
    auto j = row_json(r);
    std::size_t i = 0;
    for (const auto& item : j.items()) out << (i++ ? "," : "") << csv_cell(item.value());
    out << '\n';
  }
}

void write_jsonl(std::ostream& out, const std::vector<ReportRow>& rows) {
  for (const auto& r : rows) out << row_json(r).dump() << '\n';
}

}  // namespace selcopy
