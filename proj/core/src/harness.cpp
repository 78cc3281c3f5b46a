#include "cxlsim/harness.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <istream>
#include <memory>
#include <nlohmann/json.hpp>
#include <sstream>

namespace cxlsim {

namespace {

std::string fmt_num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> split_list(std::string_view s) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (start <= s.size()) {
    const auto comma = s.find(',', start);
    const auto end = comma == std::string_view::npos ? s.size() : comma;
    std::string item = trim(s.substr(start, end - start));
    if (!item.empty()) out.push_back(std::move(item));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

double parse_double(const std::string& v) {
  double d = 0;
  const auto r = std::from_chars(v.data(), v.data() + v.size(), d);
  if (r.ec != std::errc() || r.ptr != v.data() + v.size() || !std::isfinite(d)) {
    throw ConfigError("expected a number, got '" + v + "'");
  }
  return d;
}

std::uint64_t parse_uint(const std::string& v) {
  std::uint64_t u = 0;
  const char* b = v.data();
  const char* e = v.data() + v.size();
  std::from_chars_result r{};
  if (v.size() > 2 && v[0] == '0' && (v[1] == 'x' || v[1] == 'X')) {
    r = std::from_chars(b + 2, e, u, 16);
  } else {
    r = std::from_chars(b, e, u);
  }
  if (r.ec != std::errc() || r.ptr != e) {
    throw ConfigError("expected a non-negative integer, got '" + v + "'");
  }
  return u;
}

std::uint32_t parse_u32(const std::string& v) {
  const std::uint64_t u = parse_uint(v);
  if (u > 0xffffffffULL) throw ConfigError("value '" + v + "' out of range");
  return static_cast<std::uint32_t>(u);
}

bool parse_bool(const std::string& v) {
  if (v == "true" || v == "1" || v == "on") return true;
  if (v == "false" || v == "0" || v == "off") return false;
  throw ConfigError("expected true/false, got '" + v + "'");
}

double nonneg(double d) {
  if (d < 0) throw ConfigError("value must be >= 0");
  return d;
}

struct Key {
  std::string section;
  std::string name;
  std::function<std::string(const SimConfig&)> get;
  std::function<void(SimConfig&, const std::string&)> set;
};

template <typename Acc>
Key dbl(std::string section, std::string name, Acc acc) {
  return {std::move(section), std::move(name),
          [acc](const SimConfig& c) { return fmt_num(acc(const_cast<SimConfig&>(c))); },
          [acc](SimConfig& c, const std::string& v) { acc(c) = nonneg(parse_double(v)); }};
}

template <typename Acc>
Key u32(std::string section, std::string name, Acc acc) {
  return {std::move(section), std::move(name),
          [acc](const SimConfig& c) { return std::to_string(acc(const_cast<SimConfig&>(c))); },
          [acc](SimConfig& c, const std::string& v) { acc(c) = parse_u32(v); }};
}

template <typename Acc>
Key u64(std::string section, std::string name, Acc acc) {
  return {std::move(section), std::move(name),
          [acc](const SimConfig& c) { return std::to_string(acc(const_cast<SimConfig&>(c))); },
          [acc](SimConfig& c, const std::string& v) { acc(c) = parse_uint(v); }};
}

template <typename Acc>
Key boolean(std::string section, std::string name, Acc acc) {
  return {std::move(section), std::move(name),
          [acc](const SimConfig& c) {
            return std::string(acc(const_cast<SimConfig&>(c)) ? "true" : "false");
          },
          [acc](SimConfig& c, const std::string& v) { acc(c) = parse_bool(v); }};
}

template <typename Acc>
Key str(std::string section, std::string name, Acc acc) {
  return {std::move(section), std::move(name),
          [acc](const SimConfig& c) { return acc(const_cast<SimConfig&>(c)); },
          [acc](SimConfig& c, const std::string& v) { acc(c) = v; }};
}

std::string join(const std::vector<std::string>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + v[i];
  return s;
}

const std::vector<Key>& keys() {
  static const std::vector<Key> k = [] {
    std::vector<Key> v;
#define L(f) [](SimConfig& c) -> auto& { return c.latency.f; }
#define D(f) [](SimConfig& c) -> auto& { return c.dma.f; }
#define T(f) [](SimConfig& c) -> auto& { return c.topology.f; }
#define N(f) [](SimConfig& c) -> auto& { return c.nic.f; }
#define W(f) [](SimConfig& c) -> auto& { return c.workload.f; }
    v.push_back({"run", "profile", [](const SimConfig& c) { return c.profile; },
                 [](SimConfig&, const std::string&) {}});
    v.push_back(u64("run", "seed", [](SimConfig& c) -> auto& { return c.seed; }));
    v.push_back({"run", "device",
                 [](const SimConfig& c) {
                   return std::string(c.device == DeviceKind::CxlNic ? "cxl-nic" : "pcie-nic");
                 },
                 [](SimConfig& c, const std::string& s) {
                   if (s == "cxl-nic") {
                     c.device = DeviceKind::CxlNic;
                   } else if (s == "pcie-nic") {
                     c.device = DeviceKind::PcieNic;
                   } else {
                     throw ConfigError("expected cxl-nic or pcie-nic, got '" + s + "'");
                   }
                 }});
    v.push_back(str("run", "out", [](SimConfig& c) -> auto& { return c.out_dir; }));

    v.push_back(u64("engine", "max_events", [](SimConfig& c) -> auto& { return c.max_events; }));

    v.push_back(dbl("latency", "t_hmc_hit", L(t_hmc_hit)));
    v.push_back(dbl("latency", "t_link_d2h", L(t_link_d2h)));
    v.push_back(dbl("latency", "t_link_h2d", L(t_link_h2d)));
    v.push_back(dbl("latency", "t_llc_service", L(t_llc_service)));
    v.push_back(dbl("latency", "t_dram", L(t_dram)));
    v.push_back(dbl("latency", "t_cxlmem_adder", L(t_cxlmem_adder)));
    v.push_back(dbl("latency", "host_occupancy", L(host_occupancy)));
    v.push_back(dbl("latency", "mem_occupancy", L(mem_occupancy)));
    v.push_back(dbl("latency", "hmc_occupancy", L(hmc_occupancy)));
    v.push_back(dbl("latency", "t_l1_hit", L(t_l1_hit)));
    v.push_back(u32("latency", "credits", L(credits)));
    v.push_back(u32("latency", "device_mhz", L(device_mhz)));
    v.push_back({"latency", "numa_adders",
                 [](const SimConfig& c) {
                   std::vector<std::string> s;
                   for (double a : c.latency.numa_adders) s.push_back(fmt_num(a));
                   return join(s);
                 },
                 [](SimConfig& c, const std::string& s) {
                   const auto items = split_list(s);
                   if (items.size() != kNumaNodes) {
                     throw ConfigError("expected " + std::to_string(kNumaNodes) + " values");
                   }
                   for (std::size_t i = 0; i < items.size(); ++i) {
                     c.latency.numa_adders[i] = nonneg(parse_double(items[i]));
                   }
                 }});

    v.push_back(dbl("dma", "t_setup", D(t_setup)));
    v.push_back(dbl("dma", "t_desc_issue", D(t_desc_issue)));
    v.push_back(u32("dma", "link_bytes_per_cycle", D(link_bytes_per_cycle)));
    v.push_back(u32("dma", "freq_mhz", D(freq_mhz)));
    v.push_back(dbl("dma", "link_efficiency", D(link_efficiency)));
    v.push_back(u32("dma", "max_outstanding", D(max_outstanding)));
    v.push_back(boolean("dma", "write_ack_required", D(write_ack_required)));

    v.push_back(u32("topology", "cores", T(cores)));
    v.push_back(u64("topology", "l1_bytes", T(l1_bytes)));
    v.push_back(u32("topology", "l1_ways", T(l1_ways)));
    v.push_back(u64("topology", "hmc_bytes", T(hmc_bytes)));
    v.push_back(u32("topology", "hmc_ways", T(hmc_ways)));
    v.push_back(u64("topology", "host_size", T(map.host_size)));
    v.push_back(u64("topology", "device_base", T(map.device_base)));
    v.push_back(u64("topology", "device_size", T(map.device_size)));

    v.push_back(u32("nic", "pe_count", N(pe_count)));
    v.push_back(u32("nic", "rao_modify_cycles", N(rao_modify_cycles)));
    v.push_back(u32("nic", "rao_write_cycles", N(rao_write_cycles)));
    v.push_back(dbl("nic", "copy_ns", N(copy_ns)));
    v.push_back(dbl("nic", "mmio_ns", N(mmio_ns)));
    v.push_back(dbl("nic", "rpcnic_field_ns", N(rpcnic_field_ns)));
    v.push_back(u32("nic", "temp_buffer_bytes", N(temp_buffer_bytes)));
    v.push_back(dbl("nic", "dec_msg_ns", N(dec_msg_ns)));
    v.push_back(dbl("nic", "dec_field_cycles", N(dec_field_cycles)));
    v.push_back(dbl("nic", "dec_nested_cycles", N(dec_nested_cycles)));
    v.push_back(dbl("nic", "dec_bytes_per_cycle", N(dec_bytes_per_cycle)));
    v.push_back(dbl("nic", "enc_msg_ns", N(enc_msg_ns)));
    v.push_back(dbl("nic", "enc_field_cycles", N(enc_field_cycles)));
    v.push_back(dbl("nic", "enc_bytes_per_cycle", N(enc_bytes_per_cycle)));
    v.push_back(dbl("nic", "devmem_read_ns", N(devmem_read_ns)));
    v.push_back(dbl("nic", "devmem_occupancy_ns", N(devmem_occupancy_ns)));
    v.push_back(dbl("nic", "construct_field_ns", N(construct_field_ns)));
    v.push_back(dbl("nic", "construct_line_ns", N(construct_line_ns)));
    v.push_back(u32("nic", "cxlmem_write_mlp", N(cxlmem_write_mlp)));
    v.push_back(u32("nic", "prefetch_table_size", N(prefetch.table_size)));
    v.push_back(u32("nic", "prefetch_degree", N(prefetch.degree)));
    v.push_back(u32("nic", "prefetch_threshold", N(prefetch.threshold)));
    v.push_back(u64("nic", "prefetch_region_bytes", N(prefetch.region_bytes)));

    v.push_back({"workload", "numa_node",
                 [](const SimConfig& c) { return std::to_string(c.workload.numa_node); },
                 [](SimConfig& c, const std::string& s) {
                   const std::uint64_t n = parse_uint(s);
                   if (n >= kNumaNodes) throw ConfigError("NUMA node out of range");
                   c.workload.numa_node = static_cast<int>(n);
                 }});
    v.push_back(u32("workload", "latency_trials", W(latency_trials)));
    v.push_back(u32("workload", "bandwidth_trials", W(bandwidth_trials)));
    v.push_back({"workload", "dma_sizes",
                 [](const SimConfig& c) {
                   std::vector<std::string> s;
                   for (auto x : c.workload.dma_sizes) s.push_back(std::to_string(x));
                   return join(s);
                 },
                 [](SimConfig& c, const std::string& s) {
                   c.workload.dma_sizes.clear();
                   for (const auto& it : split_list(s)) {
                     const auto x = parse_uint(it);
                     if (x == 0) throw ConfigError("DMA size must be > 0");
                     c.workload.dma_sizes.push_back(x);
                   }
                 }});
    v.push_back(u32("workload", "dma_stream", W(dma_stream)));
    v.push_back(u64("workload", "rao_ops", W(rao_ops)));
    v.push_back(u64("workload", "rao_region_bytes", W(rao_region_bytes)));
    v.push_back({"workload", "rao_patterns",
                 [](const SimConfig& c) {
                   std::vector<std::string> s;
                   for (auto k : c.workload.rao_patterns) s.emplace_back(to_string(k));
                   return join(s);
                 },
                 [](SimConfig& c, const std::string& s) {
                   c.workload.rao_patterns.clear();
                   for (const auto& it : split_list(s)) {
                     c.workload.rao_patterns.push_back(parse_circus_kind(it));
                   }
                 }});
    v.push_back(str("workload", "rao_cxl_profile", W(rao_cxl_profile)));
    v.push_back(str("workload", "rao_pcie_profile", W(rao_pcie_profile)));
    v.push_back(u32("workload", "rpc_messages", W(rpc_messages)));
    v.push_back({"workload", "rpc_benches",
                 [](const SimConfig& c) {
                   std::vector<std::string> s;
                   for (int b : c.workload.rpc_benches) s.push_back(std::to_string(b));
                   return join(s);
                 },
                 [](SimConfig& c, const std::string& s) {
                   c.workload.rpc_benches.clear();
                   for (const auto& it : split_list(s)) {
                     const auto b = parse_uint(it);
                     if (b < 1 || b > 6) throw ConfigError("bench must be in 1..6");
                     c.workload.rpc_benches.push_back(static_cast<int>(b));
                   }
                 }});
    v.push_back(str("workload", "rpc_profile", W(rpc_profile)));
#undef L
#undef D
#undef T
#undef N
#undef W
    return v;
  }();
  return k;
}

const std::vector<std::string>& section_order() {
  static const std::vector<std::string> s{"run",      "engine", "latency", "dma",
                                          "topology", "nic",    "workload"};
  return s;
}

std::vector<std::uint64_t> default_dma_sizes() {
  std::vector<std::uint64_t> v;
  for (std::uint64_t s = 64; s <= 256 * 1024; s *= 2) v.push_back(s);
  return v;
}

void validate_all(const SimConfig& c) {
  c.latency.validate();
  c.dma.validate();
  c.nic.validate();
  for (const auto& p : {c.workload.rao_cxl_profile, c.workload.rao_pcie_profile,
                        c.workload.rpc_profile}) {
    (void)lookup_profile(p);
  }
  if (c.max_events < 1) throw ConfigError("field 'max_events' must be >= 1");
  if (c.topology.cores < 1) throw ConfigError("field 'cores' must be >= 1");
  if (c.workload.latency_trials < 1 || c.workload.bandwidth_trials < 1) {
    throw ConfigError("trial counts must be >= 1");
  }
  if (c.workload.dma_stream < 2) throw ConfigError("field 'dma_stream' must be >= 2");
  if (c.workload.rao_ops < 1) throw ConfigError("field 'rao_ops' must be >= 1");
  if (c.workload.rpc_messages < 1) throw ConfigError("field 'rpc_messages' must be >= 1");
}

}  // namespace

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

SimConfig default_config(std::string_view profile) {
  const Profile p = lookup_profile(profile);
  SimConfig c;
  c.profile = p.name;
  c.latency = p.latency;
  c.dma = p.dma;
  c.workload.dma_sizes = default_dma_sizes();
  c.workload.rao_patterns = circus_kinds();
  return c;
}

std::string SimConfig::render() const {
  std::ostringstream os;
  bool first = true;
  for (const auto& sec : section_order()) {
    os << (first ? "" : "\n") << "[" << sec << "]\n";
    first = false;
    for (const Key& k : keys()) {
      if (k.section == sec) os << k.name << " = " << k.get(*this) << "\n";
    }
  }
  return os.str();
}

std::string SimConfig::digest() const {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : render()) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

SimConfig parse_config(std::istream& is, std::string_view source) {
  struct Entry {
    std::string section, key, value;
    int line;
  };
  std::vector<Entry> entries;
  std::string section;
  std::string raw;
  int lineno = 0;
  auto fail = [&](int line, const std::string& what) -> ConfigError {
    return ConfigError(std::string(source) + ":" + std::to_string(line) + ": " + what);
  };
  std::map<std::string, int> seen_sections;
  while (std::getline(is, raw)) {
    ++lineno;
    std::string line = raw;
    if (auto h = line.find_first_of("#;"); h != std::string::npos) line.erase(h);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw fail(lineno, "malformed section header '" + line + "'");
      section = trim(std::string_view(line).substr(1, line.size() - 2));
      if (std::find(section_order().begin(), section_order().end(), section) ==
          section_order().end()) {
        throw fail(lineno, "unknown section '" + section + "'");
      }
      if (seen_sections.contains(section)) {
        throw fail(lineno, "duplicate section '" + section + "'");
      }
      seen_sections[section] = lineno;
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw fail(lineno, "expected 'key = value', got '" + line + "'");
    const std::string key = trim(std::string_view(line).substr(0, eq));
    const std::string value = trim(std::string_view(line).substr(eq + 1));
    if (section.empty()) throw fail(lineno, "key '" + key + "' outside of any section");
    if (key.empty()) throw fail(lineno, "missing key");
    for (const Entry& e : entries) {
      if (e.section == section && e.key == key) {
        throw fail(lineno, "duplicate key '" + key + "' (first set on line " +
                               std::to_string(e.line) + ")");
      }
    }
    const bool known = std::any_of(keys().begin(), keys().end(), [&](const Key& k) {
      return k.section == section && k.name == key;
    });
    if (!known) throw fail(lineno, "unknown key '" + key + "' in section [" + section + "]");
    if (value.empty()) throw fail(lineno, "key '" + key + "' has no value");
    entries.push_back({section, key, value, lineno});
  }
  if (!seen_sections.contains("run")) {
    throw ConfigError(std::string(source) + ": missing required section [run]");
  }
  auto prof = std::find_if(entries.begin(), entries.end(), [](const Entry& e) {
    return e.section == "run" && e.key == "profile";
  });
  if (prof == entries.end()) {
    throw fail(seen_sections["run"], "section [run] requires key 'profile'");
  }
  SimConfig c;
  try {
    c = default_config(prof->value);
  } catch (const ConfigError& e) {
    throw fail(prof->line, std::string("key 'profile': ") + e.what());
  }
  for (const Entry& e : entries) {
    const Key& k = *std::find_if(keys().begin(), keys().end(), [&](const Key& kk) {
      return kk.section == e.section && kk.name == e.key;
    });
    try {
      k.set(c, e.value);
    } catch (const ConfigError& err) {
      throw fail(e.line, "key '" + e.key + "': " + err.what());
    }
    c.overrides[e.section + "." + e.key] = e.value;
  }
  try {
    validate_all(c);
  } catch (const ConfigError& err) {
    throw ConfigError(std::string(source) + ": " + err.what());
  }
  return c;
}

SimConfig parse_config_text(std::string_view text) {
  std::istringstream is{std::string(text)};
  return parse_config(is);
}

SimConfig load_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open config '" + path + "'");
  return parse_config(f, path);
}

// ---------------------------------------------------------------------------
// Report
// ---------------------------------------------------------------------------

Metric& Report::add(std::string name, std::string unit) {
  metrics.push_back({name, StatSeries(name, std::move(unit))});
  return metrics.back();
}

const Metric& Report::at(std::string_view name) const {
  for (const Metric& m : metrics) {
    if (m.name == name) return m;
  }
  throw UsageError("report has no metric '" + std::string(name) + "'");
}

bool Report::has(std::string_view name) const {
  return std::any_of(metrics.begin(), metrics.end(),
                     [&](const Metric& m) { return m.name == name; });
}

namespace {

struct Summary {
  std::size_t n;
  double median, p25, p75, mean, stddev;
};

double rounded(double v) { return std::stod(fmt_num(v)); }

Summary summarize(const StatSeries& s) {
  return {s.size(), rounded(s.median()), rounded(s.percentile(0.25)),
          rounded(s.percentile(0.75)), rounded(s.mean()), rounded(s.stddev())};
}

}  // namespace

std::string render_csv(const Report& r) {
  std::ostringstream os;
  os << "experiment,metric,unit,n,median,p25,p75,mean,stddev\n";
  for (const Metric& m : r.metrics) {
    const Summary s = summarize(m.series);
    os << r.experiment << ',' << m.name << ',' << m.series.unit() << ',' << s.n << ','
       << fmt_num(s.median) << ',' << fmt_num(s.p25) << ',' << fmt_num(s.p75) << ','
       << fmt_num(s.mean) << ',' << fmt_num(s.stddev) << '\n';
  }
  return os.str();
}

std::string render_json(const Report& r) {
  nlohmann::ordered_json j;
  j["experiment"] = r.experiment;
  j["config_digest"] = r.config_digest;
  j["config"] = r.config_text;
  auto arr = nlohmann::ordered_json::array();
  for (const Metric& m : r.metrics) {
    const Summary s = summarize(m.series);
    nlohmann::ordered_json row;
    row["experiment"] = r.experiment;
    row["metric"] = m.name;
    row["unit"] = m.series.unit();
    row["n"] = s.n;
    row["median"] = s.median;
    row["p25"] = s.p25;
    row["p75"] = s.p75;
    row["mean"] = s.mean;
    row["stddev"] = s.stddev;
    arr.push_back(std::move(row));
  }
  j["metrics"] = std::move(arr);
  return j.dump(2) + "\n";
}

std::string render_raw(const Report& r) {
  std::ostringstream os;
  os << "# experiment " << r.experiment << "\n# config_digest " << r.config_digest << "\n";
  std::istringstream cfg(r.config_text);
  for (std::string line; std::getline(cfg, line);) os << "# " << line << "\n";
  os << "metric,unit,index,value\n";
  for (const Metric& m : r.metrics) {
    const auto& v = m.series.samples();
    for (std::size_t i = 0; i < v.size(); ++i) {
      os << m.name << ',' << m.series.unit() << ',' << i << ',' << fmt_num(v[i]) << '\n';
    }
  }
  return os.str();
}

void emit_report(const Report& r, std::string_view format, const std::string& path) {
  std::string body;
  if (format == "csv") {
    body = render_csv(r);
  } else if (format == "json") {
    body = render_json(r);
  } else {
    throw UsageError("unknown report format '" + std::string(format) + "'");
  }
  auto write = [](const std::string& p, const std::string& text) {
    std::ofstream f(p, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write '" + p + "'");
    f << text;
    if (!f) throw std::runtime_error("write failed for '" + p + "'");
  };
  write(path, body);
  write(path + ".raw", render_raw(r));
}

// ---------------------------------------------------------------------------
// Measurements
// ---------------------------------------------------------------------------

StatSeries measure_tier_latency(const SimConfig& cfg, Tier tier, int node,
                                std::uint32_t trials, std::ostream* coh_trace) {
  Simulator sim(cfg.max_events);
  CoherentSystem coh(sim, cfg.latency, cfg.topology);
  coh.set_trace_stream(coh_trace);
  const LsuTrace t = gen_lsu(tier, LsuMode::Latency, node, cfg.topology.map);
  StatSeries s(std::string(to_string(tier)), "ns");
  for (std::uint32_t trial = 0; trial < trials; ++trial) {
    for (const auto& w : t.warmup) coh.place_in(w.line, w.place);
    std::function<void(std::size_t)> issue = [&](std::size_t i) {
      if (i == t.accesses.size()) return;
      const SimTime start = sim.now();
      coh.device_load(t.accesses[i].line, [&, i, start](const AccessResult&) {
        s.add((sim.now() - start).ns());
        issue(i + 1);
      });
    };
    issue(0);
    sim.run_to_completion();
  }
  return s;
}

StatSeries measure_tier_bandwidth(const SimConfig& cfg, Tier tier, std::uint32_t trials,
                                  std::ostream* coh_trace) {
  Simulator sim(cfg.max_events);
  CoherentSystem coh(sim, cfg.latency, cfg.topology);
  coh.set_trace_stream(coh_trace);
  const LsuTrace t = gen_lsu(tier, LsuMode::Bandwidth, cfg.workload.numa_node,
                             cfg.topology.map);
  StatSeries s(std::string(to_string(tier)), "GB/s");
  for (std::uint32_t trial = 0; trial < trials; ++trial) {
    for (const auto& w : t.warmup) coh.place_in(w.line, w.place);
    std::vector<SimTime> done;
    done.reserve(t.accesses.size());
    for (const auto& a : t.accesses) {
      coh.device_load(a.line, [&](const AccessResult&) { done.push_back(sim.now()); });
    }
    sim.run_to_completion();
    std::sort(done.begin(), done.end());
    const double span = (done.back() - done.front()).ns();
    s.add(span > 0 ? static_cast<double>(done.size() - 1) * kLineBytes / span : 0.0);
  }
  return s;
}

double dma_isolated_latency_ns(const DmaConfig& dma, std::uint64_t size) {
  Simulator sim;
  DmaEngine eng(sim, dma);
  double lat = 0;
  eng.transfer(DmaKind::Read, Address(0), size, [&](const DmaEngine::Completion& c) {
    lat = (c.completed - c.issued).ns();
  });
  sim.run_to_completion();
  return lat;
}

double dma_stream_gbps(const DmaConfig& dma, std::uint64_t size, std::uint32_t count) {
  Simulator sim;
  DmaEngine eng(sim, dma);
  std::vector<SimTime> done;
  for (std::uint32_t i = 0; i < count; ++i) {
    eng.transfer(DmaKind::Read, Address(i * size), size,
                 [&](const DmaEngine::Completion& c) { done.push_back(c.completed); });
  }
  sim.run_to_completion();
  std::sort(done.begin(), done.end());
  const double span = (done.back() - done.front()).ns();
  return span > 0 ? static_cast<double>(count - 1) * static_cast<double>(size) / span : 0.0;
}

RaoResult run_rao(const SimConfig& cfg, const Profile& profile, DeviceKind dev,
                  const std::vector<RaoRequest>& reqs, const RunOptions& opt) {
  std::ostream* nic_trace = opt.nic_trace;
  Simulator sim(cfg.max_events);
  CoherentSystem coh(sim, profile.latency, cfg.topology);
  coh.set_trace_stream(opt.coherence_trace);
  NicTrace trace;
  trace.set_stream(nic_trace);
  RaoResult res;
  res.ops = reqs.size();
  SimTime last;
  auto cb = [&](const RaoResponse& r) {
    last = max(last, r.completion);
    if (r.error) ++res.errors;
  };
  if (dev == DeviceKind::CxlNic) {
    CxlRaoNic nic(sim, coh, cfg.nic, nic_trace ? &trace : nullptr);
    for (const auto& r : reqs) nic.submit(r, cb);
    sim.run_to_completion();
  } else {
    DmaEngine dma(sim, profile.dma);
    PcieRaoNic nic(sim, dma, coh, cfg.nic, nic_trace ? &trace : nullptr);
    for (const auto& r : reqs) nic.submit(r, cb);
    sim.run_to_completion();
  }
  res.makespan_ns = last.ns();
  return res;
}

namespace {

constexpr std::uint64_t kArenaOffset = 64ULL << 20;
constexpr std::uint64_t kSlabOffset = 256ULL << 20;
constexpr std::uint64_t kSlabBytes = 64 * 1024;
constexpr std::uint32_t kSlabs = 1024;

/// Runs `n` operations back to back; `step(i, finish)` must call finish()
/// once operation i completes. Returns per-operation latencies.
std::vector<double> run_sequential(Simulator& sim, std::size_t n,
                                   const std::function<void(std::size_t, std::function<void()>)>& step) {
  std::vector<double> lat;
  lat.reserve(n);
  std::function<void(std::size_t)> next = [&](std::size_t i) {
    if (i == n) return;
    const SimTime start = sim.now();
    step(i, [&, i, start]() {
      lat.push_back((sim.now() - start).ns());
      sim.schedule([&, i]() { next(i + 1); });
    });
  };
  next(0);
  sim.run_to_completion();
  if (lat.size() != n) throw SimFault("sequential run stalled");
  return lat;
}

double sum(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x;
  return s;
}

}  // namespace

struct RpcRun {
  std::vector<double> deser_cxl, deser_rpcnic, ser_rpcnic, ser_mem, ser_cache, ser_prefetch;
  double construct_host = 0;
  double construct_device = 0;
};

namespace {

RpcRun rpc_run(const SimConfig& cfg, const Profile& p, int bench, std::uint32_t messages,
               const RunOptions& opt) {
  std::ostream* nic_trace = opt.nic_trace;
  const RpcBench b = gen_rpc_bench(bench, messages, cfg.seed);
  std::vector<wire::WireBuffer> wires;
  for (const auto& m : b.messages) wires.push_back(wire::encode_message(m, b.schema));
  const Address node = cfg.topology.map.node_base(cfg.workload.numa_node);
  RpcRun out;

  NicTrace trace;
  trace.set_stream(nic_trace);
  NicTrace* tr = nic_trace ? &trace : nullptr;

  auto deser = [&](bool cxl) {
    Simulator sim(cfg.max_events);
    CoherentSystem coh(sim, p.latency, cfg.topology);
    coh.set_trace_stream(opt.coherence_trace);
    DmaEngine dma(sim, p.dma);
    RpcEngine eng(sim, coh, dma, cfg.nic, tr);
    eng.set_ring(node);
    ArenaAllocator arena(node + kArenaOffset);
    return run_sequential(sim, wires.size(), [&](std::size_t i, std::function<void()> fin) {
      auto cb = [fin](const DeserResult&) { fin(); };
      if (cxl) {
        eng.cxl_deserialize(wires[i], b.schema, arena, cb);
      } else {
        eng.rpcnic_deserialize(wires[i], b.schema, arena, cb);
      }
    });
  };
  out.deser_cxl = deser(true);
  out.deser_rpcnic = deser(false);

  // mode: 0 rpcnic, 1 cxl-mem, 2 cxl-cache, 3 cxl-cache+prefetch
  auto ser = [&](int mode) {
    Simulator sim(cfg.max_events);
    CoherentSystem coh(sim, p.latency, cfg.topology);
    coh.set_trace_stream(opt.coherence_trace);
    DmaEngine dma(sim, p.dma);
    RpcEngine eng(sim, coh, dma, cfg.nic, tr);
    eng.set_ring(node);
    const bool device = mode == 1;
    const Address base = device ? Address(cfg.topology.map.device_base) : node + kSlabOffset;
    SlabAllocator slabs(base, kSlabBytes, kSlabs, cfg.seed);
    std::vector<Layout> objs;
    double construct = 0;
    for (const auto& m : b.messages) {
      objs.push_back(eng.construct(m, b.schema, slabs));
      construct += eng.construction_ns(objs.back(), device);
    }
    if (mode == 0) out.construct_host = construct;
    if (mode == 1) out.construct_device = construct;
    return run_sequential(sim, objs.size(), [&](std::size_t i, std::function<void()> fin) {
      auto cb = [fin](const SerResult&) { fin(); };
      switch (mode) {
        case 0: eng.rpcnic_serialize(objs[i], b.schema, cb); break;
        case 1: eng.cxl_serialize(objs[i], b.schema, SerMode::CxlMem, cb); break;
        case 2: eng.cxl_serialize(objs[i], b.schema, SerMode::CxlCache, cb); break;
        default: eng.cxl_serialize(objs[i], b.schema, SerMode::CxlCachePrefetch, cb); break;
      }
    });
  };
  out.ser_rpcnic = ser(0);
  out.ser_mem = ser(1);
  out.ser_cache = ser(2);
  out.ser_prefetch = ser(3);
  return out;
}

}  // namespace

RpcBenchResult run_rpc_bench(const SimConfig& cfg, const Profile& profile, int bench,
                             std::uint32_t messages, const RunOptions& opt) {
  const RpcRun r = rpc_run(cfg, profile, bench, messages, opt);
  RpcBenchResult out;
  out.bench = bench;
  out.deser_cxl_ns = sum(r.deser_cxl);
  out.deser_rpcnic_ns = sum(r.deser_rpcnic);
  out.ser_rpcnic_ns = sum(r.ser_rpcnic);
  out.ser_cxl_mem_ns = sum(r.ser_mem);
  out.ser_cxl_cache_ns = sum(r.ser_cache);
  out.ser_cxl_prefetch_ns = sum(r.ser_prefetch);
  out.construct_host_ns = r.construct_host;
  out.construct_device_ns = r.construct_device;
  return out;
}

// ---------------------------------------------------------------------------
// Suites
// ---------------------------------------------------------------------------

namespace {

void suite_numa(Report& r, const SimConfig& cfg, const RunOptions& opt) {
  for (int n = 0; n < kNumaNodes; ++n) {
    StatSeries s = measure_tier_latency(cfg, Tier::MEM, n, cfg.workload.latency_trials,
                                        opt.coherence_trace);
    Metric& m = r.add("node" + std::to_string(n), "ns");
    m.series = std::move(s);
  }
}

void suite_tier_latency(Report& r, const SimConfig& cfg, const RunOptions& opt) {
  for (Tier t : {Tier::HMC, Tier::LLC, Tier::MEM}) {
    StatSeries s = measure_tier_latency(cfg, t, cfg.workload.numa_node,
                                        cfg.workload.latency_trials, opt.coherence_trace);
    r.add(std::string(to_string(t)), "ns").series = std::move(s);
  }
}

void suite_tier_bandwidth(Report& r, const SimConfig& cfg, const RunOptions& opt) {
  for (Tier t : {Tier::HMC, Tier::LLC, Tier::MEM}) {
    StatSeries s = measure_tier_bandwidth(cfg, t, cfg.workload.bandwidth_trials,
                                          opt.coherence_trace);
    r.add(std::string(to_string(t)), "GB/s").series = std::move(s);
  }
}

void suite_dma(Report& r, const SimConfig& cfg) {
  for (std::uint64_t size : cfg.workload.dma_sizes) {
    r.add("latency." + std::to_string(size) + "B", "ns")
        .series.add(dma_isolated_latency_ns(cfg.dma, size));
  }
  for (std::uint64_t size : cfg.workload.dma_sizes) {
    r.add("bandwidth." + std::to_string(size) + "B", "GB/s")
        .series.add(dma_stream_gbps(cfg.dma, size, cfg.workload.dma_stream));
  }
}

void suite_rao(Report& r, const SimConfig& cfg, const RunOptions& opt) {
  const Profile cxl = lookup_profile(cfg.workload.rao_cxl_profile);
  const Profile pcie = lookup_profile(cfg.workload.rao_pcie_profile);
  for (CircusKind k : cfg.workload.rao_patterns) {
    CircusPattern p;
    p.kind = k;
    p.n_ops = cfg.workload.rao_ops;
    p.region_base = cfg.topology.map.node_base(cfg.workload.numa_node);
    p.region_bytes = cfg.workload.rao_region_bytes;
    p.seed = cfg.seed;
    const auto reqs = gen_circustent(p);
    const RaoResult a = run_rao(cfg, cxl, DeviceKind::CxlNic, reqs, opt);
    const RaoResult b = run_rao(cfg, pcie, DeviceKind::PcieNic, reqs, opt);
    const std::string name(to_string(k));
    r.add(name + ".cxl_throughput", "Mops/s").series.add(a.mops());
    r.add(name + ".pcie_throughput", "Mops/s").series.add(b.mops());
    r.add(name + ".speedup", "x").series.add(b.mops() > 0 ? a.mops() / b.mops() : 0.0);
  }
}

void suite_rpc(Report& r, const SimConfig& cfg, const RunOptions& opt) {
  const Profile p = lookup_profile(cfg.workload.rpc_profile);
  for (int bench : cfg.workload.rpc_benches) {
    const RpcRun run = rpc_run(cfg, p, bench, cfg.workload.rpc_messages, opt);
    const std::string pre = "bench" + std::to_string(bench) + ".";
    auto series = [&](const std::string& name, const std::vector<double>& v) {
      Metric& m = r.add(pre + name, "ns");
      for (double x : v) m.series.add(x);
    };
    series("deser.cxl", run.deser_cxl);
    series("deser.rpcnic", run.deser_rpcnic);
    series("ser.rpcnic", run.ser_rpcnic);
    series("ser.cxl-mem", run.ser_mem);
    series("ser.cxl-cache", run.ser_cache);
    series("ser.cxl-cache+prefetch", run.ser_prefetch);
    const double base = sum(run.ser_rpcnic);
    r.add(pre + "deser_speedup", "x").series.add(sum(run.deser_rpcnic) / sum(run.deser_cxl));
    r.add(pre + "ser_speedup.cxl-mem", "x").series.add(base / sum(run.ser_mem));
    r.add(pre + "ser_speedup.cxl-cache", "x").series.add(base / sum(run.ser_cache));
    r.add(pre + "ser_speedup.cxl-cache+prefetch", "x").series.add(base / sum(run.ser_prefetch));
    r.add(pre + "prefetch_gain", "%")
        .series.add(100.0 * (sum(run.ser_cache) / sum(run.ser_prefetch) - 1.0));
    r.add(pre + "construct_overhead.cxl-mem", "%")
        .series.add(100.0 * (run.construct_device / run.construct_host - 1.0));
  }
}

}  // namespace

Report run_experiment(std::string_view suite, const SimConfig& cfg, const RunOptions& opt) {
  if (std::find(suite_names().begin(), suite_names().end(), suite) == suite_names().end()) {
    throw UsageError("unknown suite '" + std::string(suite) + "'");
  }
  Report r;
  r.experiment = std::string(suite);
  r.config_text = cfg.render();
  r.config_digest = cfg.digest();
  try {
    if (suite == "numa-latency") {
      suite_numa(r, cfg, opt);
    } else if (suite == "tier-latency") {
      suite_tier_latency(r, cfg, opt);
    } else if (suite == "tier-bandwidth") {
      suite_tier_bandwidth(r, cfg, opt);
    } else if (suite == "dma-sweep") {
      suite_dma(r, cfg);
    } else if (suite == "rao") {
      suite_rao(r, cfg, opt);
    } else {
      suite_rpc(r, cfg, opt);
    }
  } catch (const SimFault& e) {
    throw SimFault(std::string(suite) + ": " + e.what());
  }
  return r;
}

// ---------------------------------------------------------------------------
// Calibration
// ---------------------------------------------------------------------------

double CalibrationRow::error_pct() const {
  return std::abs(measured - target) / std::abs(target) * 100.0;
}

std::vector<CalibrationRow> golden_table(std::string_view profile) {
  if (profile != "cxl-fpga-400" && profile != "pcie-fpga-400") {
    throw ConfigError("profile '" + std::string(profile) +
                      "' has no golden table (calibrated profiles: cxl-fpga-400, "
                      "pcie-fpga-400)");
  }
  return {
      {"latency.HMC", "ns", 115.0, 0, 2},
      {"latency.LLC", "ns", 575.6, 0, 2},
      {"latency.MEM", "ns", 688.3, 0, 2},
      {"numa.node7", "ns", 688.0, 0, 2},
      {"numa.node3", "ns", 776.0, 0, 2},
      {"bandwidth.HMC", "GB/s", 25.6, 0, 3},
      {"bandwidth.LLC", "GB/s", 14.10, 0, 5},
      {"bandwidth.MEM", "GB/s", 13.49, 0, 5},
      {"dma.latency.64B", "ns", 2500.0, 0, 10},
      {"dma.bandwidth.64B", "GB/s", 0.92, 0, 5},
      {"dma.bandwidth.256KB", "GB/s", 22.9, 0, 5},
  };
}

CalibrationResult calibrate_check(const SimConfig& cfg) {
  CalibrationResult out;
  out.profile = cfg.profile;
  out.rows = golden_table(cfg.profile);
  const std::uint32_t trials = cfg.workload.latency_trials;
  for (CalibrationRow& row : out.rows) {
    const std::string& m = row.metric;
    if (m == "latency.HMC") {
      row.measured = measure_tier_latency(cfg, Tier::HMC, 7, trials).median();
    } else if (m == "latency.LLC") {
      row.measured = measure_tier_latency(cfg, Tier::LLC, 7, trials).median();
    } else if (m == "latency.MEM") {
      row.measured = measure_tier_latency(cfg, Tier::MEM, 7, trials).median();
    } else if (m == "numa.node7") {
      row.measured = measure_tier_latency(cfg, Tier::MEM, 7, trials).median();
    } else if (m == "numa.node3") {
      row.measured = measure_tier_latency(cfg, Tier::MEM, 3, trials).median();
    } else if (m == "bandwidth.HMC") {
      row.measured = measure_tier_bandwidth(cfg, Tier::HMC, cfg.workload.bandwidth_trials).mean();
    } else if (m == "bandwidth.LLC") {
      row.measured = measure_tier_bandwidth(cfg, Tier::LLC, cfg.workload.bandwidth_trials).mean();
    } else if (m == "bandwidth.MEM") {
      row.measured = measure_tier_bandwidth(cfg, Tier::MEM, cfg.workload.bandwidth_trials).mean();
    } else if (m == "dma.latency.64B") {
      row.measured = dma_isolated_latency_ns(cfg.dma, 64);
    } else if (m == "dma.bandwidth.64B") {
      row.measured = dma_stream_gbps(cfg.dma, 64, cfg.workload.dma_stream);
    } else if (m == "dma.bandwidth.256KB") {
      row.measured = dma_stream_gbps(cfg.dma, 256 * 1024, cfg.workload.dma_stream);
    }
  }
  double total = 0;
  bool all = true;
  for (const auto& row : out.rows) {
    total += row.error_pct();
    all = all && row.pass();
  }
  out.mape = total / static_cast<double>(out.rows.size());
  out.pass = all && out.mape <= 3.0;
  return out;
}

std::string render_calibration(const CalibrationResult& c) {
  std::ostringstream os;
  char buf[160];
  std::snprintf(buf, sizeof buf, "%-22s %-5s %10s %10s %8s %6s  %s\n", "metric", "unit",
                "target", "measured", "err%", "tol%", "result");
  os << "profile " << c.profile << "\n" << buf;
  for (const auto& r : c.rows) {
    std::snprintf(buf, sizeof buf, "%-22s %-5s %10.3f %10.3f %8.3f %6.1f  %s\n",
                  r.metric.c_str(), r.unit.c_str(), r.target, r.measured, r.error_pct(),
                  r.tolerance_pct, r.pass() ? "PASS" : "FAIL");
    os << buf;
  }
  std::snprintf(buf, sizeof buf, "MAPE %.3f%% (limit 3%%)  %s\n", c.mape,
                c.pass ? "PASS" : "FAIL");
  os << buf;
  return os.str();
}

}  // namespace cxlsim
