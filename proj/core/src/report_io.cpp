#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"
#include "slmaudit/error.hpp"
#include "slmaudit/report.hpp"
#include "slmaudit/text.hpp"

namespace slmaudit {

namespace {

using OJ = nlohmann::ordered_json;

// JSON

template <typename T>
OJ opt(const std::optional<T>& v) {
  return v ? OJ(*v) : OJ(nullptr);
}

template <typename T>
std::optional<T> get_opt(const OJ& j, const char* key) {
  const auto& v = j.at(key);
  if (v.is_null()) return std::nullopt;
  return v.get<T>();
}

template <typename Enum>
Enum parse_or_throw(std::optional<Enum> v, const std::string& name) {
  if (!v) throw DataError("unknown name in report: " + name);
  return *v;
}

OJ to_j(const CellKey& k) {
  return OJ{{"model", k.model_id}, {"dataset", k.dataset_id}, {"variant", to_string(k.variant)},
            {"phrasing", to_string(k.phrasing)}};
}

CellKey key_from(const OJ& j) {
  CellKey k;
  k.model_id = j.at("model").get<std::string>();
  k.dataset_id = j.at("dataset").get<std::string>();
  const auto v = j.at("variant").get<std::string>();
  const auto p = j.at("phrasing").get<std::string>();
  k.variant = parse_or_throw(parse_variant(v), v);
  k.phrasing = parse_or_throw(parse_phrasing(p), p);
  return k;
}

OJ to_j(const CellMetrics& m) {
  OJ j = to_j(m.cell);
  j["n"] = m.n;
  j["accuracy"] = m.accuracy;
  j["ece_token_raw"] = opt(m.ece_token_raw);
  j["ece_token_norm"] = opt(m.ece_token_norm);
  j["mean_token_conf_norm"] = opt(m.mean_token_conf_norm);
  j["n_token_rows"] = m.n_token_rows;
  j["n_token_degenerate"] = m.n_token_degenerate;
  j["n_token_unpredicted"] = m.n_token_unpredicted;
  j["vpr"] = m.vpr;
  j["n_verbal_parsed"] = m.n_verbal_parsed;
  j["ece_verbal"] = opt(m.ece_verbal);
  j["mean_verbal_conf"] = opt(m.mean_verbal_conf);
  j["overconf_vs_acc"] = opt(m.overconf_vs_acc);
  j["overconf_vs_token"] = opt(m.overconf_vs_token);
  j["ece_gap"] = opt(m.ece_gap);
  j["verbal_exclusion"] = opt(m.verbal_exclusion);
  j["coverage_full_fraction"] = m.coverage_full_fraction;
  j["coverage_mass_ratio"] = m.coverage_mass_ratio;
  return j;
}

CellMetrics metrics_from(const OJ& j) {
  CellMetrics m;
  m.cell = key_from(j);
  m.n = j.at("n").get<std::size_t>();
  m.accuracy = j.at("accuracy").get<double>();
  m.ece_token_raw = get_opt<double>(j, "ece_token_raw");
  m.ece_token_norm = get_opt<double>(j, "ece_token_norm");
  m.mean_token_conf_norm = get_opt<double>(j, "mean_token_conf_norm");
  m.n_token_rows = j.at("n_token_rows").get<std::size_t>();
  m.n_token_degenerate = j.at("n_token_degenerate").get<std::size_t>();
  m.n_token_unpredicted = j.at("n_token_unpredicted").get<std::size_t>();
  m.vpr = j.at("vpr").get<double>();
  m.n_verbal_parsed = j.at("n_verbal_parsed").get<std::size_t>();
  m.ece_verbal = get_opt<double>(j, "ece_verbal");
  m.mean_verbal_conf = get_opt<double>(j, "mean_verbal_conf");
  m.overconf_vs_acc = get_opt<double>(j, "overconf_vs_acc");
  m.overconf_vs_token = get_opt<double>(j, "overconf_vs_token");
  m.ece_gap = get_opt<double>(j, "ece_gap");
  m.verbal_exclusion = get_opt<std::string>(j, "verbal_exclusion");
  m.coverage_full_fraction = j.at("coverage_full_fraction").get<double>();
  m.coverage_mass_ratio = j.at("coverage_mass_ratio").get<double>();
  return m;
}

OJ to_j(const BootstrapResult& b) {
  return OJ{{"point", b.point},         {"lo", b.lo},
            {"hi", b.hi},               {"n_resamples", b.n_resamples},
            {"seed", b.seed},           {"unit", to_string(b.unit)},
            {"context", b.context},     {"point_in_ci", b.point_in_ci}};
}

BootstrapResult boot_from(const OJ& j) {
  BootstrapResult b;
  b.point = j.at("point").get<double>();
  b.lo = j.at("lo").get<double>();
  b.hi = j.at("hi").get<double>();
  b.n_resamples = j.at("n_resamples").get<std::size_t>();
  b.seed = j.at("seed").get<std::uint64_t>();
  const auto unit = j.at("unit").get<std::string>();
  if (unit == "example") {
    b.unit = ResamplingUnit::kExample;
  } else if (unit == "paired_example") {
    b.unit = ResamplingUnit::kPairedExample;
  } else if (unit == "cell") {
    b.unit = ResamplingUnit::kCell;
  } else {
    throw DataError("unknown resampling unit: " + unit);
  }
  b.context = j.at("context").get<std::string>();
  b.point_in_ci = j.at("point_in_ci").get<bool>();
  return b;
}

OJ opt_boot(const std::optional<BootstrapResult>& b) { return b ? to_j(*b) : OJ(nullptr); }
std::optional<BootstrapResult> get_opt_boot(const OJ& j, const char* key) {
  const auto& v = j.at(key);
  if (v.is_null()) return std::nullopt;
  return boot_from(v);
}

OJ to_j(const ShiftStats& s) {
  return OJ{{"n", s.n},
            {"mean_abs", s.mean_abs},
            {"median", s.median},
            {"max", s.max},
            {"frac_above_005", s.frac_above_005},
            {"frac_above_020", s.frac_above_020},
            {"abs_deltas", s.abs_deltas}};
}

ShiftStats shift_from(const OJ& j) {
  ShiftStats s;
  s.n = j.at("n").get<std::size_t>();
  s.mean_abs = j.at("mean_abs").get<double>();
  s.median = j.at("median").get<double>();
  s.max = j.at("max").get<double>();
  s.frac_above_005 = j.at("frac_above_005").get<double>();
  s.frac_above_020 = j.at("frac_above_020").get<double>();
  s.abs_deltas = j.at("abs_deltas").get<std::vector<double>>();
  return s;
}

OJ to_j(const BinnedReliability& r) {
  OJ bins = OJ::array();
  for (const auto& b : r.bins) {
    bins.push_back(OJ{{"lower", b.lower},
                      {"upper", b.upper},
                      {"count", b.count},
                      {"mean_confidence", b.mean_confidence},
                      {"accuracy", b.accuracy}});
  }
  return OJ{{"n_bins", r.n_bins}, {"n", r.n}, {"ece", r.ece}, {"bins", bins}};
}

BinnedReliability reliability_from(const OJ& j) {
  BinnedReliability r;
  r.n_bins = j.at("n_bins").get<std::size_t>();
  r.n = j.at("n").get<std::size_t>();
  r.ece = j.at("ece").get<double>();
  for (const auto& b : j.at("bins")) {
    r.bins.push_back({b.at("lower").get<double>(), b.at("upper").get<double>(), b.at("count").get<std::size_t>(),
                      b.at("mean_confidence").get<double>(), b.at("accuracy").get<double>()});
  }
  return r;
}

OJ to_j(const CorrelationResult& c) {
  return OJ{{"rho", c.rho}, {"p_value_t", c.p_value_t}, {"p_value_perm", opt(c.p_value_perm)}, {"n", c.n}};
}

CorrelationResult correlation_from(const OJ& j) {
  CorrelationResult c;
  c.rho = j.at("rho").get<double>();
  c.p_value_t = j.at("p_value_t").get<double>();
  c.p_value_perm = get_opt<double>(j, "p_value_perm");
  c.n = j.at("n").get<std::size_t>();
  return c;
}

Phrasing phrasing_from(const OJ& j) {
  const auto p = j.at("phrasing").get<std::string>();
  return parse_or_throw(parse_phrasing(p), p);
}

OJ report_json(const AuditReport& r) {
  OJ j;
  j["evaluator"] = r.evaluator;
  j["vpr_threshold"] = r.vpr_threshold;
  j["n_bins"] = r.n_bins;
  j["n_resamples"] = r.n_resamples;
  j["seed"] = r.seed;
  j["n_records"] = r.n_records;
  j["generations_retained"] = r.generations_retained;

  OJ cells = OJ::array();
  for (const auto& c : r.cells) cells.push_back(to_j(c));
  j["cells"] = cells;

  OJ gap = OJ::array();
  for (const auto& g : r.gap_recovery_table) {
    gap.push_back(OJ{{"model", g.model_id},
                     {"dataset", g.dataset_id},
                     {"mean_row", g.mean_row},
                     {"nonfc_mean", g.nonfc_mean},
                     {"firstchar", g.firstchar},
                     {"repaired_regex", opt(g.repaired_regex)},
                     {"recovery_regex", opt(g.recovery_regex)},
                     {"repaired_constrained", opt(g.repaired_constrained)},
                     {"recovery_constrained", opt(g.recovery_constrained)},
                     {"drop_ci", opt_boot(g.drop_ci)}});
  }
  j["gap_recovery"] = gap;

  OJ shift = OJ::array();
  for (const auto& s : r.shift_summary) {
    shift.push_back(OJ{{"label", s.label}, {"stats", to_j(s.stats)}, {"mean_ci", to_j(s.mean_ci)}});
  }
  j["shift_summary"] = shift;

  OJ coverage = OJ::array();
  for (const auto& c : r.coverage) {
    coverage.push_back(OJ{{"dataset", c.dataset_id},
                          {"cells_full", c.cells_full},
                          {"cells_total", c.cells_total},
                          {"example_coverage", c.example_coverage},
                          {"min_mass_ratio", c.min_mass_ratio}});
  }
  j["coverage"] = coverage;

  OJ vpr = OJ::array();
  for (const auto& v : r.vpr_matrix) {
    OJ e = to_j(v.cell);
    e["vpr"] = v.vpr;
    e["below_threshold"] = v.below_threshold;
    e["ci"] = to_j(v.ci);
    vpr.push_back(e);
  }
  j["vpr_matrix"] = vpr;

  OJ cal = OJ::array();
  for (const auto& c : r.calibration_summary) {
    cal.push_back(OJ{{"model", c.model_id},
                     {"dataset", c.dataset_id},
                     {"phrasing", to_string(c.phrasing)},
                     {"n_cells", c.n_cells},
                     {"accuracy", c.accuracy},
                     {"ece_token", opt(c.ece_token)},
                     {"ece_verbal", c.ece_verbal},
                     {"ece_gap", opt(c.ece_gap)},
                     {"overconf_vs_acc", c.overconf_vs_acc},
                     {"overconf_vs_token", opt(c.overconf_vs_token)}});
  }
  j["calibration_summary"] = cal;

  OJ signed_cells = OJ::array();
  for (const auto& s : r.signed_cells) {
    OJ e = to_j(s.cell);
    e["overconf_vs_acc"] = to_j(s.overconf_vs_acc);
    e["overconf_vs_token"] = opt_boot(s.overconf_vs_token);
    signed_cells.push_back(e);
  }
  j["signed_cells"] = signed_cells;

  OJ spread = OJ::array();
  for (const auto& s : r.spread_table) {
    OJ acc = OJ::object();
    for (const auto& [v, a] : s.record.per_variant_accuracy) acc[std::string(to_string(v))] = a;
    spread.push_back(OJ{{"model", s.record.model_id},
                        {"dataset", s.record.dataset_id},
                        {"per_variant_accuracy", acc},
                        {"spread", s.record.spread},
                        {"size_billions", opt(s.size_billions)},
                        {"ci", to_j(s.ci)}});
  }
  j["spread_table"] = spread;

  OJ panel = OJ::array();
  for (const auto& p : r.panel) {
    OJ e = to_j(p.result);
    e["dataset"] = p.dataset_id;
    panel.push_back(e);
  }
  j["panel"] = panel;

  OJ rows = OJ::array();
  for (const auto& s : r.sensitivity.rows) {
    OJ means = OJ::array();
    for (const auto& m : s.means) means.push_back(opt(m));
    rows.push_back(OJ{{"model", s.model_id},
                      {"dataset", s.dataset_id},
                      {"phrasing", to_string(s.phrasing)},
                      {"means", means},
                      {"counts", s.counts},
                      {"empty", s.empty}});
  }
  j["threshold_sensitivity"] = OJ{{"thresholds", r.sensitivity.thresholds}, {"rows", rows}};

  OJ excl = OJ::array();
  for (const auto& e : r.exclusions) {
    OJ x = to_j(e.cell);
    x["reason"] = e.reason;
    excl.push_back(x);
  }
  j["exclusions"] = excl;

  OJ rel = OJ::array();
  for (const auto& c : r.reliability) {
    rel.push_back(OJ{{"model", c.model_id},
                     {"dataset", c.dataset_id},
                     {"phrasing", to_string(c.phrasing)},
                     {"token", c.token ? to_j(*c.token) : OJ(nullptr)},
                     {"verbal", to_j(c.verbal)}});
  }
  j["reliability"] = rel;

  OJ items = OJ::array();
  for (const auto& i : r.checklist) {
    items.push_back(OJ{{"number", i.number}, {"topic", i.topic}, {"satisfied", i.satisfied}, {"detail", i.detail}});
  }
  j["checklist"] = items;
  return j;
}

AuditReport report_from(const OJ& j) {
  AuditReport r;
  r.evaluator = j.at("evaluator").get<std::string>();
  r.vpr_threshold = j.at("vpr_threshold").get<double>();
  r.n_bins = j.at("n_bins").get<std::size_t>();
  r.n_resamples = j.at("n_resamples").get<std::size_t>();
  r.seed = j.at("seed").get<std::uint64_t>();
  r.n_records = j.at("n_records").get<std::size_t>();
  r.generations_retained = j.at("generations_retained").get<bool>();
  for (const auto& c : j.at("cells")) r.cells.push_back(metrics_from(c));
  for (const auto& g : j.at("gap_recovery")) {
    GapRecoveryRow row;
    row.model_id = g.at("model").get<std::string>();
    row.dataset_id = g.at("dataset").get<std::string>();
    row.mean_row = g.at("mean_row").get<bool>();
    row.nonfc_mean = g.at("nonfc_mean").get<double>();
    row.firstchar = g.at("firstchar").get<double>();
    row.repaired_regex = get_opt<double>(g, "repaired_regex");
    row.recovery_regex = get_opt<double>(g, "recovery_regex");
    row.repaired_constrained = get_opt<double>(g, "repaired_constrained");
    row.recovery_constrained = get_opt<double>(g, "recovery_constrained");
    row.drop_ci = get_opt_boot(g, "drop_ci");
    r.gap_recovery_table.push_back(std::move(row));
  }
  for (const auto& s : j.at("shift_summary")) {
    r.shift_summary.push_back({s.at("label").get<std::string>(), shift_from(s.at("stats")), boot_from(s.at("mean_ci"))});
  }
  for (const auto& c : j.at("coverage")) {
    r.coverage.push_back({c.at("dataset").get<std::string>(), c.at("cells_full").get<std::size_t>(),
                          c.at("cells_total").get<std::size_t>(), c.at("example_coverage").get<double>(),
                          c.at("min_mass_ratio").get<double>()});
  }
  for (const auto& v : j.at("vpr_matrix")) {
    r.vpr_matrix.push_back({key_from(v), v.at("vpr").get<double>(), v.at("below_threshold").get<bool>(),
                            boot_from(v.at("ci"))});
  }
  for (const auto& c : j.at("calibration_summary")) {
    CalibrationSummaryRow row;
    row.model_id = c.at("model").get<std::string>();
    row.dataset_id = c.at("dataset").get<std::string>();
    row.phrasing = phrasing_from(c);
    row.n_cells = c.at("n_cells").get<std::size_t>();
    row.accuracy = c.at("accuracy").get<double>();
    row.ece_token = get_opt<double>(c, "ece_token");
    row.ece_verbal = c.at("ece_verbal").get<double>();
    row.ece_gap = get_opt<double>(c, "ece_gap");
    row.overconf_vs_acc = c.at("overconf_vs_acc").get<double>();
    row.overconf_vs_token = get_opt<double>(c, "overconf_vs_token");
    r.calibration_summary.push_back(std::move(row));
  }
  for (const auto& s : j.at("signed_cells")) {
    r.signed_cells.push_back({key_from(s), boot_from(s.at("overconf_vs_acc")), get_opt_boot(s, "overconf_vs_token")});
  }
  for (const auto& s : j.at("spread_table")) {
    SpreadRow row;
    row.record.model_id = s.at("model").get<std::string>();
    row.record.dataset_id = s.at("dataset").get<std::string>();
    for (const auto& [name, acc] : s.at("per_variant_accuracy").items()) {
      row.record.per_variant_accuracy[parse_or_throw(parse_variant(name), name)] = acc.get<double>();
    }
    row.record.spread = s.at("spread").get<double>();
    row.size_billions = get_opt<double>(s, "size_billions");
    row.ci = boot_from(s.at("ci"));
    r.spread_table.push_back(std::move(row));
  }
  for (const auto& p : j.at("panel")) r.panel.push_back({p.at("dataset").get<std::string>(), correlation_from(p)});
  const auto& sens = j.at("threshold_sensitivity");
  r.sensitivity.thresholds = sens.at("thresholds").get<std::vector<double>>();
  for (const auto& s : sens.at("rows")) {
    SensitivityRow row;
    row.model_id = s.at("model").get<std::string>();
    row.dataset_id = s.at("dataset").get<std::string>();
    row.phrasing = phrasing_from(s);
    for (const auto& m : s.at("means")) {
      row.means.push_back(m.is_null() ? std::nullopt : std::optional<double>(m.get<double>()));
    }
    row.counts = s.at("counts").get<std::vector<std::size_t>>();
    row.empty = s.at("empty").get<bool>();
    r.sensitivity.rows.push_back(std::move(row));
  }
  for (const auto& e : j.at("exclusions")) r.exclusions.push_back({key_from(e), e.at("reason").get<std::string>()});
  for (const auto& c : j.at("reliability")) {
    ReliabilityCurve curve;
    curve.model_id = c.at("model").get<std::string>();
    curve.dataset_id = c.at("dataset").get<std::string>();
    curve.phrasing = phrasing_from(c);
    if (!c.at("token").is_null()) curve.token = reliability_from(c.at("token"));
    curve.verbal = reliability_from(c.at("verbal"));
    r.reliability.push_back(std::move(curve));
  }
  for (const auto& i : j.at("checklist")) {
    r.checklist.push_back({i.at("number").get<int>(), i.at("topic").get<std::string>(), i.at("satisfied").get<bool>(),
                           i.at("detail").get<std::string>()});
  }
  return r;
}

// text helpers

std::string f3(double v) { return text::fixed(v, 3); }
std::string s3(double v) { return text::signed_fixed(v, 3); }
std::string pct(double fraction) { return text::fixed(fraction * 100.0, 1) + "%"; }
std::string ci3(const BootstrapResult& b) { return "[" + f3(b.lo) + ", " + f3(b.hi) + "]"; }
std::string full(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}
std::string opt_full(const std::optional<double>& v) { return v ? full(*v) : std::string(); }
std::string opt_f3(const std::optional<double>& v) { return v ? f3(*v) : std::string("n/a"); }

std::string csv_field(std::string_view s) {
  if (s.find_first_of(",\"\n\r") == std::string_view::npos) return std::string(s);
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

std::string csv_line(const std::vector<std::string>& fields) {
  std::string line;
  for (std::size_t i = 0; i < fields.size(); ++i) {
    if (i) line += ',';
    line += csv_field(fields[i]);
  }
  return line + "\n";
}

std::string md_row(const std::vector<std::string>& cells) {
  std::string line = "|";
  for (const auto& c : cells) line += " " + c + " |";
  return line + "\n";
}

std::string md_header(const std::vector<std::string>& cells) {
  std::string out = md_row(cells) + "|";
  for (std::size_t i = 0; i < cells.size(); ++i) out += i == 0 ? "---|" : "---:|";
  return out + "\n";
}

std::string provenance(const AuditReport& r, std::string_view unit) {
  return "95% percentile bootstrap CIs; n_resamples=" + std::to_string(r.n_resamples) +
         ", seed=" + std::to_string(r.seed) + ", unit=" + std::string(unit) + ".\n";
}

std::vector<Variant> variants_in(const AuditReport& r) {
  std::set<Variant> present;
  for (const auto& v : r.vpr_matrix) present.insert(v.cell.variant);
  return {present.begin(), present.end()};
}

void write_file(const std::filesystem::path& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out << content;
  if (!out) throw DataError("failed writing " + path.string());
}

std::string reliability_csv(const ReliabilityCurve& c) {
  std::string out = csv_line({"curve", "bin", "lower", "upper", "count", "mean_confidence", "accuracy"});
  auto emit = [&](const char* name, const BinnedReliability& r) {
    for (std::size_t b = 0; b < r.bins.size(); ++b) {
      const auto& bin = r.bins[b];
      out += csv_line({name, std::to_string(b), full(bin.lower), full(bin.upper), std::to_string(bin.count),
                       full(bin.mean_confidence), full(bin.accuracy)});
    }
  };
  emit("verbal", c.verbal);
  if (c.token) emit("token", *c.token);
  return out;
}

std::string file_safe(std::string s) {
  for (char& c : s) {
    if (c == '/' || c == '\\' || c == ' ' || c == ':') c = '-';
  }
  return s;
}

}  // namespace

std::string_view to_string(ReportFormat format) {
  switch (format) {
    case ReportFormat::kMarkdown: return "markdown";
    case ReportFormat::kCsv: return "csv";
    case ReportFormat::kJson: return "json";
  }
  return "markdown";
}

std::optional<ReportFormat> parse_report_format(std::string_view name) {
  if (name == "markdown" || name == "md") return ReportFormat::kMarkdown;
  if (name == "csv") return ReportFormat::kCsv;
  if (name == "json") return ReportFormat::kJson;
  return std::nullopt;
}

std::string report_to_json(const AuditReport& report) { return report_json(report).dump(2) + "\n"; }

AuditReport report_from_json(std::string_view json) {
  try {
    return report_from(OJ::parse(json));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed report JSON: ") + e.what());
  }
}

AuditReport read_report_json(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return report_from_json(ss.str());
}

std::string spread_table_text(std::span<const SpreadRow> rows) {
  std::set<std::string> datasets;
  std::map<std::string, std::optional<double>> sizes;
  std::map<std::pair<std::string, std::string>, const SpreadRow*> cell;
  for (const auto& r : rows) {
    datasets.insert(r.record.dataset_id);
    sizes[r.record.model_id] = r.size_billions;
    cell[{r.record.model_id, r.record.dataset_id}] = &r;
  }
  std::vector<std::pair<std::string, std::optional<double>>> models(sizes.begin(), sizes.end());
  std::stable_sort(models.begin(), models.end(), [](const auto& a, const auto& b) {
    return a.second.value_or(1e300) < b.second.value_or(1e300);
  });
  std::vector<std::string> header{"Model", "Size"};
  header.insert(header.end(), datasets.begin(), datasets.end());
  std::string out = md_header(header);
  for (const auto& [model, size] : models) {
    std::vector<std::string> line{model, size ? text::fixed(*size, 1) + "B" : std::string("n/a")};
    for (const auto& d : datasets) {
      auto it = cell.find({model, d});
      line.push_back(it == cell.end() ? std::string("") : f3(it->second->record.spread) + " " + ci3(it->second->ci));
    }
    out += md_row(line);
  }
  return out;
}

std::string panel_table_text(std::span<const PanelRow> rows) {
  std::string out = md_header({"Dataset", "Spearman rho", "p-value", "p (permutation)", "n"});
  for (const auto& r : rows) {
    out += md_row({r.dataset_id, s3(r.result.rho), f3(r.result.p_value_t),
                   r.result.p_value_perm ? f3(*r.result.p_value_perm) : std::string("n/a"),
                   std::to_string(r.result.n)});
  }
  return out;
}

std::string panel_table_csv(std::span<const PanelRow> rows) {
  std::string out = csv_line({"dataset", "rho", "p_value_t", "p_value_perm", "n"});
  for (const auto& r : rows) {
    out += csv_line({r.dataset_id, full(r.result.rho), full(r.result.p_value_t), opt_full(r.result.p_value_perm),
                     std::to_string(r.result.n)});
  }
  return out;
}

std::string render_markdown(const AuditReport& r) {
  std::string out = "# Reliability audit\n\n";
  out += "Evaluator: " + r.evaluator + ". VPR threshold: " + text::fixed(r.vpr_threshold, 2) +
         ". ECE bins: " + std::to_string(r.n_bins) + ". Records: " + std::to_string(r.n_records) + ".\n\n";

  if (!r.gap_recovery_table.empty()) {
    out += "## Format-change gap recovery\n\n";
    out += md_header({"Model", "Dataset", "Non-fc mean", "First-char", "Path 1 (regex)", "Gap rec.",
                      "Path 2 (constrained)", "Gap rec.", "sp - fc drop [95% CI]"});
    for (const auto& g : r.gap_recovery_table) {
      out += md_row({g.mean_row ? "**Mean**" : g.model_id, g.dataset_id, f3(g.nonfc_mean), f3(g.firstchar),
                     opt_f3(g.repaired_regex), g.recovery_regex ? pct(*g.recovery_regex / 100.0) : "n/a",
                     opt_f3(g.repaired_constrained),
                     g.recovery_constrained ? pct(*g.recovery_constrained / 100.0) : "n/a",
                     g.drop_ci ? f3(g.drop_ci->point) + " " + ci3(*g.drop_ci) : ""});
    }
    out += "\nMean rows apply gap recovery to the column means. " + provenance(r, "paired_example") + "\n";
  }

  if (!r.shift_summary.empty()) {
    out += "## ECE_token normalisation shift\n\n";
    out += md_header({"Variant", "Mean |d| [95% CI]", "Median", "Max", ">0.05", ">0.20", "n"});
    for (const auto& s : r.shift_summary) {
      out += md_row({s.label, f3(s.stats.mean_abs) + " " + ci3(s.mean_ci), f3(s.stats.median), f3(s.stats.max),
                     pct(s.stats.frac_above_005), pct(s.stats.frac_above_020), std::to_string(s.stats.n)});
    }
    out += "\n" + provenance(r, "cell") + "\n";
  }

  if (!r.coverage.empty()) {
    out += "## Top-k label coverage\n\n";
    out += md_header({"Dataset", "Cells with full coverage", "Example-level coverage", "Min mass ratio"});
    for (const auto& c : r.coverage) {
      out += md_row({c.dataset_id, std::to_string(c.cells_full) + " / " + std::to_string(c.cells_total),
                     pct(c.example_coverage), f3(c.min_mass_ratio)});
    }
    out += "\n";
  }

  if (!r.vpr_matrix.empty()) {
    out += "## Verbal parse rate\n\n";
    const std::vector<Variant> variants = variants_in(r);
    std::map<std::pair<std::string, Phrasing>, std::map<std::string, std::map<Variant, const VprEntry*>>> grid;
    for (const auto& v : r.vpr_matrix) grid[{v.cell.model_id, v.cell.phrasing}][v.cell.dataset_id][v.cell.variant] = &v;
    for (const auto& [mp, datasets] : grid) {
      out += "### " + mp.first + " (" + std::string(to_string(mp.second)) + ")\n\n";
      std::vector<std::string> header{"Dataset"};
      for (Variant v : variants) header.emplace_back(to_string(v));
      out += md_header(header);
      for (const auto& [dataset, cells] : datasets) {
        std::vector<std::string> line{dataset};
        for (Variant v : variants) {
          auto it = cells.find(v);
          if (it == cells.end()) {
            line.emplace_back("");
          } else {
            line.push_back(f3(it->second->vpr) + (it->second->below_threshold ? " ×" : "") + " " +
                           ci3(it->second->ci));
          }
        }
        out += md_row(line);
      }
      out += "\n";
    }
    out += "× marks cells below the VPR >= " + text::fixed(r.vpr_threshold, 2) + " inclusion threshold. " +
           provenance(r, "example") + "\n";
  }

  if (!r.calibration_summary.empty()) {
    out += "## Calibration components\n\n";
    out += md_header({"Model", "Dataset", "Phrasing", "n", "Accuracy", "ECE (token)", "ECE (verbal)", "ECE_gap",
                      "verbal - acc", "verbal - tok"});
    for (const auto& c : r.calibration_summary) {
      out += md_row({c.model_id, c.dataset_id, std::string(to_string(c.phrasing)), std::to_string(c.n_cells),
                     f3(c.accuracy), opt_f3(c.ece_token), f3(c.ece_verbal), c.ece_gap ? s3(*c.ece_gap) : "n/a",
                     s3(c.overconf_vs_acc), c.overconf_vs_token ? s3(*c.overconf_vs_token) : "n/a"});
    }
    out += "\nMeans over non-format_change cells with VPR >= " + text::fixed(r.vpr_threshold, 2) + ".\n\n";
  }

  if (!r.signed_cells.empty()) {
    out += "## Signed overconfidence per cell\n\n";
    out += md_header({"Cell", "verbal - acc [95% CI]", "verbal - tok [95% CI]"});
    for (const auto& s : r.signed_cells) {
      out += md_row({s.cell.to_string(), s3(s.overconf_vs_acc.point) + " " + ci3(s.overconf_vs_acc),
                     s.overconf_vs_token ? s3(s.overconf_vs_token->point) + " " + ci3(*s.overconf_vs_token) : "n/a"});
    }
    out += "\n" + provenance(r, "example") + "\n";
  }

  if (!r.spread_table.empty()) {
    out += "## Prompt-perturbation spread\n\n";
    out += spread_table_text(r.spread_table);
    out += "\nmax - min accuracy over the four non-format_change variants. " + provenance(r, "example") + "\n";
    out += md_header({"Model", "Dataset", "surface_paraphrase", "instruction_reorder", "fewshot_3",
                      "implicit_framing", "Spread"});
    for (const auto& s : r.spread_table) {
      std::vector<std::string> line{s.record.model_id, s.record.dataset_id};
      for (Variant v : kSpreadVariants) line.push_back(f3(s.record.per_variant_accuracy.at(v)));
      line.push_back(f3(s.record.spread));
      out += md_row(line);
    }
    out += "\n";
  }

  if (!r.panel.empty()) {
    out += "## Size-spread correlation\n\n" + panel_table_text(r.panel) + "\n";
  }

  if (!r.sensitivity.rows.empty()) {
    out += "## VPR threshold sensitivity (overconf_vs_acc)\n\n";
    std::vector<std::string> header{"Model", "Dataset", "Phrasing"};
    for (double t : r.sensitivity.thresholds) header.push_back(">= " + text::fixed(t, 2) + " [n]");
    out += md_header(header);
    for (const auto& s : r.sensitivity.rows) {
      std::vector<std::string> line{s.model_id, s.dataset_id, std::string(to_string(s.phrasing))};
      for (std::size_t i = 0; i < s.means.size(); ++i) {
        line.push_back((s.means[i] ? s3(*s.means[i]) : std::string("n/a")) + " [" + std::to_string(s.counts[i]) + "]");
      }
      if (s.empty) line.back() += " (no cell passes)";
      out += md_row(line);
    }
    out += "\n";
  }

  if (!r.exclusions.empty()) {
    out += "## Verbal exclusions\n\n";
    for (const auto& e : r.exclusions) out += "- " + e.cell.to_string() + ": " + e.reason + "\n";
    out += "\n";
  }

  out += "## Reporting checklist\n\n";
  for (const auto& i : r.checklist) {
    out += std::to_string(i.number) + ". [" + (i.satisfied ? "x" : " ") + "] " + i.topic + ": " + i.detail + "\n";
  }
  return out;
}

std::vector<std::filesystem::path> emit_report(const AuditReport& r, ReportFormat format,
                                               const std::filesystem::path& out_dir) {
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw DataError("cannot create " + out_dir.string() + ": " + ec.message());
  std::vector<std::filesystem::path> written;
  auto put = [&](const std::string& name, const std::string& content) {
    const auto path = out_dir / name;
    write_file(path, content);
    written.push_back(path);
  };

  switch (format) {
    case ReportFormat::kMarkdown:
      put("report.md", render_markdown(r));
      break;
    case ReportFormat::kJson:
      put("report.json", report_to_json(r));
      break;
    case ReportFormat::kCsv: {
      std::string cells = csv_line({"model", "dataset", "variant", "phrasing", "n", "accuracy", "ece_token_raw",
                                    "ece_token_norm", "mean_token_conf_norm", "n_token_rows", "n_token_degenerate",
                                    "n_token_unpredicted", "vpr", "n_verbal_parsed", "ece_verbal",
                                    "mean_verbal_conf", "overconf_vs_acc", "overconf_vs_token", "ece_gap",
                                    "verbal_exclusion", "coverage_full_fraction", "coverage_mass_ratio"});
      for (const auto& m : r.cells) {
        cells += csv_line({m.cell.model_id, m.cell.dataset_id, std::string(to_string(m.cell.variant)),
                           std::string(to_string(m.cell.phrasing)), std::to_string(m.n), full(m.accuracy),
                           opt_full(m.ece_token_raw), opt_full(m.ece_token_norm), opt_full(m.mean_token_conf_norm),
                           std::to_string(m.n_token_rows), std::to_string(m.n_token_degenerate),
                           std::to_string(m.n_token_unpredicted), full(m.vpr), std::to_string(m.n_verbal_parsed),
                           opt_full(m.ece_verbal), opt_full(m.mean_verbal_conf), opt_full(m.overconf_vs_acc),
                           opt_full(m.overconf_vs_token), opt_full(m.ece_gap), m.verbal_exclusion.value_or(""),
                           full(m.coverage_full_fraction), full(m.coverage_mass_ratio)});
      }
      put("cells.csv", cells);

      std::string gap = csv_line({"model", "dataset", "mean_row", "nonfc_mean", "firstchar", "repaired_regex",
                                  "recovery_regex", "repaired_constrained", "recovery_constrained", "drop", "lo",
                                  "hi", "n_resamples", "seed"});
      for (const auto& g : r.gap_recovery_table) {
        std::vector<std::string> line{g.model_id, g.dataset_id, g.mean_row ? "true" : "false", full(g.nonfc_mean),
                                      full(g.firstchar), opt_full(g.repaired_regex), opt_full(g.recovery_regex),
                                      opt_full(g.repaired_constrained), opt_full(g.recovery_constrained)};
        if (g.drop_ci) {
          for (auto v : {full(g.drop_ci->point), full(g.drop_ci->lo), full(g.drop_ci->hi),
                         std::to_string(g.drop_ci->n_resamples), std::to_string(g.drop_ci->seed)}) {
            line.push_back(v);
          }
        } else {
          line.insert(line.end(), 5, "");
        }
        gap += csv_line(line);
      }
      put("gap_recovery.csv", gap);

      std::string shift = csv_line({"variant", "n", "mean_abs", "lo", "hi", "median", "max", "frac_above_005",
                                    "frac_above_020", "n_resamples", "seed"});
      for (const auto& s : r.shift_summary) {
        shift += csv_line({s.label, std::to_string(s.stats.n), full(s.stats.mean_abs), full(s.mean_ci.lo),
                           full(s.mean_ci.hi), full(s.stats.median), full(s.stats.max), full(s.stats.frac_above_005),
                           full(s.stats.frac_above_020), std::to_string(s.mean_ci.n_resamples),
                           std::to_string(s.mean_ci.seed)});
      }
      put("shift_summary.csv", shift);

      std::string coverage = csv_line({"dataset", "cells_full", "cells_total", "example_coverage", "min_mass_ratio"});
      for (const auto& c : r.coverage) {
        coverage += csv_line({c.dataset_id, std::to_string(c.cells_full), std::to_string(c.cells_total),
                              full(c.example_coverage), full(c.min_mass_ratio)});
      }
      put("coverage.csv", coverage);

      std::string vpr = csv_line({"model", "dataset", "variant", "phrasing", "vpr", "below_threshold", "lo", "hi",
                                  "n_resamples", "seed"});
      for (const auto& v : r.vpr_matrix) {
        vpr += csv_line({v.cell.model_id, v.cell.dataset_id, std::string(to_string(v.cell.variant)),
                         std::string(to_string(v.cell.phrasing)), full(v.vpr), v.below_threshold ? "true" : "false",
                         full(v.ci.lo), full(v.ci.hi), std::to_string(v.ci.n_resamples), std::to_string(v.ci.seed)});
      }
      put("vpr_matrix.csv", vpr);

      std::string cal = csv_line({"model", "dataset", "phrasing", "n_cells", "accuracy", "ece_token", "ece_verbal",
                                  "ece_gap", "overconf_vs_acc", "overconf_vs_token"});
      for (const auto& c : r.calibration_summary) {
        cal += csv_line({c.model_id, c.dataset_id, std::string(to_string(c.phrasing)), std::to_string(c.n_cells),
                         full(c.accuracy), opt_full(c.ece_token), full(c.ece_verbal), opt_full(c.ece_gap),
                         full(c.overconf_vs_acc), opt_full(c.overconf_vs_token)});
      }
      put("calibration_summary.csv", cal);

      std::string sc = csv_line({"model", "dataset", "variant", "phrasing", "overconf_vs_acc", "acc_lo", "acc_hi",
                                 "overconf_vs_token", "tok_lo", "tok_hi", "n_resamples", "seed"});
      for (const auto& s : r.signed_cells) {
        const auto& t = s.overconf_vs_token;
        sc += csv_line({s.cell.model_id, s.cell.dataset_id, std::string(to_string(s.cell.variant)),
                        std::string(to_string(s.cell.phrasing)), full(s.overconf_vs_acc.point),
                        full(s.overconf_vs_acc.lo), full(s.overconf_vs_acc.hi), t ? full(t->point) : "",
                        t ? full(t->lo) : "", t ? full(t->hi) : "", std::to_string(s.overconf_vs_acc.n_resamples),
                        std::to_string(s.overconf_vs_acc.seed)});
      }
      put("signed_cells.csv", sc);

      std::string spread = csv_line({"model", "dataset", "size_billions", "surface_paraphrase",
                                     "instruction_reorder", "fewshot_3", "implicit_framing", "spread", "lo", "hi",
                                     "n_resamples", "seed"});
      for (const auto& s : r.spread_table) {
        std::vector<std::string> line{s.record.model_id, s.record.dataset_id, opt_full(s.size_billions)};
        for (Variant v : kSpreadVariants) line.push_back(full(s.record.per_variant_accuracy.at(v)));
        for (auto v : {full(s.record.spread), full(s.ci.lo), full(s.ci.hi), std::to_string(s.ci.n_resamples),
                       std::to_string(s.ci.seed)}) {
          line.push_back(v);
        }
        spread += csv_line(line);
      }
      put("spread.csv", spread);
      put("panel.csv", panel_table_csv(r.panel));

      std::vector<std::string> header{"model", "dataset", "phrasing"};
      for (double t : r.sensitivity.thresholds) {
        header.push_back("mean_at_" + text::fixed(t, 2));
        header.push_back("n_at_" + text::fixed(t, 2));
      }
      header.emplace_back("empty");
      std::string sens = csv_line(header);
      for (const auto& s : r.sensitivity.rows) {
        std::vector<std::string> line{s.model_id, s.dataset_id, std::string(to_string(s.phrasing))};
        for (std::size_t i = 0; i < s.means.size(); ++i) {
          line.push_back(opt_full(s.means[i]));
          line.push_back(std::to_string(s.counts[i]));
        }
        line.emplace_back(s.empty ? "true" : "false");
        sens += csv_line(line);
      }
      put("threshold_sensitivity.csv", sens);

      std::string excl = csv_line({"model", "dataset", "variant", "phrasing", "reason"});
      for (const auto& e : r.exclusions) {
        excl += csv_line({e.cell.model_id, e.cell.dataset_id, std::string(to_string(e.cell.variant)),
                          std::string(to_string(e.cell.phrasing)), e.reason});
      }
      put("exclusions.csv", excl);

      std::string items = csv_line({"number", "topic", "satisfied", "detail"});
      for (const auto& i : r.checklist) {
        items += csv_line({std::to_string(i.number), i.topic, i.satisfied ? "true" : "false", i.detail});
      }
      put("checklist.csv", items);
      break;
    }
  }

  for (const auto& c : r.reliability) {
    put(file_safe(c.model_id) + "_" + file_safe(c.dataset_id) + "_" + std::string(to_string(c.phrasing)) +
            "_reliability.csv",
        reliability_csv(c));
  }
  return written;
}

std::string serialize_metrics(const CellMetrics& metrics) { return to_j(metrics).dump(); }

void write_metrics(const std::filesystem::path& path, std::span<const CellMetrics> metrics) {
  std::string out;
  for (const auto& m : metrics) out += serialize_metrics(m) + "\n";
  write_file(path, out);
}

std::vector<CellMetrics> read_metrics(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::vector<CellMetrics> out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (text::trim(line).empty()) continue;
    try {
      out.push_back(metrics_from(OJ::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw DataError(path.string() + ":" + std::to_string(n) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace slmaudit
