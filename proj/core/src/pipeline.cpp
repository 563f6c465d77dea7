#include "slmaudit/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <exception>
#include <fstream>
#include <mutex>
#include <ostream>
#include <set>
#include <sstream>
#include <thread>

#include "json.hpp"
#include "slmaudit/error.hpp"
#include "slmaudit/extraction.hpp"
#include "slmaudit/rng.hpp"

namespace slmaudit {

namespace fs = std::filesystem;
using OJ = nlohmann::ordered_json;
using J = nlohmann::json;

ReportOptions RunConfig::report_options() const {
  ReportOptions o;
  o.evaluator = evaluator;
  o.vpr_threshold = vpr_threshold;
  o.n_bins = n_bins;
  o.n_resamples = n_resamples;
  o.seed = seed;
  o.sensitivity_thresholds = sensitivity_thresholds;
  o.model_sizes = model_sizes;
  return o;
}

namespace {

void check_keys(const J& obj, std::string_view where, std::initializer_list<std::string_view> allowed) {
  if (!obj.is_object()) throw UsageError(std::string(where) + " must be a JSON object");
  for (const auto& [key, value] : obj.items()) {
    if (std::find(allowed.begin(), allowed.end(), key) == allowed.end()) {
      throw UsageError(std::string(where) + ": unknown key '" + key + "'");
    }
  }
}

template <typename T>
T get_as(const J& obj, const char* key, std::string_view where) {
  try {
    return obj.at(key).get<T>();
  } catch (const J::exception&) {
    throw UsageError(std::string(where) + ": '" + key + "' is missing or has the wrong type");
  }
}

fs::path resolve(const fs::path& base, const std::string& p) {
  const fs::path path(p);
  return path.is_absolute() ? path : base / path;
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const fs::path& path, const std::string& content) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out << content;
  if (!out) throw DataError("failed writing " + path.string());
}

}  // namespace

RunConfig parse_run_config(std::string_view json, const fs::path& base_dir) {
  const J doc = J::parse(json, nullptr, false);
  if (doc.is_discarded()) throw UsageError("config is not valid JSON");
  check_keys(doc, "config",
             {"datasets", "models", "variants", "phrasings", "transcripts", "backend", "templates_dir",
              "sample_size", "seed", "vpr_threshold", "n_bins", "n_resamples", "evaluator", "model_sizes",
              "sensitivity_thresholds", "report_format"});
  RunConfig c;
  if (doc.contains("datasets")) {
    for (const auto& d : doc.at("datasets")) {
      check_keys(d, "dataset", {"id", "examples", "task_type"});
      DatasetConfig ds;
      ds.id = get_as<std::string>(d, "id", "dataset");
      if (d.contains("examples")) ds.examples = resolve(base_dir, get_as<std::string>(d, "examples", "dataset"));
      const auto task = d.contains("task_type") ? get_as<std::string>(d, "task_type", "dataset") : "reasoning";
      const auto parsed = parse_task_type(task);
      if (!parsed) throw UsageError("dataset " + ds.id + ": unknown task_type '" + task + "'");
      ds.task_type = *parsed;
      c.datasets.push_back(std::move(ds));
    }
  }
  if (doc.contains("models")) {
    for (const auto& m : doc.at("models")) {
      ModelConfig mc;
      if (m.is_string()) {
        mc.id = m.get<std::string>();
      } else {
        check_keys(m, "model", {"id", "served_name"});
        mc.id = get_as<std::string>(m, "id", "model");
        if (m.contains("served_name")) mc.served_name = get_as<std::string>(m, "served_name", "model");
      }
      if (mc.served_name.empty()) mc.served_name = mc.id;
      c.models.push_back(std::move(mc));
    }
  }
  if (doc.contains("variants")) {
    c.variants.clear();
    for (const auto& name : get_as<std::vector<std::string>>(doc, "variants", "config")) {
      const auto v = parse_variant(name);
      if (!v) throw UsageError("unknown variant '" + name + "'");
      c.variants.push_back(*v);
    }
  }
  if (doc.contains("phrasings")) {
    c.phrasings.clear();
    for (const auto& name : get_as<std::vector<std::string>>(doc, "phrasings", "config")) {
      const auto p = parse_phrasing(name);
      if (!p) throw UsageError("unknown phrasing '" + name + "'");
      c.phrasings.push_back(*p);
    }
  }
  if (doc.contains("transcripts")) {
    const J& t = doc.at("transcripts");
    if (t.is_string()) {
      c.transcripts.push_back(resolve(base_dir, t.get<std::string>()));
    } else {
      for (const auto& p : get_as<std::vector<std::string>>(doc, "transcripts", "config")) {
        c.transcripts.push_back(resolve(base_dir, p));
      }
    }
  }
  if (doc.contains("templates_dir")) {
    c.templates_dir = resolve(base_dir, get_as<std::string>(doc, "templates_dir", "config"));
  }
  if (doc.contains("backend")) {
    const J& b = doc.at("backend");
    check_keys(b, "backend", {"base_url", "timeout_seconds", "max_in_flight", "retry_limit", "backoff_seconds"});
    BackendConfig bc;
    bc.base_url = get_as<std::string>(b, "base_url", "backend");
    bc.model_name = "unset";
    if (b.contains("timeout_seconds")) bc.timeout_seconds = get_as<double>(b, "timeout_seconds", "backend");
    if (b.contains("max_in_flight")) bc.max_in_flight = get_as<std::size_t>(b, "max_in_flight", "backend");
    if (b.contains("retry_limit")) bc.retry_limit = get_as<std::size_t>(b, "retry_limit", "backend");
    if (b.contains("backoff_seconds")) bc.backoff_seconds = get_as<double>(b, "backoff_seconds", "backend");
    bc.validate();
    c.backend = bc;
  }
  if (doc.contains("sample_size")) c.sample_size = get_as<std::size_t>(doc, "sample_size", "config");
  if (doc.contains("seed")) c.seed = get_as<std::uint64_t>(doc, "seed", "config");
  if (doc.contains("vpr_threshold")) c.vpr_threshold = get_as<double>(doc, "vpr_threshold", "config");
  if (doc.contains("n_bins")) c.n_bins = get_as<std::size_t>(doc, "n_bins", "config");
  if (doc.contains("n_resamples")) c.n_resamples = get_as<std::size_t>(doc, "n_resamples", "config");
  if (doc.contains("evaluator")) {
    const auto name = get_as<std::string>(doc, "evaluator", "config");
    const auto e = parse_evaluator(name);
    if (!e) throw UsageError("unknown evaluator '" + name + "'");
    c.evaluator = *e;
  }
  if (doc.contains("model_sizes")) c.model_sizes = get_as<std::map<std::string, double>>(doc, "model_sizes", "config");
  if (doc.contains("sensitivity_thresholds")) {
    c.sensitivity_thresholds = get_as<std::vector<double>>(doc, "sensitivity_thresholds", "config");
  }
  if (doc.contains("report_format")) {
    const auto name = get_as<std::string>(doc, "report_format", "config");
    const auto f = parse_report_format(name);
    if (!f) throw UsageError("unknown report_format '" + name + "'");
    c.report_format = *f;
  }
  if (c.sample_size == 0) throw UsageError("sample_size must be positive");
  if (c.n_bins == 0) throw UsageError("n_bins must be positive");
  if (c.n_resamples == 0) throw UsageError("n_resamples must be positive");
  if (!(c.vpr_threshold >= 0.0 && c.vpr_threshold <= 1.0)) throw UsageError("vpr_threshold must lie in [0, 1]");
  return c;
}

RunConfig load_run_config(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw UsageError("cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_run_config(ss.str(), path.parent_path());
}

std::uint64_t config_hash(const RunConfig& c) {
  OJ j;
  OJ datasets = OJ::array();
  for (const auto& d : c.datasets) datasets.push_back(OJ{{"id", d.id}, {"task_type", to_string(d.task_type)}});
  j["datasets"] = datasets;
  OJ models = OJ::array();
  for (const auto& m : c.models) models.push_back(OJ{{"id", m.id}, {"served_name", m.served_name}});
  j["models"] = models;
  OJ variants = OJ::array();
  for (Variant v : c.variants) variants.push_back(to_string(v));
  j["variants"] = variants;
  OJ phrasings = OJ::array();
  for (Phrasing p : c.phrasings) phrasings.push_back(to_string(p));
  j["phrasings"] = phrasings;
  j["sample_size"] = c.sample_size;
  j["seed"] = c.seed;
  j["vpr_threshold"] = c.vpr_threshold;
  j["n_bins"] = c.n_bins;
  j["n_resamples"] = c.n_resamples;
  j["evaluator"] = to_string(c.evaluator);
  j["model_sizes"] = c.model_sizes;
  j["sensitivity_thresholds"] = c.sensitivity_thresholds;
  return fnv1a64(j.dump());
}

std::string hex64(std::uint64_t value) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(value));
  return buf;
}

namespace {

constexpr std::string_view kStageNames[] = {"sample", "render", "generate", "score",
                                            "repair", "metrics", "spread", "report"};
constexpr std::string_view kStatusNames[] = {"ran", "up-to-date", "skipped"};

}  // namespace

std::string_view to_string(Stage stage) { return kStageNames[static_cast<int>(stage)]; }
std::string_view to_string(StageStatus status) { return kStatusNames[static_cast<int>(status)]; }

std::optional<Stage> parse_stage(std::string_view name) {
  for (std::size_t i = 0; i < std::size(kStageNames); ++i) {
    if (kStageNames[i] == name) return static_cast<Stage>(i);
  }
  return std::nullopt;
}

std::vector<TranscriptRecord> score_records(std::vector<TranscriptRecord> records) {
  for (auto& r : records) {
    for (Evaluator e : {Evaluator::kFirstChar, Evaluator::kRegex}) {
      r.verdicts[std::string(to_string(e))] =
          grade(evaluate_offline(e, r.generation_text, r.label_set), r.gold_letter);
    }
    if (auto c = r.verdicts.find("constrained"); c != r.verdicts.end()) {
      c->second = grade(c->second, r.gold_letter);
    }
  }
  return records;
}

std::vector<TranscriptRecord> read_scored(const fs::path& run_dir) {
  const fs::path repaired = run_dir / artifacts::kRepaired;
  if (fs::exists(repaired)) return read_transcripts(repaired);
  const fs::path scored = run_dir / artifacts::kScored;
  if (!fs::exists(scored)) throw DataError("missing upstream artifact " + scored.string() + "; run `score` first");
  return read_transcripts(scored);
}

namespace {

class Manifest {
 public:
  Manifest(fs::path path, std::string config_hash) : path_(std::move(path)), hash_(std::move(config_hash)) {
    if (fs::exists(path_)) {
      const J doc = J::parse(read_file(path_), nullptr, false);
      if (doc.is_discarded() || !doc.contains("config_hash")) throw DataError("corrupt manifest " + path_.string());
      const auto recorded = doc.at("config_hash").get<std::string>();
      if (recorded != hash_) {
        throw DataError("run directory was produced under config hash " + recorded + ", current config hash is " +
                        hash_ + "; use a fresh --run-dir instead of mixing protocols");
      }
      if (doc.contains("stages")) stages_ = doc.at("stages");
    }
  }

  bool up_to_date(Stage stage, const std::string& digest, const std::vector<fs::path>& outputs) const {
    const std::string name(to_string(stage));
    if (!stages_.contains(name) || stages_.at(name).at("input_digest") != digest) return false;
    return std::all_of(outputs.begin(), outputs.end(), [](const fs::path& p) { return fs::exists(p); });
  }

  void record(Stage stage, const std::string& digest, const std::vector<fs::path>& outputs) {
    J outs = J::array();
    for (const auto& p : outputs) outs.push_back(p.filename().string());
    stages_[std::string(to_string(stage))] = J{{"input_digest", digest}, {"outputs", outs}};
    save();
  }

  void forget(Stage stage) {
    stages_.erase(std::string(to_string(stage)));
    save();
  }

 private:
  void save() const {
    OJ doc;
    doc["config_hash"] = hash_;
    OJ stages = OJ::object();
    for (Stage s : kAllStages) {
      const std::string name(to_string(s));
      if (stages_.contains(name)) stages[name] = OJ::parse(stages_.at(name).dump());
    }
    doc["stages"] = stages;
    write_file(path_, doc.dump(2) + "\n");
  }

  fs::path path_;
  std::string hash_;
  J stages_ = J::object();
};

// Digest of the config hash plus the bytes of every input, in order.
std::string digest_of(const std::string& config_hash, const std::vector<fs::path>& inputs) {
  std::uint64_t h = fnv1a64(config_hash);
  for (const auto& p : inputs) {
    if (!fs::exists(p)) throw DataError("missing upstream artifact " + p.string());
    h = fnv1a64(p.filename().string(), h);
    h = fnv1a64(read_file(p), h);
  }
  return hex64(h);
}

const TemplateSet& templates_for(const RunConfig& c, TaskType task, std::map<TaskType, TemplateSet>& cache) {
  if (!c.templates_dir) return default_template_set(task);
  auto it = cache.find(task);
  if (it == cache.end()) {
    it = cache.emplace(task, load_template_set(*c.templates_dir / (std::string(to_string(task)) + ".json"))).first;
  }
  return it->second;
}

struct SampleArtifact {
  std::vector<std::string> example_ids;
  std::vector<std::string> fewshot_ids;
};

SampleArtifact read_sample(const fs::path& path) {
  const J doc = J::parse(read_file(path), nullptr, false);
  if (doc.is_discarded()) throw DataError("corrupt sample artifact " + path.string());
  return {doc.at("example_ids").get<std::vector<std::string>>(), doc.at("fewshot_ids").get<std::vector<std::string>>()};
}

struct PromptRow {
  std::string example_id;
  Variant variant;
  std::string prompt;
  int max_new_tokens;
};

std::vector<PromptRow> read_prompts(const fs::path& path) {
  std::vector<PromptRow> rows;
  std::istringstream in(read_file(path));
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const J j = J::parse(line);
    rows.push_back({j.at("example_id").get<std::string>(), *parse_variant(j.at("variant").get<std::string>()),
                    j.at("prompt").get<std::string>(), j.at("max_new_tokens").get<int>()});
  }
  return rows;
}

class Runner {
 public:
  Runner(const RunConfig& c, fs::path run_dir, const PipelineOptions& o)
      : config_(c),
        dir_(std::move(run_dir)),
        options_(o),
        hash_(hex64(config_hash(c))),
        manifest_((fs::create_directories(dir_), dir_ / artifacts::kManifest), hash_) {}

  StageOutcome run(Stage stage) {
    switch (stage) {
      case Stage::kSample: return sample();
      case Stage::kRender: return render();
      case Stage::kGenerate: return generate();
      case Stage::kScore: return score();
      case Stage::kRepair: return repair();
      case Stage::kMetrics: return metrics();
      case Stage::kSpread: return spread();
      case Stage::kReport: return report();
    }
    throw UsageError("unknown stage");
  }

 private:
  fs::path sample_path(const DatasetConfig& d) const { return dir_ / artifacts::kSampleDir / (d.id + ".json"); }
  fs::path prompt_path(const DatasetConfig& d) const { return dir_ / artifacts::kPromptDir / (d.id + ".jsonl"); }

  std::vector<fs::path> transcript_sources() const {
    if (!config_.transcripts.empty()) return config_.transcripts;
    return {dir_ / artifacts::kTranscripts};
  }

  std::vector<fs::path> dataset_inputs() const {
    std::vector<fs::path> in;
    for (const auto& d : config_.datasets) in.push_back(d.examples);
    return in;
  }

  // Runs `body` unless the manifest records the same inputs.
  template <typename Body>
  StageOutcome guarded(Stage stage, const std::vector<fs::path>& inputs, const std::vector<fs::path>& outputs,
                       Body&& body) {
    const std::string digest = digest_of(hash_, inputs);
    if (manifest_.up_to_date(stage, digest, outputs)) {
      return {stage, StageStatus::kUpToDate, "artifacts up to date"};
    }
    std::string message = body();
    manifest_.record(stage, digest, outputs);
    return {stage, StageStatus::kRan, std::move(message)};
  }

  StageOutcome sample() {
    if (config_.datasets.empty()) return {Stage::kSample, StageStatus::kSkipped, "no datasets configured"};
    std::vector<fs::path> outputs;
    for (const auto& d : config_.datasets) outputs.push_back(sample_path(d));
    return guarded(Stage::kSample, dataset_inputs(), outputs, [&] {
      for (const auto& d : config_.datasets) {
        const auto examples = read_examples(d.examples);
        if (examples.size() < config_.sample_size) {
          throw DataError("dataset " + d.id + " has " + std::to_string(examples.size()) +
                          " examples, fewer than sample_size " + std::to_string(config_.sample_size));
        }
        const SamplePlan plan = make_sample_plan(d.id, examples.size(), config_.sample_size, config_.seed);
        OJ doc;
        doc["dataset"] = d.id;
        doc["seed"] = config_.seed;
        doc["split_size"] = plan.split_size;
        doc["indices"] = plan.indices;
        OJ ids = OJ::array();
        for (std::size_t i : plan.indices) ids.push_back(examples[i].example_id);
        doc["example_ids"] = ids;
        OJ few = OJ::array();
        if (examples.size() >= config_.sample_size + kFewshotCount) {
          for (std::size_t i : fewshot_indices(plan)) few.push_back(examples[i].example_id);
        }
        doc["fewshot_ids"] = few;
        write_file(sample_path(d), doc.dump(2) + "\n");
      }
      return std::to_string(config_.datasets.size()) + " dataset samples drawn";
    });
  }

  StageOutcome render() {
    if (config_.datasets.empty()) return {Stage::kRender, StageStatus::kSkipped, "no datasets configured"};
    std::vector<fs::path> inputs = dataset_inputs(), outputs;
    for (const auto& d : config_.datasets) {
      inputs.push_back(sample_path(d));
      outputs.push_back(prompt_path(d));
    }
    return guarded(Stage::kRender, inputs, outputs, [&] {
      std::map<TaskType, TemplateSet> cache;
      std::size_t n = 0;
      for (const auto& d : config_.datasets) {
        const auto examples = read_examples(d.examples);
        std::map<std::string, const ExampleRecord*> by_id;
        for (const auto& e : examples) by_id[e.example_id] = &e;
        const SampleArtifact sample = read_sample(sample_path(d));
        std::vector<ExampleRecord> fewshot;
        for (const auto& id : sample.fewshot_ids) fewshot.push_back(*by_id.at(id));
        const TemplateSet& set = templates_for(config_, d.task_type, cache);
        std::string out;
        for (Variant v : config_.variants) {
          const PromptVariantTemplate& tmpl = set.at(v);
          const bool few = v == Variant::kFewshot3;
          if (few && fewshot.size() != kFewshotCount) {
            throw DataError("dataset " + d.id + " has too few examples outside the sample for few-shot prompts");
          }
          for (const auto& id : sample.example_ids) {
            const std::string prompt =
                render_prompt(tmpl, *by_id.at(id), few ? std::span<const ExampleRecord>(fewshot)
                                                       : std::span<const ExampleRecord>());
            out += OJ{{"example_id", id}, {"variant", to_string(v)}, {"prompt", prompt},
                      {"max_new_tokens", tmpl.max_new_tokens}}
                       .dump() +
                   "\n";
            ++n;
          }
        }
        write_file(prompt_path(d), out);
      }
      return std::to_string(n) + " prompts rendered";
    });
  }

  StageOutcome generate() {
    if (!config_.transcripts.empty()) {
      return {Stage::kGenerate, StageStatus::kSkipped,
              "using " + std::to_string(config_.transcripts.size()) + " supplied transcript file(s)"};
    }
    if (!config_.backend) throw BackendError("generate needs a backend (set backend.base_url or --base-url)");
    std::vector<fs::path> inputs = dataset_inputs();
    for (const auto& d : config_.datasets) inputs.push_back(prompt_path(d));
    const fs::path out_path = dir_ / artifacts::kTranscripts;
    return guarded(Stage::kGenerate, inputs, {out_path}, [&] {
      std::vector<TranscriptRecord> records;
      for (const auto& m : config_.models) {
        BackendConfig bc = with_env_api_key(*config_.backend);
        bc.model_name = m.served_name;
        CompletionClient client(bc);
        for (const auto& d : config_.datasets) {
          const auto examples = read_examples(d.examples);
          std::map<std::string, const ExampleRecord*> by_id;
          for (const auto& e : examples) by_id[e.example_id] = &e;
          const auto prompts = read_prompts(prompt_path(d));

          std::vector<GenerationRequest> answer_calls, label_calls;
          for (const auto& p : prompts) {
            GenerationRequest answer;
            answer.prompt = p.prompt;
            answer.max_new_tokens = p.max_new_tokens;
            answer.seed = config_.seed;
            answer_calls.push_back(answer);
            GenerationRequest label = answer;
            label.max_new_tokens = kLabelCallMaxTokens;
            label.logprobs = kLabelCallLogprobs;
            label_calls.push_back(label);
          }
          const auto answers = client.generate_all(answer_calls);
          const auto labels = client.generate_all(label_calls);

          for (Phrasing ph : config_.phrasings) {
            std::vector<GenerationRequest> verbal_calls;
            std::vector<std::size_t> verbal_index(prompts.size(), SIZE_MAX);
            for (std::size_t i = 0; i < prompts.size(); ++i) {
              if (answers[i].text.empty()) continue;
              GenerationRequest v;
              v.prompt = render_elicitation(elicitation_suffix(ph), prompts[i].prompt, answers[i].text);
              v.max_new_tokens = kVerbalMaxTokens;
              v.seed = config_.seed;
              verbal_index[i] = verbal_calls.size();
              verbal_calls.push_back(std::move(v));
            }
            const auto verbal = client.generate_all(verbal_calls);
            for (std::size_t i = 0; i < prompts.size(); ++i) {
              const ExampleRecord& ex = *by_id.at(prompts[i].example_id);
              TranscriptRecord r;
              r.cell = {m.id, d.id, prompts[i].variant, ph};
              r.example_id = ex.example_id;
              r.rendered_prompt = prompts[i].prompt;
              r.generation_text = answers[i].text;
              r.first_step_topk = labels[i].first_step_topk;
              if (verbal_index[i] != SIZE_MAX) r.verbal_response_text = verbal[verbal_index[i]].text;
              r.gold_letter = ex.gold_letter;
              r.label_set = ex.labels();
              records.push_back(std::move(r));
            }
          }
        }
      }
      write_transcripts(out_path, records);
      return std::to_string(records.size()) + " transcript records generated";
    });
  }

  StageOutcome score() {
    const fs::path out_path = dir_ / artifacts::kScored;
    if (config_.transcripts.empty() && !fs::exists(dir_ / artifacts::kTranscripts)) {
      throw DataError("missing upstream artifact " + (dir_ / artifacts::kTranscripts).string() +
                      "; run `generate` first or pass --transcripts");
    }
    return guarded(Stage::kScore, transcript_sources(), {out_path}, [&] {
      std::vector<TranscriptRecord> records;
      for (const auto& path : transcript_sources()) {
        auto part = read_transcripts(path);
        records.insert(records.end(), std::make_move_iterator(part.begin()), std::make_move_iterator(part.end()));
      }
      std::set<std::pair<CellKey, std::string>> seen;
      for (const auto& r : records) {
        if (!seen.emplace(r.cell, r.example_id).second) {
          throw DataError("duplicate example_id '" + r.example_id + "' in cell " + r.cell.to_string() +
                          " across transcript files");
        }
      }
      records = score_records(std::move(records));
      write_transcripts(out_path, records);
      // A fresh scoring invalidates earlier repairs.
      fs::remove(dir_ / artifacts::kRepaired);
      manifest_.forget(Stage::kRepair);
      return std::to_string(records.size()) + " records scored";
    });
  }

  StageOutcome repair() {
    const fs::path in_path = dir_ / artifacts::kScored;
    if (!fs::exists(in_path)) throw DataError("missing upstream artifact " + in_path.string() + "; run `score` first");
    if (!config_.backend) {
      return {Stage::kRepair, StageStatus::kSkipped, "no backend configured; constrained repair not run"};
    }
    const fs::path out_path = dir_ / artifacts::kRepaired;
    return guarded(Stage::kRepair, {in_path}, {out_path}, [&] {
      auto records = read_transcripts(in_path);
      std::map<std::string, std::vector<std::size_t>> pending;
      for (std::size_t i = 0; i < records.size(); ++i) {
        if (records[i].cell.variant == Variant::kFormatChange && !records[i].verdicts.count("constrained")) {
          pending[records[i].cell.model_id].push_back(i);
        }
      }
      std::size_t repaired = 0;
      for (const auto& [model_id, indices] : pending) {
        BackendConfig bc = with_env_api_key(*config_.backend);
        bc.model_name = model_id;
        for (const auto& m : config_.models) {
          if (m.id == model_id) bc.model_name = m.served_name;
        }
        CompletionClient client(bc);
        std::vector<EvaluatorVerdict> verdicts(indices.size());
        std::atomic<std::size_t> next{0};
        std::exception_ptr error;
        std::mutex mu;
        auto worker = [&] {
          for (std::size_t k; (k = next.fetch_add(1)) < indices.size();) {
            try {
              const TranscriptRecord& r = records[indices[k]];
              verdicts[k] = client.constrained_finalize(r.generation_text, r.label_set);
            } catch (...) {
              std::lock_guard lock(mu);
              if (!error) error = std::current_exception();
              next = indices.size();
            }
          }
        };
        std::vector<std::thread> pool;
        for (std::size_t t = 0; t < std::min(bc.max_in_flight, indices.size()); ++t) pool.emplace_back(worker);
        for (auto& th : pool) th.join();
        if (error) std::rethrow_exception(error);
        for (std::size_t k = 0; k < indices.size(); ++k) {
          TranscriptRecord& r = records[indices[k]];
          r.verdicts["constrained"] = grade(verdicts[k], r.gold_letter);
        }
        repaired += indices.size();
      }
      write_transcripts(out_path, records);
      return std::to_string(repaired) + " format_change records finalized under guided_choice";
    });
  }

  fs::path scored_source() const {
    const fs::path repaired = dir_ / artifacts::kRepaired;
    return fs::exists(repaired) ? repaired : dir_ / artifacts::kScored;
  }

  StageOutcome metrics() {
    const fs::path out_path = dir_ / artifacts::kMetrics;
    return guarded(Stage::kMetrics, {scored_source()}, {out_path}, [&] {
      const auto records = read_scored(dir_);
      std::vector<CellMetrics> metrics;
      const CalibrationOptions cal{config_.vpr_threshold, config_.n_bins};
      for (auto& [key, recs] : group_by_cell(records)) {
        metrics.push_back(cell_calibration(score_cell(key, recs, config_.evaluator), cal));
      }
      write_metrics(out_path, metrics);
      return std::to_string(metrics.size()) + " cells measured";
    });
  }

  StageOutcome spread() {
    const fs::path spread_path = dir_ / artifacts::kSpread;
    const fs::path panel_path = dir_ / artifacts::kPanel;
    return guarded(Stage::kSpread, {scored_source()}, {spread_path, panel_path}, [&] {
      const auto records = read_scored(dir_);
      const AuditReport r = build_report(records, config_.report_options());
      write_file(spread_path, spread_table_text(r.spread_table) + "\n" + panel_table_text(r.panel));
      write_file(panel_path, panel_table_csv(r.panel));
      return std::to_string(r.spread_table.size()) + " spreads, " + std::to_string(r.panel.size()) +
             " panel rows";
    });
  }

  StageOutcome report() {
    const ReportFormat format = options_.report_format.value_or(config_.report_format);
    const fs::path out_dir = options_.report_dir.value_or(dir_ / artifacts::kReportDir);
    const fs::path marker = out_dir / (std::string("report.") + std::string(to_string(format)) + ".done");
    // The format and destination are part of what this stage produces.
    const std::string digest_key = hash_ + "/" + std::string(to_string(format)) + "/" + out_dir.string();
    const std::string digest = digest_of(digest_key, {scored_source()});
    if (manifest_.up_to_date(Stage::kReport, digest, {marker})) {
      return {Stage::kReport, StageStatus::kUpToDate, "artifacts up to date"};
    }
    const auto records = read_scored(dir_);
    const AuditReport r = build_report(records, config_.report_options());
    const auto written = emit_report(r, format, out_dir);
    write_file(marker, digest + "\n");
    manifest_.record(Stage::kReport, digest, {marker});
    return {Stage::kReport, StageStatus::kRan, std::to_string(written.size()) + " files written to " + out_dir.string()};
  }

  const RunConfig& config_;
  fs::path dir_;
  const PipelineOptions& options_;
  std::string hash_;
  Manifest manifest_;
};

}  // namespace

std::vector<StageOutcome> run_pipeline(const RunConfig& config, const fs::path& run_dir,
                                       std::span<const Stage> stages, const PipelineOptions& options) {
  std::set<Stage> wanted(stages.begin(), stages.end());
  Runner runner(config, run_dir, options);
  std::vector<StageOutcome> outcomes;
  for (Stage s : kAllStages) {
    if (!wanted.count(s)) continue;
    StageOutcome o = runner.run(s);
    if (options.log) *options.log << to_string(o.stage) << ": " << to_string(o.status) << " (" << o.message << ")\n";
    outcomes.push_back(std::move(o));
  }
  return outcomes;
}

}  // namespace slmaudit
