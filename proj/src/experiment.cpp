#include "medlab/experiment.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <chrono>
#include <fstream>

#include "medlab/csv.hpp"
#include "medlab/engine.hpp"
#include "medlab/error.hpp"

namespace medlab::experiment {

namespace {

using nlohmann::json;
using nlohmann::ordered_json;
using csv::format_number;

[[noreturn]] void config_error(const std::string& field, const std::string& what) {
  throw Error(ErrorCode::ConfigError, field + ": " + what);
}

void check_keys(const json& j, const std::string& where, std::initializer_list<const char*> allowed) {
  if (!j.is_object()) config_error(where.empty() ? "config" : where, "must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    if (std::none_of(allowed.begin(), allowed.end(), [&](const char* a) { return key == a; })) {
      config_error(where.empty() ? key : where + "." + key, "unknown key");
    }
  }
}

std::string get_string(const json& j, const std::string& key, const std::string& field) {
  if (!j.contains(key)) config_error(field, "missing");
  if (!j.at(key).is_string()) config_error(field, "must be a string");
  return j.at(key).get<std::string>();
}

class InputResolver {
 public:
  explicit InputResolver(fs::path base) : base_(std::move(base)) {}

  fs::path file(const json& j, const std::string& key, const std::string& field) {
    const auto written = get_string(j, key, field);
    return add(written, field);
  }

  fs::path add(const std::string& written, const std::string& field) {
    if (written.empty()) config_error(field, "empty path");
    fs::path p(written);
    if (p.is_relative()) p = base_ / p;
    p = p.lexically_normal();
    std::error_code ec;
    if (!fs::is_regular_file(p, ec)) config_error(field, "file not found: " + p.string());
    inputs_.push_back({field, written, p});
    return p;
  }

  std::vector<InputRef> take() { return std::move(inputs_); }
  const fs::path& base() const { return base_; }

 private:
  fs::path base_;
  std::vector<InputRef> inputs_;
};

const json& require_object(const json& j, const char* key, const std::string& field) {
  if (!j.contains(key)) config_error(field, "missing");
  return j.at(key);
}

void write_text(const fs::path& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::IoError, "cannot write " + path.string());
  out << content;
  if (!out) throw Error(ErrorCode::IoError, "write failed: " + path.string());
}

std::string line(std::initializer_list<std::string> fields) {
  std::string s;
  bool first = true;
  for (const auto& f : fields) {
    if (!first) s += ',';
    s += csv::escape(f);
    first = false;
  }
  s += '\n';
  return s;
}

std::string num(std::size_t n) { return std::to_string(n); }

std::string total_effects_csv(const mediation::EffectReport& report) {
  std::string s = "prompt_id,gender_class,y_null,y_intervened,total_effect\n";
  for (const auto& r : report.records) {
    s += line({r.prompt_id, std::string(to_string(r.gender_class)), format_number(r.y_null),
               format_number(r.y_intervened), format_number(r.effect)});
  }
  return s;
}

ordered_json group_json(const mediation::GroupStats& g) { return {{"mean", g.mean}, {"count", g.count}}; }

ordered_json effect_report_json(const ExperimentConfig& cfg, const mediation::EffectReport& report) {
  ordered_json j;
  j["kind"] = to_string(cfg.kind);
  j["protocol"] = to_string(report.protocol);
  j["bias_ratio"] = mediation::orientation(report.protocol);
  j["prompts_analyzed"] = report.records.size();
  j["prompts_skipped"] = report.skipped.size();
  j["skipped"] = report.skipped;
  j["total_effect"] = {{"overall", group_json(report.overall)},
                       {"male", group_json(report.male)},
                       {"female", group_json(report.female)}};
  return j;
}

struct Outputs {
  fs::path dir;
  std::vector<std::string> names;

  void write(const std::string& name, const std::string& content) {
    write_text(dir / name, content);
    names.push_back(name);
  }
};

struct LoadedModel {
  engine::Transformer model;
  std::unique_ptr<text::Tokenizer> tokenizer;
  mediation::LanguageModel lm() const { return {model, *tokenizer}; }
};

LoadedModel load_model(const ModelSpec& spec) {
  LoadedModel m{engine::Transformer::load(spec.archive, spec.config), load_tokenizer(spec.tokenizer)};
  const auto v = static_cast<std::size_t>(m.model.config().vocab_size);
  if (m.tokenizer->vocab_size() != v) {
    throw Error(ErrorCode::ConfigError, "model.tokenizer: vocabulary has " + num(m.tokenizer->vocab_size()) +
                                            " tokens but the model expects " + num(v));
  }
  return m;
}

void run_neuron(const ExperimentConfig& cfg, Outputs& out) {
  const auto loaded = load_model(*cfg.model);
  const auto lm = loaded.lm();
  const auto templates = mediation::load_templates(cfg.data.templates);
  const auto professions = mediation::load_professions(cfg.data.professions);
  mediation::GridOptions opts;
  opts.gender_words = cfg.params.gender_words;
  opts.pronouns = cfg.params.pronouns;
  const auto report = mediation::run_neuron_mediation(lm, templates, professions, opts);
  if (report.sites.empty()) throw Error(ErrorCode::EmptyReport, "no prompt survived alignment checks");

  out.write("total_effects.csv", total_effects_csv(report));
  out.write("total_effect_table.csv", emit_plot_data(report, PlotSchema::TotalEffectTable));

  std::string sites = "layer,unit,mean_indirect_effect,mean_direct_effect,count\n";
  for (const auto& s : report.sites) {
    sites += line({std::to_string(s.site.layer), std::to_string(s.site.index), format_number(s.mean_indirect),
                   format_number(s.mean_direct), num(s.count)});
  }
  out.write("neuron_effects.csv", sites);

  const auto top = mediation::select_top_sites(report.sites, cfg.params.top_fraction);
  std::string top_csv = "rank,layer,unit,mean_indirect_effect,mean_direct_effect\n";
  for (std::size_t i = 0; i < top.size(); ++i) {
    top_csv += line({num(i + 1), std::to_string(top[i].site.layer), std::to_string(top[i].site.index),
                     format_number(top[i].mean_indirect), format_number(top[i].mean_direct)});
  }
  out.write("top_neurons.csv", top_csv);
  const auto profile = mediation::layer_profile(top, loaded.model.config().n_layers);
  out.write("layer_profile.csv", emit_plot_data(profile, PlotSchema::LayerProfile));

  auto j = effect_report_json(cfg, report);
  j["sites"] = report.sites.size();
  j["top_fraction"] = cfg.params.top_fraction;
  j["top_sites"] = top.size();
  out.write("report.json", j.dump(2) + "\n");
}

void run_attention(const ExperimentConfig& cfg, Outputs& out) {
  const auto loaded = load_model(*cfg.model);
  const auto lm = loaded.lm();
  const auto items = mediation::load_continuation_items(cfg.data.winobias);
  const auto report = mediation::run_attention_mediation(lm, items);
  if (report.sites.empty()) throw Error(ErrorCode::EmptyReport, "no prompt pair survived alignment checks");

  out.write("total_effects.csv", total_effects_csv(report));
  out.write("total_effect_table.csv", emit_plot_data(report, PlotSchema::TotalEffectTable));

  std::string sites = "head_label,layer,head,mean_indirect_effect,mean_direct_effect,count\n";
  for (const auto& s : report.sites) {
    sites += line({mediation::site_label(s.site), std::to_string(s.site.layer), std::to_string(s.site.index),
                   format_number(s.mean_indirect), format_number(s.mean_direct), num(s.count)});
  }
  out.write("attention_effects.csv", sites);

  auto ranked = mediation::select_top_sites(report.sites, 1.0);
  ranked.resize(std::min(ranked.size(), cfg.params.top_heads));
  std::string top_csv = "rank,head_label,mean_indirect_effect,mean_direct_effect\n";
  std::vector<mediation::MediatorSite> heads;
  for (std::size_t i = 0; i < ranked.size(); ++i) {
    top_csv += line({num(i + 1), mediation::site_label(ranked[i].site), format_number(ranked[i].mean_indirect),
                     format_number(ranked[i].mean_direct)});
    heads.push_back(ranked[i].site);
  }
  out.write("top_heads.csv", top_csv);

  // Heatmaps for the first pair that passed the alignment checks.
  std::string example_id;
  for (std::size_t i = 0; i < items.size(); ++i) {
    std::optional<std::pair<mediation::PromptInstance, mediation::PromptInstance>> pair;
    try {
      pair = mediation::make_continuation_pair(*loaded.tokenizer, items[i], static_cast<int>(i));
    } catch (const Error& e) {
      if (e.code() == ErrorCode::PromptMismatch) continue;
      throw;
    }
    example_id = pair->first.id;
    out.write("attention_heatmap_original.csv",
              emit_plot_data(mediation::attention_weight_report(lm, pair->first.ids, heads),
                             PlotSchema::AttentionHeatmap));
    out.write("attention_heatmap_swapped.csv",
              emit_plot_data(mediation::attention_weight_report(lm, pair->second.ids, heads),
                             PlotSchema::AttentionHeatmap));
    break;
  }

  auto j = effect_report_json(cfg, report);
  j["heads"] = report.sites.size();
  j["top_heads"] = heads.size();
  j["heatmap_prompt"] = example_id;
  out.write("report.json", j.dump(2) + "\n");
}

void run_crows(const ExperimentConfig& cfg, Outputs& out) {
  const auto loaded = load_model(*cfg.model);
  const auto pairs = metrics::load_sentence_pairs(cfg.data.crows);
  const auto result = metrics::crows_score(pairs, loaded.lm());

  std::string rows = "index,category,pll_stereo,pll_anti,outcome\n";
  for (std::size_t i = 0; i < result.pairs.size(); ++i) {
    const auto& p = result.pairs[i];
    rows += line({num(i), pairs[i].category, format_number(p.pll_stereo), format_number(p.pll_anti),
                  std::to_string(p.outcome)});
  }
  out.write("crows_pairs.csv", rows);

  ordered_json j;
  j["kind"] = to_string(cfg.kind);
  j["pairs"] = result.pairs.size();
  j["stereo_preferred"] = result.stereo_preferred;
  j["ties"] = result.ties;
  j["anti_preferred"] = result.pairs.size() - result.stereo_preferred - result.ties;
  j["score"] = result.score;
  out.write("crows_report.json", j.dump(2) + "\n");
}

void run_seat_kind(const ExperimentConfig& cfg, Outputs& out) {
  const auto loaded = load_model(*cfg.model);
  const auto pooling = cfg.params.pooling.value_or(metrics::default_pooling(loaded.model.config().family));
  std::string results = "test,effect_size,p_value,n_x,n_y,n_a,n_b\n";
  std::string assoc = "test,set,index,association\n";
  ordered_json tests = ordered_json::array();
  for (const auto& path : cfg.data.seat) {
    const auto sets = metrics::load_association_sets(path);
    metrics::SeatResult r;
    try {
      r = metrics::run_seat(sets, loaded.lm(), pooling, *cfg.params.permutation);
    } catch (const Error& e) {
      throw Error(e.code(), "association test '" + sets.name + "': " + e.what());
    }
    results += line({r.name, format_number(r.effect_size), format_number(r.p_value), num(sets.X.size()),
                     num(sets.Y.size()), num(sets.A.size()), num(sets.B.size())});
    for (std::size_t i = 0; i < r.scores.x.size(); ++i) assoc += line({r.name, "X", num(i), format_number(r.scores.x[i])});
    for (std::size_t i = 0; i < r.scores.y.size(); ++i) assoc += line({r.name, "Y", num(i), format_number(r.scores.y[i])});
    tests.push_back({{"test", r.name}, {"effect_size", r.effect_size}, {"p_value", r.p_value}});
  }
  out.write("seat_results.csv", results);
  out.write("seat_associations.csv", assoc);
  ordered_json j;
  j["kind"] = to_string(cfg.kind);
  j["pooling"] = metrics::to_string(pooling);
  j["tests"] = tests;
  out.write("seat_report.json", j.dump(2) + "\n");
}

void run_cda(const ExperimentConfig& cfg, Outputs& out) {
  const auto lexicon = cda::WordPairLexicon::load(cfg.data.lexicon);
  std::ifstream in(cfg.data.corpus, std::ios::binary);
  if (!in) throw Error(ErrorCode::IoError, "cannot open " + cfg.data.corpus.string());
  const auto corpus_path = out.dir / "augmented.txt";
  std::ofstream os(corpus_path, std::ios::binary | std::ios::trunc);
  if (!os) throw Error(ErrorCode::IoError, "cannot write " + corpus_path.string());
  const auto stats = cda::augment_corpus(in, os, lexicon, cfg.params.cda_mode);
  os.close();
  if (!os) throw Error(ErrorCode::IoError, "write failed: " + corpus_path.string());
  out.names.push_back("augmented.txt");
  out.write("cda_stats.json", stats.to_json());
}

}  // namespace

Kind parse_kind(std::string_view name) {
  if (name == "neuron-mediation") return Kind::NeuronMediation;
  if (name == "attention-mediation") return Kind::AttentionMediation;
  if (name == "crows") return Kind::Crows;
  if (name == "seat") return Kind::Seat;
  if (name == "cda") return Kind::Cda;
  config_error("kind", "unknown experiment kind '" + std::string(name) + "'");
}

std::string_view to_string(Kind k) {
  switch (k) {
    case Kind::NeuronMediation: return "neuron-mediation";
    case Kind::AttentionMediation: return "attention-mediation";
    case Kind::Crows: return "crows";
    case Kind::Seat: return "seat";
    case Kind::Cda: return "cda";
  }
  return "neuron-mediation";
}

ExperimentConfig ExperimentConfig::from_json(const json& j, const fs::path& base_dir) {
  check_keys(j, "", {"kind", "model", "data", "params", "output_dir"});
  ExperimentConfig cfg;
  cfg.kind = parse_kind(get_string(j, "kind", "kind"));
  InputResolver inputs(base_dir);

  if (cfg.kind != Kind::Cda) {
    const auto& m = require_object(j, "model", "model");
    check_keys(m, "model", {"archive", "config", "tokenizer"});
    ModelSpec spec;
    spec.archive = inputs.file(m, "archive", "model.archive");
    spec.config = inputs.file(m, "config", "model.config");
    const auto& t = require_object(m, "tokenizer", "model.tokenizer");
    check_keys(t, "model.tokenizer", {"type", "vocab", "merges"});
    spec.tokenizer.type = get_string(t, "type", "model.tokenizer.type");
    if (spec.tokenizer.type != "vocab" && spec.tokenizer.type != "bpe") {
      config_error("model.tokenizer.type", "must be vocab|bpe");
    }
    spec.tokenizer.vocab = inputs.file(t, "vocab", "model.tokenizer.vocab");
    if (spec.tokenizer.type == "bpe") {
      spec.tokenizer.merges = inputs.file(t, "merges", "model.tokenizer.merges");
    } else if (t.contains("merges")) {
      config_error("model.tokenizer.merges", "only valid for a bpe tokenizer");
    }
    cfg.model = std::move(spec);
  }

  const json empty = json::object();
  const json& d = j.contains("data") ? j.at("data") : empty;
  check_keys(d, "data", {"professions", "templates", "winobias", "crows", "seat", "corpus", "lexicon"});
  switch (cfg.kind) {
    case Kind::NeuronMediation:
      cfg.data.professions = inputs.file(d, "professions", "data.professions");
      cfg.data.templates = inputs.file(d, "templates", "data.templates");
      break;
    case Kind::AttentionMediation:
      cfg.data.winobias = inputs.file(d, "winobias", "data.winobias");
      break;
    case Kind::Crows:
      cfg.data.crows = inputs.file(d, "crows", "data.crows");
      break;
    case Kind::Seat: {
      if (!d.contains("seat")) config_error("data.seat", "missing");
      const auto& s = d.at("seat");
      if (!s.is_array() || s.empty()) config_error("data.seat", "must be a non-empty array of paths");
      for (std::size_t i = 0; i < s.size(); ++i) {
        const std::string field = "data.seat[" + num(i) + "]";
        if (!s[i].is_string()) config_error(field, "must be a string");
        cfg.data.seat.push_back(inputs.add(s[i].get<std::string>(), field));
      }
      break;
    }
    case Kind::Cda:
      cfg.data.corpus = inputs.file(d, "corpus", "data.corpus");
      cfg.data.lexicon = inputs.file(d, "lexicon", "data.lexicon");
      break;
  }

  const json& p = j.contains("params") ? j.at("params") : empty;
  check_keys(p, "params",
             {"top_fraction", "top_heads", "pooling", "permutation", "cda_mode", "gender_words", "pronouns"});
  auto& params = cfg.params;
  if (p.contains("top_fraction")) {
    const auto& v = p.at("top_fraction");
    if (!v.is_number() || !(v.get<double>() > 0.0 && v.get<double>() <= 1.0)) {
      config_error("params.top_fraction", "must be a number in (0, 1]");
    }
    params.top_fraction = v.get<double>();
  }
  if (p.contains("top_heads")) {
    const auto& v = p.at("top_heads");
    if (!v.is_number_unsigned() || v.get<std::size_t>() == 0) config_error("params.top_heads", "must be a positive integer");
    params.top_heads = v.get<std::size_t>();
  }
  if (p.contains("pooling")) {
    try {
      params.pooling = metrics::parse_pooling(get_string(p, "pooling", "params.pooling"));
    } catch (const Error& e) {
      if (e.code() != ErrorCode::ConfigError) throw;
      config_error("params.pooling", "must be first|last|mean");
    }
  }
  if (p.contains("permutation")) {
    const auto& perm = p.at("permutation");
    check_keys(perm, "params.permutation", {"mode", "n", "seed"});
    const auto mode = get_string(perm, "mode", "params.permutation.mode");
    std::uint64_t seed = 0;
    if (perm.contains("seed")) {
      if (!perm.at("seed").is_number_unsigned()) config_error("params.permutation.seed", "must be a non-negative integer");
      seed = perm.at("seed").get<std::uint64_t>();
    }
    if (mode == "exact") {
      if (perm.contains("n")) config_error("params.permutation.n", "only valid in sampled mode");
      params.permutation = metrics::PermutationMode::exact();
    } else if (mode == "sampled") {
      if (!perm.contains("n") || !perm.at("n").is_number_unsigned() || perm.at("n").get<std::size_t>() == 0) {
        config_error("params.permutation.n", "sampled mode needs a positive integer n");
      }
      params.permutation = metrics::PermutationMode::sampled(perm.at("n").get<std::size_t>(), seed);
    } else {
      config_error("params.permutation.mode", "must be exact|sampled");
    }
  } else if (cfg.kind == Kind::Seat) {
    config_error("params.permutation", "required for seat experiments");
  }
  if (p.contains("cda_mode")) {
    const auto mode = get_string(p, "cda_mode", "params.cda_mode");
    if (mode != "two-sided" && mode != "replace") config_error("params.cda_mode", "must be two-sided|replace");
    params.cda_mode = cda::parse_mode(mode);
  }
  auto read_pair = [&](const char* key, std::string& male, std::string& female) {
    if (!p.contains(key)) return;
    const std::string field = std::string("params.") + key;
    check_keys(p.at(key), field, {"male", "female"});
    male = get_string(p.at(key), "male", field + ".male");
    female = get_string(p.at(key), "female", field + ".female");
    if (male.empty() || female.empty() || male == female) config_error(field, "needs two distinct non-empty words");
  };
  read_pair("gender_words", params.gender_words.male, params.gender_words.female);
  read_pair("pronouns", params.pronouns.male, params.pronouns.female);

  const auto out = get_string(j, "output_dir", "output_dir");
  if (out.empty()) config_error("output_dir", "empty path");
  cfg.output_dir = fs::path(out).is_relative() ? (base_dir / out).lexically_normal() : fs::path(out);
  cfg.inputs = inputs.take();
  return cfg;
}

ExperimentConfig ExperimentConfig::load(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::ConfigError, "cannot open config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::ConfigError, path.string() + ": " + e.what());
  }
  return from_json(j, path.parent_path().empty() ? fs::path(".") : path.parent_path());
}

ordered_json ExperimentConfig::parameters_json() const {
  ordered_json j;
  j["kind"] = to_string(kind);
  switch (kind) {
    case Kind::NeuronMediation:
      j["top_fraction"] = params.top_fraction;
      j["gender_words"] = {{"male", params.gender_words.male}, {"female", params.gender_words.female}};
      j["pronouns"] = {{"male", params.pronouns.male}, {"female", params.pronouns.female}};
      break;
    case Kind::AttentionMediation:
      j["top_heads"] = params.top_heads;
      break;
    case Kind::Crows:
      j["tie_tolerance"] = metrics::kTieTolerance;
      break;
    case Kind::Seat:
      j["pooling"] = params.pooling ? json(metrics::to_string(*params.pooling)) : json("model-default");
      if (params.permutation->kind == metrics::PermutationMode::Kind::Exact) {
        j["permutation"] = {{"mode", "exact"}};
      } else {
        j["permutation"] = {{"mode", "sampled"}, {"n", params.permutation->samples}, {"seed", params.permutation->seed}};
      }
      break;
    case Kind::Cda:
      j["cda_mode"] = cda::to_string(params.cda_mode);
      break;
  }
  return j;
}

std::unique_ptr<text::Tokenizer> load_tokenizer(const TokenizerSpec& spec) {
  if (spec.type == "bpe") return std::make_unique<text::BpeTokenizer>(text::BpeRules::load(spec.vocab, spec.merges));
  if (spec.type == "vocab") return std::make_unique<text::VocabTokenizer>(text::Vocab::load(spec.vocab));
  throw Error(ErrorCode::ConfigError, "tokenizer type must be vocab|bpe");
}

std::string sha256_hex(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::IoError, "cannot open " + path.string());
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), EVP_MD_CTX_free);
  if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1) {
    throw Error(ErrorCode::IoError, "SHA-256 initialisation failed");
  }
  std::vector<char> buf(1 << 16);
  while (in) {
    in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (in.gcount() > 0) EVP_DigestUpdate(ctx.get(), buf.data(), static_cast<std::size_t>(in.gcount()));
  }
  if (in.bad()) throw Error(ErrorCode::IoError, "read failed: " + path.string());
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx.get(), md, &len);
  static constexpr char hex[] = "0123456789abcdef";
  std::string s;
  for (unsigned int i = 0; i < len; ++i) {
    s += hex[md[i] >> 4];
    s += hex[md[i] & 0xF];
  }
  return s;
}

ordered_json RunManifest::to_json() const {
  auto files = [](const std::vector<FileDigest>& v, const char* key) {
    ordered_json arr = ordered_json::array();
    for (const auto& f : v) arr.push_back({{key, f.name}, {"sha256", f.sha256}, {"bytes", f.bytes}});
    return arr;
  };
  ordered_json j;
  j["kind"] = to_string(kind);
  j["parameters"] = parameters;
  j["inputs"] = files(inputs, "field");
  j["outputs"] = files(outputs, "file");
  j["wall_time_seconds"] = wall_time_seconds;
  return j;
}

RunManifest run_experiment(const ExperimentConfig& config) {
  const auto start = std::chrono::steady_clock::now();
  std::error_code ec;
  fs::create_directories(config.output_dir, ec);
  if (ec) throw Error(ErrorCode::IoError, "cannot create " + config.output_dir.string() + ": " + ec.message());

  Outputs out{config.output_dir, {}};
  switch (config.kind) {
    case Kind::NeuronMediation: run_neuron(config, out); break;
    case Kind::AttentionMediation: run_attention(config, out); break;
    case Kind::Crows: run_crows(config, out); break;
    case Kind::Seat: run_seat_kind(config, out); break;
    case Kind::Cda: run_cda(config, out); break;
  }

  RunManifest manifest;
  manifest.kind = config.kind;
  manifest.parameters = config.parameters_json();
  for (const auto& in : config.inputs) {
    manifest.inputs.push_back({in.field, sha256_hex(in.resolved), fs::file_size(in.resolved)});
  }
  for (const auto& name : out.names) {
    const auto p = config.output_dir / name;
    manifest.outputs.push_back({name, sha256_hex(p), fs::file_size(p)});
  }
  manifest.wall_time_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  write_text(config.output_dir / kManifestName, manifest.to_json().dump(2) + "\n");
  return manifest;
}

PlotSchema parse_schema(std::string_view name) {
  if (name == "layer-profile") return PlotSchema::LayerProfile;
  if (name == "attention-heatmap") return PlotSchema::AttentionHeatmap;
  if (name == "total-effect-table") return PlotSchema::TotalEffectTable;
  throw Error(ErrorCode::SchemaError, "unknown plot schema '" + std::string(name) + "'");
}

std::string emit_plot_data(const PlotSource& source, PlotSchema schema) {
  switch (schema) {
    case PlotSchema::LayerProfile: {
      const auto* buckets = std::get_if<std::vector<mediation::LayerBucket>>(&source);
      if (!buckets) throw Error(ErrorCode::SchemaError, "layer-profile needs layer buckets");
      std::string s = "layer,mean_indirect_effect,count\n";
      for (const auto& b : *buckets) s += line({std::to_string(b.layer), format_number(b.mean_indirect), num(b.count)});
      return s;
    }
    case PlotSchema::AttentionHeatmap: {
      const auto* rows = std::get_if<std::vector<mediation::AttentionRow>>(&source);
      if (!rows) throw Error(ErrorCode::SchemaError, "attention-heatmap needs attention rows");
      std::string s = "head_label,token,weight\n";
      for (const auto& r : *rows) {
        if (r.tokens.size() != r.weights.size()) {
          throw Error(ErrorCode::SchemaError, "attention row " + r.head_label + " has mismatched tokens and weights");
        }
        for (std::size_t i = 0; i < r.tokens.size(); ++i) s += line({r.head_label, r.tokens[i], format_number(r.weights[i])});
      }
      return s;
    }
    case PlotSchema::TotalEffectTable: {
      const auto* report = std::get_if<mediation::EffectReport>(&source);
      if (!report) throw Error(ErrorCode::SchemaError, "total-effect-table needs an effect report");
      std::string s = "group,mean_total_effect,count\n";
      s += line({"overall", format_number(report->overall.mean), num(report->overall.count)});
      s += line({"male", format_number(report->male.mean), num(report->male.count)});
      s += line({"female", format_number(report->female.mean), num(report->female.count)});
      return s;
    }
  }
  throw Error(ErrorCode::SchemaError, "unknown plot schema");
}

}  // namespace medlab::experiment
