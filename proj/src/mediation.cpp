#include "medlab/mediation.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "medlab/error.hpp"
#include "medlab/parallel.hpp"

namespace medlab::mediation {

namespace {

std::string trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r\n");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(first, last - first + 1));
}

std::string lower(std::string_view s) {
  std::string out(s);
  for (auto& c : out) {
    if (c >= 'A' && c <= 'Z') c = static_cast<char>(c - 'A' + 'a');
  }
  return out;
}

std::vector<std::string> read_data_lines(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::IoError, "cannot open " + path.string());
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    auto t = trim(line);
    if (t.empty() || t.front() == '#') continue;
    lines.push_back(std::move(t));
  }
  return lines;
}

std::size_t count_occurrences(std::string_view hay, std::string_view needle) {
  std::size_t n = 0;
  for (auto pos = hay.find(needle); pos != std::string_view::npos; pos = hay.find(needle, pos + 1)) ++n;
  return n;
}

bool starts_with(const std::vector<TokenId>& seq, const std::vector<TokenId>& prefix) {
  return prefix.size() <= seq.size() && std::equal(prefix.begin(), prefix.end(), seq.begin());
}

void require_causal(const LanguageModel& lm) {
  if (lm.model.config().family != engine::Family::Causal) {
    throw Error(ErrorCode::WrongFamily, "bias ratio requires a causal model");
  }
}

// Sequences whose logits score both candidates: the bare prompt when both are
// single tokens, otherwise prompt + candidate[:-1] for each candidate.
std::vector<std::vector<TokenId>> scoring_runs(const PromptInstance& p) {
  if (p.stereo.size() == 1 && p.anti.size() == 1) return {p.ids};
  std::vector<std::vector<TokenId>> runs;
  for (const auto* cand : {&p.stereo, &p.anti}) {
    auto seq = p.ids;
    seq.insert(seq.end(), cand->begin(), cand->end() - 1);
    runs.push_back(std::move(seq));
  }
  return runs;
}

double candidate_logprob(const engine::ActivationTrace& trace, std::size_t prompt_len,
                         const std::vector<TokenId>& cand) {
  double total = 0.0;
  for (std::size_t k = 0; k < cand.size(); ++k) {
    const auto row = static_cast<Eigen::Index>(prompt_len - 1 + k);
    total += engine::log_softmax(trace.logits.row(row).transpose())[cand[k]];
  }
  return total;
}

double ratio_from_traces(const PromptInstance& p, const std::vector<engine::ActivationTrace>& traces) {
  const std::size_t n = p.ids.size();
  const double log_stereo = candidate_logprob(traces.front(), n, p.stereo);
  const double log_anti = candidate_logprob(traces.back(), n, p.anti);
  const double log_y = p.protocol == Protocol::Pronoun ? log_anti - log_stereo : log_stereo - log_anti;
  return std::exp(log_y);
}

std::vector<engine::ActivationTrace> run_all(const LanguageModel& lm, const std::vector<std::vector<TokenId>>& runs,
                                             const std::vector<engine::InterventionSpec>* specs = nullptr) {
  std::vector<engine::ActivationTrace> traces;
  traces.reserve(runs.size());
  for (std::size_t r = 0; r < runs.size(); ++r) {
    traces.push_back(specs ? lm.model.forward_trace(runs[r], (*specs)[r]) : lm.model.forward_trace(runs[r]));
  }
  return traces;
}

}  // namespace

std::string_view to_string(GenderClass g) { return g == GenderClass::Male ? "male" : "female"; }
std::string_view to_string(Protocol p) { return p == Protocol::Pronoun ? "pronoun" : "continuation"; }
std::string_view orientation(Protocol p) {
  return p == Protocol::Pronoun ? "p(anti)/p(stereo)" : "p(stereo)/p(anti)";
}

GenderClass opposite(GenderClass g) { return g == GenderClass::Male ? GenderClass::Female : GenderClass::Male; }

std::string site_label(const MediatorSite& site) {
  return std::to_string(site.layer) + "-" + std::to_string(site.index);
}

double proportional_effect(double y_null, double y_intervened) { return (y_intervened - y_null) / y_null; }

// ---------------------------------------------------------------------------
// Data files

std::vector<Profession> load_professions(const std::filesystem::path& path) {
  std::vector<Profession> out;
  for (const auto& line : read_data_lines(path)) {
    const auto comma = line.find(',');
    if (comma == std::string::npos) throw Error(ErrorCode::BadPrompt, "profession line '" + line + "' lacks a comma");
    auto word = trim(line.substr(0, comma));
    auto cls = lower(trim(line.substr(comma + 1)));
    if (word.empty()) throw Error(ErrorCode::BadPrompt, "empty profession in '" + line + "'");
    if (cls == "male" || cls == "male-stereotyped") {
      out.push_back({std::move(word), GenderClass::Male});
    } else if (cls == "female" || cls == "female-stereotyped") {
      out.push_back({std::move(word), GenderClass::Female});
    } else {
      throw Error(ErrorCode::BadPrompt, "unknown gender class '" + cls + "'");
    }
  }
  return out;
}

std::vector<std::string> load_templates(const std::filesystem::path& path) {
  auto lines = read_data_lines(path);
  for (const auto& t : lines) {
    if (count_occurrences(t, kSubjectPlaceholder) != 1) {
      throw Error(ErrorCode::BadPrompt, "template '" + t + "' must contain [subject] exactly once");
    }
  }
  return lines;
}

std::vector<ContinuationItem> load_continuation_items(const std::filesystem::path& path) {
  std::vector<ContinuationItem> out;
  for (const auto& line : read_data_lines(path)) {
    std::vector<std::string> parts;
    std::stringstream ss(line);
    std::string part;
    while (std::getline(ss, part, '|')) parts.push_back(trim(part));
    if (parts.size() != 4 || std::any_of(parts.begin(), parts.end(), [](const auto& p) { return p.empty(); })) {
      throw Error(ErrorCode::BadPrompt, "expected 4 non-empty '|' fields in '" + line + "'");
    }
    out.push_back({parts[0], parts[1], parts[2], parts[3]});
  }
  return out;
}

std::optional<GenderClass> pronoun_gender(std::string_view word) {
  const auto w = lower(word);
  if (w == "he" || w == "him" || w == "his" || w == "himself") return GenderClass::Male;
  if (w == "she" || w == "her" || w == "hers" || w == "herself") return GenderClass::Female;
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// Prompts

std::vector<TokenId> continuation_ids(const text::Tokenizer& tok, std::string_view prefix, std::string_view word) {
  const auto w = trim(word);
  if (w.empty()) throw Error(ErrorCode::BadCandidate, "empty candidate");
  const auto base = tok.encode(prefix);
  const auto full = tok.encode(std::string(prefix) + " " + w);
  if (full.size() <= base.size() || !starts_with(full, base)) {
    throw Error(ErrorCode::BadCandidate, "candidate '" + w + "' does not tokenize as a clean continuation");
  }
  return {full.begin() + static_cast<std::ptrdiff_t>(base.size()), full.end()};
}

namespace {

struct Rendered {
  std::string text;
  std::vector<TokenId> ids;
  int subject_position;
};

Rendered render_subject(const text::Tokenizer& tok, const std::string& tmpl, const std::string& subject) {
  const auto at = tmpl.find(kSubjectPlaceholder);
  if (at == std::string::npos || count_occurrences(tmpl, kSubjectPlaceholder) != 1) {
    throw Error(ErrorCode::BadPrompt, "template '" + tmpl + "' must contain [subject] exactly once");
  }
  const auto prefix = tmpl.substr(0, at);
  Rendered r;
  r.text = prefix + subject + tmpl.substr(at + kSubjectPlaceholder.size());
  if (count_occurrences(r.text, subject) != 1) {
    throw Error(ErrorCode::BadPrompt, "subject '" + subject + "' must occur exactly once in '" + r.text + "'");
  }
  r.ids = tok.encode(r.text);
  const auto upto = tok.encode(prefix + subject);
  const auto before = tok.encode(trim(prefix));
  if (upto.size() <= before.size() || !starts_with(r.ids, upto)) {
    throw Error(ErrorCode::BadPrompt, "subject '" + subject + "' does not tokenize cleanly in '" + r.text + "'");
  }
  r.subject_position = static_cast<int>(upto.size()) - 1;
  return r;
}

}  // namespace

PromptInstance make_pronoun_prompt(const text::Tokenizer& tok, const std::string& template_text, int template_id,
                                   const Profession& profession, const Pronouns& pronouns) {
  auto r = render_subject(tok, template_text, profession.word);
  PromptInstance p;
  p.id = "t" + std::to_string(template_id) + ":" + profession.word;
  p.template_id = template_id;
  p.template_text = template_text;
  p.subject = profession.word;
  p.text = std::move(r.text);
  p.ids = std::move(r.ids);
  p.subject_position = r.subject_position;
  p.gender_class = profession.gender;
  p.protocol = Protocol::Pronoun;
  p.stereo = continuation_ids(tok, p.text, pronouns.for_gender(profession.gender));
  p.anti = continuation_ids(tok, p.text, pronouns.for_gender(opposite(profession.gender)));
  if (p.stereo == p.anti) throw Error(ErrorCode::BadCandidate, "stereotypical and anti-stereotypical pronouns coincide");
  return p;
}

PromptInstance substitute_subject(const text::Tokenizer& tok, const PromptInstance& prompt, const std::string& word) {
  if (prompt.template_text.empty()) throw Error(ErrorCode::BadPrompt, "prompt '" + prompt.id + "' has no template");
  auto r = render_subject(tok, prompt.template_text, word);
  const auto pos = static_cast<std::size_t>(prompt.subject_position);
  if (r.ids.size() != prompt.ids.size() || r.subject_position != prompt.subject_position ||
      !std::equal(r.ids.begin() + static_cast<std::ptrdiff_t>(pos) + 1, r.ids.end(),
                  prompt.ids.begin() + static_cast<std::ptrdiff_t>(pos) + 1)) {
    throw Error(ErrorCode::ResubstitutionError,
                "substituting '" + word + "' into '" + prompt.text + "' changes token alignment");
  }
  PromptInstance out = prompt;
  out.id = prompt.id + "->" + word;
  out.subject = word;
  out.text = std::move(r.text);
  out.ids = std::move(r.ids);
  return out;
}

std::pair<PromptInstance, PromptInstance> make_continuation_pair(const text::Tokenizer& tok,
                                                                  const ContinuationItem& item, int index) {
  const auto text = trim(item.prompt);
  const auto space = text.find_last_of(" \t");
  const auto last_start = space == std::string::npos ? 0 : space + 1;
  const auto pronoun = text.substr(last_start);
  const auto gender = pronoun_gender(pronoun);
  if (!gender) throw Error(ErrorCode::BadPrompt, "prompt '" + text + "' must end with a gendered pronoun");

  PromptInstance orig;
  orig.id = "w" + std::to_string(index);
  orig.template_id = index;
  orig.subject = pronoun;
  orig.text = text;
  orig.ids = tok.encode(text);
  if (orig.ids.empty()) throw Error(ErrorCode::BadPrompt, "prompt '" + text + "' tokenizes to nothing");
  orig.subject_position = static_cast<int>(orig.ids.size()) - 1;
  orig.gender_class = *gender;
  orig.protocol = Protocol::Continuation;
  orig.stereo = continuation_ids(tok, orig.text, item.stereo_continuation);
  orig.anti = continuation_ids(tok, orig.text, item.anti_continuation);
  if (orig.stereo == orig.anti) throw Error(ErrorCode::BadCandidate, "continuations coincide for '" + text + "'");

  PromptInstance swapped = orig;
  swapped.id = orig.id + ":swapped";
  swapped.subject = item.swapped_pronoun;
  swapped.text = text.substr(0, last_start) + item.swapped_pronoun;
  swapped.ids = tok.encode(swapped.text);
  if (swapped.ids.size() != orig.ids.size()) {
    throw Error(ErrorCode::PromptMismatch, "'" + text + "' and '" + swapped.text + "' differ in token count");
  }
  if (continuation_ids(tok, swapped.text, item.stereo_continuation) != orig.stereo ||
      continuation_ids(tok, swapped.text, item.anti_continuation) != orig.anti) {
    throw Error(ErrorCode::BadCandidate, "continuations tokenize differently after the pronoun swap");
  }
  return {std::move(orig), std::move(swapped)};
}

// ---------------------------------------------------------------------------
// Effects

double bias_ratio(const LanguageModel& lm, const PromptInstance& prompt, const engine::InterventionSpec& spec) {
  require_causal(lm);
  if (prompt.stereo.empty() || prompt.anti.empty()) throw Error(ErrorCode::BadCandidate, "empty candidate");
  const auto runs = scoring_runs(prompt);
  const std::vector<engine::InterventionSpec> specs(runs.size(), spec);
  return ratio_from_traces(prompt, run_all(lm, runs, &specs));
}

PairAnalysis::PairAnalysis(const LanguageModel& lm, PromptInstance null_prompt, PromptInstance counterfactual)
    : lm_(lm), null_(std::move(null_prompt)), cf_(std::move(counterfactual)) {
  require_causal(lm_);
  if (null_.ids.size() != cf_.ids.size() || null_.subject_position != cf_.subject_position) {
    throw Error(ErrorCode::PromptMismatch, "'" + null_.text + "' and '" + cf_.text + "' are not token-aligned");
  }
  if (null_.stereo != cf_.stereo || null_.anti != cf_.anti || null_.protocol != cf_.protocol) {
    throw Error(ErrorCode::PromptMismatch, "paired prompts must share candidates and protocol");
  }
  if (null_.stereo.empty() || null_.anti.empty()) throw Error(ErrorCode::BadCandidate, "empty candidate");
  null_runs_ = scoring_runs(null_);
  cf_runs_ = scoring_runs(cf_);
  null_traces_ = run_all(lm_, null_runs_);
  cf_traces_ = run_all(lm_, cf_runs_);
  y_null_ = ratio_from_traces(null_, null_traces_);
  y_cf_ = ratio_from_traces(cf_, cf_traces_);
}

EffectRecord PairAnalysis::record(double y_intervened, std::optional<MediatorSite> site) const {
  EffectRecord r;
  r.prompt_id = null_.id;
  r.gender_class = null_.gender_class;
  r.y_null = y_null_;
  r.y_intervened = y_intervened;
  r.effect = proportional_effect(y_null_, y_intervened);
  r.site = site;
  return r;
}

double PairAnalysis::score(const std::vector<std::vector<TokenId>>& runs,
                           const std::vector<engine::InterventionSpec>& specs) const {
  return ratio_from_traces(null_, run_all(lm_, runs, &specs));
}

EffectRecord PairAnalysis::total_effect() const { return record(y_cf_, std::nullopt); }

EffectRecord PairAnalysis::neuron_indirect(int layer, int unit) const {
  const int pos = null_.subject_position;
  std::vector<engine::InterventionSpec> specs(null_runs_.size());
  for (std::size_t r = 0; r < specs.size(); ++r) {
    if (layer < 0 || layer >= static_cast<int>(cf_traces_[r].layer_outputs.size())) {
      throw Error(ErrorCode::BadSite, "neuron layer " + std::to_string(layer) + " out of range");
    }
    const auto& captured = cf_traces_[r].layer_outputs[static_cast<std::size_t>(layer)];
    if (unit < 0 || unit >= captured.cols()) throw Error(ErrorCode::BadSite, "unit " + std::to_string(unit) + " out of range");
    specs[r].actions.push_back(engine::NeuronSet{layer, pos, unit, captured(pos, unit)});
  }
  return record(score(null_runs_, specs), MediatorSite{MediatorSite::Kind::Neuron, layer, unit});
}

EffectRecord PairAnalysis::neuron_direct(int layer, int unit) const {
  const int pos = null_.subject_position;
  std::vector<engine::InterventionSpec> specs(cf_runs_.size());
  for (std::size_t r = 0; r < specs.size(); ++r) {
    if (layer < 0 || layer >= static_cast<int>(null_traces_[r].layer_outputs.size())) {
      throw Error(ErrorCode::BadSite, "neuron layer " + std::to_string(layer) + " out of range");
    }
    const auto& captured = null_traces_[r].layer_outputs[static_cast<std::size_t>(layer)];
    if (unit < 0 || unit >= captured.cols()) throw Error(ErrorCode::BadSite, "unit " + std::to_string(unit) + " out of range");
    specs[r].actions.push_back(engine::NeuronSet{layer, pos, unit, captured(pos, unit)});
  }
  return record(score(cf_runs_, specs), MediatorSite{MediatorSite::Kind::Neuron, layer, unit});
}

EffectRecord PairAnalysis::attention_indirect(int layer, int head) const {
  std::vector<engine::InterventionSpec> specs(null_runs_.size());
  for (std::size_t r = 0; r < specs.size(); ++r) {
    const auto& probs = cf_traces_[r].attention_probs;
    if (layer < 0 || layer >= static_cast<int>(probs.size()) || head < 0 ||
        head >= static_cast<int>(probs[static_cast<std::size_t>(layer)].size())) {
      throw Error(ErrorCode::BadSite, "head " + std::to_string(layer) + "-" + std::to_string(head) + " out of range");
    }
    specs[r].actions.push_back(
        engine::AttnReplace{layer, head, probs[static_cast<std::size_t>(layer)][static_cast<std::size_t>(head)]});
  }
  return record(score(null_runs_, specs), MediatorSite{MediatorSite::Kind::Head, layer, head});
}

EffectRecord PairAnalysis::attention_direct(int layer, int head) const {
  std::vector<engine::InterventionSpec> specs(cf_runs_.size());
  for (std::size_t r = 0; r < specs.size(); ++r) {
    const auto& probs = null_traces_[r].attention_probs;
    if (layer < 0 || layer >= static_cast<int>(probs.size()) || head < 0 ||
        head >= static_cast<int>(probs[static_cast<std::size_t>(layer)].size())) {
      throw Error(ErrorCode::BadSite, "head " + std::to_string(layer) + "-" + std::to_string(head) + " out of range");
    }
    specs[r].actions.push_back(
        engine::AttnReplace{layer, head, probs[static_cast<std::size_t>(layer)][static_cast<std::size_t>(head)]});
  }
  return record(score(cf_runs_, specs), MediatorSite{MediatorSite::Kind::Head, layer, head});
}

EffectRecord total_effect(const LanguageModel& lm, const PromptInstance& prompt, const std::string& gendered_subject) {
  return PairAnalysis(lm, prompt, substitute_subject(lm.tokenizer, prompt, gendered_subject)).total_effect();
}

EffectRecord neuron_indirect_effect(const LanguageModel& lm, const PromptInstance& prompt,
                                    const std::string& gendered_subject, int layer, int unit) {
  return PairAnalysis(lm, prompt, substitute_subject(lm.tokenizer, prompt, gendered_subject))
      .neuron_indirect(layer, unit);
}

EffectRecord neuron_direct_effect(const LanguageModel& lm, const PromptInstance& prompt,
                                  const std::string& gendered_subject, int layer, int unit) {
  return PairAnalysis(lm, prompt, substitute_subject(lm.tokenizer, prompt, gendered_subject))
      .neuron_direct(layer, unit);
}

EffectRecord attention_effect(const LanguageModel& lm, const PromptInstance& prompt,
                              const PromptInstance& swapped_prompt, int layer, int head, bool direct) {
  PairAnalysis pair(lm, prompt, swapped_prompt);
  return direct ? pair.attention_direct(layer, head) : pair.attention_indirect(layer, head);
}

// ---------------------------------------------------------------------------
// Reports

void summarize(EffectReport& report) {
  double sums[3] = {0.0, 0.0, 0.0};
  std::size_t counts[3] = {0, 0, 0};
  for (const auto& r : report.records) {
    const int g = r.gender_class == GenderClass::Male ? 1 : 2;
    sums[0] += r.effect;
    ++counts[0];
    sums[g] += r.effect;
    ++counts[g];
  }
  auto stats = [&](int k) {
    return GroupStats{counts[k] ? sums[k] / static_cast<double>(counts[k]) : 0.0, counts[k]};
  };
  report.overall = stats(0);
  report.male = stats(1);
  report.female = stats(2);
}

std::vector<MediatorSite> all_neuron_sites(const engine::ModelConfig& config) {
  std::vector<MediatorSite> sites;
  for (int l = 0; l <= config.n_layers; ++l) {
    for (int u = 0; u < config.d_model; ++u) sites.push_back({MediatorSite::Kind::Neuron, l, u});
  }
  return sites;
}

std::vector<MediatorSite> all_head_sites(const engine::ModelConfig& config) {
  std::vector<MediatorSite> sites;
  for (int l = 0; l < config.n_layers; ++l) {
    for (int h = 0; h < config.n_heads; ++h) sites.push_back({MediatorSite::Kind::Head, l, h});
  }
  return sites;
}

namespace {

struct PairSlot {
  std::string id;
  std::optional<PairAnalysis> pair;
  bool skipped = false;
};

EffectReport run_grid(std::vector<PairSlot>& slots, const std::vector<MediatorSite>& sites,
                      Protocol protocol) {
  EffectReport report;
  report.protocol = protocol;
  std::vector<const PairAnalysis*> pairs;
  for (const auto& s : slots) {
    if (s.skipped) {
      report.skipped.push_back(s.id);
    } else {
      pairs.push_back(&*s.pair);
      report.records.push_back(s.pair->total_effect());
    }
  }
  summarize(report);

  const std::size_t n_sites = sites.size();
  std::vector<double> indirect(pairs.size() * n_sites), direct(pairs.size() * n_sites);
  parallel_for(pairs.size() * n_sites, [&](std::size_t k) {
    const auto& pair = *pairs[k / n_sites];
    const auto& site = sites[k % n_sites];
    try {
      if (site.kind == MediatorSite::Kind::Neuron) {
        indirect[k] = pair.neuron_indirect(site.layer, site.index).effect;
        direct[k] = pair.neuron_direct(site.layer, site.index).effect;
      } else {
        indirect[k] = pair.attention_indirect(site.layer, site.index).effect;
        direct[k] = pair.attention_direct(site.layer, site.index).effect;
      }
    } catch (const Error& e) {
      throw Error(e.code(), "prompt '" + pair.null_prompt().id + "' site " + site_label(site) + ": " + e.what());
    }
  });

  report.sites.reserve(n_sites);
  for (std::size_t s = 0; s < n_sites; ++s) {
    SiteEffect se{sites[s], 0.0, 0.0, pairs.size()};
    for (std::size_t p = 0; p < pairs.size(); ++p) {
      se.mean_indirect += indirect[p * n_sites + s];
      se.mean_direct += direct[p * n_sites + s];
    }
    if (!pairs.empty()) {
      se.mean_indirect /= static_cast<double>(pairs.size());
      se.mean_direct /= static_cast<double>(pairs.size());
    }
    report.sites.push_back(se);
  }
  std::sort(report.sites.begin(), report.sites.end(),
            [](const SiteEffect& a, const SiteEffect& b) { return a.site < b.site; });
  return report;
}

}  // namespace

EffectReport run_neuron_mediation(const LanguageModel& lm, const std::vector<std::string>& templates,
                                  const std::vector<Profession>& professions, const GridOptions& options) {
  require_causal(lm);
  const auto sites = options.sites.empty() ? all_neuron_sites(lm.model.config()) : options.sites;
  std::vector<PairSlot> slots(templates.size() * professions.size());
  parallel_for(slots.size(), [&](std::size_t k) {
    const auto t = k / professions.size();
    const auto& prof = professions[k % professions.size()];
    auto& slot = slots[k];
    slot.id = "t" + std::to_string(t) + ":" + prof.word;
    try {
      auto prompt = make_pronoun_prompt(lm.tokenizer, templates[t], static_cast<int>(t), prof, options.pronouns);
      PromptInstance cf;
      try {
        cf = substitute_subject(lm.tokenizer, prompt, options.gender_words.for_gender(opposite(prof.gender)));
      } catch (const Error& e) {
        if (e.code() != ErrorCode::ResubstitutionError) throw;
        slot.skipped = true;
        return;
      }
      slot.pair.emplace(lm, std::move(prompt), std::move(cf));
    } catch (const Error& e) {
      throw Error(e.code(), "prompt '" + slot.id + "': " + e.what());
    }
  });
  return run_grid(slots, sites, Protocol::Pronoun);
}

EffectReport run_attention_mediation(const LanguageModel& lm, const std::vector<ContinuationItem>& items,
                                     const GridOptions& options) {
  require_causal(lm);
  const auto sites = options.sites.empty() ? all_head_sites(lm.model.config()) : options.sites;
  std::vector<PairSlot> slots(items.size());
  parallel_for(slots.size(), [&](std::size_t k) {
    auto& slot = slots[k];
    slot.id = "w" + std::to_string(k);
    try {
      std::pair<PromptInstance, PromptInstance> prompts;
      try {
        prompts = make_continuation_pair(lm.tokenizer, items[k], static_cast<int>(k));
      } catch (const Error& e) {
        if (e.code() != ErrorCode::PromptMismatch) throw;
        slot.skipped = true;
        return;
      }
      slot.pair.emplace(lm, std::move(prompts.first), std::move(prompts.second));
    } catch (const Error& e) {
      throw Error(e.code(), "prompt '" + slot.id + "': " + e.what());
    }
  });
  return run_grid(slots, sites, Protocol::Continuation);
}

std::vector<SiteEffect> select_top_sites(const std::vector<SiteEffect>& sites, double fraction) {
  if (sites.empty()) throw Error(ErrorCode::EmptyReport, "no sites to rank");
  if (!(fraction > 0.0 && fraction <= 1.0)) throw Error(ErrorCode::ConfigError, "fraction must be in (0, 1]");
  const auto n = sites.size();
  // The epsilon keeps binary-fraction artefacts (0.025 * 1000 = 25.000000000000004) from adding a site.
  auto k = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(n) - 1e-9));
  k = std::clamp<std::size_t>(k, 1, n);
  auto ranked = sites;
  std::stable_sort(ranked.begin(), ranked.end(), [](const SiteEffect& a, const SiteEffect& b) {
    if (a.mean_indirect != b.mean_indirect) return a.mean_indirect > b.mean_indirect;
    return a.site < b.site;
  });
  ranked.resize(k);
  return ranked;
}

std::vector<LayerBucket> layer_profile(const std::vector<SiteEffect>& selected, int n_layers) {
  std::vector<LayerBucket> buckets(static_cast<std::size_t>(n_layers) + 1);
  for (int l = 0; l <= n_layers; ++l) buckets[static_cast<std::size_t>(l)].layer = l;
  for (const auto& s : selected) {
    if (s.site.layer < 0 || s.site.layer > n_layers) {
      throw Error(ErrorCode::BadSite, "site layer " + std::to_string(s.site.layer) + " outside 0.." + std::to_string(n_layers));
    }
    auto& b = buckets[static_cast<std::size_t>(s.site.layer)];
    b.mean_indirect += s.mean_indirect;
    ++b.count;
  }
  for (auto& b : buckets) {
    if (b.count > 0) b.mean_indirect /= static_cast<double>(b.count);
  }
  return buckets;
}

std::vector<AttentionRow> attention_weight_report(const LanguageModel& lm, std::span<const TokenId> ids,
                                                  const std::vector<MediatorSite>& heads) {
  const auto trace = lm.model.forward_trace(ids);
  std::vector<std::string> tokens;
  tokens.reserve(ids.size());
  for (auto id : ids) tokens.push_back(lm.tokenizer.token_text(id));
  const auto last = static_cast<Eigen::Index>(ids.size()) - 1;

  std::vector<AttentionRow> rows;
  for (const auto& h : heads) {
    if (h.kind != MediatorSite::Kind::Head || h.layer < 0 || h.layer >= lm.model.config().n_layers || h.index < 0 ||
        h.index >= lm.model.config().n_heads) {
      throw Error(ErrorCode::BadSite, "not an attention head: " + site_label(h));
    }
    const auto& probs = trace.attention_probs[static_cast<std::size_t>(h.layer)][static_cast<std::size_t>(h.index)];
    AttentionRow row;
    row.head_label = site_label(h);
    row.tokens = tokens;
    row.weights.assign(probs.row(last).data(), probs.row(last).data() + probs.cols());
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace medlab::mediation
