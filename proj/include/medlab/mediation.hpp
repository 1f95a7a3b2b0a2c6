#pragma once

// Causal mediation quantities over a language model: the bias ratio y(u),
// total effects of a gender substitution, and direct/indirect effects through
// a single residual-stream neuron or attention head.
//
// Two prompt protocols are supported and their y(u) orientations differ:
//   Pronoun       y(u) = p(anti pronoun | u) / p(stereo pronoun | u)
//   Continuation  y(u) = p(stereo continuation | u) / p(anti continuation | u)
//
// Every effect is the proportional change (y_intervened - y_null) / y_null.

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "medlab/engine.hpp"
#include "medlab/text.hpp"

namespace medlab::mediation {

using text::TokenId;

enum class GenderClass { Male, Female };
enum class Protocol { Pronoun, Continuation };

std::string_view to_string(GenderClass g);
std::string_view to_string(Protocol p);
// "p(anti)/p(stereo)" or "p(stereo)/p(anti)".
std::string_view orientation(Protocol p);

// A model paired with the tokenizer that produced its vocabulary.
struct LanguageModel {
  const engine::Transformer& model;
  const text::Tokenizer& tokenizer;
};

// ---------------------------------------------------------------------------
// Data files

struct Profession {
  std::string word;
  GenderClass gender;
};

struct ContinuationItem {
  std::string prompt;
  std::string stereo_continuation;
  std::string anti_continuation;
  std::string swapped_pronoun;
};

// `word,gender_class` per line; gender_class is male|female (a
// "-stereotyped" suffix is accepted). Blank lines and '#' comments skipped.
std::vector<Profession> load_professions(const std::filesystem::path& path);
// One template per line with exactly one `[subject]` placeholder.
std::vector<std::string> load_templates(const std::filesystem::path& path);
// `prompt|stereo_continuation|anti_continuation|swapped_pronoun` per line.
std::vector<ContinuationItem> load_continuation_items(const std::filesystem::path& path);

// Gender of a pronoun (he/him/his/himself, she/her/hers/herself).
std::optional<GenderClass> pronoun_gender(std::string_view word);

// ---------------------------------------------------------------------------
// Prompts

inline constexpr std::string_view kSubjectPlaceholder = "[subject]";

struct PromptInstance {
  std::string id;
  int template_id = 0;
  std::string template_text;  // pronoun protocol only
  std::string subject;
  std::string text;
  std::vector<TokenId> ids;
  // Final token of the subject (pronoun protocol) or of the trailing pronoun
  // (continuation protocol).
  int subject_position = 0;
  std::vector<TokenId> stereo;
  std::vector<TokenId> anti;
  GenderClass gender_class = GenderClass::Male;
  Protocol protocol = Protocol::Pronoun;
};

struct GenderWords {
  std::string male = "man";
  std::string female = "woman";
  const std::string& for_gender(GenderClass g) const { return g == GenderClass::Male ? male : female; }
};

struct Pronouns {
  std::string male = "he";
  std::string female = "she";
  const std::string& for_gender(GenderClass g) const { return g == GenderClass::Male ? male : female; }
};

GenderClass opposite(GenderClass g);

// Tokens appended by `word` after `prefix` (joined with one space). Throws
// BadCandidate when the word tokenizes to nothing or re-segments the prefix.
std::vector<TokenId> continuation_ids(const text::Tokenizer& tok, std::string_view prefix, std::string_view word);

// Renders a profession template. Stereotypical pronoun matches the
// profession's gender class. Throws BadPrompt / BadCandidate.
PromptInstance make_pronoun_prompt(const text::Tokenizer& tok, const std::string& template_text, int template_id,
                                   const Profession& profession, const Pronouns& pronouns = {});

// Same template and candidates with a different subject word (set-gender).
// Throws ResubstitutionError when token alignment changes.
PromptInstance substitute_subject(const text::Tokenizer& tok, const PromptInstance& prompt, const std::string& word);

// Builds the original and pronoun-swapped prompts for one continuation item.
// Throws BadPrompt, BadCandidate or PromptMismatch.
std::pair<PromptInstance, PromptInstance> make_continuation_pair(const text::Tokenizer& tok,
                                                                  const ContinuationItem& item, int index);

// ---------------------------------------------------------------------------
// Effects

struct MediatorSite {
  enum class Kind { Neuron, Head };
  Kind kind = Kind::Neuron;
  int layer = 0;
  int index = 0;  // unit for neurons, head for attention

  auto operator<=>(const MediatorSite&) const = default;
};

std::string site_label(const MediatorSite& site);  // "layer-index"

struct EffectRecord {
  std::string prompt_id;
  GenderClass gender_class = GenderClass::Male;
  double y_null = 1.0;
  double y_intervened = 1.0;
  double effect = 0.0;
  std::optional<MediatorSite> site;
};

double proportional_effect(double y_null, double y_intervened);

// y(u), optionally under an intervention. Intervention sites must lie inside
// the prompt; candidate tokens are appended after it. Requires a causal model.
double bias_ratio(const LanguageModel& lm, const PromptInstance& prompt, const engine::InterventionSpec& spec = {});

// Base traces for a null prompt and its counterfactual, reused across sites.
class PairAnalysis {
 public:
  PairAnalysis(const LanguageModel& lm, PromptInstance null_prompt, PromptInstance counterfactual);

  const PromptInstance& null_prompt() const { return null_; }
  const PromptInstance& counterfactual() const { return cf_; }
  double y_null() const { return y_null_; }
  double y_counterfactual() const { return y_cf_; }

  EffectRecord total_effect() const;
  // Null run with the neuron overridden by its counterfactual value.
  EffectRecord neuron_indirect(int layer, int unit) const;
  // Counterfactual run with the neuron clamped to its null value.
  EffectRecord neuron_direct(int layer, int unit) const;
  // Null run with the head's attention replaced by the counterfactual's.
  EffectRecord attention_indirect(int layer, int head) const;
  // Counterfactual run with the head clamped to the null attention.
  EffectRecord attention_direct(int layer, int head) const;

 private:
  EffectRecord record(double y_intervened, std::optional<MediatorSite> site) const;
  double score(const std::vector<std::vector<TokenId>>& runs, const std::vector<engine::InterventionSpec>& specs) const;

  LanguageModel lm_;
  PromptInstance null_, cf_;
  // One or two scoring sequences (prompt + candidate prefix) per side.
  std::vector<std::vector<TokenId>> null_runs_, cf_runs_;
  std::vector<engine::ActivationTrace> null_traces_, cf_traces_;
  double y_null_ = 1.0, y_cf_ = 1.0;
};

EffectRecord total_effect(const LanguageModel& lm, const PromptInstance& prompt, const std::string& gendered_subject);
EffectRecord neuron_indirect_effect(const LanguageModel& lm, const PromptInstance& prompt,
                                    const std::string& gendered_subject, int layer, int unit);
EffectRecord neuron_direct_effect(const LanguageModel& lm, const PromptInstance& prompt,
                                  const std::string& gendered_subject, int layer, int unit);
// Indirect effect, or the direct analogue when `direct` is set.
EffectRecord attention_effect(const LanguageModel& lm, const PromptInstance& prompt,
                              const PromptInstance& swapped_prompt, int layer, int head, bool direct = false);

// ---------------------------------------------------------------------------
// Reports

struct GroupStats {
  double mean = 0.0;
  std::size_t count = 0;
};

struct SiteEffect {
  MediatorSite site;
  double mean_indirect = 0.0;
  double mean_direct = 0.0;
  std::size_t count = 0;
};

struct EffectReport {
  Protocol protocol = Protocol::Pronoun;
  std::vector<EffectRecord> records;  // per-prompt total effects
  GroupStats overall, male, female;
  std::vector<std::string> skipped;  // prompt ids dropped by alignment checks
  std::vector<SiteEffect> sites;     // sorted by site
};

// Arithmetic means overall and per gender class.
void summarize(EffectReport& report);

struct GridOptions {
  GenderWords gender_words;
  Pronouns pronouns;
  // Empty = every site of the model.
  std::vector<MediatorSite> sites;
};

std::vector<MediatorSite> all_neuron_sites(const engine::ModelConfig& config);
std::vector<MediatorSite> all_head_sites(const engine::ModelConfig& config);

// Total effects for every (template, profession) prompt plus per-site mean
// neuron indirect/direct effects.
EffectReport run_neuron_mediation(const LanguageModel& lm, const std::vector<std::string>& templates,
                                  const std::vector<Profession>& professions, const GridOptions& options = {});

// Pronoun-swap total effects plus per-head mean attention indirect/direct effects.
EffectReport run_attention_mediation(const LanguageModel& lm, const std::vector<ContinuationItem>& items,
                                     const GridOptions& options = {});

// Sites ranked by mean indirect effect (descending, ties by site ascending);
// returns ceil(fraction * count) of them. Throws EmptyReport.
std::vector<SiteEffect> select_top_sites(const std::vector<SiteEffect>& sites, double fraction);

struct LayerBucket {
  int layer = 0;
  double mean_indirect = 0.0;  // 0 when count == 0
  std::size_t count = 0;
};

// One bucket per residual layer 0..n_layers.
std::vector<LayerBucket> layer_profile(const std::vector<SiteEffect>& selected, int n_layers);

struct AttentionRow {
  std::string head_label;  // "layer-head"
  std::vector<std::string> tokens;
  std::vector<double> weights;
};

// Attention of the final prompt position over all prompt tokens, per head.
std::vector<AttentionRow> attention_weight_report(const LanguageModel& lm, std::span<const TokenId> ids,
                                                  const std::vector<MediatorSite>& heads);

}  // namespace medlab::mediation
