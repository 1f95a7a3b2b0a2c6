#pragma once

// Counterfactual data augmentation: swap gendered words in raw text.

#include <cstddef>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace medlab::cda {

// Bidirectional map of lowercase single-word pairs. Always an involution with
// no fixed points.
class WordPairLexicon {
 public:
  WordPairLexicon() = default;
  // Throws InvalidLexicon on uppercase or non-word characters, a word paired
  // with itself, or a word paired with two different counterparts.
  static WordPairLexicon from_pairs(const std::vector<std::pair<std::string, std::string>>& pairs);
  // `word_a<TAB>word_b` per line; blank lines and '#' comments skipped.
  static WordPairLexicon parse(std::istream& in);
  static WordPairLexicon load(const std::filesystem::path& path);

  std::optional<std::string_view> counterpart(std::string_view lower) const;
  std::size_t size() const { return map_.size(); }
  const std::unordered_map<std::string, std::string>& entries() const { return map_; }

 private:
  std::unordered_map<std::string, std::string> map_;
};

// Bytes that belong to words: ASCII letters, digits, '_' and every byte of a
// multi-byte UTF-8 sequence.
bool is_word_byte(unsigned char c);

struct SwapStats {
  std::map<std::string, std::size_t> swaps;  // keyed by the lowercase source word
  std::size_t mixed_case = 0;

  void merge(const SwapStats& other);
  std::size_t total() const;
};

// Replaces every whole word whose lowercase form is in the lexicon with its
// counterpart, carrying over all-lower, Capitalized or ALL-CAPS casing. Other
// casings take the lowercase counterpart and are counted in stats->mixed_case.
std::string swap_text(std::string_view text, const WordPairLexicon& lexicon, SwapStats* stats = nullptr);

enum class Mode { TwoSided, Replace };

Mode parse_mode(std::string_view name);
std::string_view to_string(Mode m);

struct CorpusStats {
  std::size_t lines_read = 0;
  std::size_t lines_swapped = 0;
  std::size_t lines_written = 0;
  SwapStats words;

  std::string to_json() const;
};

// TwoSided emits each line, then its swapped form when different. Replace
// emits only swapped lines. Lines are processed in parallel chunks and written
// in input order; a missing final newline in the input stays missing.
CorpusStats augment_corpus(std::istream& in, std::ostream& out, const WordPairLexicon& lexicon, Mode mode);

}  // namespace medlab::cda
