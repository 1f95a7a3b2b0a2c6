#include "medlab/cda.hpp"

#include <fstream>
#include <istream>
#include <ostream>

#include "json.hpp"
#include "medlab/error.hpp"
#include "medlab/parallel.hpp"

namespace medlab::cda {

namespace {

bool is_upper(char c) { return c >= 'A' && c <= 'Z'; }
bool is_lower(char c) { return c >= 'a' && c <= 'z'; }
char to_lower(char c) { return is_upper(c) ? static_cast<char>(c - 'A' + 'a') : c; }
char to_upper(char c) { return is_lower(c) ? static_cast<char>(c - 'a' + 'A') : c; }

enum class Casing { Lower, Capitalized, AllCaps, Mixed };

Casing casing_of(std::string_view w) {
  bool any_upper = false;
  bool any_lower = false;
  bool upper_after_first = false;
  for (std::size_t i = 0; i < w.size(); ++i) {
    if (is_upper(w[i])) {
      any_upper = true;
      if (i > 0) upper_after_first = true;
    } else if (is_lower(w[i])) {
      any_lower = true;
    }
  }
  if (!any_upper) return Casing::Lower;
  if (is_upper(w[0]) && !upper_after_first) return Casing::Capitalized;
  if (!any_lower && w.size() >= 2) return Casing::AllCaps;
  return Casing::Mixed;
}

std::string apply_casing(std::string_view lower, Casing casing) {
  std::string out(lower);
  switch (casing) {
    case Casing::Capitalized:
      if (!out.empty()) out[0] = to_upper(out[0]);
      break;
    case Casing::AllCaps:
      for (char& c : out) c = to_upper(c);
      break;
    case Casing::Lower:
    case Casing::Mixed:
      break;
  }
  return out;
}

void check_word(const std::string& w, std::size_t line) {
  const std::string where = line ? " (line " + std::to_string(line) + ")" : "";
  if (w.empty()) throw Error(ErrorCode::InvalidLexicon, "empty lexicon word" + where);
  for (char c : w) {
    if (is_upper(c)) throw Error(ErrorCode::InvalidLexicon, "lexicon word '" + w + "' is not lowercase" + where);
    if (!is_word_byte(static_cast<unsigned char>(c))) {
      throw Error(ErrorCode::InvalidLexicon, "lexicon word '" + w + "' contains a non-word character" + where);
    }
  }
}

}  // namespace

bool is_word_byte(unsigned char c) {
  return (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || (c >= '0' && c <= '9') || c == '_' || c >= 0x80;
}

WordPairLexicon WordPairLexicon::from_pairs(const std::vector<std::pair<std::string, std::string>>& pairs) {
  WordPairLexicon lex;
  std::size_t line = 0;
  for (const auto& [a, b] : pairs) {
    ++line;
    check_word(a, 0);
    check_word(b, 0);
    if (a == b) throw Error(ErrorCode::InvalidLexicon, "lexicon word '" + a + "' is paired with itself");
    for (const auto& [from, to] : {std::pair{a, b}, std::pair{b, a}}) {
      auto [it, inserted] = lex.map_.emplace(from, to);
      if (!inserted && it->second != to) {
        throw Error(ErrorCode::InvalidLexicon,
                    "'" + from + "' is paired with both '" + it->second + "' and '" + to + "' (pair " +
                        std::to_string(line) + ")");
      }
    }
  }
  return lex;
}

WordPairLexicon WordPairLexicon::parse(std::istream& in) {
  std::vector<std::pair<std::string, std::string>> pairs;
  std::string raw;
  std::size_t line = 0;
  while (std::getline(in, raw)) {
    ++line;
    if (!raw.empty() && raw.back() == '\r') raw.pop_back();
    if (raw.empty() || raw[0] == '#') continue;
    const auto tab = raw.find('\t');
    if (tab == std::string::npos || raw.find('\t', tab + 1) != std::string::npos) {
      throw Error(ErrorCode::InvalidLexicon, "line " + std::to_string(line) + ": expected word_a<TAB>word_b");
    }
    std::string a = raw.substr(0, tab);
    std::string b = raw.substr(tab + 1);
    check_word(a, line);
    check_word(b, line);
    pairs.emplace_back(std::move(a), std::move(b));
  }
  if (pairs.empty()) throw Error(ErrorCode::InvalidLexicon, "lexicon has no pairs");
  return from_pairs(pairs);
}

WordPairLexicon WordPairLexicon::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::IoError, "cannot open " + path.string());
  return parse(in);
}

std::optional<std::string_view> WordPairLexicon::counterpart(std::string_view lower) const {
  auto it = map_.find(std::string(lower));
  if (it == map_.end()) return std::nullopt;
  return std::string_view(it->second);
}

void SwapStats::merge(const SwapStats& other) {
  for (const auto& [w, n] : other.swaps) swaps[w] += n;
  mixed_case += other.mixed_case;
}

std::size_t SwapStats::total() const {
  std::size_t n = 0;
  for (const auto& [w, c] : swaps) n += c;
  return n;
}

std::string swap_text(std::string_view text, const WordPairLexicon& lexicon, SwapStats* stats) {
  std::string out;
  out.reserve(text.size());
  std::string lower;
  std::size_t i = 0;
  while (i < text.size()) {
    if (!is_word_byte(static_cast<unsigned char>(text[i]))) {
      out.push_back(text[i++]);
      continue;
    }
    std::size_t j = i;
    while (j < text.size() && is_word_byte(static_cast<unsigned char>(text[j]))) ++j;
    const std::string_view word = text.substr(i, j - i);
    lower.assign(word);
    for (char& c : lower) c = to_lower(c);
    if (auto repl = lexicon.counterpart(lower)) {
      const Casing casing = casing_of(word);
      out += apply_casing(*repl, casing);
      if (stats) {
        ++stats->swaps[lower];
        if (casing == Casing::Mixed) ++stats->mixed_case;
      }
    } else {
      out += word;
    }
    i = j;
  }
  return out;
}

Mode parse_mode(std::string_view name) {
  if (name == "two-sided") return Mode::TwoSided;
  if (name == "replace") return Mode::Replace;
  throw Error(ErrorCode::ConfigError, "mode must be two-sided|replace, got '" + std::string(name) + "'");
}

std::string_view to_string(Mode m) { return m == Mode::TwoSided ? "two-sided" : "replace"; }

std::string CorpusStats::to_json() const {
  nlohmann::ordered_json j;
  j["lines_read"] = lines_read;
  j["lines_swapped"] = lines_swapped;
  j["lines_written"] = lines_written;
  j["words_swapped"] = words.total();
  j["mixed_case"] = words.mixed_case;
  j["per_word"] = nlohmann::ordered_json::object();
  for (const auto& [w, n] : words.swaps) j["per_word"][w] = n;
  return j.dump(2) + "\n";
}

CorpusStats augment_corpus(std::istream& in, std::ostream& out, const WordPairLexicon& lexicon, Mode mode) {
  constexpr std::size_t kChunk = 4096;
  CorpusStats stats;
  std::vector<std::string> lines;
  std::vector<std::string> swapped;
  std::vector<SwapStats> line_stats;
  bool first_output = true;
  bool final_newline = true;

  auto emit = [&](const std::string& line) {
    if (!first_output) out.put('\n');
    out << line;
    first_output = false;
    ++stats.lines_written;
  };

  auto flush = [&] {
    swapped.assign(lines.size(), {});
    line_stats.assign(lines.size(), {});
    parallel_for(lines.size(), [&](std::size_t i) { swapped[i] = swap_text(lines[i], lexicon, &line_stats[i]); });
    for (std::size_t i = 0; i < lines.size(); ++i) {
      const bool changed = swapped[i] != lines[i];
      if (changed) ++stats.lines_swapped;
      stats.words.merge(line_stats[i]);
      if (mode == Mode::TwoSided) {
        emit(lines[i]);
        if (changed) emit(swapped[i]);
      } else {
        emit(swapped[i]);
      }
    }
    lines.clear();
  };

  std::string line;
  while (std::getline(in, line)) {
    final_newline = !in.eof();
    ++stats.lines_read;
    lines.push_back(std::move(line));
    line.clear();
    if (lines.size() == kChunk) flush();
  }
  if (in.bad()) throw Error(ErrorCode::StreamError, "read error in corpus input");
  flush();
  if (stats.lines_written > 0 && final_newline) out.put('\n');
  if (!out) throw Error(ErrorCode::StreamError, "write error in corpus output");
  return stats;
}

}  // namespace medlab::cda
