#include "medlab/text.hpp"

#include <unicode/uchar.h>

#include <algorithm>
#include <fstream>
#include <istream>
#include <limits>
#include <ostream>
#include <sstream>

#include "json.hpp"
#include "medlab/error.hpp"

namespace medlab::text {

namespace {

bool is_ascii_space(char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v'; }

std::string ascii_lower(std::string_view s) {
  std::string out(s);
  for (auto& c : out) {
    if (c >= 'A' && c <= 'Z') c = static_cast<char>(c - 'A' + 'a');
  }
  return out;
}

void append_utf8(std::string& out, char32_t cp) {
  if (cp < 0x80) {
    out.push_back(static_cast<char>(cp));
  } else if (cp < 0x800) {
    out.push_back(static_cast<char>(0xC0 | (cp >> 6)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  } else if (cp < 0x10000) {
    out.push_back(static_cast<char>(0xE0 | (cp >> 12)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  } else {
    out.push_back(static_cast<char>(0xF0 | (cp >> 18)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 12) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  }
}

// One decoded code point with its byte span. Malformed bytes decode to a
// single-byte unit with cp = 0xFFFD so byte spans always tile the input.
struct CodeUnit {
  char32_t cp;
  std::size_t offset;
  std::size_t length;
};

std::vector<CodeUnit> decode_utf8(std::string_view s) {
  std::vector<CodeUnit> out;
  out.reserve(s.size());
  std::size_t i = 0;
  while (i < s.size()) {
    const auto b0 = static_cast<unsigned char>(s[i]);
    std::size_t len = 0;
    char32_t cp = 0;
    if (b0 < 0x80) {
      len = 1;
      cp = b0;
    } else if ((b0 & 0xE0) == 0xC0) {
      len = 2;
      cp = b0 & 0x1F;
    } else if ((b0 & 0xF0) == 0xE0) {
      len = 3;
      cp = b0 & 0x0F;
    } else if ((b0 & 0xF8) == 0xF0) {
      len = 4;
      cp = b0 & 0x07;
    }
    bool ok = len > 0 && i + len <= s.size();
    for (std::size_t k = 1; ok && k < len; ++k) {
      const auto b = static_cast<unsigned char>(s[i + k]);
      if ((b & 0xC0) != 0x80) ok = false;
      cp = (cp << 6) | (b & 0x3F);
    }
    if (!ok) {
      out.push_back({0xFFFD, i, 1});
      ++i;
    } else {
      out.push_back({cp, i, len});
      i += len;
    }
  }
  return out;
}

bool is_letter(char32_t cp) { return (U_GET_GC_MASK(static_cast<UChar32>(cp)) & U_GC_L_MASK) != 0; }
bool is_number(char32_t cp) { return (U_GET_GC_MASK(static_cast<UChar32>(cp)) & U_GC_N_MASK) != 0; }
bool is_space(char32_t cp) { return u_isUWhiteSpace(static_cast<UChar32>(cp)) != 0; }
bool is_other(char32_t cp) { return !is_space(cp) && !is_letter(cp) && !is_number(cp); }

}  // namespace

// ---------------------------------------------------------------------------
// Vocab

Vocab::Vocab(std::vector<std::string> tokens, bool uncased, const SpecialNames& specials)
    : tokens_(std::move(tokens)), uncased_(uncased) {
  if (tokens_.size() > static_cast<std::size_t>(std::numeric_limits<TokenId>::max())) {
    throw Error(ErrorCode::InvalidVocab, "vocabulary too large");
  }
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    const auto& t = tokens_[i];
    if (t.empty() || std::any_of(t.begin(), t.end(), is_ascii_space)) {
      throw Error(ErrorCode::InvalidVocab, "token " + std::to_string(i) + " is empty or contains whitespace");
    }
    if (!index_.emplace(t, static_cast<TokenId>(i)).second) {
      throw Error(ErrorCode::InvalidVocab, "duplicate token '" + t + "'");
    }
  }
  auto resolve = [&](const std::string& name, const char* role) -> std::optional<TokenId> {
    if (name.empty()) return std::nullopt;
    auto id = find(name);
    if (!id) throw Error(ErrorCode::InvalidVocab, std::string(role) + " token '" + name + "' not in vocabulary");
    return id;
  };
  special_.unk = resolve(specials.unk, "unk");
  special_.mask = resolve(specials.mask, "mask");
  special_.bos = resolve(specials.bos, "bos");
  special_.eos = resolve(specials.eos, "eos");
}

Vocab Vocab::parse(std::istream& in) {
  std::string header;
  if (!std::getline(in, header) || header.rfind("#vocab", 0) != 0) {
    throw Error(ErrorCode::InvalidVocab, "missing '#vocab' header line");
  }
  bool uncased = false;
  SpecialNames names;
  std::istringstream fields(header.substr(6));
  std::string field;
  while (fields >> field) {
    const auto eq = field.find('=');
    if (eq == std::string::npos) throw Error(ErrorCode::InvalidVocab, "malformed header field '" + field + "'");
    const auto key = field.substr(0, eq);
    const auto value = field.substr(eq + 1);
    if (key == "casing") {
      if (value != "cased" && value != "uncased") throw Error(ErrorCode::InvalidVocab, "casing must be cased|uncased");
      uncased = value == "uncased";
    } else if (key == "unk") {
      names.unk = value;
    } else if (key == "mask") {
      names.mask = value;
    } else if (key == "bos") {
      names.bos = value;
    } else if (key == "eos") {
      names.eos = value;
    } else {
      throw Error(ErrorCode::InvalidVocab, "unknown header key '" + key + "'");
    }
  }
  std::vector<std::string> tokens;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    tokens.push_back(line);
  }
  // A single trailing empty line is a file ending, not a token.
  if (!tokens.empty() && tokens.back().empty()) tokens.pop_back();
  return Vocab(std::move(tokens), uncased, names);
}

Vocab Vocab::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::IoError, "cannot open vocab " + path.string());
  return parse(in);
}

void Vocab::save(std::ostream& out) const {
  out << "#vocab casing=" << (uncased_ ? "uncased" : "cased");
  if (special_.unk) out << " unk=" << tokens_[*special_.unk];
  if (special_.mask) out << " mask=" << tokens_[*special_.mask];
  if (special_.bos) out << " bos=" << tokens_[*special_.bos];
  if (special_.eos) out << " eos=" << tokens_[*special_.eos];
  out << '\n';
  for (const auto& t : tokens_) out << t << '\n';
}

const std::string& Vocab::token(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    throw Error(ErrorCode::UnknownId, "token id " + std::to_string(id) + " out of range");
  }
  return tokens_[static_cast<std::size_t>(id)];
}

std::optional<TokenId> Vocab::find(std::string_view token) const {
  auto it = index_.find(std::string(token));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

std::vector<TokenId> VocabTokenizer::encode(std::string_view text) const {
  std::vector<TokenId> ids;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && is_ascii_space(text[i])) ++i;
    std::size_t j = i;
    while (j < text.size() && !is_ascii_space(text[j])) ++j;
    if (j == i) break;
    const auto word = text.substr(i, j - i);
    auto id = vocab_.find(word);  // special tokens match verbatim before folding
    if (!id && vocab_.uncased()) id = vocab_.find(ascii_lower(word));
    if (!id) id = vocab_.special().unk;
    if (!id) throw Error(ErrorCode::UnknownWord, "'" + std::string(word) + "' not in vocabulary and no unk token");
    ids.push_back(*id);
    i = j;
  }
  return ids;
}

std::string VocabTokenizer::decode(std::span<const TokenId> ids) const {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i > 0) out.push_back(' ');
    out += vocab_.token(ids[i]);
  }
  return out;
}

std::string VocabTokenizer::token_text(TokenId id) const { return vocab_.token(id); }

// ---------------------------------------------------------------------------
// Byte-level BPE

const std::array<char32_t, 256>& byte_to_unicode() {
  static const std::array<char32_t, 256> table = [] {
    std::array<char32_t, 256> t{};
    std::array<bool, 256> direct{};
    auto mark = [&](int lo, int hi) {
      for (int b = lo; b <= hi; ++b) direct[static_cast<std::size_t>(b)] = true;
    };
    mark('!', '~');
    mark(0xA1, 0xAC);
    mark(0xAE, 0xFF);
    char32_t next = 256;
    for (std::size_t b = 0; b < 256; ++b) t[b] = direct[b] ? static_cast<char32_t>(b) : next++;
    return t;
  }();
  return table;
}

std::vector<std::string_view> pretokenize(std::string_view text) {
  const auto units = decode_utf8(text);
  const std::size_t n = units.size();
  std::vector<std::string_view> pieces;

  auto emit = [&](std::size_t from, std::size_t to) {
    const std::size_t begin = units[from].offset;
    const std::size_t end = to < n ? units[to].offset : text.size();
    pieces.push_back(text.substr(begin, end - begin));
  };
  auto ascii_at = [&](std::size_t k, char c) { return k < n && units[k].cp == static_cast<char32_t>(c); };

  std::size_t i = 0;
  while (i < n) {
    // contractions
    if (ascii_at(i, '\'')) {
      static constexpr std::string_view kSuffixes[] = {"re", "ve", "ll", "s", "t", "m", "d"};
      std::size_t matched = 0;
      for (auto suf : kSuffixes) {
        bool ok = true;
        for (std::size_t k = 0; k < suf.size() && ok; ++k) ok = ascii_at(i + 1 + k, suf[k]);
        if (ok) {
          matched = suf.size();
          break;
        }
      }
      if (matched > 0) {
        emit(i, i + 1 + matched);
        i += 1 + matched;
        continue;
      }
    }
    // ' ?' followed by a run of one class
    auto class_run = [&](bool (*pred)(char32_t)) -> std::size_t {
      std::size_t j = i;
      if (ascii_at(j, ' ') && j + 1 < n && pred(units[j + 1].cp)) ++j;
      if (j >= n || !pred(units[j].cp)) return i;
      while (j < n && pred(units[j].cp)) ++j;
      return j;
    };
    std::size_t end = class_run(is_letter);
    if (end == i) end = class_run(is_number);
    if (end == i) end = class_run(is_other);
    if (end == i && is_space(units[i].cp)) {
      std::size_t run = i;
      while (run < n && is_space(units[run].cp)) ++run;
      if (run == n || run - i == 1) {
        end = run;  // \s+(?!\S) at end of text, or the plain \s+ fallback
      } else {
        end = run - 1;  // leave the last space to prefix the next word
      }
    }
    emit(i, end);
    i = end;
  }
  return pieces;
}

BpeRules::BpeRules(std::unordered_map<std::string, TokenId> vocab,
                   std::vector<std::pair<std::string, std::string>> merges)
    : vocab_(std::move(vocab)), merges_(std::move(merges)) {
  id_to_symbol_.assign(vocab_.size(), std::string());
  std::vector<bool> seen(vocab_.size(), false);
  for (const auto& [sym, id] : vocab_) {
    if (id < 0 || static_cast<std::size_t>(id) >= vocab_.size() || seen[static_cast<std::size_t>(id)]) {
      throw Error(ErrorCode::InvalidRules, "vocabulary ids must be dense and unique (symbol '" + sym + "')");
    }
    seen[static_cast<std::size_t>(id)] = true;
    id_to_symbol_[static_cast<std::size_t>(id)] = sym;
  }
  for (auto cp : byte_to_unicode()) {
    std::string s;
    append_utf8(s, cp);
    if (!vocab_.contains(s)) throw Error(ErrorCode::InvalidRules, "byte symbol '" + s + "' missing from vocabulary");
  }
  for (std::size_t r = 0; r < merges_.size(); ++r) {
    const auto& [a, b] = merges_[r];
    if (a.empty() || b.empty()) throw Error(ErrorCode::InvalidRules, "empty symbol in merge " + std::to_string(r));
    if (!vocab_.contains(a + b)) {
      throw Error(ErrorCode::InvalidRules, "merge result '" + a + b + "' missing from vocabulary");
    }
    if (!ranks_.emplace(a + " " + b, r).second) {
      throw Error(ErrorCode::InvalidRules, "duplicate merge '" + a + " " + b + "'");
    }
  }
}

BpeRules BpeRules::parse(std::istream& vocab_json, std::istream& merges_txt) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(vocab_json);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::InvalidRules, std::string("vocabulary JSON: ") + e.what());
  }
  if (!j.is_object()) throw Error(ErrorCode::InvalidRules, "vocabulary JSON must be an object");
  std::unordered_map<std::string, TokenId> vocab;
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!it.value().is_number_integer()) throw Error(ErrorCode::InvalidRules, "non-integer id for '" + it.key() + "'");
    vocab.emplace(it.key(), it.value().get<TokenId>());
  }

  std::vector<std::pair<std::string, std::string>> merges;
  std::string line;
  bool first = true;
  while (std::getline(merges_txt, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (first && line.rfind("#version", 0) == 0) {
      first = false;
      continue;
    }
    first = false;
    if (line.empty()) continue;
    const auto sp = line.find(' ');
    if (sp == std::string::npos || sp == 0 || sp + 1 == line.size() || line.find(' ', sp + 1) != std::string::npos) {
      throw Error(ErrorCode::InvalidRules, "malformed merge line '" + line + "'");
    }
    merges.emplace_back(line.substr(0, sp), line.substr(sp + 1));
  }
  return BpeRules(std::move(vocab), std::move(merges));
}

BpeRules BpeRules::load(const std::filesystem::path& vocab_json, const std::filesystem::path& merges_txt) {
  std::ifstream v(vocab_json);
  if (!v) throw Error(ErrorCode::IoError, "cannot open " + vocab_json.string());
  std::ifstream m(merges_txt);
  if (!m) throw Error(ErrorCode::IoError, "cannot open " + merges_txt.string());
  return parse(v, m);
}

const std::string& BpeRules::symbol(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= id_to_symbol_.size()) {
    throw Error(ErrorCode::UnknownId, "token id " + std::to_string(id) + " out of range");
  }
  return id_to_symbol_[static_cast<std::size_t>(id)];
}

std::optional<TokenId> BpeRules::find(std::string_view symbol) const {
  auto it = vocab_.find(std::string(symbol));
  if (it == vocab_.end()) return std::nullopt;
  return it->second;
}

std::optional<std::size_t> BpeRules::rank(std::string_view left, std::string_view right) const {
  std::string key;
  key.reserve(left.size() + right.size() + 1);
  key.append(left).append(" ").append(right);
  auto it = ranks_.find(key);
  if (it == ranks_.end()) return std::nullopt;
  return it->second;
}

BpeTokenizer::BpeTokenizer(BpeRules rules) : rules_(std::move(rules)) {
  const auto& table = byte_to_unicode();
  for (std::size_t b = 0; b < 256; ++b) unicode_to_byte_.emplace(table[b], static_cast<unsigned char>(b));
}

std::vector<std::string> BpeTokenizer::merge_word(std::string_view piece) const {
  const auto& table = byte_to_unicode();
  std::vector<std::string> word;
  word.reserve(piece.size());
  for (unsigned char b : piece) {
    std::string s;
    append_utf8(s, table[b]);
    word.push_back(std::move(s));
  }
  while (word.size() > 1) {
    std::optional<std::size_t> best;
    std::size_t best_at = 0;
    for (std::size_t k = 0; k + 1 < word.size(); ++k) {
      auto r = rules_.rank(word[k], word[k + 1]);
      if (r && (!best || *r < *best)) {
        best = r;
        best_at = k;
      }
    }
    if (!best) break;
    const std::string left = word[best_at];
    const std::string right = word[best_at + 1];
    std::vector<std::string> merged;
    merged.reserve(word.size());
    for (std::size_t k = 0; k < word.size();) {
      if (k + 1 < word.size() && word[k] == left && word[k + 1] == right) {
        merged.push_back(left + right);
        k += 2;
      } else {
        merged.push_back(std::move(word[k]));
        ++k;
      }
    }
    word = std::move(merged);
  }
  return word;
}

std::vector<TokenId> BpeTokenizer::encode(std::string_view text) const {
  std::vector<TokenId> ids;
  for (auto piece : pretokenize(text)) {
    for (const auto& sym : merge_word(piece)) {
      auto id = rules_.find(sym);
      if (!id) throw Error(ErrorCode::InvalidRules, "merged symbol '" + sym + "' has no id");
      ids.push_back(*id);
    }
  }
  return ids;
}

std::string BpeTokenizer::decode(std::span<const TokenId> ids) const {
  std::string out;
  for (auto id : ids) out += token_text(id);
  return out;
}

std::string BpeTokenizer::token_text(TokenId id) const {
  std::string out;
  for (const auto& u : decode_utf8(rules_.symbol(id))) {
    auto it = unicode_to_byte_.find(u.cp);
    if (it == unicode_to_byte_.end()) {
      throw Error(ErrorCode::InvalidRules, "symbol for id " + std::to_string(id) + " is not byte-mapped");
    }
    out.push_back(static_cast<char>(it->second));
  }
  return out;
}

}  // namespace medlab::text
