#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace medlab::text {

using TokenId = std::int32_t;

// Common interface for the two tokenizer families. Implementations are
// immutable after construction and safe to share across threads.
class Tokenizer {
 public:
  virtual ~Tokenizer() = default;

  virtual std::vector<TokenId> encode(std::string_view text) const = 0;
  virtual std::string decode(std::span<const TokenId> ids) const = 0;
  // Display form of one token (used for attention-weight labels).
  virtual std::string token_text(TokenId id) const = 0;
  virtual std::size_t vocab_size() const = 0;
  virtual std::optional<TokenId> mask_id() const { return std::nullopt; }
};

// ---------------------------------------------------------------------------
// Plain whitespace vocabulary.
//
// File format: a header line
//   #vocab [casing=cased|uncased] [unk=TOK] [mask=TOK] [bos=TOK] [eos=TOK]
// followed by one token per line; the first token line is id 0.

struct SpecialTokens {
  std::optional<TokenId> unk;
  std::optional<TokenId> mask;
  std::optional<TokenId> bos;
  std::optional<TokenId> eos;
};

class Vocab {
 public:
  struct SpecialNames {
    std::string unk, mask, bos, eos;  // empty = absent
  };

  Vocab(std::vector<std::string> tokens, bool uncased, const SpecialNames& specials = {});

  static Vocab parse(std::istream& in);
  static Vocab load(const std::filesystem::path& path);
  void save(std::ostream& out) const;

  std::size_t size() const { return tokens_.size(); }
  bool uncased() const { return uncased_; }
  const SpecialTokens& special() const { return special_; }
  const std::string& token(TokenId id) const;
  std::optional<TokenId> find(std::string_view token) const;

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
  bool uncased_ = false;
  SpecialTokens special_;
};

class VocabTokenizer final : public Tokenizer {
 public:
  explicit VocabTokenizer(Vocab vocab) : vocab_(std::move(vocab)) {}

  // Splits on whitespace; folds ASCII case when the vocab is uncased; unknown
  // words map to the unk id (UnknownWord when the vocab has none).
  std::vector<TokenId> encode(std::string_view text) const override;
  // Joins tokens with single spaces.
  std::string decode(std::span<const TokenId> ids) const override;
  std::string token_text(TokenId id) const override;
  std::size_t vocab_size() const override { return vocab_.size(); }
  std::optional<TokenId> mask_id() const override { return vocab_.special().mask; }

  const Vocab& vocab() const { return vocab_; }

 private:
  Vocab vocab_;
};

// ---------------------------------------------------------------------------
// Byte-level BPE (GPT-2 conventions).

// The fixed reversible byte -> printable code point table.
const std::array<char32_t, 256>& byte_to_unicode();

// Splits text into pre-tokens following the GPT-2 word-boundary pattern
//   's|'t|'re|'ve|'m|'ll|'d| ?\p{L}+| ?\p{N}+| ?[^\s\p{L}\p{N}]+|\s+(?!\S)|\s+
// The pieces concatenate back to the input exactly.
std::vector<std::string_view> pretokenize(std::string_view text);

class BpeRules {
 public:
  // vocab: symbol -> id (dense); merges: priority-ordered symbol pairs.
  BpeRules(std::unordered_map<std::string, TokenId> vocab, std::vector<std::pair<std::string, std::string>> merges);

  // Vocabulary JSON object and a merges file ("a b" per line, optional
  // leading "#version" line).
  static BpeRules load(const std::filesystem::path& vocab_json, const std::filesystem::path& merges_txt);
  static BpeRules parse(std::istream& vocab_json, std::istream& merges_txt);

  std::size_t vocab_size() const { return id_to_symbol_.size(); }
  const std::string& symbol(TokenId id) const;
  std::optional<TokenId> find(std::string_view symbol) const;
  // Rank of a merge, lower = applied first.
  std::optional<std::size_t> rank(std::string_view left, std::string_view right) const;
  const std::vector<std::pair<std::string, std::string>>& merges() const { return merges_; }

 private:
  std::unordered_map<std::string, TokenId> vocab_;
  std::vector<std::string> id_to_symbol_;
  std::vector<std::pair<std::string, std::string>> merges_;
  std::unordered_map<std::string, std::size_t> ranks_;
};

class BpeTokenizer final : public Tokenizer {
 public:
  explicit BpeTokenizer(BpeRules rules);

  std::vector<TokenId> encode(std::string_view text) const override;
  std::string decode(std::span<const TokenId> ids) const override;
  std::string token_text(TokenId id) const override;
  std::size_t vocab_size() const override { return rules_.vocab_size(); }

  const BpeRules& rules() const { return rules_; }

 private:
  // Applies merges to one pre-token, returning symbol strings.
  std::vector<std::string> merge_word(std::string_view piece) const;

  BpeRules rules_;
  std::unordered_map<char32_t, unsigned char> unicode_to_byte_;
};

}  // namespace medlab::text
