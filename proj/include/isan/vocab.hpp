#pragma once

#include <array>
#include <string>
#include <string_view>

#include "isan/types.hpp"

namespace isan {

/// Bijection between single-byte symbols and token ids [0, K).
class Vocab {
 public:
  Vocab() = default;

  explicit Vocab(std::string symbols) : symbols_(std::move(symbols)) {
    if (symbols_.size() < 2) throw VocabError("vocabulary needs at least 2 symbols");
    index_.fill(-1);
    for (std::size_t i = 0; i < symbols_.size(); ++i) {
      auto& slot = index_[static_cast<unsigned char>(symbols_[i])];
      if (slot != -1) throw VocabError(std::string("duplicate symbol '") + symbols_[i] + "'");
      slot = static_cast<TokenId>(i);
    }
  }

  /// Space first, then 'a'-'z'.
  static Vocab text() { return Vocab(" abcdefghijklmnopqrstuvwxyz"); }
  static Vocab paren() { return Vocab("()[]a"); }

  int size() const noexcept { return static_cast<int>(symbols_.size()); }
  const std::string& symbols() const noexcept { return symbols_; }
  char symbol(TokenId id) const {
    if (id < 0 || id >= size()) throw VocabError("token id " + std::to_string(id) + " out of range");
    return symbols_[static_cast<std::size_t>(id)];
  }

  bool contains(char c) const noexcept { return index_[static_cast<unsigned char>(c)] >= 0; }

  TokenId index(char c) const {
    const TokenId id = index_[static_cast<unsigned char>(c)];
    if (id < 0) throw VocabError(std::string("unknown symbol '") + c + "'");
    return id;
  }

  void check(TokenId id) const {
    if (id < 0 || id >= size()) throw VocabError("token id " + std::to_string(id) + " out of range");
  }

  TokenSeq encode(std::string_view s) const {
    TokenSeq out;
    out.reserve(s.size());
    for (char c : s) out.push_back(index(c));
    return out;
  }

  std::string decode(const TokenSeq& ids) const {
    std::string out;
    out.reserve(ids.size());
    for (TokenId id : ids) out.push_back(symbol(id));
    return out;
  }

  /// True when this is the 27-symbol text vocabulary (any order).
  bool is_text() const {
    if (size() != 27 || !contains(' ')) return false;
    for (char c = 'a'; c <= 'z'; ++c)
      if (!contains(c)) return false;
    return true;
  }

  friend bool operator==(const Vocab& a, const Vocab& b) { return a.symbols_ == b.symbols_; }

 private:
  std::string symbols_;
  std::array<TokenId, 256> index_{};
};

/// Lowercase, then map every byte outside 'a'-'z' to a space.
/// Underscore is treated like any other non-letter.
inline std::string normalize_text(std::string_view s) {
  std::string out(s);
  for (char& c : out) {
    if (c >= 'A' && c <= 'Z') c = static_cast<char>(c - 'A' + 'a');
    if (c < 'a' || c > 'z') c = ' ';
  }
  return out;
}

/// normalize_text followed by lookup in the text vocabulary.
inline TokenSeq encode_text(const Vocab& vocab, std::string_view s) {
  return vocab.encode(normalize_text(s));
}

}  // namespace isan
