#pragma once

#include <algorithm>
#include <cstdint>
#include <vector>

namespace siu {

using Token = std::int32_t;
using TokenSeq = std::vector<Token>;

inline bool contains_token(const TokenSeq& seq, Token t) {
  return std::find(seq.begin(), seq.end(), t) != seq.end();
}

inline bool contains_any_of(const TokenSeq& seq, const TokenSeq& set) {
  for (Token t : set) {
    if (contains_token(seq, t)) return true;
  }
  return false;
}

// Contiguous subsequence match.
inline bool contains_subsequence(const TokenSeq& hay, const TokenSeq& needle) {
  if (needle.empty()) return true;
  if (hay.size() < needle.size()) return false;
  return std::search(hay.begin(), hay.end(), needle.begin(), needle.end()) !=
         hay.end();
}

inline TokenSeq concat(const TokenSeq& a, const TokenSeq& b) {
  TokenSeq out = a;
  out.insert(out.end(), b.begin(), b.end());
  return out;
}

}  // namespace siu
