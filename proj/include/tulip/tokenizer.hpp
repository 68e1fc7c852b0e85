#pragma once

#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

namespace tulip {

inline constexpr int kPad = 0;
inline constexpr int kBos = 1;
inline constexpr int kEos = 2;
inline constexpr int kByteOffset = 3;
inline constexpr int kByteVocab = 256 + kByteOffset;  // 259
inline constexpr std::size_t kTeacherWindow = 77;      // T_f

struct TokenSequence {
    std::vector<int> ids;
    bool has_eos = true;

    std::size_t n() const { return ids.size(); }
    friend bool operator==(const TokenSequence&, const TokenSequence&) = default;
};

// Byte-level: BOS, each byte + 3, EOS.
TokenSequence tokenize(std::string_view text);
// Drops specials and maps the remaining ids back to bytes.
std::string detokenize(const TokenSequence& seq);

// First limit-1 ids plus EOS when longer than limit, otherwise unchanged. limit >= 2.
TokenSequence truncate(const TokenSequence& seq, std::size_t limit);

}  // namespace tulip
