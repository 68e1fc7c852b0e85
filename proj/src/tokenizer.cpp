#include "tulip/tokenizer.hpp"

#include "tulip/error.hpp"

namespace tulip {

TokenSequence tokenize(std::string_view text) {
    TokenSequence seq;
    seq.ids.reserve(text.size() + 2);
    seq.ids.push_back(kBos);
    for (unsigned char c : text) seq.ids.push_back(static_cast<int>(c) + kByteOffset);
    seq.ids.push_back(kEos);
    return seq;
}

std::string detokenize(const TokenSequence& seq) {
    std::string out;
    out.reserve(seq.ids.size());
    for (int id : seq.ids)
        if (id >= kByteOffset && id < kByteVocab) out.push_back(static_cast<char>(id - kByteOffset));
    return out;
}

TokenSequence truncate(const TokenSequence& seq, std::size_t limit) {
    if (limit < 2) throw ContractError("truncate: limit must be at least 2, got " + std::to_string(limit));
    if (seq.n() <= limit) return seq;
    TokenSequence out;
    out.ids.assign(seq.ids.begin(), seq.ids.begin() + static_cast<std::ptrdiff_t>(limit - 1));
    out.ids.push_back(kEos);
    out.has_eos = true;
    return out;
}

}  // namespace tulip
