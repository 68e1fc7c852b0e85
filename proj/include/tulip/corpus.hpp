#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "tulip/tokenizer.hpp"

namespace tulip {

struct Image {
    std::size_t width = 0;
    std::size_t height = 0;
    std::vector<float> pixels;  // row-major, values in [0, 1]

    friend bool operator==(const Image&, const Image&) = default;
};

// Where the primitives that tell pairs apart sit inside the caption.
enum class AttrOffset { early, late, mixed };

std::string_view to_string(AttrOffset offset);
AttrOffset parse_attr_offset(std::string_view name);

struct PairMetadata {
    std::string placement;           // "early" or "late"
    std::size_t attr_token_offset = 0;  // token index (BOS = 0) where the discriminating text starts
    std::size_t attr_token_end = 0;     // one past its last token
    std::string attr_text;           // the discriminating phrases, verbatim
    std::vector<int> cells;          // primitive code per cell, -1 for empty

    friend bool operator==(const PairMetadata&, const PairMetadata&) = default;
};

struct ImageCaptionPair {
    std::string id;
    std::string caption;
    Image image;
    PairMetadata metadata;

    friend bool operator==(const ImageCaptionPair&, const ImageCaptionPair&) = default;
};

using Corpus = std::vector<ImageCaptionPair>;

// Procedural 16x16 scenes of four cells. Each cell holds one primitive (shape x intensity);
// the caption lists the primitives in order. Two cells vary per pair and the other two are fixed
// for the whole corpus, so only the varying phrases discriminate. `late` places them past the
// 77-token window, `early` inside it. long_fraction of the captions include the fixed cells and
// preamble (always > 77 tokens); the rest only describe the varying cells.
Corpus generate_synthetic_corpus(std::uint64_t seed, std::size_t count, double long_fraction,
                                 AttrOffset offset = AttrOffset::mixed);

// Renders a cell code list back to an image; the generator's images come from here.
Image render_cells(std::span<const int> cells);
std::string describe_primitive(std::size_t cell, int code);

// One JSON record per line: {id, caption, image (base64 of little-endian float32), width, height, metadata}.
void save_corpus(const std::filesystem::path& path, const Corpus& corpus);
Corpus load_corpus(const std::filesystem::path& path);
std::string corpus_to_jsonl(const Corpus& corpus);
Corpus corpus_from_jsonl(std::string_view text);

std::string base64_encode(std::span<const unsigned char> bytes);
// Throws ContractError on malformed input.
std::vector<unsigned char> base64_decode(std::string_view text);

// A training batch: long_view capped at t_g, short_view capped at the teacher window.
struct Batch {
    std::vector<const Image*> images;
    std::vector<TokenSequence> long_view;
    std::vector<TokenSequence> short_view;
};

Batch make_batch(const Corpus& corpus, std::span<const std::size_t> indices, std::size_t t_g,
                 std::size_t t_f = kTeacherWindow);

// Shuffled index order for one epoch, fixed by (seed, epoch).
std::vector<std::size_t> epoch_order(std::size_t count, std::uint64_t seed, std::size_t epoch);

}  // namespace tulip
