#include "tulip/corpus.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <json.hpp>
#include <sstream>

#include "tulip/error.hpp"
#include "tulip/rng.hpp"

namespace tulip {

namespace {

constexpr std::size_t kSide = 16;
constexpr std::size_t kCellSide = 8;
constexpr std::size_t kShapes = 8;
constexpr std::size_t kIntensities = 3;
constexpr int kPrimitives = static_cast<int>(kShapes * kIntensities);

constexpr std::array<const char*, 4> kCellNames = {"top left", "top right", "bottom left", "bottom right"};
constexpr std::array<const char*, kShapes> kShapeNames = {"block", "ring", "plus", "bar",
                                                          "pole",  "slash", "wedge", "dot"};
constexpr std::array<const char*, kIntensities> kIntensityNames = {"dim", "mid", "bright"};
constexpr std::array<float, kIntensities> kIntensityValues = {0.35f, 0.65f, 1.0f};
constexpr const char* kPreamble = "a grid of four cells on a dark canvas. ";

bool shape_covers(std::size_t shape, std::size_t r, std::size_t c) {
    switch (shape) {
        case 0: return r >= 2 && r <= 5 && c >= 2 && c <= 5;                                   // block
        case 1: {                                                                              // ring
            const bool inside = r >= 1 && r <= 6 && c >= 1 && c <= 6;
            return inside && (r == 1 || r == 6 || c == 1 || c == 6);
        }
        case 2: return ((r == 3 || r == 4) && c >= 1 && c <= 6) || ((c == 3 || c == 4) && r >= 1 && r <= 6);   // plus
        case 3: return r == 3 || r == 4;                                                       // bar
        case 4: return c == 3 || c == 4;                                                       // pole
        case 5: return r + c == 7 || r + c == 8;                                               // slash
        case 6: return r >= c + 2;                                                             // wedge
        case 7: return (r == 3 || r == 4) && (c == 3 || c == 4);                               // dot
        default: return false;
    }
}

std::string phrase(std::size_t cell, int code) {
    return std::string(kCellNames[cell]) + " has a " + kIntensityNames[code / kShapes] + " " +
           kShapeNames[code % kShapes] + ". ";
}

}  // namespace

std::string_view to_string(AttrOffset offset) {
    switch (offset) {
        case AttrOffset::early: return "early";
        case AttrOffset::late: return "late";
        case AttrOffset::mixed: return "mixed";
    }
    return "unknown";
}

AttrOffset parse_attr_offset(std::string_view name) {
    if (name == "early") return AttrOffset::early;
    if (name == "late") return AttrOffset::late;
    if (name == "mixed") return AttrOffset::mixed;
    throw ConfigError("unknown attribute offset '" + std::string(name) + "' (early|late|mixed)");
}

std::string describe_primitive(std::size_t cell, int code) {
    if (cell >= kCellNames.size() || code < 0 || code >= kPrimitives) throw ContractError("no such primitive");
    return phrase(cell, code);
}

Image render_cells(std::span<const int> cells) {
    if (cells.size() != 4) throw DimensionError("render_cells expects 4 cells");
    Image img{kSide, kSide, std::vector<float>(kSide * kSide, 0.0f)};
    for (std::size_t cell = 0; cell < 4; ++cell) {
        const int code = cells[cell];
        if (code < 0) continue;
        const std::size_t shape = static_cast<std::size_t>(code) % kShapes;
        const float value = kIntensityValues[static_cast<std::size_t>(code) / kShapes];
        const std::size_t r0 = (cell / 2) * kCellSide, c0 = (cell % 2) * kCellSide;
        for (std::size_t r = 0; r < kCellSide; ++r)
            for (std::size_t c = 0; c < kCellSide; ++c)
                if (shape_covers(shape, r, c)) img.pixels[(r0 + r) * kSide + c0 + c] = value;
    }
    return img;
}

Corpus generate_synthetic_corpus(std::uint64_t seed, std::size_t count, double long_fraction, AttrOffset offset) {
    if (count == 0) throw ContractError("generate_synthetic_corpus: count must be at least 1");
    if (!(long_fraction >= 0.0 && long_fraction <= 1.0)) throw ContractError("long_fraction must lie in [0, 1]");
    Rng rng(seed);
    // Corpus-wide content of the non-discriminating cells.
    const std::array<int, 4> fixed = {static_cast<int>(rng.below(kPrimitives)), static_cast<int>(rng.below(kPrimitives)),
                                      static_cast<int>(rng.below(kPrimitives)), static_cast<int>(rng.below(kPrimitives))};

    // Varying content is drawn without replacement, cycling through fresh permutations, so small
    // corpora have no duplicate scenes.
    const std::size_t combos = static_cast<std::size_t>(kPrimitives * kPrimitives);
    const std::size_t placements = offset == AttrOffset::mixed ? 2 : 1;
    std::vector<std::size_t> pool;
    std::size_t cursor = 0;

    Corpus corpus;
    corpus.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
        if (cursor == pool.size()) {
            pool.resize(combos * placements);
            for (std::size_t k = 0; k < pool.size(); ++k) pool[k] = k;
            rng.shuffle(std::span(pool));
            cursor = 0;
        }
        const std::size_t draw = pool[cursor++];
        const bool late = offset == AttrOffset::late || (offset == AttrOffset::mixed && draw >= combos);
        const std::size_t combo = draw % combos;
        const int first = static_cast<int>(combo / kPrimitives), second = static_cast<int>(combo % kPrimitives);
        const bool is_long = rng.uniform() < long_fraction;

        // Varying cells: top row when early, bottom row when late.
        const std::size_t vary0 = late ? 2 : 0, vary1 = late ? 3 : 1;
        std::vector<int> cells(4, -1);
        cells[vary0] = first;
        cells[vary1] = second;
        const std::string attr = phrase(vary0, first) + phrase(vary1, second);

        std::string caption, prefix;
        if (!is_long) {
            caption = attr;
        } else if (late) {
            cells[0] = fixed[0];
            cells[1] = fixed[1];
            prefix = std::string(kPreamble) + phrase(0, fixed[0]) + phrase(1, fixed[1]);
            caption = prefix + attr;
        } else {
            cells[2] = fixed[2];
            cells[3] = fixed[3];
            caption = attr + kPreamble + phrase(2, fixed[2]) + phrase(3, fixed[3]);
        }
        while (!caption.empty() && caption.back() == ' ') caption.pop_back();

        ImageCaptionPair pair;
        pair.id = "syn-" + std::to_string(seed) + "-" + std::to_string(i);
        pair.caption = caption;
        pair.image = render_cells(cells);
        pair.metadata.placement = late ? "late" : "early";
        pair.metadata.attr_token_offset = 1 + prefix.size();
        // The final phrase loses its trailing space when it ends the caption.
        pair.metadata.attr_text = caption.substr(prefix.size(), std::min(attr.size(), caption.size() - prefix.size()));
        pair.metadata.attr_token_end = pair.metadata.attr_token_offset + pair.metadata.attr_text.size();
        pair.metadata.cells = cells;
        corpus.push_back(std::move(pair));
    }
    return corpus;
}

std::string base64_encode(std::span<const unsigned char> bytes) {
    static constexpr char kAlphabet[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
    std::string out;
    out.reserve((bytes.size() + 2) / 3 * 4);
    for (std::size_t i = 0; i < bytes.size(); i += 3) {
        const std::uint32_t b0 = bytes[i];
        const std::uint32_t b1 = i + 1 < bytes.size() ? bytes[i + 1] : 0;
        const std::uint32_t b2 = i + 2 < bytes.size() ? bytes[i + 2] : 0;
        const std::uint32_t word = (b0 << 16) | (b1 << 8) | b2;
        out.push_back(kAlphabet[(word >> 18) & 63]);
        out.push_back(kAlphabet[(word >> 12) & 63]);
        out.push_back(i + 1 < bytes.size() ? kAlphabet[(word >> 6) & 63] : '=');
        out.push_back(i + 2 < bytes.size() ? kAlphabet[word & 63] : '=');
    }
    return out;
}

std::vector<unsigned char> base64_decode(std::string_view text) {
    auto value = [](char c) -> int {
        if (c >= 'A' && c <= 'Z') return c - 'A';
        if (c >= 'a' && c <= 'z') return c - 'a' + 26;
        if (c >= '0' && c <= '9') return c - '0' + 52;
        if (c == '+') return 62;
        if (c == '/') return 63;
        return -1;
    };
    if (text.size() % 4 != 0) throw ContractError("base64 length " + std::to_string(text.size()) + " is not a multiple of 4");
    std::vector<unsigned char> out;
    out.reserve(text.size() / 4 * 3);
    for (std::size_t i = 0; i < text.size(); i += 4) {
        const bool last = i + 4 == text.size();
        int v[4];
        std::size_t pad = 0;
        for (std::size_t k = 0; k < 4; ++k) {
            const char c = text[i + k];
            if (c == '=' && last && k >= 2) {
                v[k] = 0;
                ++pad;
                continue;
            }
            if (pad > 0 || (v[k] = value(c)) < 0) throw ContractError("invalid base64 character");
        }
        const std::uint32_t word = (v[0] << 18) | (v[1] << 12) | (v[2] << 6) | v[3];
        out.push_back(static_cast<unsigned char>(word >> 16));
        if (pad < 2) out.push_back(static_cast<unsigned char>((word >> 8) & 0xFF));
        if (pad < 1) out.push_back(static_cast<unsigned char>(word & 0xFF));
    }
    return out;
}

namespace {

std::vector<unsigned char> floats_to_le_bytes(std::span<const float> values) {
    std::vector<unsigned char> out(values.size() * 4);
    for (std::size_t i = 0; i < values.size(); ++i) {
        const std::uint32_t bits = std::bit_cast<std::uint32_t>(values[i]);
        for (std::size_t b = 0; b < 4; ++b) out[i * 4 + b] = static_cast<unsigned char>(bits >> (8 * b));
    }
    return out;
}

std::vector<float> le_bytes_to_floats(std::span<const unsigned char> bytes) {
    std::vector<float> out(bytes.size() / 4);
    for (std::size_t i = 0; i < out.size(); ++i) {
        std::uint32_t bits = 0;
        for (std::size_t b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(bytes[i * 4 + b]) << (8 * b);
        out[i] = std::bit_cast<float>(bits);
    }
    return out;
}

nlohmann::ordered_json pair_to_json(const ImageCaptionPair& p) {
    nlohmann::ordered_json meta = {{"placement", p.metadata.placement},
                                   {"attr_token_offset", p.metadata.attr_token_offset},
                                   {"attr_token_end", p.metadata.attr_token_end},
                                   {"attr_text", p.metadata.attr_text},
                                   {"cells", p.metadata.cells}};
    return {{"id", p.id},
            {"caption", p.caption},
            {"image", base64_encode(floats_to_le_bytes(p.image.pixels))},
            {"width", p.image.width},
            {"height", p.image.height},
            {"metadata", meta}};
}

ImageCaptionPair pair_from_json(const nlohmann::json& j) {
    ImageCaptionPair p;
    p.id = j.at("id").get<std::string>();
    p.caption = j.at("caption").get<std::string>();
    p.image.width = j.at("width").get<std::size_t>();
    p.image.height = j.at("height").get<std::size_t>();
    const auto bytes = base64_decode(j.at("image").get<std::string>());
    if (bytes.size() != p.image.width * p.image.height * 4)
        throw ContractError("image payload holds " + std::to_string(bytes.size()) + " bytes, expected " +
                            std::to_string(p.image.width * p.image.height * 4));
    p.image.pixels = le_bytes_to_floats(bytes);
    if (j.contains("metadata")) {
        const auto& m = j.at("metadata");
        p.metadata.placement = m.value("placement", "");
        p.metadata.attr_token_offset = m.value("attr_token_offset", std::size_t{0});
        p.metadata.attr_token_end = m.value("attr_token_end", std::size_t{0});
        p.metadata.attr_text = m.value("attr_text", "");
        p.metadata.cells = m.value("cells", std::vector<int>{});
    }
    return p;
}

}  // namespace

std::string corpus_to_jsonl(const Corpus& corpus) {
    std::string out;
    for (const auto& pair : corpus) {
        out += pair_to_json(pair).dump();
        out += '\n';
    }
    return out;
}

Corpus corpus_from_jsonl(std::string_view text) {
    Corpus corpus;
    std::size_t line_no = 0;
    std::size_t start = 0;
    while (start < text.size()) {
        std::size_t end = text.find('\n', start);
        if (end == std::string_view::npos) end = text.size();
        ++line_no;
        const std::string_view line = text.substr(start, end - start);
        start = end + 1;
        if (line.find_first_not_of(" \t\r") == std::string_view::npos) continue;
        try {
            corpus.push_back(pair_from_json(nlohmann::json::parse(line)));
        } catch (const nlohmann::json::exception& e) {
            throw ParseError(e.what(), line_no);
        } catch (const ContractError& e) {
            throw ParseError(e.what(), line_no);
        }
    }
    return corpus;
}

void save_corpus(const std::filesystem::path& path, const Corpus& corpus) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    out << corpus_to_jsonl(corpus);
    if (!out) throw IoError("failed writing " + path.string());
}

Corpus load_corpus(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    std::stringstream buffer;
    buffer << in.rdbuf();
    return corpus_from_jsonl(buffer.str());
}

Batch make_batch(const Corpus& corpus, std::span<const std::size_t> indices, std::size_t t_g, std::size_t t_f) {
    if (t_g < t_f) throw ContractError("make_batch: long window below the short window");
    Batch batch;
    for (std::size_t idx : indices) {
        const auto& pair = corpus.at(idx);
        TokenSequence full = truncate(tokenize(pair.caption), t_g);
        batch.short_view.push_back(truncate(full, t_f));
        batch.long_view.push_back(std::move(full));
        batch.images.push_back(&pair.image);
    }
    return batch;
}

std::vector<std::size_t> epoch_order(std::size_t count, std::uint64_t seed, std::size_t epoch) {
    std::vector<std::size_t> order(count);
    for (std::size_t i = 0; i < count; ++i) order[i] = i;
    Rng rng(seed ^ (0x9E3779B97F4A7C15ULL * (epoch + 1)));
    rng.shuffle(std::span(order));
    return order;
}

}  // namespace tulip
