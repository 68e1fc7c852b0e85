#include "tulip/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "tulip/error.hpp"
#include "tulip/numeric.hpp"

namespace tulip {

namespace {

std::string fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::string fmt_short(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.4g", v);
    return buf;
}

std::vector<std::string_view> split(std::string_view line, char sep) {
    std::vector<std::string_view> out;
    std::size_t start = 0;
    while (true) {
        const std::size_t pos = line.find(sep, start);
        if (pos == std::string_view::npos) {
            out.push_back(line.substr(start));
            return out;
        }
        out.push_back(line.substr(start, pos - start));
        start = pos + 1;
    }
}

// Non-empty data lines after the header, with their 1-based line numbers.
std::vector<std::pair<std::size_t, std::string_view>> csv_body(std::string_view text, std::string_view header) {
    std::vector<std::pair<std::size_t, std::string_view>> rows;
    std::size_t start = 0, line_no = 0;
    bool seen_header = false;
    while (start < text.size()) {
        std::size_t end = text.find('\n', start);
        if (end == std::string_view::npos) end = text.size();
        std::string_view line = text.substr(start, end - start);
        if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
        start = end + 1;
        ++line_no;
        if (!seen_header) {
            if (line != header) throw ParseError("expected header '" + std::string(header) + "'", line_no);
            seen_header = true;
            continue;
        }
        if (!line.empty()) rows.emplace_back(line_no, line);
    }
    if (!seen_header) throw ParseError("missing header '" + std::string(header) + "'", 1);
    return rows;
}

double to_double(std::string_view field, std::size_t line) {
    const std::string s(field);
    try {
        std::size_t used = 0;
        const double v = std::stod(s, &used);
        if (used == s.size()) return v;
    } catch (const std::exception&) {
    }
    throw ParseError("bad number '" + s + "'", line);
}

std::size_t to_size(std::string_view field, std::size_t line) {
    const std::string s(field);
    if (s.empty() || s.find_first_not_of("0123456789") != std::string::npos)
        throw ParseError("bad integer '" + s + "'", line);
    return std::stoull(s);
}

std::string xml_escape(std::string_view s) {
    std::string out;
    for (char c : s) {
        switch (c) {
            case '&': out += "&amp;"; break;
            case '<': out += "&lt;"; break;
            case '>': out += "&gt;"; break;
            case '"': out += "&quot;"; break;
            default: out += c;
        }
    }
    return out;
}

struct Svg {
    std::ostringstream body;
    double width, height;

    Svg(double w, double h) : width(w), height(h) {}

    void rect(double x, double y, double w, double h, std::string_view fill) {
        body << "<rect x=\"" << x << "\" y=\"" << y << "\" width=\"" << w << "\" height=\"" << h << "\" fill=\""
             << fill << "\"/>\n";
    }
    void text(double x, double y, std::string_view s, std::string_view anchor = "start", int size = 11) {
        body << "<text x=\"" << x << "\" y=\"" << y << "\" font-size=\"" << size << "\" text-anchor=\"" << anchor
             << "\">" << xml_escape(s) << "</text>\n";
    }
    void line(double x1, double y1, double x2, double y2, std::string_view stroke) {
        body << "<line x1=\"" << x1 << "\" y1=\"" << y1 << "\" x2=\"" << x2 << "\" y2=\"" << y2 << "\" stroke=\""
             << stroke << "\"/>\n";
    }
    std::string str() const {
        std::ostringstream out;
        out << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
            << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
            << "\" viewBox=\"0 0 " << width << ' ' << height << "\">\n"
            << "<rect x=\"0\" y=\"0\" width=\"" << width << "\" height=\"" << height << "\" fill=\"white\"/>\n"
            << body.str() << "</svg>\n";
        return out.str();
    }
};

// Blue (low) to red (high) for t in [0, 1].
std::string heat(double t) {
    t = std::clamp(t, 0.0, 1.0);
    const int r = static_cast<int>(std::lround(40 + 215 * t));
    const int b = static_cast<int>(std::lround(255 - 215 * t));
    char buf[16];
    std::snprintf(buf, sizeof buf, "#%02x40%02x", r, b);
    return buf;
}

}  // namespace

SimilarityMatrix similarity_matrix(const Tensor& text, const Tensor& image, std::vector<std::string> text_ids,
                                   std::vector<std::string> image_ids) {
    if (text.cols() != image.cols())
        throw DimensionError("similarity_matrix: widths " + std::to_string(text.cols()) + " and " +
                             std::to_string(image.cols()) + " differ");
    SimilarityMatrix sim{Tensor({text.rows(), image.rows()}), std::move(text_ids), std::move(image_ids)};
    for (std::size_t i = 0; i < text.rows(); ++i)
        for (std::size_t j = 0; j < image.rows(); ++j)
            sim.values.at(i, j) = cosine_similarity(text.row_span(i), image.row_span(j));
    return sim;
}

std::string_view to_string(Direction direction) { return direction == Direction::img2txt ? "img2txt" : "txt2img"; }

Direction parse_direction(std::string_view name) {
    if (name == "img2txt") return Direction::img2txt;
    if (name == "txt2img") return Direction::txt2img;
    throw ConfigError("unknown direction '" + std::string(name) + "'");
}

RetrievalReport recall_at_k(const SimilarityMatrix& sim, std::span<const std::size_t> ks, Direction direction) {
    const Tensor& s = sim.values;
    if (s.rank() != 2 || s.rows() != s.cols())
        throw ContractError("recall_at_k needs a square similarity matrix, got " + shape_string(s.shape()));
    const std::size_t b = s.rows();
    for (std::size_t k : ks)
        if (k == 0 || k > b)
            throw ContractError("recall_at_k: K=" + std::to_string(k) + " outside [1, " + std::to_string(b) + "]");
    // For txt2img a query is a text row ranking image columns; img2txt ranks rows of a column.
    auto score = [&](std::size_t query, std::size_t candidate) {
        return direction == Direction::txt2img ? s.at(query, candidate) : s.at(candidate, query);
    };
    std::vector<std::size_t> ranks(b);
    for (std::size_t q = 0; q < b; ++q) {
        const double target = score(q, q);
        std::size_t rank = 0;
        for (std::size_t c = 0; c < b; ++c) {
            const double v = score(q, c);
            if (v > target || (v == target && c < q)) ++rank;
        }
        ranks[q] = rank;
    }
    RetrievalReport report;
    report.direction = direction;
    for (std::size_t k : ks) {
        const auto hits = std::count_if(ranks.begin(), ranks.end(), [k](std::size_t r) { return r < k; });
        report.k.push_back(k);
        report.recall.push_back(100.0 * static_cast<double>(hits) / static_cast<double>(b));
    }
    return report;
}

std::vector<RetrievalReport> evaluate_retrieval(const DualEncoder& model, const Corpus& corpus,
                                                std::span<const std::size_t> ks) {
    if (!model.image || !model.image_config) throw ContractError("retrieval needs a model with an image encoder");
    if (corpus.empty()) throw ContractError("retrieval on an empty corpus");
    const std::size_t window = model.text_config.max_sequence();
    std::vector<TokenSequence> texts;
    std::vector<const Image*> images;
    std::vector<std::string> ids;
    for (const auto& pair : corpus) {
        texts.push_back(truncate(tokenize(pair.caption), window));
        images.push_back(&pair.image);
        ids.push_back(pair.id);
    }
    const Tensor t = encode_texts(model.text, model.text_config, texts);
    const Tensor i = encode_images(*model.image, *model.image_config, images);
    const SimilarityMatrix sim = similarity_matrix(t, i, ids, ids);
    return {recall_at_k(sim, ks, Direction::img2txt), recall_at_k(sim, ks, Direction::txt2img)};
}

double entropy_nats(std::span<const double> weights) {
    double h = 0.0;
    for (double w : weights)
        if (w > 0.0) h -= w * std::log(w);
    return h;
}

double mass_beyond(std::span<const double> weights, std::size_t boundary) {
    double total = 0.0;
    for (std::size_t i = boundary; i < weights.size(); ++i) total += weights[i];
    return total;
}

AttentionSpread summarize_attention(std::vector<double> weights) {
    AttentionSpread out;
    out.entropy = entropy_nats(weights);
    out.mass_beyond = mass_beyond(weights);
    out.weights = std::move(weights);
    return out;
}

AttentionSpread attention_spread(const TextParams& params, const EncoderConfig& config, const TokenSequence& tokens,
                                 std::optional<std::size_t> layer) {
    const std::size_t l = layer.value_or(config.n_layers - 1);
    std::vector<double> mean(tokens.n(), 0.0);
    for (std::size_t h = 0; h < config.n_heads; ++h) {
        const auto row = extract_attention(params, config, tokens, l, h);
        for (std::size_t i = 0; i < row.size(); ++i) mean[i] += row[i] / static_cast<double>(config.n_heads);
    }
    return summarize_attention(std::move(mean));
}

std::size_t relevance_window_count(std::size_t n, std::size_t size, std::size_t stride) {
    if (size == 0 || stride == 0) throw ContractError("relevance windows need positive size and stride");
    return n >= size ? (n - size) / stride + 1 : 1;
}

std::vector<RelevanceGrid> relevance_distribution(const DualEncoder& model, const ImageCaptionPair& pair,
                                                  std::span<const std::size_t> sizes,
                                                  std::span<const std::size_t> strides) {
    if (sizes.size() != strides.size())
        throw ContractError("relevance_distribution: " + std::to_string(sizes.size()) + " sizes but " +
                            std::to_string(strides.size()) + " strides");
    if (!model.image || !model.image_config) throw ContractError("relevance needs a model with an image encoder");
    const SequenceEmbedding image = encode_image(*model.image, *model.image_config, pair.image);
    const TokenSequence full = tokenize(pair.caption);
    const std::vector<int> content(full.ids.begin() + 1, full.ids.end() - 1);
    const std::size_t n = content.size();

    std::vector<RelevanceGrid> grids;
    for (std::size_t g = 0; g < sizes.size(); ++g) {
        RelevanceGrid grid{sizes[g], strides[g], {}};
        const std::size_t count = relevance_window_count(n, sizes[g], strides[g]);
        std::vector<TokenSequence> windows;
        for (std::size_t w = 0; w < count; ++w) {
            const std::size_t start = n >= sizes[g] ? w * strides[g] : 0;
            const std::size_t end = n >= sizes[g] ? start + sizes[g] : n;
            TokenSequence seq;
            seq.ids.push_back(kBos);
            seq.ids.insert(seq.ids.end(), content.begin() + static_cast<std::ptrdiff_t>(start),
                           content.begin() + static_cast<std::ptrdiff_t>(end));
            seq.ids.push_back(kEos);
            seq.has_eos = true;
            windows.push_back(std::move(seq));
            grid.windows.push_back({w, start, end, 0.0});
        }
        const Tensor emb = encode_texts(model.text, model.text_config, windows);
        for (std::size_t w = 0; w < count; ++w) grid.windows[w].cosine = cosine_similarity(emb.row_span(w), image.vector);
        grids.push_back(std::move(grid));
    }
    return grids;
}

ReportFormat parse_report_format(std::string_view name) {
    if (name == "csv") return ReportFormat::csv;
    if (name == "svg") return ReportFormat::svg;
    throw ConfigError("unknown report format '" + std::string(name) + "' (csv, svg)");
}

std::string retrieval_csv(std::span<const RetrievalReport> reports) {
    std::string out = "direction,k,recall\n";
    for (const auto& r : reports)
        for (std::size_t i = 0; i < r.k.size(); ++i)
            out += std::string(to_string(r.direction)) + ',' + std::to_string(r.k[i]) + ',' + fmt(r.recall[i]) + '\n';
    return out;
}

std::vector<RetrievalReport> parse_retrieval_csv(std::string_view text) {
    std::vector<RetrievalReport> out;
    for (const auto& [line, row] : csv_body(text, "direction,k,recall")) {
        const auto f = split(row, ',');
        if (f.size() != 3) throw ParseError("expected 3 fields", line);
        Direction d;
        try {
            d = parse_direction(f[0]);
        } catch (const ConfigError& e) {
            throw ParseError(e.what(), line);
        }
        if (out.empty() || out.back().direction != d) out.push_back(RetrievalReport{d, {}, {}, {}, {}});
        out.back().k.push_back(to_size(f[1], line));
        out.back().recall.push_back(to_double(f[2], line));
    }
    return out;
}

std::string attention_csv(const AttentionSpread& spread) {
    std::string out = "position,weight\n";
    for (std::size_t i = 0; i < spread.weights.size(); ++i) out += std::to_string(i) + ',' + fmt(spread.weights[i]) + '\n';
    out += "entropy," + fmt(spread.entropy) + '\n';
    out += "mass_beyond_" + std::to_string(kSpreadBoundary) + ',' + fmt(spread.mass_beyond) + '\n';
    return out;
}

AttentionSpread parse_attention_csv(std::string_view text) {
    AttentionSpread out;
    const std::string mass_key = "mass_beyond_" + std::to_string(kSpreadBoundary);
    for (const auto& [line, row] : csv_body(text, "position,weight")) {
        const auto f = split(row, ',');
        if (f.size() != 2) throw ParseError("expected 2 fields", line);
        if (f[0] == "entropy") {
            out.entropy = to_double(f[1], line);
        } else if (f[0] == mass_key) {
            out.mass_beyond = to_double(f[1], line);
        } else {
            if (to_size(f[0], line) != out.weights.size()) throw ParseError("positions must be consecutive", line);
            out.weights.push_back(to_double(f[1], line));
        }
    }
    return out;
}

std::string relevance_csv(std::span<const RelevanceGrid> grids) {
    std::string out = "size,stride,window_index,start,end,cosine\n";
    for (const auto& g : grids)
        for (const auto& w : g.windows)
            out += std::to_string(g.window_size) + ',' + std::to_string(g.stride) + ',' + std::to_string(w.index) +
                   ',' + std::to_string(w.start) + ',' + std::to_string(w.end) + ',' + fmt(w.cosine) + '\n';
    return out;
}

std::vector<RelevanceGrid> parse_relevance_csv(std::string_view text) {
    std::vector<RelevanceGrid> out;
    for (const auto& [line, row] : csv_body(text, "size,stride,window_index,start,end,cosine")) {
        const auto f = split(row, ',');
        if (f.size() != 6) throw ParseError("expected 6 fields", line);
        const std::size_t size = to_size(f[0], line), stride = to_size(f[1], line);
        if (out.empty() || out.back().window_size != size || out.back().stride != stride)
            out.push_back(RelevanceGrid{size, stride, {}});
        out.back().windows.push_back({to_size(f[2], line), to_size(f[3], line), to_size(f[4], line),
                                      to_double(f[5], line)});
    }
    return out;
}

std::string retrieval_svg(std::span<const RetrievalReport> reports) {
    std::size_t bars = 0;
    for (const auto& r : reports) bars += r.k.size();
    const double bar_w = 36, gap = 12, left = 50, top = 30, plot_h = 200;
    Svg svg(left + static_cast<double>(bars) * (bar_w + gap) + 40, top + plot_h + 60);
    svg.text(left, 18, "Recall@K (%)", "start", 13);
    svg.line(left - 4, top + plot_h, svg.width - 20, top + plot_h, "black");
    for (int tick = 0; tick <= 100; tick += 25) {
        const double y = top + plot_h - plot_h * tick / 100.0;
        svg.text(left - 8, y + 4, std::to_string(tick), "end", 10);
    }
    double x = left;
    for (const auto& r : reports) {
        const std::string fill = r.direction == Direction::img2txt ? "#4c78a8" : "#f58518";
        for (std::size_t i = 0; i < r.k.size(); ++i) {
            const double h = plot_h * std::clamp(r.recall[i], 0.0, 100.0) / 100.0;
            svg.rect(x, top + plot_h - h, bar_w, h, fill);
            svg.text(x + bar_w / 2, top + plot_h - h - 4, fmt_short(r.recall[i]), "middle", 9);
            svg.text(x + bar_w / 2, top + plot_h + 14, "R@" + std::to_string(r.k[i]), "middle", 10);
            svg.text(x + bar_w / 2, top + plot_h + 28, std::string(to_string(r.direction)), "middle", 9);
            x += bar_w + gap;
        }
    }
    return svg.str();
}

std::string attention_svg(const AttentionSpread& spread) {
    const std::size_t n = spread.weights.size();
    const double cell = 6, left = 40, top = 40, plot_h = 160;
    Svg svg(left + static_cast<double>(n) * cell + 40, top + plot_h + 50);
    svg.text(left, 16, "aggregation-token attention, entropy " + fmt_short(spread.entropy) + " nats, mass beyond " +
                           std::to_string(kSpreadBoundary) + ": " + fmt_short(spread.mass_beyond),
             "start", 12);
    const double peak = n ? *std::max_element(spread.weights.begin(), spread.weights.end()) : 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double t = peak > 0 ? spread.weights[i] / peak : 0.0;
        const double h = plot_h * t;
        svg.rect(left + static_cast<double>(i) * cell, top + plot_h - h, cell - 1, h, heat(t));
    }
    svg.line(left, top + plot_h, left + static_cast<double>(n) * cell, top + plot_h, "black");
    if (n > kSpreadBoundary) {
        const double x = left + static_cast<double>(kSpreadBoundary) * cell;
        svg.line(x, top, x, top + plot_h, "#888888");
        svg.text(x, top + plot_h + 16, std::to_string(kSpreadBoundary), "middle", 10);
    }
    svg.text(left, top + plot_h + 16, "0", "middle", 10);
    return svg.str();
}

std::string relevance_svg(std::span<const RelevanceGrid> grids) {
    std::size_t widest = 0;
    for (const auto& g : grids)
        for (const auto& w : g.windows) widest = std::max(widest, w.end);
    const double unit = 4, left = 110, top = 30, row_h = 22;
    Svg svg(left + static_cast<double>(widest) * unit + 30, top + static_cast<double>(grids.size()) * row_h * 1.5 + 30);
    svg.text(10, 18, "window cosine to image (blue low, red high)", "start", 12);
    double lo = 1.0, hi = -1.0;
    for (const auto& g : grids)
        for (const auto& w : g.windows) {
            lo = std::min(lo, w.cosine);
            hi = std::max(hi, w.cosine);
        }
    const double span = hi > lo ? hi - lo : 1.0;
    for (std::size_t r = 0; r < grids.size(); ++r) {
        const auto& g = grids[r];
        const double y = top + static_cast<double>(r) * row_h * 1.5;
        svg.text(10, y + row_h / 2 + 4, "size " + std::to_string(g.window_size) + " / " + std::to_string(g.stride),
                 "start", 10);
        for (const auto& w : g.windows) {
            // Windows overlap, so each one paints its stride-wide leading slice.
            const double x = left + static_cast<double>(w.start) * unit;
            const double width = static_cast<double>(std::min(g.stride, w.end - w.start)) * unit;
            svg.rect(x, y, std::max(width, unit), row_h, heat((w.cosine - lo) / span));
        }
    }
    return svg.str();
}

void write_text_file(const std::filesystem::path& path, std::string_view text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    if (!out) throw IoError("failed writing " + path.string());
}

std::string read_text_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    std::ostringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

void emit_report(std::span<const RetrievalReport> reports, const std::filesystem::path& path, ReportFormat format) {
    write_text_file(path, format == ReportFormat::csv ? retrieval_csv(reports) : retrieval_svg(reports));
}

void emit_report(const AttentionSpread& spread, const std::filesystem::path& path, ReportFormat format) {
    write_text_file(path, format == ReportFormat::csv ? attention_csv(spread) : attention_svg(spread));
}

void emit_report(std::span<const RelevanceGrid> grids, const std::filesystem::path& path, ReportFormat format) {
    write_text_file(path, format == ReportFormat::csv ? relevance_csv(grids) : relevance_svg(grids));
}

}  // namespace tulip
