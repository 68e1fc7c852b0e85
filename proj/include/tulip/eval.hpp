#pragma once

#include <array>
#include <cstddef>
#include <optional>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "tulip/corpus.hpp"
#include "tulip/encoder.hpp"
#include "tulip/tensor.hpp"

namespace tulip {

// values[i, j] = cos(text i, image j); pair i is the match of row i.
struct SimilarityMatrix {
    Tensor values;
    std::vector<std::string> text_ids;
    std::vector<std::string> image_ids;
};

// Throws DimensionError when the embedding widths differ.
SimilarityMatrix similarity_matrix(const Tensor& text, const Tensor& image, std::vector<std::string> text_ids = {},
                                   std::vector<std::string> image_ids = {});

enum class Direction { img2txt, txt2img };
std::string_view to_string(Direction direction);
Direction parse_direction(std::string_view name);

struct RetrievalReport {
    Direction direction = Direction::txt2img;
    std::vector<std::size_t> k;
    std::vector<double> recall;  // percent, one per k
    std::string dataset_id;
    std::string checkpoint_id;

    friend bool operator==(const RetrievalReport&, const RetrievalReport&) = default;
};

// A query hits at K when fewer than K candidates outrank its match. Equal scores rank the
// lower index first. Throws ContractError for a non-square matrix or K outside [1, B].
RetrievalReport recall_at_k(const SimilarityMatrix& sim, std::span<const std::size_t> ks, Direction direction);

// Retrieval over a corpus: captions capped at the model's window, both directions.
std::vector<RetrievalReport> evaluate_retrieval(const DualEncoder& model, const Corpus& corpus,
                                                std::span<const std::size_t> ks);

constexpr std::size_t kSpreadBoundary = 77;

struct AttentionSpread {
    std::vector<double> weights;  // aggregation-token attention per position, averaged over heads
    double entropy = 0.0;         // nats
    double mass_beyond = 0.0;     // weight on positions with 0-based index >= 77

    friend bool operator==(const AttentionSpread&, const AttentionSpread&) = default;
};

double entropy_nats(std::span<const double> weights);
double mass_beyond(std::span<const double> weights, std::size_t boundary = kSpreadBoundary);
AttentionSpread summarize_attention(std::vector<double> weights);

// layer defaults to the last block.
AttentionSpread attention_spread(const TextParams& params, const EncoderConfig& config, const TokenSequence& tokens,
                                 std::optional<std::size_t> layer = std::nullopt);

struct RelevanceWindow {
    std::size_t index = 0;
    std::size_t start = 0;  // content-token offsets, end exclusive
    std::size_t end = 0;
    double cosine = 0.0;

    friend bool operator==(const RelevanceWindow&, const RelevanceWindow&) = default;
};

struct RelevanceGrid {
    std::size_t window_size = 0;
    std::size_t stride = 0;
    std::vector<RelevanceWindow> windows;

    friend bool operator==(const RelevanceGrid&, const RelevanceGrid&) = default;
};

inline constexpr std::array<std::size_t, 3> kDefaultWindowSizes{20, 33, 55};
inline constexpr std::array<std::size_t, 3> kDefaultWindowStrides{5, 10, 15};

// floor((n - size) / stride) + 1 for n >= size, otherwise 1.
std::size_t relevance_window_count(std::size_t n, std::size_t size, std::size_t stride);

// Windows slide over the caption's content tokens (BOS/EOS excluded); each window is re-wrapped
// in BOS/EOS and encoded alone. Captions shorter than a window size give one full-length window.
std::vector<RelevanceGrid> relevance_distribution(const DualEncoder& model, const ImageCaptionPair& pair,
                                                  std::span<const std::size_t> sizes = kDefaultWindowSizes,
                                                  std::span<const std::size_t> strides = kDefaultWindowStrides);

enum class ReportFormat { csv, svg };
ReportFormat parse_report_format(std::string_view name);

std::string retrieval_csv(std::span<const RetrievalReport> reports);
std::vector<RetrievalReport> parse_retrieval_csv(std::string_view text);
std::string attention_csv(const AttentionSpread& spread);
AttentionSpread parse_attention_csv(std::string_view text);
std::string relevance_csv(std::span<const RelevanceGrid> grids);
std::vector<RelevanceGrid> parse_relevance_csv(std::string_view text);

std::string retrieval_svg(std::span<const RetrievalReport> reports);
std::string attention_svg(const AttentionSpread& spread);
std::string relevance_svg(std::span<const RelevanceGrid> grids);

// Throws IoError naming the path.
void emit_report(std::span<const RetrievalReport> reports, const std::filesystem::path& path, ReportFormat format);
void emit_report(const AttentionSpread& spread, const std::filesystem::path& path, ReportFormat format);
void emit_report(std::span<const RelevanceGrid> grids, const std::filesystem::path& path, ReportFormat format);

void write_text_file(const std::filesystem::path& path, std::string_view text);
std::string read_text_file(const std::filesystem::path& path);

}  // namespace tulip
