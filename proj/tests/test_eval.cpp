#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "support.hpp"
#include "tulip/eval.hpp"

using namespace tulip;

namespace {

SimilarityMatrix square(std::size_t n, std::initializer_list<double> values) {
    return SimilarityMatrix{Tensor::matrix(n, n, values), {}, {}};
}

// Full sort of every query's candidates; equal scores keep index order.
std::vector<double> exhaustive_recall(const Tensor& s, std::span<const std::size_t> ks, Direction direction) {
    const std::size_t b = s.rows();
    std::vector<std::size_t> position(b);
    for (std::size_t q = 0; q < b; ++q) {
        std::vector<std::size_t> order(b);
        std::iota(order.begin(), order.end(), 0);
        auto score = [&](std::size_t c) { return direction == Direction::txt2img ? s.at(q, c) : s.at(c, q); };
        std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t c) { return score(a) > score(c); });
        position[q] = static_cast<std::size_t>(std::find(order.begin(), order.end(), q) - order.begin());
    }
    std::vector<double> out;
    for (std::size_t k : ks) {
        std::size_t hits = 0;
        for (std::size_t p : position) hits += p < k;
        out.push_back(100.0 * static_cast<double>(hits) / static_cast<double>(b));
    }
    return out;
}

EncoderConfig tiny_text() {
    EncoderConfig c;
    c.vocab_size = 300;
    c.d_model = 16;
    c.n_heads = 2;
    c.n_layers = 1;
    c.projection_dim = 8;
    c.context_length = 154;
    c.position.kind = posenc::Scheme::rope_ntk;
    return c;
}

ImageConfig tiny_image() {
    ImageConfig c;
    c.d_model = 16;
    c.n_heads = 2;
    c.n_layers = 1;
    c.projection_dim = 8;
    return c;
}

DualEncoder tiny_model() {
    return DualEncoder{tiny_text(), init_text_params(tiny_text(), 1), tiny_image(), init_image_params(tiny_image(), 2),
                       0.07};
}

}  // namespace

TEST_CASE("recall examples") {
    const std::vector<std::size_t> ks{1, 2, 3};
    const auto eye = square(3, {1, 0, 0, 0, 1, 0, 0, 0, 1});
    for (auto d : {Direction::img2txt, Direction::txt2img}) {
        const auto r = recall_at_k(eye, ks, d);
        CHECK(r.recall == std::vector<double>{100, 100, 100});
        CHECK(r.direction == d);
        CHECK(r.k == ks);
    }

    const auto mixed = square(3, {0.2, 0.9, 0.1, 0.9, 0.2, 0.1, 0.1, 0.1, 0.9});
    const auto k1 = std::vector<std::size_t>{1};
    CHECK(std::abs(recall_at_k(mixed, k1, Direction::txt2img).recall[0] - 100.0 / 3) < 1e-12);

    const auto anti = square(3, {0, 0, 1, 0, 1, 0, 1, 0, 0});
    const auto r = recall_at_k(anti, k1, Direction::txt2img);
    CHECK(std::abs(r.recall[0] - 100.0 / 3) < 1e-12);

    const std::vector<std::size_t> bad_k{4};
    CHECK_THROWS_AS(recall_at_k(eye, bad_k, Direction::txt2img), ContractError);
    const std::vector<std::size_t> zero_k{0};
    CHECK_THROWS_AS(recall_at_k(eye, zero_k, Direction::txt2img), ContractError);
    const SimilarityMatrix rect{Tensor({2, 3}), {}, {}};
    CHECK_THROWS_AS(recall_at_k(rect, k1, Direction::txt2img), ContractError);

    for (auto d : {Direction::img2txt, Direction::txt2img}) CHECK(parse_direction(to_string(d)) == d);
    CHECK_THROWS_AS(parse_direction("both"), ConfigError);
}

TEST_CASE("recall matches exhaustive ranking") {
    Rng rng(21);
    std::vector<std::size_t> ks(10);
    std::iota(ks.begin(), ks.end(), 1);
    for (int trial = 0; trial < 200; ++trial) {
        Tensor s = test::random_tensor(rng, 10, 10, -1, 1);
        // coarse values half the time so ties occur
        if (trial % 2) for (auto& x : s.data()) x = std::round(x * 4.0) / 4.0;
        const SimilarityMatrix sim{s, {}, {}};
        for (auto d : {Direction::img2txt, Direction::txt2img}) {
            const auto r = recall_at_k(sim, ks, d);
            CHECK(r.recall == exhaustive_recall(s, ks, d));
            for (std::size_t i = 1; i < r.recall.size(); ++i) CHECK(r.recall[i] >= r.recall[i - 1]);
            CHECK(r.recall.back() == 100.0);
        }
    }
}

TEST_CASE("similarity matrix") {
    Rng rng(3);
    const Tensor t = test::random_tensor(rng, 4, 5), i = test::random_tensor(rng, 4, 5);
    const auto sim = similarity_matrix(t, i);
    for (double v : sim.values.data()) {
        CHECK(v <= 1.0 + 1e-12);
        CHECK(v >= -1.0 - 1e-12);
    }
    const auto self = similarity_matrix(t, t);
    for (std::size_t r = 0; r < 4; ++r) CHECK(std::abs(self.values.at(r, r) - 1.0) < 1e-12);
    CHECK_THROWS_AS(similarity_matrix(t, test::random_tensor(rng, 4, 3)), DimensionError);
}

TEST_CASE("attention summaries") {
    CHECK(entropy_nats(std::vector<double>{1.0, 0.0, 0.0}) == 0.0);
    CHECK(std::abs(entropy_nats(std::vector<double>(4, 0.25)) - std::log(4.0)) < 1e-12);
    CHECK(std::abs(mass_beyond(std::vector<double>(100, 0.01)) - 0.23) < 1e-12);
    CHECK(mass_beyond(std::vector<double>(77, 1.0 / 77)) == 0.0);

    Rng rng(4);
    for (int t = 0; t < 50; ++t) {
        const std::size_t n = 1 + rng.below(200);
        std::vector<double> w = test::random_vector(rng, n, 0.0, 1.0);
        const double total = std::accumulate(w.begin(), w.end(), 0.0);
        for (auto& x : w) x /= total;
        const auto s = summarize_attention(w);
        CHECK(s.entropy >= -1e-12);
        CHECK(s.entropy <= std::log(static_cast<double>(n)) + 1e-12);
        CHECK(s.mass_beyond >= 0.0);
        CHECK(s.mass_beyond <= 1.0 + 1e-12);
        if (n <= 77) CHECK(s.mass_beyond == 0.0);
    }
}

TEST_CASE("attention spread from a model") {
    const auto model = tiny_model();
    const TokenSequence seq = truncate(tokenize(std::string(120, 'q')), 154);
    const auto spread = attention_spread(model.text, model.text_config, seq);
    REQUIRE(spread.weights.size() == seq.n());
    CHECK(std::abs(std::accumulate(spread.weights.begin(), spread.weights.end(), 0.0) - 1.0) < 1e-9);
    CHECK(spread.mass_beyond > 0.0);
    CHECK(spread == summarize_attention(spread.weights));
}

TEST_CASE("relevance window counts") {
    CHECK(relevance_window_count(100, 20, 5) == 17);
    CHECK(relevance_window_count(10, 20, 5) == 1);
    CHECK(relevance_window_count(20, 20, 5) == 1);
    CHECK_THROWS_AS(relevance_window_count(10, 0, 5), ContractError);
    Rng rng(5);
    for (int t = 0; t < 200; ++t) {
        const std::size_t n = rng.below(300), size = 1 + rng.below(60), stride = 1 + rng.below(20);
        const std::size_t c = relevance_window_count(n, size, stride);
        if (n < size) {
            CHECK(c == 1);
            continue;
        }
        CHECK((c - 1) * stride + size <= n);
        CHECK(c * stride + size > n);
    }
}

TEST_CASE("relevance distribution") {
    const auto model = tiny_model();
    const auto pair = generate_synthetic_corpus(3, 1, 1.0).front();
    const auto grids = relevance_distribution(model, pair);
    REQUIRE(grids.size() == 3);
    const std::size_t n = tokenize(pair.caption).n() - 2;
    for (std::size_t g = 0; g < 3; ++g) {
        CHECK(grids[g].window_size == kDefaultWindowSizes[g]);
        CHECK(grids[g].stride == kDefaultWindowStrides[g]);
        CHECK(grids[g].windows.size() == relevance_window_count(n, kDefaultWindowSizes[g], kDefaultWindowStrides[g]));
        for (const auto& w : grids[g].windows) {
            CHECK(w.end - w.start == kDefaultWindowSizes[g]);
            CHECK(w.end <= n);
            CHECK(w.cosine >= -1.0 - 1e-12);
            CHECK(w.cosine <= 1.0 + 1e-12);
        }
    }
    const std::vector<std::size_t> sizes{20}, strides{5, 10};
    CHECK_THROWS_AS(relevance_distribution(model, pair, sizes, strides), ContractError);
}

TEST_CASE("retrieval on a corpus") {
    const auto model = tiny_model();
    const auto corpus = generate_synthetic_corpus(4, 12, 0.5);
    const std::vector<std::size_t> ks{1, 5, 10};
    const auto reports = evaluate_retrieval(model, corpus, ks);
    REQUIRE(reports.size() == 2);
    CHECK(reports[0].direction == Direction::img2txt);
    CHECK(reports[1].direction == Direction::txt2img);
    for (const auto& r : reports)
        for (double v : r.recall) {
            CHECK(v >= 0.0);
            CHECK(v <= 100.0);
        }
    CHECK_THROWS_AS(evaluate_retrieval(model, {}, ks), ContractError);
}

TEST_CASE("report csv round trips") {
    const std::vector<std::size_t> ks{1, 5};
    const std::vector<RetrievalReport> reports{{Direction::img2txt, ks, {12.5, 50.0}, "", ""},
                                               {Direction::txt2img, ks, {100.0 / 3, 2.0 / 3}, "", ""}};
    const auto text = retrieval_csv(reports);
    CHECK(text.rfind("direction,k,recall\n", 0) == 0);
    CHECK(parse_retrieval_csv(text) == reports);
    CHECK(retrieval_csv({}) == "direction,k,recall\n");
    CHECK(parse_retrieval_csv("direction,k,recall\n").empty());
    try {
        parse_retrieval_csv("direction,k,recall\nimg2txt,1,5\nimg2txt,one,5\n");
        FAIL("expected ParseError");
    } catch (const ParseError& e) {
        CHECK(e.line == 3);
    }

    const auto spread = summarize_attention({0.5, 0.25, 0.125, 0.125});
    CHECK(parse_attention_csv(attention_csv(spread)) == spread);

    const std::vector<RelevanceGrid> grids{{20, 5, {{0, 0, 20, 0.25}, {1, 5, 25, -1.0 / 3}}}, {33, 10, {{0, 0, 12, 0.5}}}};
    CHECK(parse_relevance_csv(relevance_csv(grids)) == grids);
    CHECK_THROWS_AS(parse_relevance_csv("nope\n"), ParseError);
}

TEST_CASE("reports are written to disk") {
    const auto dir = test::scratch_dir("eval");
    const std::vector<std::size_t> ks{1, 5};
    const std::vector<RetrievalReport> reports{{Direction::img2txt, ks, {12.5, 50.0}, "", ""},
                                               {Direction::txt2img, ks, {25.0, 75.0}, "", ""}};
    emit_report(reports, dir / "r.csv", ReportFormat::csv);
    CHECK(read_text_file(dir / "r.csv") == retrieval_csv(reports));
    emit_report(reports, dir / "r.svg", ReportFormat::svg);
    const auto svg = read_text_file(dir / "r.svg");
    CHECK(svg.find("<svg") != std::string::npos);
    CHECK(svg.find("</svg>") != std::string::npos);
    CHECK_THROWS_AS(emit_report(reports, dir / "missing" / "r.csv", ReportFormat::csv), IoError);
    CHECK(parse_report_format("svg") == ReportFormat::svg);
    CHECK_THROWS_AS(parse_report_format("png"), ConfigError);
    CHECK_THROWS_AS(read_text_file(dir / "absent.csv"), IoError);
}
