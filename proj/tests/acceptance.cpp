// One PASS/FAIL line per acceptance criterion. Optional arguments pick criteria by number.
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>

#include "grad_cases.hpp"
#include "tulip/cli.hpp"
#include "tulip/eval.hpp"
#include "tulip/manifest.hpp"
#include "tulip/numeric.hpp"

using namespace tulip;
using posenc::Scheme;

namespace {

struct Verdict {
    bool pass = false;
    std::string detail;
};

class Stopwatch {
public:
    double seconds() const { return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count(); }

private:
    std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

std::string fmt(const char* f, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

TokenSequence letters(std::size_t n) {
    TokenSequence s;
    s.ids.push_back(kBos);
    for (std::size_t i = 0; i + 2 < n; ++i) s.ids.push_back(kByteOffset + 'a' + static_cast<int>(i % 26));
    s.ids.push_back(kEos);
    return s;
}

// R@1 in percent, averaged over both directions.
struct Recall {
    double img2txt = 0, txt2img = 0;
    double mean() const { return 0.5 * (img2txt + txt2img); }
};

Recall recall_at_1(const DualEncoder& model, const Corpus& corpus) {
    const std::size_t k[] = {1};
    const auto r = evaluate_retrieval(model, corpus, k);
    return {r[0].recall[0], r[1].recall[0]};
}

// Toy pipeline shared by criteria 5-8, built on first use.
class Pipeline {
public:
    const Checkpoint& teacher() {
        if (!teacher_) {
            Stopwatch w;
            TeacherConfig c;
            c.epochs = 20;
            c.batch_size = 32;
            c.learning_rate = 1e-3;
            c.warmup_steps = 20;
            c.seed = 1;
            teacher_ = make_teacher(generate_synthetic_corpus(11, 1000, 0.0, AttrOffset::mixed), c).checkpoint;
            teacher_seconds = w.seconds();
        }
        return *teacher_;
    }

    const Checkpoint& student() {
        if (!student_) {
            const Checkpoint& t = teacher();
            Stopwatch w;
            EncoderConfig sc = t.model.text_config;
            sc.position.kind = Scheme::rope;
            DistillConfig c;
            c.epochs = 8;
            c.learning_rate = 1e-3;
            c.warmup_steps = 50;
            c.seed = 2;
            student_ = run_distillation(t, sc, generate_synthetic_corpus(12, 2000, 0.0, AttrOffset::mixed), c).checkpoint;
            distill_seconds = w.seconds();
        }
        return *student_;
    }

    static ExpandConfig expansion(std::size_t t_g, bool vision_trainable) {
        ExpandConfig c;
        c.t_g = t_g;
        c.epochs = 3;
        c.learning_rate = 3e-4;
        c.warmup_steps = 10;
        c.seed = 3;
        c.vision_trainable = vision_trainable;
        return c;
    }

    const Corpus& expansion_corpus() {
        if (!expansion_corpus_) expansion_corpus_ = generate_synthetic_corpus(14, 2000, 0.5, AttrOffset::late);
        return *expansion_corpus_;
    }

    // Held out: every caption long, attributes past token 77.
    const Corpus& eval_corpus() {
        if (!eval_corpus_) eval_corpus_ = generate_synthetic_corpus(15, 200, 1.0, AttrOffset::late);
        return *eval_corpus_;
    }

    const Checkpoint& frozen(std::size_t t_g) {
        auto& slot = frozen_[t_g];
        if (!slot) {
            Stopwatch w;
            slot = run_expansion(student(), expansion_corpus(), expansion(t_g, false)).checkpoint;
            frozen_seconds[t_g] = w.seconds();
        }
        return *slot;
    }

    double teacher_seconds = 0, distill_seconds = 0;
    std::map<std::size_t, double> frozen_seconds;

private:
    std::optional<Checkpoint> teacher_, student_;
    std::optional<Corpus> expansion_corpus_, eval_corpus_;
    std::map<std::size_t, std::optional<Checkpoint>> frozen_;
};

Pipeline pipeline;

Verdict shift_invariance() {
    Stopwatch w;
    Rng rng(2024);
    double worst = 0.0;
    std::size_t cases = 0;
    for (std::size_t d : {4u, 8u, 64u}) {
        const auto f = posenc::RotaryFrequencies::make(d);
        for (int t = 0; t < 500; ++t, ++cases) {
            const auto q = test::random_vector(rng, d), k = test::random_vector(rng, d);
            const std::size_t m = rng.below(1000), n = rng.below(1000), s = rng.below(1000);
            const double a = dot(posenc::rope_rotate(q, m, f), posenc::rope_rotate(k, n, f));
            const double b = dot(posenc::rope_rotate(q, m + s, f), posenc::rope_rotate(k, n + s, f));
            worst = std::max(worst, std::abs(a - b));
        }
    }
    // absolute witness: the same shifted pair through a position table
    const Tensor table = test::random_tensor(rng, 77, 4);
    const auto q = test::random_vector(rng, 4), k = test::random_vector(rng, 4);
    auto encoded = [&](const std::vector<double>& v, std::size_t pos) {
        const auto row = posenc::absolute_encode(pos, table);
        std::vector<double> out(v.size());
        for (std::size_t i = 0; i < v.size(); ++i) out[i] = v[i] + row[i];
        return out;
    };
    const double witness = std::abs(dot(encoded(q, 3), encoded(k, 1)) - dot(encoded(q, 13), encoded(k, 11)));
    const double secs = w.seconds();
    return {worst < 1e-8 && witness > 1e-8 && secs < 5.0,
            fmt("rope max |dot gap| %.2e over %zu cases (d in 4, 8, 64); absolute witness gap %.3f; %.2f s", worst,
                cases, witness, secs)};
}

Verdict ntk_formula() {
    const double factor = posenc::ntk_scale_factor(8.0, 77, 248);
    Rng rng(7);
    bool identity = true;
    for (int t = 0; t < 20; ++t) {
        const double alpha = rng.uniform(1.0, 64.0);
        const std::size_t T = 1 + rng.below(1000);
        identity = identity && posenc::ntk_scale_factor(alpha, T, T) == 1.0;
    }
    return {std::abs(factor - 18.766233766233766) < 1e-9 && identity,
            fmt("factor(8, 77, 248) = %.15f; factor(alpha, T, T) == 1 for 20 random alpha: %s", factor,
                identity ? "yes" : "no")};
}

Verdict gradients() {
    Stopwatch w;
    double worst_op = 0.0;
    std::string worst_name;
    const auto cases = test::op_cases();
    for (const auto& c : cases) {
        const double e = test::worst_over_trials(c.seed, c.make);
        if (e >= worst_op) worst_op = e, worst_name = c.name;
    }
    double worst_model = 0.0;
    for (auto scheme : {Scheme::absolute, Scheme::rope, Scheme::rope_ntk, Scheme::cope})
        worst_model = std::max(worst_model, test::model_joint_loss_check(scheme).worst);
    const double secs = w.seconds();
    return {worst_op < test::kGradTolerance && worst_model < test::kGradTolerance && secs < 60.0,
            fmt("%zu ops x %d trials worst rel err %.2e (%s); full joint loss, 4 schemes, worst %.2e; %.1f s",
                cases.size(), test::kGradTrials, worst_op, worst_name.c_str(), worst_model, secs)};
}

Verdict loss_oracles() {
    const Tensor eye = Tensor::matrix(2, 2, {1, 0, 0, 1});
    const double expect = -std::log(std::exp(1.0) / (std::exp(1.0) + 1.0));
    const double got = contrastive_loss(eye, eye, 1.0);

    Rng rng(3);
    const Tensor s = test::random_tensor(rng, 4, 6), l = test::random_tensor(rng, 4, 6), im = test::random_tensor(rng, 4, 6);
    const double ls = contrastive_loss(s, im, 0.5), ll = contrastive_loss(l, im, 0.5);
    double affine_gap = 0.0;
    for (double lambda : {0.0, 0.25, 0.5, 0.75, 1.0}) {
        Tape tape;
        const double j = joint_loss(tape.constant(s), tape.constant(l), tape.constant(im), lambda,
                                    tape.constant(Tensor::scalar(0.5)))
                             .value()
                             .item();
        affine_gap = std::max(affine_gap, std::abs(j - (lambda * ls + (1.0 - lambda) * ll)));
    }

    const std::vector<double> v{1.0, 2.0, -0.5}, ortho{2.0, -1.0, 0.0}, neg{-1.0, -2.0, 0.5};
    const double e0 = distill_loss(v, v, DistillLossKind::cosine);
    const double e1 = distill_loss(v, ortho, DistillLossKind::cosine);
    const double e2 = distill_loss(v, neg, DistillLossKind::cosine);
    const double endpoint_gap = std::max({std::abs(e0), std::abs(e1 - 1.0), std::abs(e2 - 2.0)});
    return {std::abs(got - expect) < 1e-9 && affine_gap < 1e-12 && endpoint_gap < 1e-12,
            fmt("B=2 orthogonal %.12f vs %.12f; joint affine gap %.1e at 5 lambdas; cosine endpoints gap %.1e", got,
                expect, affine_gap, endpoint_gap)};
}

Verdict out_of_window() {
    const TokenSequence probe = letters(100);
    const Checkpoint& teacher = pipeline.teacher();
    std::string teacher_error;
    try {
        encode_text(teacher.model.text, teacher.model.text_config, probe);
    } catch (const OutOfWindowError& e) {
        teacher_error = e.what();
    }
    const Checkpoint& expanded = pipeline.frozen(154);
    bool encoded = false;
    std::string kind = std::string(posenc::to_string(expanded.model.text_config.position.kind));
    try {
        const auto emb = encode_text(expanded.model.text, expanded.model.text_config, probe);
        encoded = emb.source_length == 100 && emb.vector.size() == expanded.model.text_config.projection_dim;
    } catch (const Error&) {
    }
    return {!teacher_error.empty() && encoded && kind == "rope_ntk",
            fmt("teacher: \"%s\"; expanded %s window %zu encodes 100 tokens: %s", teacher_error.c_str(), kind.c_str(),
                expanded.model.text_config.max_sequence(), encoded ? "yes" : "no")};
}

Verdict distillation() {
    const Checkpoint& teacher = pipeline.teacher();
    const Checkpoint& student = pipeline.student();
    std::vector<TokenSequence> views;
    for (const auto& p : generate_synthetic_corpus(13, 300, 0.0, AttrOffset::mixed))
        views.push_back(truncate(tokenize(p.caption), kTeacherWindow));
    const Tensor a = encode_texts(teacher.model.text, teacher.model.text_config, views);
    const Tensor b = encode_texts(student.model.text, student.model.text_config, views);
    double mean = 0.0;
    for (std::size_t i = 0; i < views.size(); ++i) mean += cosine_similarity(a.row_span(i), b.row_span(i));
    mean /= static_cast<double>(views.size());
    const double secs = pipeline.teacher_seconds + pipeline.distill_seconds;
    return {mean > 0.99 && secs < 600.0,
            fmt("held-out teacher/student cosine %.4f on 300 pairs after 8 epochs over 2000; teacher %.0f s + distill "
                "%.0f s",
                mean, pipeline.teacher_seconds, pipeline.distill_seconds)};
}

Verdict directional_ablation() {
    Stopwatch w;
    const auto config = Pipeline::expansion(248, true);
    const Checkpoint rope = run_expansion(pipeline.student(), pipeline.expansion_corpus(), config).checkpoint;
    // absolute baseline: the teacher itself through the same fine-tuning
    const Checkpoint absolute = run_expansion(pipeline.teacher(), pipeline.expansion_corpus(), config).checkpoint;
    const Recall r = recall_at_1(rope.model, pipeline.eval_corpus());
    const Recall a = recall_at_1(absolute.model, pipeline.eval_corpus());
    const double chance = 100.0 / static_cast<double>(pipeline.eval_corpus().size());
    const double secs = w.seconds() + pipeline.teacher_seconds + pipeline.distill_seconds;
    return {r.mean() > a.mean() && r.mean() > chance && secs < 1800.0,
            fmt("late-attribute R@1 rope_ntk %.2f%% (i2t %.2f, t2i %.2f) vs absolute %.2f%% (i2t %.2f, t2i %.2f), "
                "chance %.2f%%; margin %.2f pts; %.0f s",
                r.mean(), r.img2txt, r.txt2img, a.mean(), a.img2txt, a.txt2img, chance, r.mean() - a.mean(), secs)};
}

Verdict context_trend() {
    const Recall r77 = recall_at_1(pipeline.frozen(77).model, pipeline.eval_corpus());
    const Recall r154 = recall_at_1(pipeline.frozen(154).model, pipeline.eval_corpus());
    return {r154.mean() >= r77.mean(),
            fmt("frozen vision, late corpus: R@1 at t_g 77 %.2f%%, at t_g 154 %.2f%%; %.0f s + %.0f s", r77.mean(),
                r154.mean(), pipeline.frozen_seconds[77], pipeline.frozen_seconds[154])};
}

Verdict recall_oracle() {
    Rng rng(21);
    std::vector<std::size_t> ks(10);
    std::iota(ks.begin(), ks.end(), 1);
    std::size_t mismatches = 0, ties = 0;
    for (int trial = 0; trial < 200; ++trial) {
        Tensor s = test::random_tensor(rng, 10, 10, -1, 1);
        if (trial % 2) {
            for (auto& x : s.data()) x = std::round(x * 4.0) / 4.0;
            ++ties;
        }
        const SimilarityMatrix sim{s, {}, {}};
        for (auto d : {Direction::img2txt, Direction::txt2img}) {
            std::vector<std::size_t> position(10);
            for (std::size_t q = 0; q < 10; ++q) {
                std::vector<std::size_t> order(10);
                std::iota(order.begin(), order.end(), 0);
                auto score = [&](std::size_t c) { return d == Direction::txt2img ? s.at(q, c) : s.at(c, q); };
                std::stable_sort(order.begin(), order.end(),
                                 [&](std::size_t a, std::size_t c) { return score(a) > score(c); });
                position[q] = static_cast<std::size_t>(std::find(order.begin(), order.end(), q) - order.begin());
            }
            const auto got = recall_at_k(sim, ks, d);
            for (std::size_t i = 0; i < ks.size(); ++i) {
                const auto hits = std::count_if(position.begin(), position.end(), [&](std::size_t p) { return p < ks[i]; });
                if (got.recall[i] != 100.0 * static_cast<double>(hits) / 10.0) ++mismatches;
            }
        }
    }
    return {mismatches == 0, fmt("200 random 10x10 matrices (%zu with ties), K=1..10, both directions: %zu mismatches",
                                 ties, mismatches)};
}

Verdict determinism() {
    namespace fs = std::filesystem;
    const fs::path root = fs::temp_directory_path() / "tulip_acceptance_determinism";
    fs::remove_all(root);
    fs::create_directories(root);
    write_text_file(root / "tiny.cfg",
                    "text.d_model = 16\ntext.n_heads = 2\ntext.n_layers = 1\nprojection_dim = 16\n"
                    "image.d_model = 16\nimage.n_heads = 2\nimage.n_layers = 1\n"
                    "teacher.epochs = 2\nteacher.batch_size = 8\ndistill.epochs = 2\ndistill.batch_size = 8\n"
                    "expand.epochs = 1\nexpand.batch_size = 8\nexpand.t_g = 154\n");
    std::vector<std::string> files;
    auto run_once = [&](const fs::path& out) {
        const std::string o = out.string(), cfg = (root / "tiny.cfg").string();
        const std::vector<std::vector<std::string>> steps = {
            {"gen", "--count", "40"},
            {"make-teacher", "--corpus", o + "/corpus.jsonl"},
            {"distill", "--teacher", o + "/teacher.ckpt", "--corpus", o + "/corpus.jsonl"},
            {"expand", "--checkpoint", o + "/distilled.ckpt", "--corpus", o + "/corpus.jsonl"},
            {"eval", "--checkpoint", o + "/expanded.ckpt", "--corpus", o + "/corpus.jsonl"},
        };
        std::map<std::string, std::string> hashes;
        for (const auto& step : steps) {
            std::vector<std::string> args{"--config", cfg, "--seed", "9", "--out", o};
            args.insert(args.end(), step.begin(), step.end());
            std::ostringstream sink;
            if (cli::run(args, sink, sink) != cli::kOk) return hashes;
            const auto m = parse_manifest_json(read_text_file(out / (step[0] + ".manifest.json")));
            for (const auto& a : m.outputs) hashes[a.path.filename().string()] = a.sha256;
        }
        return hashes;
    };
    const auto a = run_once(root / "a"), b = run_once(root / "b");
    bool same = !a.empty() && a == b;
    for (const auto& [name, hash] : a) same = same && sha256_file(root / "b" / name) == hash;
    return {same && a.size() >= 8, fmt("two seeded pipeline runs, %zu artifacts (checkpoints, loss and retrieval CSVs, "
                                       "corpus): manifest hashes %s",
                                       a.size(), same ? "identical" : "differ")};
}

}  // namespace

int main(int argc, char** argv) {
    const std::vector<std::pair<std::string, std::function<Verdict()>>> criteria = {
        {"rope relative-shift invariance", shift_invariance},
        {"ntk scale factor", ntk_formula},
        {"gradient correctness", gradients},
        {"loss oracles", loss_oracles},
        {"out-of-window contract", out_of_window},
        {"toy distillation", distillation},
        {"directional ablation, late attributes", directional_ablation},
        {"context-length trend", context_trend},
        {"recall oracle equivalence", recall_oracle},
        {"determinism", determinism},
    };
    std::set<std::size_t> wanted;
    for (int i = 1; i < argc; ++i) wanted.insert(std::stoul(argv[i]));
    bool all = true;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        if (!wanted.empty() && !wanted.count(i + 1)) continue;
        Verdict v;
        try {
            v = criteria[i].second();
        } catch (const std::exception& e) {
            v = {false, std::string("threw: ") + e.what()};
        }
        all = all && v.pass;
        std::printf("%s %2zu %s: %s\n", v.pass ? "PASS" : "FAIL", i + 1, criteria[i].first.c_str(), v.detail.c_str());
        std::fflush(stdout);
    }
    return all ? 0 : 1;
}
