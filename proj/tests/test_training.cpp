#include <doctest.h>

#include <cmath>
#include <numeric>

#include "support.hpp"
#include "tulip/numeric.hpp"
#include "tulip/training.hpp"

using namespace tulip;
using posenc::Scheme;

namespace {

EncoderConfig tiny_text(Scheme scheme = Scheme::absolute) {
    EncoderConfig c;
    c.vocab_size = 300;
    c.d_model = 16;
    c.n_heads = 2;
    c.n_layers = 1;
    c.projection_dim = 8;
    c.position.kind = scheme;
    c.position.cope_pmax = 16;
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

TeacherConfig tiny_teacher_config() {
    TeacherConfig c;
    c.text = tiny_text();
    c.image = tiny_image();
    c.epochs = 2;
    c.batch_size = 8;
    c.warmup_steps = 2;
    c.seed = 3;
    return c;
}

const Checkpoint& tiny_teacher() {
    static const Checkpoint teacher = make_teacher(generate_synthetic_corpus(1, 48, 0.0), tiny_teacher_config()).checkpoint;
    return teacher;
}

DistillConfig tiny_distill(std::size_t epochs = 1) {
    DistillConfig c;
    c.epochs = epochs;
    c.batch_size = 8;
    c.warmup_steps = 2;
    c.learning_rate = 1e-3;
    c.seed = 4;
    return c;
}

std::string image_bytes(const Checkpoint& ckpt) {
    std::string out;
    visit_image(
        [&](const std::string&, const Tensor& t) {
            out.append(reinterpret_cast<const char*>(t.data().data()), t.size() * sizeof(double));
        },
        *ckpt.model.image);
    return out;
}

}  // namespace

TEST_CASE("distill loss endpoints") {
    const std::vector<double> v{1.0, 2.0, -0.5};
    const std::vector<double> neg{-1.0, -2.0, 0.5};
    const std::vector<double> ortho{2.0, -1.0, 0.0};
    CHECK(std::abs(distill_loss(v, v, DistillLossKind::cosine)) < 1e-12);
    CHECK(std::abs(distill_loss(v, ortho, DistillLossKind::cosine) - 1.0) < 1e-12);
    CHECK(std::abs(distill_loss(v, neg, DistillLossKind::cosine) - 2.0) < 1e-12);

    CHECK(distill_loss(std::vector<double>{0, 0}, std::vector<double>{3, 4}, DistillLossKind::l2) == 5.0);
    CHECK(distill_loss(std::vector<double>{0, 0}, std::vector<double>{3, 4}, DistillLossKind::mse) == 12.5);

    const std::vector<double> zero{0, 0, 0};
    CHECK_THROWS_AS(distill_loss(zero, v, DistillLossKind::cosine), DegenerateInputError);
    CHECK_THROWS_AS(distill_loss(v, std::vector<double>{1, 2}, DistillLossKind::l2), DimensionError);

    for (auto kind : {DistillLossKind::cosine, DistillLossKind::l2, DistillLossKind::mse})
        CHECK(parse_distill_loss(to_string(kind)) == kind);
    CHECK_THROWS_AS(parse_distill_loss("kl"), ConfigError);
}

TEST_CASE("distill loss over a batch averages rows") {
    Rng rng(1);
    const Tensor a = test::random_tensor(rng, 4, 6), b = test::random_tensor(rng, 4, 6);
    for (auto kind : {DistillLossKind::cosine, DistillLossKind::l2, DistillLossKind::mse}) {
        Tape tape;
        const double batched = distill_loss(tape.constant(a), tape.constant(b), kind).value().item();
        double mean = 0.0;
        for (std::size_t r = 0; r < 4; ++r) mean += distill_loss(a.row_span(r), b.row_span(r), kind) / 4.0;
        CHECK(std::abs(batched - mean) < 1e-12);
    }
}

TEST_CASE("contrastive loss oracles") {
    CHECK(contrastive_loss(Tensor::matrix(1, 3, {1, 2, 3}), Tensor::matrix(1, 3, {-1, 0, 4}), 0.07) == 0.0);

    const Tensor eye = Tensor::matrix(2, 2, {1, 0, 0, 1});
    const double expect = -std::log(std::exp(1.0) / (std::exp(1.0) + 1.0));
    CHECK(std::abs(contrastive_loss(eye, eye, 1.0) - expect) < 1e-9);
    CHECK(std::abs(expect - 0.313262) < 1e-6);

    Rng rng(2);
    for (int t = 0; t < 50; ++t) {
        const std::size_t n = 2 + rng.below(6);
        const Tensor x = test::random_tensor(rng, n, 5), y = test::random_tensor(rng, n, 5);
        const double tau = rng.uniform(0.05, 2.0);
        const double base = contrastive_loss(x, y, tau);
        CHECK(base >= 0.0);
        std::vector<std::size_t> perm(n);
        std::iota(perm.begin(), perm.end(), 0);
        rng.shuffle(std::span(perm));
        Tensor px({n, 5}), py({n, 5});
        for (std::size_t i = 0; i < n; ++i) {
            std::copy_n(x.row_span(perm[i]).begin(), 5, px.row_span(i).begin());
            std::copy_n(y.row_span(perm[i]).begin(), 5, py.row_span(i).begin());
        }
        CHECK(std::abs(contrastive_loss(px, py, tau) - base) < 1e-9);

        Tape tape;
        const double taped =
            contrastive_loss(tape.constant(x), tape.constant(y), tape.constant(Tensor::scalar(tau))).value().item();
        CHECK(std::abs(taped - base) < 1e-12);
    }
    CHECK_THROWS_AS(contrastive_loss(eye, eye, 0.0), ContractError);
    CHECK_THROWS_AS(contrastive_loss(eye, Tensor::matrix(2, 3, {1, 0, 0, 0, 1, 0}), 1.0), DimensionError);
}

TEST_CASE("joint loss is affine in lambda") {
    Rng rng(3);
    const Tensor s = test::random_tensor(rng, 4, 6), l = test::random_tensor(rng, 4, 6), im = test::random_tensor(rng, 4, 6);
    auto at = [&](double lambda) {
        Tape tape;
        return joint_loss(tape.constant(s), tape.constant(l), tape.constant(im), lambda,
                          tape.constant(Tensor::scalar(0.5)))
            .value()
            .item();
    };
    const double short_only = contrastive_loss(s, im, 0.5), long_only = contrastive_loss(l, im, 0.5);
    CHECK(std::abs(at(1.0) - short_only) < 1e-12);
    CHECK(std::abs(at(0.0) - long_only) < 1e-12);
    for (double lambda : {0.0, 0.25, 0.5, 0.75, 1.0})
        CHECK(std::abs(at(lambda) - (lambda * short_only + (1.0 - lambda) * long_only)) < 1e-12);
}

TEST_CASE("adamw examples") {
    {
        Tensor p = Tensor::scalar(1.0);
        std::vector<Tensor*> params{&p};
        std::vector<Tensor> grads{Tensor::scalar(1.0)};
        TrainState state;
        adamw_step(params, grads, state, 0.1);
        CHECK(std::abs(p.item() - 0.9) < 1e-6);
        CHECK(state.step == 1);
    }
    {
        Rng rng(4);
        Tensor p = test::random_tensor(rng, 3, 3);
        const Tensor before = p;
        std::vector<Tensor*> params{&p};
        std::vector<Tensor> grads{Tensor({3, 3})};
        TrainState state;
        for (int i = 0; i < 5; ++i) adamw_step(params, grads, state, 0.1);
        CHECK(p == before);

        adamw_step(params, grads, state, 0.1, 0.9, 0.999, 1e-8, 0.01);
        for (std::size_t i = 0; i < 9; ++i) CHECK(std::abs(p[i] - before[i] * (1.0 - 0.1 * 0.01)) < 1e-15);

        Tensor q = before;
        std::vector<Tensor*> masked{&q};
        const std::vector<unsigned char> mask{0};
        TrainState s2;
        adamw_step(masked, grads, s2, 0.1, 0.9, 0.999, 1e-8, 0.01, mask);
        CHECK(q == before);

        std::vector<Tensor> wrong{Tensor({2, 3})};
        CHECK_THROWS_AS(adamw_step(params, wrong, state, 0.1), DimensionError);
    }
}

TEST_CASE("learning rate schedule") {
    CHECK(lr_schedule(0, 10, 1e-3, 100) == 0.0);
    CHECK(std::abs(lr_schedule(5, 10, 1e-3, 100) - 5e-4) < 1e-18);
    CHECK(lr_schedule(10, 10, 1e-3, 100) == 1e-3);
    CHECK(std::abs(lr_schedule(55, 10, 1e-3, 100) - 5e-4) < 1e-15);
    CHECK(std::abs(lr_schedule(100, 10, 1e-3, 100)) < 1e-18);
    CHECK(lr_schedule(0, 0, 1e-3, 100) == 1e-3);
    for (std::size_t s = 11; s <= 100; ++s) CHECK(lr_schedule(s, 10, 1e-3, 100) <= lr_schedule(s - 1, 10, 1e-3, 100));
}

TEST_CASE("frozen vision gets no gradient, trainable vision does") {
    const auto corpus = generate_synthetic_corpus(5, 4, 0.5);
    std::vector<std::size_t> idx{0, 1, 2, 3};
    const EncoderConfig tc = tiny_text(Scheme::rope);
    const ImageConfig ic = tiny_image();
    const TextParams text = init_text_params(tc, 1);
    const ImageParams image = init_image_params(ic, 2);
    const Batch batch = make_batch(corpus, idx, 154, 77);
    for (bool trainable : {false, true}) {
        Tape tape;
        auto tv = bind(tape, text, true);
        auto iv = bind(tape, image, trainable);
        Var tau = tape.leaf(Tensor::scalar(0.07));
        const auto terms = joint_loss(tape, batch, tv, tc, iv, ic, 0.5, tau);
        tape.backward(terms.loss);
        CHECK(iv.patch_weight.requires_grad() == trainable);
        const Tensor g = tape.grad(iv.patch_weight);
        double norm = 0.0;
        for (double x : g.data()) norm += x * x;
        CHECK((norm > 0.0) == trainable);
        const Tensor gt = tape.grad(tv.token_embedding);
        double tnorm = 0.0;
        for (double x : gt.data()) tnorm += x * x;
        CHECK(tnorm > 0.0);
    }
}

TEST_CASE("teacher training") {
    const Checkpoint& teacher = tiny_teacher();
    CHECK(teacher.phase == "teacher");
    CHECK(teacher.model.text_config.position.kind == Scheme::absolute);
    CHECK(teacher.model.image.has_value());
    CHECK(teacher.model.temperature >= kMinTemperature);

    const auto again = make_teacher(generate_synthetic_corpus(1, 48, 0.0), tiny_teacher_config());
    CHECK(serialize_checkpoint(again.checkpoint) == serialize_checkpoint(teacher));
    CHECK(again.history.size() == 12);
    CHECK_THROWS_AS(make_teacher({}, tiny_teacher_config()), ContractError);
}

TEST_CASE("distillation") {
    const Checkpoint& teacher = tiny_teacher();
    const std::string teacher_bytes = serialize_checkpoint(teacher);
    const auto corpus = generate_synthetic_corpus(2, 40, 0.0);

    const auto result = run_distillation(teacher, tiny_text(Scheme::rope), corpus, tiny_distill(2));
    CHECK(serialize_checkpoint(teacher) == teacher_bytes);
    CHECK(result.checkpoint.phase == "distilled");
    CHECK(result.history.size() == 10);
    REQUIRE_FALSE(result.history.empty());
    CHECK(result.history.front().loss < 0.5);
    CHECK(result.checkpoint.model.text_config.position.kind == Scheme::rope);
    CHECK(image_bytes(result.checkpoint) == image_bytes(teacher));

    // zero epochs: the student is its warm-start initialization
    const auto idle = run_distillation(teacher, tiny_text(Scheme::rope), corpus, tiny_distill(0));
    const auto idle2 = run_distillation(teacher, tiny_text(Scheme::rope), corpus, tiny_distill(0));
    CHECK(idle.history.empty());
    CHECK(serialize_checkpoint(idle.checkpoint) == serialize_checkpoint(idle2.checkpoint));
    CHECK(idle.checkpoint.model.text.token_embedding == teacher.model.text.token_embedding);
    CHECK(idle.checkpoint.model.text.blocks[0].w_q == teacher.model.text.blocks[0].w_q);
    CHECK_FALSE(idle.checkpoint.model.text.position_embedding.has_value());

    const auto cope = run_distillation(teacher, tiny_text(Scheme::cope), corpus, tiny_distill(1));
    CHECK(cope.checkpoint.model.text.blocks[0].cope_table.has_value());

    CHECK_THROWS_AS(run_distillation(result.checkpoint, tiny_text(Scheme::rope), corpus, tiny_distill()), PhaseError);
    CHECK_THROWS_AS(run_distillation(teacher, tiny_text(Scheme::absolute), corpus, tiny_distill()), ConfigError);
    auto wide = tiny_text(Scheme::rope);
    wide.d_model = 32;
    CHECK_THROWS_AS(run_distillation(teacher, wide, corpus, tiny_distill()), ConfigError);
    CHECK_THROWS_AS(run_distillation(teacher, tiny_text(Scheme::rope), {}, tiny_distill()), ContractError);
}

TEST_CASE("expanded config") {
    const EncoderConfig rope = tiny_text(Scheme::rope);
    ExpandConfig c;
    c.alpha = 1.0;
    c.t_g = 77;
    auto out = expanded_config(rope, c);
    CHECK(out.position.kind == Scheme::rope_ntk);
    CHECK(out.position.ntk_factor == 1.0);
    CHECK(out.position.frequencies(out.head_dim()).theta == rope.position.frequencies(rope.head_dim()).theta);

    c.alpha = 8.0;
    c.t_g = 248;
    out = expanded_config(rope, c);
    CHECK(std::abs(out.position.ntk_factor - 18.766233766233766) < 1e-9);
    CHECK(out.context_length == 248);

    c.ntk = false;
    out = expanded_config(rope, c);
    CHECK(out.position.kind == Scheme::rope);
    CHECK(out.context_length == 248);

    out = expanded_config(tiny_text(Scheme::absolute), c);
    CHECK(out.max_sequence() == 77);

    c.t_g = 50;
    CHECK_THROWS_AS(expanded_config(rope, c), ConfigError);
    c.t_g = 154;
    c.lambda = 1.5;
    CHECK_THROWS_AS(expanded_config(rope, c), ConfigError);
}

TEST_CASE("expansion") {
    const Checkpoint& teacher = tiny_teacher();
    const auto distilled =
        run_distillation(teacher, tiny_text(Scheme::rope), generate_synthetic_corpus(2, 40, 0.0), tiny_distill(1));
    const auto corpus = generate_synthetic_corpus(6, 200, 0.5, AttrOffset::late);

    ExpandConfig c;
    c.t_g = 154;
    c.epochs = 2;
    c.batch_size = 8;
    c.learning_rate = 1e-3;
    c.warmup_steps = 5;
    c.vision_trainable = false;
    c.seed = 9;
    const auto frozen = run_expansion(distilled.checkpoint, corpus, c);
    CHECK(frozen.history.size() == 50);
    CHECK(frozen.checkpoint.phase == "expanded");
    CHECK(frozen.checkpoint.model.text_config.position.kind == Scheme::rope_ntk);
    CHECK(frozen.checkpoint.model.text_config.context_length == 154);
    CHECK(image_bytes(frozen.checkpoint) == image_bytes(distilled.checkpoint));
    for (const auto& r : frozen.history) {
        REQUIRE(r.loss_short.has_value());
        REQUIRE(r.loss_long.has_value());
        CHECK(std::abs(r.loss - (0.5 * *r.loss_short + 0.5 * *r.loss_long)) < 1e-12);
    }

    // smoothed joint loss goes down over the first 50 steps
    double head = 0.0, tail = 0.0;
    for (std::size_t i = 0; i < 10; ++i) {
        head += frozen.history[i].loss / 10.0;
        tail += frozen.history[40 + i].loss / 10.0;
    }
    CHECK(tail < head);

    c.vision_trainable = true;
    c.epochs = 1;
    const auto trained = run_expansion(distilled.checkpoint, corpus, c);
    CHECK(trained.history.size() == 25);
    CHECK(image_bytes(trained.checkpoint) != image_bytes(distilled.checkpoint));

    const auto again = run_expansion(distilled.checkpoint, corpus, c);
    CHECK(serialize_checkpoint(again.checkpoint) == serialize_checkpoint(trained.checkpoint));
    CHECK(again.history == trained.history);

    CHECK_THROWS_AS(run_expansion(distilled.checkpoint, {}, c), ContractError);
}

TEST_CASE("loss history csv round trip") {
    std::vector<LossRecord> h{{1, 1e-4, 0.5, 0.5, std::nullopt}, {2, 2e-4, 0.25, 0.1, 0.4}, {3, 0.0, 1.0 / 3, std::nullopt, std::nullopt}};
    const auto text = loss_history_csv(h);
    CHECK(text.rfind("step,lr,loss,loss_short,loss_long\n", 0) == 0);
    CHECK(parse_loss_history_csv(text) == h);
    CHECK_THROWS_AS(parse_loss_history_csv("bad header\n"), ParseError);
    try {
        parse_loss_history_csv("step,lr,loss,loss_short,loss_long\n1,2,3,,\n1,x,3,,\n");
        FAIL("expected ParseError");
    } catch (const ParseError& e) {
        CHECK(e.line == 3);
    }
}
