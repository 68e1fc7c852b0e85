#include "tulip/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <numbers>

#include "tulip/error.hpp"
#include "tulip/numeric.hpp"

namespace tulip {

std::string_view to_string(DistillLossKind kind) {
    switch (kind) {
        case DistillLossKind::cosine: return "cosine";
        case DistillLossKind::l2: return "l2";
        case DistillLossKind::mse: return "mse";
    }
    return "cosine";
}

DistillLossKind parse_distill_loss(std::string_view name) {
    if (name == "cosine") return DistillLossKind::cosine;
    if (name == "l2") return DistillLossKind::l2;
    if (name == "mse") return DistillLossKind::mse;
    throw ConfigError("unknown distillation loss '" + std::string(name) + "' (cosine, l2, mse)");
}

double distill_loss(std::span<const double> teacher, std::span<const double> student, DistillLossKind kind) {
    if (teacher.size() != student.size())
        throw DimensionError("distill_loss: lengths " + std::to_string(teacher.size()) + " and " +
                             std::to_string(student.size()) + " differ");
    switch (kind) {
        case DistillLossKind::cosine: return 1.0 - cosine_similarity(teacher, student);
        case DistillLossKind::l2:
        case DistillLossKind::mse: {
            double sq = 0.0;
            for (std::size_t i = 0; i < teacher.size(); ++i) sq += (teacher[i] - student[i]) * (teacher[i] - student[i]);
            if (kind == DistillLossKind::l2) return std::sqrt(sq);
            if (teacher.empty()) throw DimensionError("distill_loss: empty vectors");
            return sq / static_cast<double>(teacher.size());
        }
    }
    return 0.0;
}

namespace {

// Euclidean norm of every row, [m x n] -> [m x 1]; the gradient at a zero row is taken as 0.
Var row_norms(Var a) {
    const Tensor& x = a.value();
    Tensor out({x.rows(), 1});
    for (std::size_t r = 0; r < x.rows(); ++r) out[r] = norm2(x.row_span(r));
    const Tensor norms = out;
    return a.tape().record(
        std::move(out), {a},
        [a, norms](Tape& t, std::span<const double> g) {
            const Tensor& xin = a.value();
            auto ga = t.grad_buffer(a);
            for (std::size_t r = 0; r < xin.rows(); ++r) {
                if (norms[r] == 0.0) continue;
                for (std::size_t c = 0; c < xin.cols(); ++c)
                    ga[r * xin.cols() + c] += g[r] * xin.at(r, c) / norms[r];
            }
        },
        "row_norms");
}

void require_same_shape(Var a, Var b, const char* op) {
    if (a.value().shape() != b.value().shape())
        throw DimensionError(std::string(op) + ": shapes " + shape_string(a.value().shape()) + " and " +
                             shape_string(b.value().shape()) + " differ");
}

std::vector<std::size_t> iota(std::size_t n) {
    std::vector<std::size_t> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = i;
    return out;
}

}  // namespace

Var distill_loss(Var teacher, Var student, DistillLossKind kind) {
    require_same_shape(teacher, student, "distill_loss");
    Tape& tape = student.tape();
    switch (kind) {
        case DistillLossKind::cosine: {
            for (Var v : {teacher, student})
                for (std::size_t r = 0; r < v.rows(); ++r)
                    if (norm2(v.value().row_span(r)) == 0.0)
                        throw DegenerateInputError("distill_loss: zero-norm embedding in row " + std::to_string(r));
            Var cos = ops::sum_cols(ops::mul(ops::l2_normalize_rows(teacher), ops::l2_normalize_rows(student)));
            return ops::sub(tape.constant(Tensor::scalar(1.0)), ops::mean(cos));
        }
        case DistillLossKind::l2: return ops::mean(row_norms(ops::sub(teacher, student)));
        case DistillLossKind::mse: return ops::mean(ops::square(ops::sub(teacher, student)));
    }
    throw ContractError("distill_loss: unknown kind");
}

double contrastive_loss(const Tensor& text, const Tensor& image, double tau) {
    if (!(tau > 0.0)) throw ContractError("contrastive_loss: temperature must be positive, got " + std::to_string(tau));
    if (text.shape() != image.shape() || text.rank() != 2)
        throw DimensionError("contrastive_loss: shapes " + shape_string(text.shape()) + " and " +
                             shape_string(image.shape()) + " differ");
    const std::size_t b = text.rows();
    if (b == 0) throw DimensionError("contrastive_loss: empty batch");
    std::vector<double> logits(b * b);
    for (std::size_t i = 0; i < b; ++i)
        for (std::size_t j = 0; j < b; ++j)
            logits[i * b + j] = cosine_similarity(text.row_span(i), image.row_span(j)) / tau;
    auto direction = [&](bool transposed) {
        double total = 0.0;
        std::vector<double> row(b);
        for (std::size_t i = 0; i < b; ++i) {
            for (std::size_t j = 0; j < b; ++j) row[j] = transposed ? logits[j * b + i] : logits[i * b + j];
            const double mx = *std::max_element(row.begin(), row.end());
            double z = 0.0;
            for (double v : row) z += std::exp(v - mx);
            total += -(row[i] - mx - std::log(z));
        }
        return total / static_cast<double>(b);
    };
    return 0.5 * (direction(false) + direction(true));
}

Var contrastive_loss(Var text, Var image, Var tau) {
    require_same_shape(text, image, "contrastive_loss");
    if (tau.value().size() != 1) throw DimensionError("contrastive_loss: temperature must be a scalar");
    if (!(tau.value().item() > 0.0))
        throw ContractError("contrastive_loss: temperature must be positive, got " +
                            std::to_string(tau.value().item()));
    const std::size_t b = text.rows();
    if (b == 0) throw DimensionError("contrastive_loss: empty batch");
    Var sim = ops::matmul(ops::l2_normalize_rows(text), ops::transpose(ops::l2_normalize_rows(image)));
    Var logits = ops::mul_scalar(sim, ops::reciprocal(tau));
    const std::vector<std::size_t> diag = iota(b);
    Var t2i = ops::mean(ops::pick_per_row(ops::log_softmax_rows(logits), diag));
    Var i2t = ops::mean(ops::pick_per_row(ops::log_softmax_rows(ops::transpose(logits)), diag));
    return ops::scale(ops::add(t2i, i2t), -0.5);
}

Var joint_loss(Var text_short, Var text_long, Var image, double lambda, Var tau) {
    if (!(lambda >= 0.0 && lambda <= 1.0)) throw ContractError("joint_loss: lambda must lie in [0, 1]");
    Var s = contrastive_loss(text_short, image, tau);
    Var l = contrastive_loss(text_long, image, tau);
    return ops::add(ops::scale(s, lambda), ops::scale(l, 1.0 - lambda));
}

JointTerms joint_loss(Tape& tape, const Batch& batch, const TextParamsT<Var>& text, const EncoderConfig& text_config,
                      const ImageParamsT<Var>& image, const ImageConfig& image_config, double lambda, Var tau) {
    if (batch.short_view.size() != batch.images.size() || batch.long_view.size() != batch.images.size())
        throw DimensionError("joint_loss: batch views and images differ in count");
    Var img = image_forward(tape, image, image_config, batch.images);
    Var short_emb = text_forward(tape, text, text_config, batch.short_view);
    Var long_emb = text_forward(tape, text, text_config, batch.long_view);
    if (!(lambda >= 0.0 && lambda <= 1.0)) throw ContractError("joint_loss: lambda must lie in [0, 1]");
    Var s = contrastive_loss(short_emb, img, tau);
    Var l = contrastive_loss(long_emb, img, tau);
    return {ops::add(ops::scale(s, lambda), ops::scale(l, 1.0 - lambda)), s, l};
}

void adamw_step(std::span<Tensor* const> params, std::span<const Tensor> grads, TrainState& state, double lr,
                double beta1, double beta2, double eps, double weight_decay,
                std::span<const unsigned char> decay_mask) {
    if (params.size() != grads.size())
        throw DimensionError("adamw_step: " + std::to_string(params.size()) + " parameters but " +
                             std::to_string(grads.size()) + " gradients");
    if (!decay_mask.empty() && decay_mask.size() != params.size())
        throw DimensionError("adamw_step: decay mask length differs from parameter count");
    if (state.m.empty()) {
        for (const Tensor* p : params) {
            state.m.emplace_back(p->shape());
            state.v.emplace_back(p->shape());
        }
    }
    if (state.m.size() != params.size()) throw DimensionError("adamw_step: optimizer state holds other parameters");
    state.step += 1;
    state.lr = lr;
    const double t = static_cast<double>(state.step);
    const double correction1 = 1.0 - std::pow(beta1, t);
    const double correction2 = 1.0 - std::pow(beta2, t);
    for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor& p = *params[i];
        const Tensor& g = grads[i];
        if (p.shape() != g.shape() || p.shape() != state.m[i].shape())
            throw DimensionError("adamw_step: shape mismatch at parameter " + std::to_string(i));
        const double decay = (decay_mask.empty() || decay_mask[i]) ? weight_decay : 0.0;
        auto pd = p.data();
        auto gd = g.data();
        auto md = state.m[i].data();
        auto vd = state.v[i].data();
        for (std::size_t k = 0; k < pd.size(); ++k) {
            md[k] = beta1 * md[k] + (1.0 - beta1) * gd[k];
            vd[k] = beta2 * vd[k] + (1.0 - beta2) * gd[k] * gd[k];
            const double mhat = md[k] / correction1;
            const double vhat = vd[k] / correction2;
            pd[k] -= lr * (mhat / (std::sqrt(vhat) + eps) + decay * pd[k]);
        }
    }
}

double lr_schedule(std::size_t step, std::size_t warmup_steps, double base_lr, std::size_t total_steps) {
    if (step < warmup_steps) return base_lr * static_cast<double>(step) / static_cast<double>(warmup_steps);
    if (total_steps <= warmup_steps) return base_lr;
    const double progress = std::min(
        1.0, static_cast<double>(step - warmup_steps) / static_cast<double>(total_steps - warmup_steps));
    return base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

void DistillConfig::validate() const {
    if (batch_size == 0) throw ConfigError("distill batch_size must be at least 1");
    if (!(learning_rate >= 0.0)) throw ConfigError("distill learning_rate must be non-negative");
    if (!(weight_decay >= 0.0)) throw ConfigError("distill weight_decay must be non-negative");
}

void ExpandConfig::validate() const {
    if (batch_size == 0) throw ConfigError("expand batch_size must be at least 1");
    if (!(lambda >= 0.0 && lambda <= 1.0)) throw ConfigError("lambda must lie in [0, 1]");
    if (!(temperature > 0.0)) throw ConfigError("temperature init must be positive");
    if (t_g < kTeacherWindow) throw ConfigError("t_g must be at least " + std::to_string(kTeacherWindow));
    if (!(alpha >= 1.0)) throw ConfigError("alpha must be at least 1");
    if (!(learning_rate >= 0.0)) throw ConfigError("expand learning_rate must be non-negative");
    if (!(weight_decay >= 0.0)) throw ConfigError("expand weight_decay must be non-negative");
}

namespace {

// Trainable tensors in visit order, with the Var each one is bound to on the current tape.
struct ParamGroup {
    std::vector<Tensor*> tensors;
    std::vector<unsigned char> decay;  // matrices decay; gains, biases and the temperature do not

    void add(Tensor& t) {
        tensors.push_back(&t);
        decay.push_back(t.rows() > 1 && t.cols() > 1 ? 1 : 0);
    }
};

void collect(ParamGroup& group, TextParams& text) {
    visit_text([&](const std::string&, Tensor& t) { group.add(t); }, text);
}
void collect(ParamGroup& group, ImageParams& image) {
    visit_image([&](const std::string&, Tensor& t) { group.add(t); }, image);
}
void collect_vars(std::vector<Var>& out, const TextParamsT<Var>& text) {
    visit_text([&](const std::string&, const Var& v) { out.push_back(v); }, text);
}
void collect_vars(std::vector<Var>& out, const ImageParamsT<Var>& image) {
    visit_image([&](const std::string&, const Var& v) { out.push_back(v); }, image);
}

std::uint64_t image_seed(std::uint64_t seed) { return seed ^ 0x9E3779B97F4A7C15ULL; }

std::size_t steps_per_epoch(std::size_t count, std::size_t batch) { return (count + batch - 1) / batch; }

std::vector<std::size_t> batch_slice(const std::vector<std::size_t>& order, std::size_t b, std::size_t batch) {
    const std::size_t start = b * batch, end = std::min(order.size(), start + batch);
    return {order.begin() + static_cast<std::ptrdiff_t>(start), order.begin() + static_cast<std::ptrdiff_t>(end)};
}

// One optimizer update from gradients already on the tape.
void apply_update(Tape& tape, const std::vector<Var>& vars, ParamGroup& group, TrainState& state, double lr,
                  double weight_decay) {
    std::vector<Tensor> grads;
    grads.reserve(vars.size());
    for (Var v : vars) grads.push_back(tape.grad(v));
    adamw_step(group.tensors, grads, state, lr, 0.9, 0.999, 1e-8, weight_decay, group.decay);
}

void require_nonempty(const Corpus& corpus, const char* what) {
    if (corpus.empty()) throw ContractError(std::string(what) + ": empty corpus");
}

}  // namespace

TrainResult make_teacher(const Corpus& corpus, const TeacherConfig& config) {
    require_nonempty(corpus, "make_teacher");
    if (config.batch_size == 0) throw ConfigError("teacher batch_size must be at least 1");
    if (!(config.temperature > 0.0)) throw ConfigError("temperature init must be positive");
    EncoderConfig text_config = config.text;
    text_config.position.kind = posenc::Scheme::absolute;
    text_config.validate();
    config.image.validate();

    DualEncoder model{text_config, init_text_params(text_config, config.seed), config.image,
                      init_image_params(config.image, image_seed(config.seed)), config.temperature};
    Tensor tau = Tensor::scalar(config.temperature);
    ParamGroup group;
    collect(group, model.text);
    collect(group, *model.image);
    group.tensors.push_back(&tau);
    group.decay.push_back(0);

    const std::size_t window = text_config.max_sequence();
    const std::size_t per_epoch = steps_per_epoch(corpus.size(), config.batch_size);
    const std::size_t total = per_epoch * config.epochs;
    TrainState state;
    TrainResult result;
    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        const auto order = epoch_order(corpus.size(), config.seed, epoch);
        for (std::size_t b = 0; b < per_epoch; ++b) {
            const auto idx = batch_slice(order, b, config.batch_size);
            const Batch batch = make_batch(corpus, idx, window, window);
            Tape tape;
            const auto text = bind(tape, model.text, true);
            const auto image = bind(tape, *model.image, true);
            Var t = tape.leaf(tau, true);
            Var loss = contrastive_loss(text_forward(tape, text, text_config, batch.short_view),
                                        image_forward(tape, image, config.image, batch.images), t);
            tape.backward(loss);
            std::vector<Var> vars;
            collect_vars(vars, text);
            collect_vars(vars, image);
            vars.push_back(t);
            const double lr = lr_schedule(state.step + 1, config.warmup_steps, config.learning_rate, total);
            apply_update(tape, vars, group, state, lr, config.weight_decay);
            tau[0] = std::clamp(tau[0], kMinTemperature, kMaxTemperature);
            const double value = loss.value().item();
            result.history.push_back({state.step, lr, value, value, std::nullopt});
        }
    }
    model.temperature = tau.item();
    result.checkpoint = Checkpoint{"teacher", config.seed, std::move(model)};
    return result;
}

TrainResult run_distillation(const Checkpoint& teacher, const EncoderConfig& student_config, const Corpus& corpus,
                             const DistillConfig& config) {
    require_nonempty(corpus, "run_distillation");
    config.validate();
    if (teacher.phase != "teacher")
        throw PhaseError("distillation needs a teacher checkpoint, got phase '" + teacher.phase + "'");
    const EncoderConfig& tc = teacher.model.text_config;
    if (tc.position.kind != posenc::Scheme::absolute)
        throw ConfigError("teacher must use the absolute scheme, got " +
                          std::string(posenc::to_string(tc.position.kind)));
    if (student_config.position.kind == posenc::Scheme::absolute)
        throw ConfigError("student must use a relative scheme");
    student_config.validate();
    if (tc.vocab_size != student_config.vocab_size || tc.d_model != student_config.d_model ||
        tc.n_heads != student_config.n_heads || tc.n_layers != student_config.n_layers ||
        tc.mlp_ratio != student_config.mlp_ratio || tc.projection_dim != student_config.projection_dim)
        throw ConfigError("teacher and student text encoders differ in dimensions");

    // Warm start: every teacher tensor whose name and shape the student shares.
    TextParams student = init_text_params(student_config, config.seed);
    std::map<std::string, const Tensor*> source;
    visit_text([&](const std::string& name, const Tensor& t) { source[name] = &t; }, teacher.model.text);
    visit_text(
        [&](const std::string& name, Tensor& t) {
            const auto it = source.find(name);
            if (it != source.end() && it->second->shape() == t.shape()) t = *it->second;
        },
        student);

    const std::size_t window = kTeacherWindow;
    std::vector<TokenSequence> views;
    views.reserve(corpus.size());
    for (const auto& pair : corpus) views.push_back(truncate(tokenize(pair.caption), window));
    const Tensor targets = encode_texts(teacher.model.text, tc, views);

    ParamGroup group;
    collect(group, student);
    const std::size_t per_epoch = steps_per_epoch(corpus.size(), config.batch_size);
    const std::size_t total = per_epoch * config.epochs;
    TrainState state;
    TrainResult result;
    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        const auto order = epoch_order(corpus.size(), config.seed, epoch);
        for (std::size_t b = 0; b < per_epoch; ++b) {
            const auto idx = batch_slice(order, b, config.batch_size);
            std::vector<TokenSequence> batch_views;
            Tensor batch_targets({idx.size(), targets.cols()});
            for (std::size_t i = 0; i < idx.size(); ++i) {
                batch_views.push_back(views[idx[i]]);
                std::copy_n(targets.row_span(idx[i]).begin(), targets.cols(), batch_targets.row_span(i).begin());
            }
            Tape tape;
            const auto params = bind(tape, student, true);
            Var z_s = text_forward(tape, params, student_config, batch_views);
            Var loss = distill_loss(tape.constant(std::move(batch_targets)), z_s, config.loss_kind);
            tape.backward(loss);
            std::vector<Var> vars;
            collect_vars(vars, params);
            const double lr = lr_schedule(state.step + 1, config.warmup_steps, config.learning_rate, total);
            apply_update(tape, vars, group, state, lr, config.weight_decay);
            const double value = loss.value().item();
            result.history.push_back({state.step, lr, value, value, std::nullopt});
        }
    }
    DualEncoder model{student_config, std::move(student), teacher.model.image_config, teacher.model.image,
                      teacher.model.temperature};
    result.checkpoint = Checkpoint{"distilled", config.seed, std::move(model)};
    return result;
}

EncoderConfig expanded_config(const EncoderConfig& student, const ExpandConfig& config) {
    config.validate();
    EncoderConfig out = student;
    if (config.ntk && posenc::is_rotary(student.position.kind)) {
        out.position.kind = posenc::Scheme::rope_ntk;
        out.position.ntk_factor = posenc::ntk_scale_factor(config.alpha, kTeacherWindow, config.t_g);
    }
    if (student.position.kind != posenc::Scheme::absolute) out.context_length = config.t_g;
    out.validate();
    return out;
}

TrainResult run_expansion(const Checkpoint& student, const Corpus& corpus, const ExpandConfig& config) {
    require_nonempty(corpus, "run_expansion");
    config.validate();
    if (!student.model.image || !student.model.image_config)
        throw ContractError("expansion needs a checkpoint that carries an image encoder");
    const EncoderConfig text_config = expanded_config(student.model.text_config, config);
    const ImageConfig image_config = *student.model.image_config;
    DualEncoder model{text_config, student.model.text, image_config, student.model.image, config.temperature};

    Tensor tau = Tensor::scalar(config.temperature);
    ParamGroup group;
    collect(group, model.text);
    if (config.vision_trainable) collect(group, *model.image);
    group.tensors.push_back(&tau);
    group.decay.push_back(0);

    const std::size_t window = std::min(config.t_g, text_config.max_sequence());
    TrainResult result;
    for (const auto& pair : corpus)
        if (tokenize(pair.caption).n() > window) ++result.truncated_long_views;
    if (result.truncated_long_views > 0)
        std::fprintf(stderr, "warning: %zu long views truncated to %zu tokens\n", result.truncated_long_views, window);

    const std::size_t per_epoch = steps_per_epoch(corpus.size(), config.batch_size);
    const std::size_t total = per_epoch * config.epochs;
    TrainState state;
    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        const auto order = epoch_order(corpus.size(), config.seed, epoch);
        for (std::size_t b = 0; b < per_epoch; ++b) {
            const auto idx = batch_slice(order, b, config.batch_size);
            const Batch batch = make_batch(corpus, idx, window, std::min(window, kTeacherWindow));
            Tape tape;
            const auto text = bind(tape, model.text, true);
            const auto image = bind(tape, *model.image, config.vision_trainable);
            Var t = tape.leaf(tau, true);
            const JointTerms terms = joint_loss(tape, batch, text, text_config, image, image_config, config.lambda, t);
            tape.backward(terms.loss);
            std::vector<Var> vars;
            collect_vars(vars, text);
            if (config.vision_trainable) collect_vars(vars, image);
            vars.push_back(t);
            const double lr = lr_schedule(state.step + 1, config.warmup_steps, config.learning_rate, total);
            apply_update(tape, vars, group, state, lr, config.weight_decay);
            tau[0] = std::clamp(tau[0], kMinTemperature, kMaxTemperature);
            result.history.push_back({state.step, lr, terms.loss.value().item(), terms.short_term.value().item(),
                                      terms.long_term.value().item()});
        }
    }
    model.temperature = tau.item();
    result.checkpoint = Checkpoint{"expanded", config.seed, std::move(model)};
    return result;
}

namespace {

std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

double parse_double(std::string_view field, std::size_t line) {
    try {
        std::size_t used = 0;
        const std::string s(field);
        const double v = std::stod(s, &used);
        if (used != s.size()) throw std::invalid_argument("trailing characters");
        return v;
    } catch (const std::exception&) {
        throw ParseError("bad number '" + std::string(field) + "'", line);
    }
}

std::vector<std::string_view> split(std::string_view line, char sep) {
    std::vector<std::string_view> out;
    std::size_t start = 0;
    while (true) {
        const std::size_t pos = line.find(sep, start);
        out.push_back(line.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
        if (pos == std::string_view::npos) break;
        start = pos + 1;
    }
    return out;
}

}  // namespace

std::string loss_history_csv(std::span<const LossRecord> history) {
    std::string out = "step,lr,loss,loss_short,loss_long\n";
    for (const LossRecord& r : history) {
        out += std::to_string(r.step) + ',' + format_double(r.lr) + ',' + format_double(r.loss) + ',';
        if (r.loss_short) out += format_double(*r.loss_short);
        out += ',';
        if (r.loss_long) out += format_double(*r.loss_long);
        out += '\n';
    }
    return out;
}

std::vector<LossRecord> parse_loss_history_csv(std::string_view text) {
    std::vector<LossRecord> out;
    std::size_t line_no = 0;
    std::size_t start = 0;
    while (start < text.size()) {
        std::size_t end = text.find('\n', start);
        if (end == std::string_view::npos) end = text.size();
        const std::string_view line = text.substr(start, end - start);
        start = end + 1;
        ++line_no;
        if (line_no == 1) {
            if (line != "step,lr,loss,loss_short,loss_long") throw ParseError("unexpected loss CSV header", 1);
            continue;
        }
        if (line.empty()) continue;
        const auto f = split(line, ',');
        if (f.size() != 5) throw ParseError("expected 5 fields", line_no);
        LossRecord r;
        r.step = static_cast<std::size_t>(parse_double(f[0], line_no));
        r.lr = parse_double(f[1], line_no);
        r.loss = parse_double(f[2], line_no);
        if (!f[3].empty()) r.loss_short = parse_double(f[3], line_no);
        if (!f[4].empty()) r.loss_long = parse_double(f[4], line_no);
        out.push_back(r);
    }
    return out;
}

}  // namespace tulip
