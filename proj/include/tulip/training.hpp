#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "tulip/autograd.hpp"
#include "tulip/corpus.hpp"
#include "tulip/encoder.hpp"

namespace tulip {

enum class DistillLossKind { cosine, l2, mse };

std::string_view to_string(DistillLossKind kind);
DistillLossKind parse_distill_loss(std::string_view name);

// cosine: 1 - cos(z_t, z_s); l2: ||z_t - z_s||; mse: mean squared difference.
// Throws DimensionError on length mismatch, DegenerateInputError on a zero vector under cosine.
double distill_loss(std::span<const double> teacher, std::span<const double> student, DistillLossKind kind);
// Row-wise loss averaged over the batch. teacher is usually a constant.
Var distill_loss(Var teacher, Var student, DistillLossKind kind);

// Symmetric InfoNCE on cosine similarities scaled by 1/tau. Rows are pairs.
double contrastive_loss(const Tensor& text, const Tensor& image, double tau);
Var contrastive_loss(Var text, Var image, Var tau);

// lambda * L(short, image) + (1 - lambda) * L(long, image); both terms share the image embeddings.
Var joint_loss(Var text_short, Var text_long, Var image, double lambda, Var tau);

struct JointTerms {
    Var loss, short_term, long_term;
};
JointTerms joint_loss(Tape& tape, const Batch& batch, const TextParamsT<Var>& text, const EncoderConfig& text_config,
                      const ImageParamsT<Var>& image, const ImageConfig& image_config, double lambda, Var tau);

struct LossRecord {
    std::size_t step = 0;
    double lr = 0.0;
    double loss = 0.0;
    std::optional<double> loss_short;
    std::optional<double> loss_long;

    friend bool operator==(const LossRecord&, const LossRecord&) = default;
};

struct TrainState {
    std::size_t step = 0;
    std::vector<Tensor> m, v;  // first and second moments, one per parameter
    double lr = 0.0;
    std::vector<LossRecord> history;
};

// Decoupled weight decay. decay_mask (one flag per parameter, empty = all) selects decayed tensors.
// Throws DimensionError when parameter, gradient or moment shapes disagree.
void adamw_step(std::span<Tensor* const> params, std::span<const Tensor> grads, TrainState& state, double lr,
                double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8, double weight_decay = 0.0,
                std::span<const unsigned char> decay_mask = {});

// Linear warmup from 0 to base_lr, then cosine decay reaching 0 at total_steps.
double lr_schedule(std::size_t step, std::size_t warmup_steps, double base_lr, std::size_t total_steps);

constexpr double kMinTemperature = 1e-3;
constexpr double kMaxTemperature = 100.0;

struct TeacherConfig {
    EncoderConfig text;  // forced to the absolute scheme
    ImageConfig image;
    std::size_t epochs = 10;
    std::size_t batch_size = 32;
    double learning_rate = 1e-3;
    std::size_t warmup_steps = 50;
    double weight_decay = 0.1;
    double temperature = 0.07;
    std::uint64_t seed = 0;
};

struct DistillConfig {
    DistillLossKind loss_kind = DistillLossKind::cosine;
    std::size_t epochs = 20;
    std::size_t batch_size = 32;
    double learning_rate = 5e-4;
    std::size_t warmup_steps = 1000;
    double weight_decay = 0.1;
    std::uint64_t seed = 0;

    void validate() const;
};

struct ExpandConfig {
    std::size_t t_g = 248;
    double alpha = 8.0;
    bool ntk = true;  // false keeps plain rope frequencies while the window grows
    double lambda = 0.5;
    double temperature = 0.07;  // initial value; learned afterwards
    std::size_t epochs = 1;
    std::size_t batch_size = 32;
    double learning_rate = 1e-5;
    std::size_t warmup_steps = 0;
    double weight_decay = 0.01;
    bool vision_trainable = true;
    std::uint64_t seed = 0;

    void validate() const;
};

struct TrainResult {
    Checkpoint checkpoint;
    std::vector<LossRecord> history;
    std::size_t truncated_long_views = 0;  // long views cut to fit the window
};

// Contrastive pretraining of an absolute-scheme dual encoder on views capped at the teacher window.
TrainResult make_teacher(const Corpus& corpus, const TeacherConfig& config);

// The student starts as a copy of every teacher tensor with a matching name and shape
// (everything but the position table) and is trained to match frozen teacher embeddings
// on views capped at the teacher window. The teacher never enters the training tape.
TrainResult run_distillation(const Checkpoint& teacher, const EncoderConfig& student_config, const Corpus& corpus,
                             const DistillConfig& config);

// Text config the expansion phase trains with: rope becomes rope_ntk with the NTK factor for
// (alpha, 77, t_g) unless ntk is off; context_length becomes t_g. Absolute encoders keep their window.
EncoderConfig expanded_config(const EncoderConfig& student, const ExpandConfig& config);

// Joint short/long contrastive fine-tuning. The image tower comes from the checkpoint.
TrainResult run_expansion(const Checkpoint& student, const Corpus& corpus, const ExpandConfig& config);

std::string loss_history_csv(std::span<const LossRecord> history);
std::vector<LossRecord> parse_loss_history_csv(std::string_view text);

}  // namespace tulip
