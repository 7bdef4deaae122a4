#pragma once

#include "spkmask/labels.hpp"
#include "spkmask/model.hpp"
#include "spkmask/signal.hpp"
#include "spkmask/simulate.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numbers>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace spkmask {

struct TrainConfig {
    double lambda = 0.5;
    double lr_init = 3e-3;
    double lr_min = 1e-8;
    int restart_period_steps = 0; // 0: one epoch of steps
    int epochs = 10;
    int batch_size = 8;
    std::uint64_t seed = 1;
    bool deterministic = true;
    double grad_clip_norm = 1.0; // 0 disables
    int max_steps = 0;           // 0: no limit
    double target_loss = 0.0;    // stop once an epoch's mean combined loss falls below; 0 disables
    bool shuffle = true;
};

inline void validate(const TrainConfig& c) {
    if (!(c.lambda >= 0.0 && c.lambda <= 1.0)) throw std::invalid_argument("lambda must lie in [0, 1]");
    if (!(c.lr_min <= c.lr_init) || c.lr_min < 0.0) throw std::invalid_argument("need 0 <= lr_min <= lr_init");
    if (c.batch_size <= 0 || c.epochs <= 0) throw std::invalid_argument("batch_size and epochs must be positive");
    if (c.restart_period_steps < 0 || c.max_steps < 0) throw std::invalid_argument("negative step count");
}

// Cosine annealing with warm restarts every `period` steps.
inline double lr_at(long step, double lr_init, double lr_min, long period) {
    if (period <= 0) throw std::invalid_argument("restart period must be positive");
    if (step < 0) throw std::invalid_argument("negative step");
    const double phase = static_cast<double>(step % period) / static_cast<double>(period);
    return lr_min + 0.5 * (lr_init - lr_min) * (1.0 + std::cos(std::numbers::pi * phase));
}

// ---------------------------------------------------------------------------
// Adam.

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct AdamTensorState {
    Mat m, v;
    long step = 0;
};

class NonFiniteGradient : public std::domain_error {
public:
    using std::domain_error::domain_error;
};

// One bias-corrected Adam update of a single tensor.
inline void adam_step(Mat& param, const Mat& grad, AdamTensorState& st, double lr, const AdamConfig& cfg = {}) {
    if (param.rows() != grad.rows() || param.cols() != grad.cols()) throw std::invalid_argument("adam_step: shape mismatch");
    if (!grad.allFinite()) throw NonFiniteGradient("adam_step: non-finite gradient");
    if (st.m.size() == 0) {
        st.m = Mat::Zero(param.rows(), param.cols());
        st.v = Mat::Zero(param.rows(), param.cols());
    }
    ++st.step;
    st.m = cfg.beta1 * st.m + (1.0 - cfg.beta1) * grad;
    st.v = cfg.beta2 * st.v + (1.0 - cfg.beta2) * grad.cwiseProduct(grad);
    const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(st.step));
    const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(st.step));
    param.array() -= lr * (st.m.array() / c1) / ((st.v.array() / c2).sqrt() + cfg.eps);
}

// Gradients for every parameter; untouched tensors were not reached by the
// backward pass and are skipped by the optimizer.
struct Gradients {
    std::vector<Mat> values;
    std::vector<bool> touched;

    explicit Gradients(const ParameterStore& ps) : values(ps.size()), touched(ps.size(), false) {}

    void add(std::size_t i, const Mat& g) {
        if (!touched[i]) {
            values[i] = g;
            touched[i] = true;
        } else {
            values[i] += g;
        }
    }

    double global_norm() const {
        double s = 0.0;
        for (std::size_t i = 0; i < values.size(); ++i) {
            if (touched[i]) s += values[i].squaredNorm();
        }
        return std::sqrt(s);
    }

    void scale(double f) {
        for (std::size_t i = 0; i < values.size(); ++i) {
            if (touched[i]) values[i] *= f;
        }
    }
};

class Adam {
public:
    explicit Adam(const ParameterStore& ps, AdamConfig cfg = {}) : cfg_(cfg), states_(ps.size()) {}

    // Checks every gradient first; a non-finite one aborts the whole step.
    void step(ParameterStore& ps, const Gradients& g, double lr) {
        for (std::size_t i = 0; i < ps.size(); ++i) {
            if (g.touched[i] && !g.values[i].allFinite()) throw NonFiniteGradient("non-finite gradient for " + ps.name(i));
        }
        for (std::size_t i = 0; i < ps.size(); ++i) {
            if (g.touched[i]) adam_step(ps.value(i), g.values[i], states_[i], lr, cfg_);
        }
    }

private:
    AdamConfig cfg_;
    std::vector<AdamTensorState> states_;
};

// ---------------------------------------------------------------------------
// Training items and batches.

struct TrainItem {
    std::string id;
    Mat features;             // 2D x num_mels, padded with the log floor
    std::vector<int> tokens;  // SOT ... EOT
    std::vector<MaskVector> speaker_masks; // index k-1 holds speaker k's target (length D)
};

// Pads with log(floor) (silence) or truncates to exactly `rows` frames.
inline Mat pad_features(const FeatureMatrix& fm, int rows, double log_floor = 1e-10) {
    Mat out = Mat::Constant(rows, fm.num_mels, std::log(log_floor));
    const auto n = std::min<std::size_t>(fm.num_frames, static_cast<std::size_t>(rows));
    for (std::size_t t = 0; t < n; ++t) {
        for (int m = 0; m < fm.num_mels; ++m) out(static_cast<Eigen::Index>(t), m) = fm.at(t, m);
    }
    return out;
}

inline MaskVector fit_mask(const MaskVector& m, int length) {
    MaskVector out = m;
    out.values.resize(static_cast<std::size_t>(length), 0.0);
    return out;
}

inline TrainItem make_train_item(const MixtureExample& ex, Scheme scheme, const Vocabulary& vocab, const FeatureConfig& feat,
                                 const ModelConfig& model) {
    TrainItem item;
    item.id = ex.id;
    item.features = pad_features(log_mel(ex.mixture, feat), model.feature_frames(), feat.log_floor);
    item.tokens = build_label(ex, scheme, vocab).tokens;
    for (const auto& spk : speaker_order(ex)) item.speaker_masks.push_back(fit_mask(ex.speaker_masks.at(spk), model.max_frames));
    return item;
}

struct Batch {
    std::vector<const TrainItem*> items;
    std::vector<std::vector<int>> inputs;  // decoder inputs, PAD-padded
    std::vector<std::vector<int>> targets; // shifted by one, PAD-padded
};

inline Batch collate(std::span<const TrainItem* const> items, int pad) {
    Batch b;
    std::size_t len = 0;
    for (const auto* it : items) {
        if (it->tokens.size() < 2) throw std::invalid_argument("label sequence shorter than two tokens");
        len = std::max(len, it->tokens.size());
    }
    for (const auto* it : items) {
        std::vector<int> padded = it->tokens;
        padded.resize(len, pad);
        b.items.push_back(it);
        b.inputs.emplace_back(padded.begin(), padded.end() - 1);
        b.targets.emplace_back(padded.begin() + 1, padded.end());
    }
    return b;
}

// Batch objective: ASR loss is the mean NLL over every non-PAD target in the
// batch; each gated mask loss is divided by the batch size, so
// combined = (1 - lambda) * asr + lambda * sum(mask_losses) holds exactly.
// The mask branch is skipped entirely when lambda == 0 or nothing is gated.
// When `grads` is given, gradients of `combined` are accumulated into it.
inline LossBreakdown batch_loss(const Model& model, const Vocabulary& vocab, const Batch& batch, double lambda, bool training,
                                std::uint64_t dropout_seed, Gradients* grads) {
    if (!(lambda >= 0.0 && lambda <= 1.0)) throw std::invalid_argument("lambda must lie in [0, 1]");
    const int pad = vocab.pad();
    std::size_t count = 0;
    for (const auto& tg : batch.targets) {
        for (int y : tg) count += (y != pad);
    }
    if (count == 0) throw std::invalid_argument("batch has no non-PAD targets");
    const double bsize = static_cast<double>(batch.items.size());

    LossBreakdown out;
    out.lambda = lambda;
    double asr_sum = 0.0;
    for (std::size_t b = 0; b < batch.items.size(); ++b) {
        const TrainItem& item = *batch.items[b];
        Tape t(grads != nullptr);
        Var enc = model.encode(t, item.features);
        DecoderOutput dec = model.decoder_forward(t, enc, batch.inputs[b]);
        Var nll = ag::cross_entropy_sum(dec.logits, batch.targets[b], pad);
        asr_sum += nll.scalar();
        Var total = ag::scale(nll, (1.0 - lambda) / static_cast<double>(count));

        if (lambda > 0.0) {
            Rng rng{dropout_seed, static_cast<std::uint64_t>(b)};
            for (const auto& g : gate_positions(batch.targets[b], vocab)) {
                if (g.speaker_index < 1 || static_cast<std::size_t>(g.speaker_index) > item.speaker_masks.size()) continue;
                const MaskVector& target = item.speaker_masks[static_cast<std::size_t>(g.speaker_index - 1)];
                Var row = ag::slice_rows(dec.hidden, static_cast<Eigen::Index>(g.position), 1);
                Var prob = model.mask_branch_forward(t, row, enc, training, &rng);
                Mat y = Eigen::Map<const Mat>(target.values.data(), 1, static_cast<Eigen::Index>(target.size()));
                Var bce = ag::bce_mean(prob, y, kMaskProbClip);
                out.mask_losses.push_back(bce.scalar() / bsize);
                total = ag::add(total, ag::scale(bce, lambda / bsize));
            }
        }
        if (grads) {
            t.backward(total);
            for (const auto& [idx, node] : t.parameter_nodes()) {
                if (t.has_grad(node)) grads->add(idx, t.grad(node));
            }
        }
    }
    out.asr_loss = asr_sum / static_cast<double>(count);
    out.combined = combined_loss(out.asr_loss, out.mask_losses, lambda);
    return out;
}

struct StepMetrics {
    long step = 0;
    int epoch = 0;
    double lr = 0.0;
    double asr_loss = 0.0;
    double mask_loss = 0.0; // sum of batch-averaged gated mask losses
    double combined = 0.0;
    int gated = 0;
    bool skipped = false; // aborted on a non-finite gradient
};

struct TrainResult {
    std::vector<StepMetrics> log;
    long steps = 0;
    int epochs_run = 0;
    double last_epoch_loss = 0.0;
    std::vector<std::string> warnings;
};

using StepCallback = std::function<void(const StepMetrics&)>;

inline TrainResult train_run(Model& model, const Vocabulary& vocab, const std::vector<TrainItem>& items, const TrainConfig& cfg,
                             const StepCallback& on_step = {}) {
    validate(cfg);
    if (items.empty()) throw std::invalid_argument("training manifest is empty");
    const std::size_t bs = static_cast<std::size_t>(cfg.batch_size);
    const long steps_per_epoch = static_cast<long>((items.size() + bs - 1) / bs);
    const long period = cfg.restart_period_steps > 0 ? cfg.restart_period_steps : steps_per_epoch;

    Adam adam(model.parameters());
    TrainResult result;
    long step = 0;
    bool warned_no_mask = false;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::vector<std::size_t> order(items.size());
        std::iota(order.begin(), order.end(), std::size_t{0});
        if (cfg.shuffle) {
            Rng rng{cfg.seed, stable_hash("shuffle"), static_cast<std::uint64_t>(epoch)};
            for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.index(i)]);
        }
        double epoch_loss = 0.0;
        long epoch_batches = 0;
        for (std::size_t start = 0; start < order.size(); start += bs) {
            if (cfg.max_steps > 0 && step >= cfg.max_steps) break;
            std::vector<const TrainItem*> chunk;
            for (std::size_t i = start; i < std::min(order.size(), start + bs); ++i) chunk.push_back(&items[order[i]]);
            const Batch batch = collate(chunk, vocab.pad());

            Gradients grads(model.parameters());
            const std::uint64_t dropout_seed = Rng{cfg.seed, stable_hash("dropout"), static_cast<std::uint64_t>(step)}.next();
            const LossBreakdown loss = batch_loss(model, vocab, batch, cfg.lambda, true, dropout_seed, &grads);

            StepMetrics m;
            m.step = step;
            m.epoch = epoch;
            m.lr = lr_at(step, cfg.lr_init, cfg.lr_min, period);
            m.asr_loss = loss.asr_loss;
            m.mask_loss = loss.mask_sum();
            m.combined = loss.combined;
            m.gated = static_cast<int>(loss.mask_losses.size());
            if (cfg.lambda > 0.0 && loss.mask_losses.empty() && !warned_no_mask) {
                result.warnings.push_back("batch at step " + std::to_string(step) + " has no mask targets; mask term empty");
                warned_no_mask = true;
            }
            if (cfg.grad_clip_norm > 0.0) {
                const double norm = grads.global_norm();
                if (std::isfinite(norm) && norm > cfg.grad_clip_norm) grads.scale(cfg.grad_clip_norm / norm);
            }
            try {
                adam.step(model.parameters(), grads, m.lr);
            } catch (const NonFiniteGradient& e) {
                m.skipped = true;
                result.warnings.push_back("step " + std::to_string(step) + " skipped: " + e.what());
            }
            result.log.push_back(m);
            if (on_step) on_step(m);
            epoch_loss += m.combined;
            ++epoch_batches;
            ++step;
        }
        result.epochs_run = epoch + 1;
        if (epoch_batches > 0) result.last_epoch_loss = epoch_loss / static_cast<double>(epoch_batches);
        if (cfg.max_steps > 0 && step >= cfg.max_steps) break;
        if (cfg.target_loss > 0.0 && epoch_batches > 0 && result.last_epoch_loss < cfg.target_loss) break;
    }
    result.steps = step;
    return result;
}

} // namespace spkmask
