#pragma once

// Toy encoder-decoder transformer with a speaker-mask branch.
//
// The encoder consumes 2*D log-Mel frames (10 ms stride), merges adjacent
// pairs into D frames of 20 ms and runs pre-norm self-attention blocks. The
// decoder is a causal pre-norm transformer with cross-attention. At every
// decoder position whose target is a speaker token, the mask branch maps the
// final decoder hidden state (and, for the CA variants, the encoder states)
// to a length-D vector of per-frame speaker-activity probabilities.

#include "spkmask/autograd.hpp"
#include "spkmask/error.hpp"
#include "spkmask/labels.hpp"
#include "spkmask/rng.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace spkmask {

using ag::Mat;
using ag::Tape;
using ag::Var;

enum class MaskVariant { L_FC, L_FC_CNN, CA_FC, CA_FC_CNN };

inline const char* to_string(MaskVariant v) {
    switch (v) {
    case MaskVariant::L_FC: return "L_FC";
    case MaskVariant::L_FC_CNN: return "L_FC_CNN";
    case MaskVariant::CA_FC: return "CA_FC";
    case MaskVariant::CA_FC_CNN: return "CA_FC_CNN";
    }
    return "?";
}

inline MaskVariant mask_variant_from_string(const std::string& s) {
    if (s == "L_FC" || s == "L-FC") return MaskVariant::L_FC;
    if (s == "L_FC_CNN" || s == "L-FC-CNN") return MaskVariant::L_FC_CNN;
    if (s == "CA_FC" || s == "CA-FC") return MaskVariant::CA_FC;
    if (s == "CA_FC_CNN" || s == "CA-FC-CNN") return MaskVariant::CA_FC_CNN;
    throw std::invalid_argument("unknown mask variant: " + s);
}

inline bool uses_cross_attention(MaskVariant v) { return v == MaskVariant::CA_FC || v == MaskVariant::CA_FC_CNN; }
inline bool uses_cnn(MaskVariant v) { return v == MaskVariant::L_FC_CNN || v == MaskVariant::CA_FC_CNN; }

struct ModelConfig {
    int num_encoder_blocks = 2;
    int num_decoder_blocks = 2;
    int hidden_dim = 64;
    int num_heads = 4;
    int num_mels = 16;
    int max_frames = 256; // D: encoder frames and mask length (20 ms each)
    int vocab_size = 0;
    int ffn_mult = 4;
    MaskVariant mask_variant = MaskVariant::L_FC;
    double dropout_mask_cnn = 0.25;
    int cnn_channels_1 = 32;
    int cnn_channels_2 = 64;
    // Model-side input scaling of raw log-Mel values: (max(x, floor) + offset) * scale.
    double feature_floor = -10.0;
    double feature_offset = 3.0;
    double feature_scale = 0.25;
    std::uint64_t seed = 1;

    int feature_frames() const { return 2 * max_frames; }
};

inline void validate(const ModelConfig& c) {
    if (c.num_encoder_blocks < 0 || c.num_decoder_blocks < 0) throw std::invalid_argument("negative block count");
    if (c.hidden_dim <= 0 || c.num_heads <= 0 || c.hidden_dim % c.num_heads != 0)
        throw std::invalid_argument("hidden_dim must be a positive multiple of num_heads");
    if (c.num_mels <= 0 || c.max_frames <= 0 || c.vocab_size <= 0 || c.ffn_mult <= 0) throw std::invalid_argument("model sizes must be positive");
    if (c.dropout_mask_cnn < 0.0 || c.dropout_mask_cnn >= 1.0) throw std::invalid_argument("dropout rate must be in [0, 1)");
}

inline nlohmann::json to_json(const ModelConfig& c) {
    return {{"num_encoder_blocks", c.num_encoder_blocks}, {"num_decoder_blocks", c.num_decoder_blocks},
            {"hidden_dim", c.hidden_dim},                 {"num_heads", c.num_heads},
            {"num_mels", c.num_mels},                     {"max_frames", c.max_frames},
            {"vocab_size", c.vocab_size},                 {"ffn_mult", c.ffn_mult},
            {"mask_variant", to_string(c.mask_variant)},  {"dropout_mask_cnn", c.dropout_mask_cnn},
            {"cnn_channels_1", c.cnn_channels_1},         {"cnn_channels_2", c.cnn_channels_2},
            {"feature_floor", c.feature_floor},           {"feature_offset", c.feature_offset},
            {"feature_scale", c.feature_scale},           {"seed", c.seed}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.num_encoder_blocks = j.at("num_encoder_blocks").get<int>();
    c.num_decoder_blocks = j.at("num_decoder_blocks").get<int>();
    c.hidden_dim = j.at("hidden_dim").get<int>();
    c.num_heads = j.at("num_heads").get<int>();
    c.num_mels = j.at("num_mels").get<int>();
    c.max_frames = j.at("max_frames").get<int>();
    c.vocab_size = j.at("vocab_size").get<int>();
    c.ffn_mult = j.at("ffn_mult").get<int>();
    c.mask_variant = mask_variant_from_string(j.at("mask_variant").get<std::string>());
    c.dropout_mask_cnn = j.at("dropout_mask_cnn").get<double>();
    c.cnn_channels_1 = j.at("cnn_channels_1").get<int>();
    c.cnn_channels_2 = j.at("cnn_channels_2").get<int>();
    c.feature_floor = j.at("feature_floor").get<double>();
    c.feature_offset = j.at("feature_offset").get<double>();
    c.feature_scale = j.at("feature_scale").get<double>();
    c.seed = j.at("seed").get<std::uint64_t>();
    return c;
}

// Named trainable tensors, addressable by path ("encoder.block0.attn.wq").
class ParameterStore {
public:
    std::size_t add(const std::string& name, Mat value) {
        if (index_.count(name)) throw std::invalid_argument("duplicate parameter name: " + name);
        index_.emplace(name, values_.size());
        names_.push_back(name);
        values_.push_back(std::move(value));
        return values_.size() - 1;
    }

    std::size_t size() const { return values_.size(); }
    const std::string& name(std::size_t i) const { return names_[i]; }
    Mat& value(std::size_t i) { return values_[i]; }
    const Mat& value(std::size_t i) const { return values_[i]; }

    std::size_t index(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw std::out_of_range("no parameter named " + name);
        return it->second;
    }
    bool contains(const std::string& name) const { return index_.count(name) > 0; }

    std::size_t total_elements() const {
        std::size_t n = 0;
        for (const auto& v : values_) n += static_cast<std::size_t>(v.size());
        return n;
    }

private:
    std::vector<std::string> names_;
    std::vector<Mat> values_;
    std::unordered_map<std::string, std::size_t> index_;
};

inline bool is_mask_branch_parameter(const std::string& name) { return name.rfind("mask.", 0) == 0; }

// Sinusoidal position table, rows = positions.
inline Mat sinusoid_table(Eigen::Index rows, Eigen::Index dim) {
    Mat pe(rows, dim);
    for (Eigen::Index p = 0; p < rows; ++p) {
        for (Eigen::Index i = 0; i < dim; ++i) {
            const double rate = std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / static_cast<double>(dim));
            pe(p, i) = (i % 2 == 0) ? std::sin(p * rate) : std::cos(p * rate);
        }
    }
    return pe;
}

struct DecoderOutput {
    Var logits; // L x vocab
    Var hidden; // L x hidden_dim, final layer after norm
};

class Model {
public:
    explicit Model(ModelConfig cfg) : cfg_(std::move(cfg)) {
        validate(cfg_);
        build();
        enc_pe_ = sinusoid_table(cfg_.max_frames, cfg_.hidden_dim);
        dec_pe_ = sinusoid_table(512, cfg_.hidden_dim);
    }

    const ModelConfig& config() const { return cfg_; }
    ParameterStore& parameters() { return params_; }
    const ParameterStore& parameters() const { return params_; }

    // features: 2D x num_mels raw log-Mel values. Returns D x hidden_dim.
    Var encode(Tape& t, const Mat& features) const {
        if (features.rows() != cfg_.feature_frames() || features.cols() != cfg_.num_mels)
            throw std::invalid_argument("encoder input must be (2*max_frames) x num_mels");
        Mat x = ((features.array().max(cfg_.feature_floor) + cfg_.feature_offset) * cfg_.feature_scale).matrix();
        Var in = ag::reshape(t.constant(std::move(x)), cfg_.max_frames, 2 * cfg_.num_mels);
        Var h = ag::gelu(linear(t, frontend_, in));
        h = ag::add(h, t.constant(enc_pe_));
        for (const auto& b : encoder_) {
            Var n1 = norm(t, b.ln1, h);
            h = ag::add(h, attention(t, b.attn, n1, n1, false));
            h = ag::add(h, feed_forward(t, b.ff1, b.ff2, norm(t, b.ln2, h)));
        }
        return norm(t, enc_norm_, h);
    }

    // Teacher-forced decoder pass over tokens (causal).
    DecoderOutput decoder_forward(Tape& t, Var encoder_states, std::span<const int> tokens) const {
        if (tokens.empty()) throw std::invalid_argument("decoder needs at least one token");
        for (int id : tokens) {
            if (id < 0 || id >= cfg_.vocab_size) throw std::out_of_range("token id out of vocabulary");
        }
        const auto len = static_cast<Eigen::Index>(tokens.size());
        Var x = ag::gather_rows(p(t, embed_), std::vector<int>(tokens.begin(), tokens.end()));
        x = ag::add(x, t.constant(positions(len)));
        for (const auto& b : decoder_) {
            Var n1 = norm(t, b.ln1, x);
            x = ag::add(x, attention(t, b.self_attn, n1, n1, true));
            x = ag::add(x, attention(t, b.cross_attn, norm(t, b.ln2, x), encoder_states, false));
            x = ag::add(x, feed_forward(t, b.ff1, b.ff2, norm(t, b.ln3, x)));
        }
        Var h = norm(t, dec_norm_, x);
        return {linear(t, out_proj_, h), h};
    }

    // hidden_row: 1 x hidden_dim decoder state at a gated position.
    // Returns 1 x D probabilities. Dropout in the CNN stack is active only
    // when training and an RNG is supplied.
    Var mask_branch_forward(Tape& t, Var hidden_row, Var encoder_states, bool training, Rng* rng) const {
        if (hidden_row.rows() != 1 || hidden_row.cols() != cfg_.hidden_dim) throw std::invalid_argument("mask branch expects one hidden row");
        Var q = hidden_row;
        if (uses_cross_attention(cfg_.mask_variant)) {
            q = ag::add(hidden_row, attention(t, mask_ca_, norm(t, mask_ca_ln_, hidden_row), encoder_states, false));
        }
        Var z = linear(t, mask_fc_, q); // 1 x D
        if (uses_cnn(cfg_.mask_variant)) {
            Var col = ag::transpose(z); // D x 1, one input channel
            Var c1 = ag::gelu(conv2x1(t, mask_conv1_, col));
            Var c2 = ag::gelu(conv2x1(t, mask_conv2_, c1));
            if (training && rng && cfg_.dropout_mask_cnn > 0.0) {
                const double keep = 1.0 - cfg_.dropout_mask_cnn;
                Mat m(c2.rows(), c2.cols());
                for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng->uniform() < keep ? 1.0 / keep : 0.0;
                c2 = ag::apply_mask(c2, std::move(m));
            }
            z = ag::transpose(linear(t, mask_out_, c2)); // per-frame 64 -> 1
        }
        return ag::sigmoid(z);
    }

private:
    struct Linear {
        std::size_t w, b;
    };
    struct Norm {
        std::size_t g, b;
    };
    struct Attention {
        Linear q, k, v, o;
    };
    struct Conv {
        std::size_t w0, w1, b; // taps at frame t and t+1
    };
    struct EncoderBlock {
        Norm ln1;
        Attention attn;
        Norm ln2;
        Linear ff1, ff2;
    };
    struct DecoderBlock {
        Norm ln1;
        Attention self_attn;
        Norm ln2;
        Attention cross_attn;
        Norm ln3;
        Linear ff1, ff2;
    };

    Mat random_matrix(const std::string& name, Eigen::Index rows, Eigen::Index cols, double stddev) const {
        Rng rng{cfg_.seed, stable_hash(name)};
        Mat m(rows, cols);
        for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = stddev * rng.normal();
        return m;
    }

    Linear make_linear(const std::string& name, int in, int out) {
        return {params_.add(name + ".w", random_matrix(name + ".w", in, out, 1.0 / std::sqrt(double(in)))),
                params_.add(name + ".b", Mat::Zero(1, out))};
    }
    Norm make_norm(const std::string& name, int dim) {
        return {params_.add(name + ".g", Mat::Ones(1, dim)), params_.add(name + ".b", Mat::Zero(1, dim))};
    }
    Attention make_attention(const std::string& name) {
        const int h = cfg_.hidden_dim;
        return {make_linear(name + ".q", h, h), make_linear(name + ".k", h, h), make_linear(name + ".v", h, h),
                make_linear(name + ".o", h, h)};
    }
    Conv make_conv(const std::string& name, int in, int out) {
        const double sd = 1.0 / std::sqrt(2.0 * in);
        return {params_.add(name + ".w0", random_matrix(name + ".w0", in, out, sd)),
                params_.add(name + ".w1", random_matrix(name + ".w1", in, out, sd)), params_.add(name + ".b", Mat::Zero(1, out))};
    }

    void build() {
        const int h = cfg_.hidden_dim, ff = cfg_.ffn_mult * cfg_.hidden_dim;
        frontend_ = make_linear("encoder.frontend", 2 * cfg_.num_mels, h);
        for (int i = 0; i < cfg_.num_encoder_blocks; ++i) {
            const std::string n = "encoder.block" + std::to_string(i);
            EncoderBlock b;
            b.ln1 = make_norm(n + ".ln1", h);
            b.attn = make_attention(n + ".attn");
            b.ln2 = make_norm(n + ".ln2", h);
            b.ff1 = make_linear(n + ".ff1", h, ff);
            b.ff2 = make_linear(n + ".ff2", ff, h);
            encoder_.push_back(b);
        }
        enc_norm_ = make_norm("encoder.norm", h);

        embed_ = params_.add("decoder.embed", random_matrix("decoder.embed", cfg_.vocab_size, h, 1.0));
        for (int i = 0; i < cfg_.num_decoder_blocks; ++i) {
            const std::string n = "decoder.block" + std::to_string(i);
            DecoderBlock b;
            b.ln1 = make_norm(n + ".ln1", h);
            b.self_attn = make_attention(n + ".self_attn");
            b.ln2 = make_norm(n + ".ln2", h);
            b.cross_attn = make_attention(n + ".cross_attn");
            b.ln3 = make_norm(n + ".ln3", h);
            b.ff1 = make_linear(n + ".ff1", h, ff);
            b.ff2 = make_linear(n + ".ff2", ff, h);
            decoder_.push_back(b);
        }
        dec_norm_ = make_norm("decoder.norm", h);
        out_proj_ = make_linear("decoder.out", h, cfg_.vocab_size);

        if (uses_cross_attention(cfg_.mask_variant)) {
            mask_ca_ln_ = make_norm("mask.ca.ln", h);
            mask_ca_ = make_attention("mask.ca");
        }
        mask_fc_ = make_linear("mask.fc", h, cfg_.max_frames);
        if (uses_cnn(cfg_.mask_variant)) {
            mask_conv1_ = make_conv("mask.conv1", 1, cfg_.cnn_channels_1);
            mask_conv2_ = make_conv("mask.conv2", cfg_.cnn_channels_1, cfg_.cnn_channels_2);
            mask_out_ = make_linear("mask.out", cfg_.cnn_channels_2, 1);
        }
    }

    Var p(Tape& t, std::size_t idx) const { return t.parameter(idx, params_.value(idx)); }

    Var linear(Tape& t, const Linear& l, Var x) const { return ag::add_row(ag::matmul(x, p(t, l.w)), p(t, l.b)); }

    Var norm(Tape& t, const Norm& n, Var x) const { return ag::layer_norm(x, p(t, n.g), p(t, n.b)); }

    Var feed_forward(Tape& t, const Linear& a, const Linear& b, Var x) const { return linear(t, b, ag::gelu(linear(t, a, x))); }

    // Width-2 convolution along frames with one trailing zero ("same" length).
    Var conv2x1(Tape& t, const Conv& c, Var x) const {
        Var y = ag::add(ag::matmul(x, p(t, c.w0)), ag::matmul(ag::shift_rows_up(x), p(t, c.w1)));
        return ag::add_row(y, p(t, c.b));
    }

    Var attention(Tape& t, const Attention& a, Var xq, Var xkv, bool causal) const {
        const int heads = cfg_.num_heads, dh = cfg_.hidden_dim / cfg_.num_heads;
        Var q = linear(t, a.q, xq), k = linear(t, a.k, xkv), v = linear(t, a.v, xkv);
        const double s = 1.0 / std::sqrt(static_cast<double>(dh));
        std::vector<Var> outs;
        outs.reserve(static_cast<std::size_t>(heads));
        for (int h = 0; h < heads; ++h) {
            Var qh = heads == 1 ? q : ag::slice_cols(q, h * dh, dh);
            Var kh = heads == 1 ? k : ag::slice_cols(k, h * dh, dh);
            Var vh = heads == 1 ? v : ag::slice_cols(v, h * dh, dh);
            Var w = ag::softmax_rows(ag::scale(ag::matmul_nt(qh, kh), s), causal);
            outs.push_back(ag::matmul(w, vh));
        }
        Var joined = heads == 1 ? outs.front() : ag::concat_cols(outs);
        return linear(t, a.o, joined);
    }

    Mat positions(Eigen::Index len) const {
        if (len <= dec_pe_.rows()) return dec_pe_.topRows(len);
        return sinusoid_table(len, cfg_.hidden_dim);
    }

    ModelConfig cfg_;
    ParameterStore params_;
    Mat enc_pe_, dec_pe_;

    Linear frontend_{};
    std::vector<EncoderBlock> encoder_;
    Norm enc_norm_{};
    std::size_t embed_ = 0;
    std::vector<DecoderBlock> decoder_;
    Norm dec_norm_{};
    Linear out_proj_{};

    Norm mask_ca_ln_{};
    Attention mask_ca_{};
    Linear mask_fc_{};
    Conv mask_conv1_{}, mask_conv2_{};
    Linear mask_out_{};
};

// ---------------------------------------------------------------------------
// Losses.

inline constexpr double kMaskProbClip = 1e-7;

// Mean negative log-likelihood over non-PAD targets.
inline Var asr_loss(Var logits, const std::vector<int>& targets, int pad) {
    std::size_t count = 0;
    for (int y : targets) count += (y != pad);
    if (count == 0) throw std::invalid_argument("asr_loss: every target is PAD");
    return ag::scale(ag::cross_entropy_sum(logits, targets, pad), 1.0 / static_cast<double>(count));
}

inline double asr_loss(const Mat& logits, std::span<const int> targets, int pad) {
    Tape t(false);
    return asr_loss(t.constant(logits), std::vector<int>(targets.begin(), targets.end()), pad).scalar();
}

struct GatePosition {
    std::size_t position;
    int speaker_index; // 1-based
};

// Positions whose TARGET token is a speaker token.
inline std::vector<GatePosition> gate_positions(std::span<const int> targets, const Vocabulary& vocab) {
    std::vector<GatePosition> gates;
    for (std::size_t i = 0; i < targets.size(); ++i) {
        if (vocab.is_speaker(targets[i])) gates.push_back({i, vocab.speaker_index(targets[i])});
    }
    return gates;
}

inline double mask_loss(const MaskVector& prediction, const MaskVector& target) {
    if (prediction.size() != target.size()) throw std::invalid_argument("mask_loss: length mismatch");
    if (target.size() == 0) throw std::invalid_argument("mask_loss: empty mask");
    double acc = 0.0;
    for (std::size_t i = 0; i < target.size(); ++i) {
        const double p = std::clamp(prediction.values[i], kMaskProbClip, 1.0 - kMaskProbClip);
        const double y = target.values[i];
        acc += y * std::log(p) + (1.0 - y) * std::log(1.0 - p);
    }
    return -acc / static_cast<double>(target.size());
}

inline double combined_loss(double asr, std::span<const double> mask_losses, double lambda) {
    if (!(lambda >= 0.0 && lambda <= 1.0)) throw std::invalid_argument("lambda must lie in [0, 1]");
    double sum = 0.0;
    for (double m : mask_losses) sum += m;
    return (1.0 - lambda) * asr + lambda * sum;
}

struct LossBreakdown {
    double asr_loss = 0.0;
    std::vector<double> mask_losses;
    double combined = 0.0;
    double lambda = 0.0;

    double mask_sum() const {
        double s = 0.0;
        for (double m : mask_losses) s += m;
        return s;
    }
};

// ---------------------------------------------------------------------------
// Checkpoints: "SPKMASK1" magic, u32 version, u64 header length, JSON header
// (config, metadata, tensor index), then raw little-endian doubles.

inline constexpr std::uint32_t kCheckpointVersion = 1;

inline void save_checkpoint(const std::filesystem::path& path, const Model& model, const nlohmann::json& meta = {}) {
    const auto& ps = model.parameters();
    nlohmann::json header;
    header["config"] = to_json(model.config());
    header["meta"] = meta.is_null() ? nlohmann::json::object() : meta;
    header["tensors"] = nlohmann::json::array();
    for (std::size_t i = 0; i < ps.size(); ++i)
        header["tensors"].push_back({{"name", ps.name(i)}, {"rows", ps.value(i).rows()}, {"cols", ps.value(i).cols()}});
    const std::string h = header.dump();

    std::ofstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot write checkpoint: " + path.string());
    f.write("SPKMASK1", 8);
    const std::uint32_t version = kCheckpointVersion;
    const std::uint64_t len = h.size();
    f.write(reinterpret_cast<const char*>(&version), sizeof version);
    f.write(reinterpret_cast<const char*>(&len), sizeof len);
    f.write(h.data(), static_cast<std::streamsize>(h.size()));
    for (std::size_t i = 0; i < ps.size(); ++i) {
        const Mat& m = ps.value(i);
        f.write(reinterpret_cast<const char*>(m.data()), static_cast<std::streamsize>(sizeof(double) * m.size()));
    }
    if (!f) throw DataError("failed writing checkpoint: " + path.string());
}

struct LoadedCheckpoint {
    Model model;
    nlohmann::json meta;
};

inline LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot open checkpoint: " + path.string());
    char magic[8];
    std::uint32_t version = 0;
    std::uint64_t len = 0;
    f.read(magic, 8);
    f.read(reinterpret_cast<char*>(&version), sizeof version);
    f.read(reinterpret_cast<char*>(&len), sizeof len);
    if (!f || std::memcmp(magic, "SPKMASK1", 8) != 0) throw DataError("not a checkpoint file: " + path.string());
    if (version != kCheckpointVersion) throw DataError("unsupported checkpoint version " + std::to_string(version));
    std::string h(len, '\0');
    f.read(h.data(), static_cast<std::streamsize>(len));
    if (!f) throw DataError("truncated checkpoint header: " + path.string());
    const auto header = nlohmann::json::parse(h);
    Model model(model_config_from_json(header.at("config")));
    auto& ps = model.parameters();
    const auto& tensors = header.at("tensors");
    if (tensors.size() != ps.size()) throw DataError("checkpoint tensor count does not match its config");
    for (const auto& t : tensors) {
        const std::size_t idx = ps.index(t.at("name").get<std::string>());
        Mat& m = ps.value(idx);
        if (m.rows() != t.at("rows").get<Eigen::Index>() || m.cols() != t.at("cols").get<Eigen::Index>())
            throw DataError("checkpoint tensor shape mismatch for " + ps.name(idx));
        f.read(reinterpret_cast<char*>(m.data()), static_cast<std::streamsize>(sizeof(double) * m.size()));
    }
    if (!f) throw DataError("truncated checkpoint data: " + path.string());
    return {std::move(model), header.at("meta")};
}

} // namespace spkmask
