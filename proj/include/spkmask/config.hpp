#pragma once

// Run configuration: one JSON tree with a default for every field. A config
// file and --set overrides are merged on top (flags > file > defaults); keys
// not in the defaults and values of the wrong type are rejected.

#include "spkmask/error.hpp"
#include "spkmask/labels.hpp"
#include "spkmask/metrics.hpp"
#include "spkmask/model.hpp"
#include "spkmask/signal.hpp"
#include "spkmask/simulate.hpp"
#include "spkmask/train.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

namespace spkmask {

using ojson = nlohmann::ordered_json;

inline ojson default_run_config() {
    return ojson::parse(R"({
  "seed": 1,
  "paths": {
    "corpus": "work/corpus",
    "mixtures": "work/mixtures",
    "run": "work/run",
    "decode": "work/decode",
    "checkpoint": ""
  },
  "features": {
    "sample_rate_hz": 16000,
    "window_ms": 25.0,
    "stride_ms": 10.0,
    "num_mels": 16,
    "fft_size": 512,
    "log_floor": 1e-10
  },
  "toy_corpus": {
    "num_speakers": 2,
    "utts_per_speaker": 8,
    "words": ["ba", "de", "gi", "ko", "mu", "pa", "ti", "zo"],
    "words_min": 3,
    "words_max": 5,
    "word_duration_s": 0.2
  },
  "simulate": {
    "mode": "train",
    "ratio": {"original": 1, "case1": 1, "case2": 1},
    "sir_db": 0.0,
    "overlap_min_s": 0.0,
    "overlap_max_s": 5.0,
    "fixed_overlap_s": null,
    "overlap_grid_s": 0.02,
    "vad_threshold_db": -40.0
  },
  "labels": {
    "scheme": "SPK",
    "charset": "abcdefghijklmnopqrstuvwxyz' ",
    "max_speakers": 4,
    "max_s": 30.0
  },
  "model": {
    "num_encoder_blocks": 2,
    "num_decoder_blocks": 2,
    "hidden_dim": 64,
    "num_heads": 4,
    "max_frames": 256,
    "ffn_mult": 4,
    "mask_variant": "L_FC",
    "dropout_mask_cnn": 0.25,
    "cnn_channels_1": 32,
    "cnn_channels_2": 64
  },
  "train": {
    "lambda": 0.5,
    "lr_init": 0.003,
    "lr_min": 1e-8,
    "restart_period_steps": 0,
    "epochs": 10,
    "batch_size": 8,
    "grad_clip_norm": 1.0,
    "max_steps": 0,
    "target_loss": 0.0,
    "shuffle": true,
    "checkpoint_every_steps": 0
  },
  "decode": {
    "max_len": 200,
    "diarization": "mask",
    "mask_threshold": 0.5,
    "min_segment_s": 0.0,
    "oracle": false
  },
  "score": {
    "collar_s": 0.2,
    "plots": false
  }
})");
}

namespace detail {

inline const char* json_kind(const ojson& v) {
    if (v.is_null()) return "null";
    if (v.is_boolean()) return "boolean";
    if (v.is_number_integer()) return "integer";
    if (v.is_number()) return "number";
    if (v.is_string()) return "string";
    if (v.is_array()) return "array";
    return "object";
}

// A default of null marks an optional number.
inline bool type_compatible(const ojson& def, const ojson& v) {
    if (def.is_null()) return v.is_null() || v.is_number();
    if (def.is_boolean()) return v.is_boolean();
    if (def.is_number_integer()) return v.is_number_integer();
    if (def.is_number()) return v.is_number();
    if (def.is_string()) return v.is_string();
    if (def.is_array()) return v.is_array();
    return v.is_object();
}

inline void merge_into(ojson& base, const ojson& over, const std::string& where) {
    if (!over.is_object()) throw ConfigError(where.empty() ? "config must be a JSON object" : where + " must be an object");
    for (const auto& [key, value] : over.items()) {
        const std::string path = where.empty() ? key : where + "." + key;
        if (!base.contains(key)) throw ConfigError("unknown config key: " + path);
        ojson& slot = base[key];
        if (slot.is_object()) {
            merge_into(slot, value, path);
        } else if (!type_compatible(slot, value)) {
            throw ConfigError("config key " + path + " expects " + json_kind(slot) + ", got " + json_kind(value));
        } else if (slot.is_number_float() && value.is_number_integer()) {
            slot = value.get<double>();
        } else {
            slot = value;
        }
    }
}

} // namespace detail

class RunConfig {
public:
    RunConfig() : tree_(default_run_config()) {}

    const ojson& tree() const { return tree_; }

    void merge(const ojson& overrides) { detail::merge_into(tree_, overrides, ""); }

    void merge_file(const std::filesystem::path& path) {
        std::ifstream f(path);
        if (!f) throw ConfigError("cannot open config file " + path.string());
        std::stringstream ss;
        ss << f.rdbuf();
        ojson j;
        try {
            j = ojson::parse(ss.str());
        } catch (const nlohmann::json::parse_error& e) {
            throw ConfigError("config file " + path.string() + ": " + e.what());
        }
        merge(j);
    }

    // "a.b.c=value"; value is parsed as JSON, falling back to a bare string.
    void set(const std::string& assignment) {
        const auto eq = assignment.find('=');
        if (eq == std::string::npos || eq == 0) throw ConfigError("override must look like key.path=value: " + assignment);
        const std::string key = assignment.substr(0, eq), text = assignment.substr(eq + 1);
        ojson value;
        try {
            value = ojson::parse(text);
        } catch (const nlohmann::json::parse_error&) {
            value = text;
        }
        ojson patch = value;
        std::string rest = key;
        std::vector<std::string> parts;
        for (std::size_t p; (p = rest.find('.')) != std::string::npos; rest = rest.substr(p + 1)) parts.push_back(rest.substr(0, p));
        parts.push_back(rest);
        for (auto it = parts.rbegin(); it != parts.rend(); ++it) {
            if (it->empty()) throw ConfigError("empty key segment in override: " + assignment);
            ojson wrap = ojson::object();
            wrap[*it] = std::move(patch);
            patch = std::move(wrap);
        }
        merge(patch);
    }

    const ojson& at(const std::string& section) const { return tree_.at(section); }
    std::uint64_t seed() const { return tree_.at("seed").get<std::uint64_t>(); }

    FeatureConfig features() const {
        const auto& j = at("features");
        FeatureConfig c;
        c.sample_rate_hz = j["sample_rate_hz"].get<int>();
        c.window_ms = j["window_ms"].get<double>();
        c.stride_ms = j["stride_ms"].get<double>();
        c.num_mels = j["num_mels"].get<int>();
        c.fft_size = j["fft_size"].get<int>();
        c.log_floor = j["log_floor"].get<double>();
        if (c.sample_rate_hz <= 0 || c.window_ms <= 0 || c.stride_ms <= 0 || c.num_mels <= 0 || c.log_floor <= 0)
            throw ConfigError("features: sizes and floor must be positive");
        if (c.fft_size < c.window_samples()) throw ConfigError("features.fft_size is shorter than the window");
        return c;
    }

    ToyCorpusConfig toy_corpus() const {
        const auto& j = at("toy_corpus");
        ToyCorpusConfig c;
        c.num_speakers = j["num_speakers"].get<int>();
        c.utts_per_speaker = j["utts_per_speaker"].get<int>();
        c.vocab = j["words"].get<std::vector<std::string>>();
        c.words_min = j["words_min"].get<int>();
        c.words_max = j["words_max"].get<int>();
        c.word_duration_s = j["word_duration_s"].get<double>();
        c.sample_rate_hz = features().sample_rate_hz;
        c.seed = seed();
        if (c.num_speakers <= 0 || c.utts_per_speaker <= 0 || c.word_duration_s <= 0.0) throw ConfigError("toy_corpus: sizes must be positive");
        if (c.words_min <= 0 || c.words_max < c.words_min) throw ConfigError("toy_corpus: bad words_min/words_max");
        for (const auto& w : c.vocab) {
            if (w.empty() || w.find(' ') != std::string::npos) throw ConfigError("toy_corpus.words entries must be single non-empty words");
        }
        return c;
    }

    bool eval_mode() const {
        const auto mode = at("simulate")["mode"].get<std::string>();
        if (mode != "train" && mode != "eval") throw ConfigError("simulate.mode must be \"train\" or \"eval\"");
        return mode == "eval";
    }

    SimulationConfig simulation() const {
        const auto& j = at("simulate");
        SimulationConfig c;
        c.sir_db = j["sir_db"].get<double>();
        c.overlap_min_s = j["overlap_min_s"].get<double>();
        c.overlap_max_s = j["overlap_max_s"].get<double>();
        if (!j["fixed_overlap_s"].is_null()) c.fixed_overlap_s = j["fixed_overlap_s"].get<double>();
        c.overlap_grid_s = j["overlap_grid_s"].get<double>();
        c.vad_threshold_db = j["vad_threshold_db"].get<double>();
        if (c.overlap_min_s < 0.0 || c.overlap_max_s < c.overlap_min_s) throw ConfigError("simulate: need 0 <= overlap_min_s <= overlap_max_s");
        if (c.fixed_overlap_s && *c.fixed_overlap_s < 0.0) throw ConfigError("simulate.fixed_overlap_s must be non-negative");
        if (c.vad_threshold_db >= 0.0) throw ConfigError("simulate.vad_threshold_db must be negative");
        if (eval_mode() && !c.fixed_overlap_s) throw ConfigError("simulate.mode \"eval\" needs simulate.fixed_overlap_s");
        return c;
    }

    RatioSpec ratio() const {
        RatioSpec r;
        for (const auto& [k, v] : at("simulate")["ratio"].items()) {
            CaseKind kind;
            try {
                kind = case_kind_from_string(k);
            } catch (const std::invalid_argument& e) {
                throw ConfigError(std::string("simulate.ratio: ") + e.what());
            }
            if (!v.is_number_integer() || v.get<int>() < 0) throw ConfigError("simulate.ratio." + k + " must be a non-negative integer");
            if (v.get<int>() > 0) r.parts[kind] = v.get<int>();
        }
        if (r.parts.empty()) throw ConfigError("simulate.ratio has no positive weight");
        return r;
    }

    Scheme scheme() const {
        try {
            return scheme_from_string(at("labels")["scheme"].get<std::string>());
        } catch (const std::invalid_argument& e) {
            throw ConfigError(std::string("labels.scheme: ") + e.what());
        }
    }

    VocabularyConfig vocabulary() const {
        const auto& j = at("labels");
        VocabularyConfig c;
        c.charset = j["charset"].get<std::string>();
        c.max_speakers = j["max_speakers"].get<int>();
        c.max_s = j["max_s"].get<double>();
        if (c.max_speakers <= 0 || c.max_s <= 0.0) throw ConfigError("labels: max_speakers and max_s must be positive");
        return c;
    }

    ModelConfig model(int vocab_size) const {
        const auto& j = at("model");
        ModelConfig c;
        c.num_encoder_blocks = j["num_encoder_blocks"].get<int>();
        c.num_decoder_blocks = j["num_decoder_blocks"].get<int>();
        c.hidden_dim = j["hidden_dim"].get<int>();
        c.num_heads = j["num_heads"].get<int>();
        c.max_frames = j["max_frames"].get<int>();
        c.ffn_mult = j["ffn_mult"].get<int>();
        try {
            c.mask_variant = mask_variant_from_string(j["mask_variant"].get<std::string>());
        } catch (const std::invalid_argument& e) {
            throw ConfigError(std::string("model.mask_variant: ") + e.what());
        }
        c.dropout_mask_cnn = j["dropout_mask_cnn"].get<double>();
        c.cnn_channels_1 = j["cnn_channels_1"].get<int>();
        c.cnn_channels_2 = j["cnn_channels_2"].get<int>();
        c.num_mels = features().num_mels;
        c.vocab_size = vocab_size;
        c.seed = seed();
        try {
            validate(c);
        } catch (const std::invalid_argument& e) {
            throw ConfigError(std::string("model: ") + e.what());
        }
        return c;
    }

    TrainConfig train() const {
        const auto& j = at("train");
        TrainConfig c;
        c.lambda = j["lambda"].get<double>();
        c.lr_init = j["lr_init"].get<double>();
        c.lr_min = j["lr_min"].get<double>();
        c.restart_period_steps = j["restart_period_steps"].get<int>();
        c.epochs = j["epochs"].get<int>();
        c.batch_size = j["batch_size"].get<int>();
        c.grad_clip_norm = j["grad_clip_norm"].get<double>();
        c.max_steps = j["max_steps"].get<int>();
        c.target_loss = j["target_loss"].get<double>();
        c.shuffle = j["shuffle"].get<bool>();
        c.seed = seed();
        try {
            validate(c);
        } catch (const std::invalid_argument& e) {
            throw ConfigError(std::string("train: ") + e.what());
        }
        return c;
    }

    int checkpoint_every_steps() const {
        const int n = at("train")["checkpoint_every_steps"].get<int>();
        if (n < 0) throw ConfigError("train.checkpoint_every_steps must be non-negative");
        return n;
    }

    DiarizationMode diarization_mode() const {
        const auto m = at("decode")["diarization"].get<std::string>();
        if (m == "mask") return DiarizationMode::mask;
        if (m == "timestamps") return DiarizationMode::timestamps;
        throw ConfigError("decode.diarization must be \"mask\" or \"timestamps\"");
    }

    ScoringConfig scoring() const {
        ScoringConfig c;
        c.collar_s = at("score")["collar_s"].get<double>();
        if (c.collar_s < 0.0) throw ConfigError("score.collar_s must be non-negative");
        return c;
    }

    std::filesystem::path path(const std::string& key) const { return at("paths")[key].get<std::string>(); }

private:
    ojson tree_;
};

} // namespace spkmask
