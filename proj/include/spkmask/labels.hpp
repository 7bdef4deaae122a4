#pragma once

#include "spkmask/simulate.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <map>
#include <optional>
#include <regex>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace spkmask {

enum class Scheme { SPK, SPK_TS_1, SPK_TS_2 };

inline const char* to_string(Scheme s) {
    switch (s) {
    case Scheme::SPK: return "SPK";
    case Scheme::SPK_TS_1: return "SPK_TS_1";
    case Scheme::SPK_TS_2: return "SPK_TS_2";
    }
    return "?";
}

inline Scheme scheme_from_string(const std::string& s) {
    if (s == "SPK") return Scheme::SPK;
    if (s == "SPK_TS_1" || s == "SPK-TS-1") return Scheme::SPK_TS_1;
    if (s == "SPK_TS_2" || s == "SPK-TS-2") return Scheme::SPK_TS_2;
    throw std::invalid_argument("unknown label scheme: " + s);
}

inline bool has_timestamps(Scheme s) { return s != Scheme::SPK; }

inline constexpr double kTimestampStepS = 0.02;

// Nearest 20 ms grid index, ties rounding up.
inline int quantize_time(double t_s, double max_s) {
    if (!(t_s >= 0.0) || t_s > max_s + 1e-9) throw std::out_of_range("time outside [0, max_s]: " + std::to_string(t_s));
    return static_cast<int>(std::floor(t_s / kTimestampStepS + 0.5));
}

inline double dequantize_time(int index) { return index * kTimestampStepS; }

enum class TokenClass { pad, sot, eot, text, speaker, timestamp };

struct VocabularyConfig {
    std::string charset = "abcdefghijklmnopqrstuvwxyz' ";
    int max_speakers = 4;
    double max_s = 30.0;
};

// Token id layout: PAD, SOT, EOT, text characters, <S_1>..<S_K>, <T_0>..<T_N>.
class Vocabulary {
public:
    Vocabulary() : Vocabulary(VocabularyConfig{}) {}

    explicit Vocabulary(VocabularyConfig cfg) : cfg_(std::move(cfg)) {
        if (cfg_.charset.empty()) throw std::invalid_argument("empty charset");
        if (cfg_.max_speakers <= 0) throw std::invalid_argument("max_speakers must be positive");
        if (!(cfg_.max_s > 0.0)) throw std::invalid_argument("max_s must be positive");
        for (std::size_t i = 0; i < cfg_.charset.size(); ++i) {
            const auto c = static_cast<unsigned char>(cfg_.charset[i]);
            if (char_ids_.count(c)) throw std::invalid_argument("duplicate character in charset");
            char_ids_[c] = kFirstText + static_cast<int>(i);
        }
        num_timestamps_ = static_cast<int>(std::llround(cfg_.max_s / kTimestampStepS)) + 1;
    }

    const VocabularyConfig& config() const { return cfg_; }

    int pad() const { return 0; }
    int sot() const { return 1; }
    int eot() const { return 2; }

    int num_text() const { return static_cast<int>(cfg_.charset.size()); }
    int num_speakers() const { return cfg_.max_speakers; }
    int num_timestamps() const { return num_timestamps_; }
    int size() const { return first_timestamp() + num_timestamps_; }

    int first_speaker() const { return kFirstText + num_text(); }
    int first_timestamp() const { return first_speaker() + cfg_.max_speakers; }

    int char_token(char c) const {
        auto it = char_ids_.find(static_cast<unsigned char>(c));
        if (it == char_ids_.end()) throw std::invalid_argument(std::string("character not in vocabulary: '") + c + "'");
        return it->second;
    }

    // k is 1-based.
    int speaker_token(int k) const {
        if (k < 1 || k > cfg_.max_speakers) throw std::out_of_range("speaker index beyond vocabulary");
        return first_speaker() + k - 1;
    }

    int timestamp_token(int index) const {
        if (index < 0 || index >= num_timestamps_) throw std::out_of_range("timestamp index beyond vocabulary");
        return first_timestamp() + index;
    }

    TokenClass classify(int id) const {
        if (id < 0 || id >= size()) throw std::out_of_range("token id out of vocabulary");
        if (id == pad()) return TokenClass::pad;
        if (id == sot()) return TokenClass::sot;
        if (id == eot()) return TokenClass::eot;
        if (id < first_speaker()) return TokenClass::text;
        if (id < first_timestamp()) return TokenClass::speaker;
        return TokenClass::timestamp;
    }

    bool is_speaker(int id) const { return id >= first_speaker() && id < first_timestamp(); }
    int speaker_index(int id) const { return id - first_speaker() + 1; }
    int timestamp_index(int id) const { return id - first_timestamp(); }
    char character(int id) const { return cfg_.charset[static_cast<std::size_t>(id - kFirstText)]; }

    std::string token_string(int id) const {
        switch (classify(id)) {
        case TokenClass::pad: return "<|pad|>";
        case TokenClass::sot: return "<|sot|>";
        case TokenClass::eot: return "<|eot|>";
        case TokenClass::text: return std::string(1, character(id));
        case TokenClass::speaker: return "<|S" + std::to_string(speaker_index(id)) + "|>";
        case TokenClass::timestamp: return "<|T" + std::to_string(timestamp_index(id)) + "|>";
        }
        return {};
    }

    nlohmann::json to_json() const {
        nlohmann::json j = nlohmann::json::object();
        for (int id = 0; id < size(); ++id) j[token_string(id)] = id;
        return j;
    }

    // Inverse of to_json(); rejects maps that do not follow the id layout.
    static Vocabulary from_json(const nlohmann::json& j) {
        if (!j.is_object()) throw std::invalid_argument("vocabulary JSON must be an object");
        std::map<int, std::string> by_id;
        for (const auto& [tok, id] : j.items()) by_id[id.get<int>()] = tok;
        VocabularyConfig cfg;
        cfg.charset.clear();
        int speakers = 0, stamps = 0;
        static const std::regex spk(R"(<\|S(\d+)\|>)"), ts(R"(<\|T(\d+)\|>)");
        for (const auto& [id, tok] : by_id) {
            if (id < kFirstText) continue;
            if (tok.size() == 1) {
                cfg.charset.push_back(tok[0]);
            } else if (std::regex_match(tok, spk)) {
                ++speakers;
            } else if (std::regex_match(tok, ts)) {
                ++stamps;
            } else {
                throw std::invalid_argument("unrecognised vocabulary token: " + tok);
            }
        }
        cfg.max_speakers = speakers;
        cfg.max_s = (stamps - 1) * kTimestampStepS;
        Vocabulary v(cfg);
        if (v.to_json() != j) throw std::invalid_argument("vocabulary JSON does not follow the token id layout");
        return v;
    }

private:
    static constexpr int kFirstText = 3;
    VocabularyConfig cfg_;
    std::map<unsigned char, int> char_ids_;
    int num_timestamps_ = 0;
};

struct SpeakerBlock {
    int speaker_index = 0; // 1-based; 0 marks text outside any speaker block
    std::vector<std::string> words;
    std::optional<double> start_s;
    std::optional<double> end_s;
};

struct LabelSequence {
    Scheme scheme = Scheme::SPK;
    std::vector<int> tokens;
};

// Per-speaker reference content of a mixture in first-in first-out order.
// A speaker with several utterances gets one block with the transcripts
// concatenated in temporal order; its span runs from earliest aligned start
// to latest aligned end.
struct ReferenceSpeaker {
    std::string speaker_id;
    std::vector<std::string> words;
    double start_s = 0.0;
    double end_s = 0.0;
    bool aligned = true;
};

inline std::vector<ReferenceSpeaker> reference_speakers(const MixtureExample& ex) {
    std::vector<ReferenceSpeaker> out;
    for (const auto& id : speaker_order(ex)) {
        ReferenceSpeaker r;
        r.speaker_id = id;
        std::vector<const MixtureSource*> mine;
        for (const auto& s : ex.sources) {
            if (s.utterance.speaker_id == id) mine.push_back(&s);
        }
        std::stable_sort(mine.begin(), mine.end(), [](auto* a, auto* b) { return a->offset_s < b->offset_s; });
        bool first = true;
        for (const auto* s : mine) {
            r.words.insert(r.words.end(), s->utterance.transcript.begin(), s->utterance.transcript.end());
            const auto& al = s->utterance.word_alignments;
            if (al.empty()) {
                r.aligned = false;
                continue;
            }
            const double a = s->offset_s + al.front().start_s, b = s->offset_s + al.back().end_s;
            r.start_s = first ? a : std::min(r.start_s, a);
            r.end_s = first ? b : std::max(r.end_s, b);
            first = false;
        }
        if (first) r.aligned = false;
        out.push_back(std::move(r));
    }
    return out;
}

namespace detail {

inline void append_text(std::vector<int>& tokens, const std::vector<std::string>& words, const Vocabulary& v) {
    for (std::size_t i = 0; i < words.size(); ++i) {
        if (i > 0) tokens.push_back(v.char_token(' '));
        if (words[i].empty()) throw std::invalid_argument("empty word in transcript");
        for (char c : words[i]) {
            if (c == ' ') throw std::invalid_argument("word contains a space");
            tokens.push_back(v.char_token(c));
        }
    }
}

inline std::vector<std::string> split_words(const std::string& text) {
    std::vector<std::string> words;
    std::string cur;
    for (char c : text) {
        if (c == ' ') {
            if (!cur.empty()) words.push_back(std::move(cur));
            cur.clear();
        } else {
            cur.push_back(c);
        }
    }
    if (!cur.empty()) words.push_back(std::move(cur));
    return words;
}

} // namespace detail

inline LabelSequence build_label(const MixtureExample& ex, Scheme scheme, const Vocabulary& vocab) {
    LabelSequence label;
    label.scheme = scheme;
    label.tokens.push_back(vocab.sot());
    const auto speakers = reference_speakers(ex);
    for (std::size_t k = 0; k < speakers.size(); ++k) {
        const auto& r = speakers[k];
        if (r.words.empty()) throw std::invalid_argument("speaker " + r.speaker_id + " has an empty transcript");
        label.tokens.push_back(vocab.speaker_token(static_cast<int>(k) + 1));
        if (scheme == Scheme::SPK) {
            detail::append_text(label.tokens, r.words, vocab);
            continue;
        }
        if (!r.aligned) throw std::invalid_argument("timestamped label needs word alignments for speaker " + r.speaker_id);
        const double max_s = vocab.config().max_s;
        const int ts = vocab.timestamp_token(quantize_time(r.start_s, max_s));
        const int te = vocab.timestamp_token(quantize_time(r.end_s, max_s));
        label.tokens.push_back(ts);
        if (scheme == Scheme::SPK_TS_1) {
            detail::append_text(label.tokens, r.words, vocab);
            label.tokens.push_back(te);
        } else {
            label.tokens.push_back(te);
            detail::append_text(label.tokens, r.words, vocab);
        }
    }
    label.tokens.push_back(vocab.eot());
    return label;
}

struct ParsedHypothesis {
    std::vector<SpeakerBlock> blocks;
    int malformed_token_count = 0;
};

// Greedy left-to-right parse of a decoded token stream. Never throws on
// malformed input: unexpected tokens are skipped and counted, and blocks whose
// timestamp pattern is incomplete keep their text but lose their timestamps.
inline ParsedHypothesis parse_hypothesis(std::span<const int> tokens, Scheme scheme, const Vocabulary& vocab) {
    ParsedHypothesis out;
    struct Open {
        SpeakerBlock block;
        std::string text;
        std::vector<int> stamps; // timestamp indices in order of appearance
        bool text_before_second = false;
        bool bad = false;
    };
    std::optional<Open> cur;

    auto close = [&]() {
        if (!cur) return;
        Open& o = *cur;
        o.block.words = detail::split_words(o.text);
        bool ok = !o.bad;
        if (has_timestamps(scheme) && o.block.speaker_index > 0) {
            if (o.stamps.size() != 2) ok = false;
            if (scheme == Scheme::SPK_TS_1 && o.stamps.size() == 2 && !o.text_before_second) ok = false;
            if (ok) {
                o.block.start_s = dequantize_time(o.stamps[0]);
                o.block.end_s = dequantize_time(o.stamps[1]);
            } else {
                ++out.malformed_token_count;
            }
        } else if (!o.stamps.empty()) {
            out.malformed_token_count += static_cast<int>(o.stamps.size());
        }
        out.blocks.push_back(std::move(o.block));
        cur.reset();
    };

    std::size_t i = 0;
    if (!tokens.empty() && tokens[0] == vocab.sot()) i = 1;
    for (; i < tokens.size(); ++i) {
        const int id = tokens[i];
        if (id < 0 || id >= vocab.size()) {
            ++out.malformed_token_count;
            continue;
        }
        const TokenClass cls = vocab.classify(id);
        if (cls == TokenClass::eot) break;
        switch (cls) {
        case TokenClass::speaker:
            close();
            cur.emplace();
            cur->block.speaker_index = vocab.speaker_index(id);
            break;
        case TokenClass::text:
            if (!cur) cur.emplace();
            cur->text.push_back(vocab.character(id));
            if (cur->stamps.size() == 1) cur->text_before_second = true;
            break;
        case TokenClass::timestamp:
            if (!cur || cur->block.speaker_index == 0 || !has_timestamps(scheme)) {
                ++out.malformed_token_count;
                break;
            }
            if (cur->stamps.size() >= 2) {
                ++out.malformed_token_count;
                break;
            }
            // SPK_TS_2 wants both stamps before any text; SPK_TS_1 wants text between them.
            if (scheme == Scheme::SPK_TS_2 && !cur->text.empty()) cur->bad = true;
            if (scheme == Scheme::SPK_TS_1 && cur->stamps.empty() && !cur->text.empty()) cur->bad = true;
            cur->stamps.push_back(vocab.timestamp_index(id));
            break;
        default:
            ++out.malformed_token_count;
            break;
        }
    }
    close();
    return out;
}

} // namespace spkmask
