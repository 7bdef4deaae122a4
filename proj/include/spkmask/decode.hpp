#pragma once

#include "spkmask/labels.hpp"
#include "spkmask/model.hpp"

#include <algorithm>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace spkmask {

namespace detail {

inline int argmax_lowest(const Eigen::Ref<const Eigen::RowVectorXd>& row) {
    int best = 0;
    for (Eigen::Index i = 1; i < row.size(); ++i) {
        if (row(i) > row(best)) best = static_cast<int>(i);
    }
    return best;
}

} // namespace detail

struct Hypothesis {
    std::vector<int> tokens;
    std::vector<SpeakerBlock> blocks;
    std::map<int, MaskVector> masks; // speaker index -> probability mask
    int malformed_token_count = 0;
    Scheme scheme = Scheme::SPK;
};

// Greedy autoregressive decode. The returned sequence starts with SOT and
// holds at most max_len tokens; it ends early after EOT. Ties go to the
// lowest token id. When `masks` is non-null, the mask branch is evaluated at
// every step that emits a speaker token (repeats of a speaker are merged by
// element-wise max).
inline std::vector<int> greedy_decode(const Model& model, const Mat& features, int max_len, int sot, int eot,
                                      const Vocabulary* vocab = nullptr, std::map<int, MaskVector>* masks = nullptr) {
    std::vector<int> seq{sot};
    if (max_len <= 1) return seq;
    Mat enc_value;
    {
        Tape t(false);
        enc_value = model.encode(t, features).value();
    }
    while (static_cast<int>(seq.size()) < max_len) {
        Tape t(false);
        Var enc = t.constant(enc_value);
        DecoderOutput out = model.decoder_forward(t, enc, seq);
        const Eigen::Index last = out.logits.rows() - 1;
        const int next = detail::argmax_lowest(out.logits.value().row(last));
        if (masks && vocab && vocab->is_speaker(next)) {
            Var row = ag::slice_rows(out.hidden, last, 1);
            Var prob = model.mask_branch_forward(t, row, enc, false, nullptr);
            MaskVector m;
            m.kind = MaskKind::probability;
            m.values.assign(prob.value().data(), prob.value().data() + prob.value().size());
            const int k = vocab->speaker_index(next);
            auto [it, inserted] = masks->emplace(k, m);
            if (!inserted) {
                for (std::size_t i = 0; i < m.size(); ++i) it->second.values[i] = std::max(it->second.values[i], m.values[i]);
            }
        }
        seq.push_back(next);
        if (next == eot) break;
    }
    return seq;
}

inline Hypothesis decode_utterance(const Model& model, const Vocabulary& vocab, const Mat& features, Scheme scheme, int max_len,
                                   bool with_masks) {
    Hypothesis h;
    h.scheme = scheme;
    h.tokens = greedy_decode(model, features, max_len, vocab.sot(), vocab.eot(), &vocab, with_masks ? &h.masks : nullptr);
    auto parsed = parse_hypothesis(h.tokens, scheme, vocab);
    h.blocks = std::move(parsed.blocks);
    h.malformed_token_count = parsed.malformed_token_count;
    // Masks only for speakers that made it into a parsed block.
    for (auto it = h.masks.begin(); it != h.masks.end();) {
        const bool emitted = std::any_of(h.blocks.begin(), h.blocks.end(), [&](const SpeakerBlock& b) { return b.speaker_index == it->first; });
        it = emitted ? std::next(it) : h.masks.erase(it);
    }
    return h;
}

// ---------------------------------------------------------------------------
// Diarization annotations.

struct Segment {
    std::string speaker;
    double start_s = 0.0;
    double end_s = 0.0;
};

enum class DiarizationSource { reference, timestamps, mask };

struct DiarizationAnnotation {
    std::vector<Segment> segments;
    DiarizationSource source = DiarizationSource::reference;

    std::vector<std::string> speakers() const {
        std::vector<std::string> ids;
        for (const auto& s : segments) {
            if (std::find(ids.begin(), ids.end(), s.speaker) == ids.end()) ids.push_back(s.speaker);
        }
        return ids;
    }
};

// Drops empty segments, sorts, and merges overlapping or touching segments
// of the same speaker.
inline DiarizationAnnotation normalized(DiarizationAnnotation a) {
    std::map<std::string, std::vector<Segment>> by;
    for (const auto& s : a.segments) {
        if (s.end_s > s.start_s) by[s.speaker].push_back(s);
    }
    DiarizationAnnotation out;
    out.source = a.source;
    for (auto& [spk, segs] : by) {
        std::sort(segs.begin(), segs.end(), [](const Segment& x, const Segment& y) { return x.start_s < y.start_s; });
        for (const auto& s : segs) {
            if (!out.segments.empty() && out.segments.back().speaker == spk && s.start_s <= out.segments.back().end_s) {
                out.segments.back().end_s = std::max(out.segments.back().end_s, s.end_s);
            } else {
                out.segments.push_back(s);
            }
        }
    }
    return out;
}

inline std::vector<std::pair<double, double>> mask_to_segments(const MaskVector& mask, double threshold = 0.5, double min_dur_s = 0.0) {
    std::vector<std::pair<double, double>> out;
    const double step = mask.frame_ms / 1000.0;
    std::size_t i = 0;
    while (i < mask.size()) {
        if (mask.values[i] < threshold) {
            ++i;
            continue;
        }
        std::size_t j = i;
        while (j < mask.size() && mask.values[j] >= threshold) ++j;
        const double a = static_cast<double>(i) * step, b = static_cast<double>(j) * step;
        if (b - a >= min_dur_s - 1e-12) out.emplace_back(a, b);
        i = j;
    }
    return out;
}

// Inverse of mask_to_segments on a frame grid (frame f active iff its centre
// lies inside a segment).
inline MaskVector segments_to_mask(const std::vector<std::pair<double, double>>& segs, std::size_t length, double frame_ms = 20.0) {
    MaskVector m;
    m.frame_ms = frame_ms;
    m.kind = MaskKind::binary;
    m.values.assign(length, 0.0);
    const double step = frame_ms / 1000.0;
    for (std::size_t f = 0; f < length; ++f) {
        const double c = (static_cast<double>(f) + 0.5) * step;
        for (const auto& [a, b] : segs) {
            if (c >= a && c < b) {
                m.values[f] = 1.0;
                break;
            }
        }
    }
    return m;
}

inline std::string hypothesis_speaker_label(int k) { return "S" + std::to_string(k); }

enum class DiarizationMode { timestamps, mask };

inline DiarizationAnnotation hypothesis_to_diarization(const Hypothesis& hyp, DiarizationMode mode, double threshold = 0.5,
                                                       double min_dur_s = 0.0) {
    DiarizationAnnotation out;
    if (mode == DiarizationMode::timestamps) {
        if (!has_timestamps(hyp.scheme)) throw std::invalid_argument("timestamp diarization needs a timestamped label scheme");
        out.source = DiarizationSource::timestamps;
        for (const auto& b : hyp.blocks) {
            if (b.speaker_index > 0 && b.start_s && b.end_s && *b.end_s > *b.start_s)
                out.segments.push_back({hypothesis_speaker_label(b.speaker_index), *b.start_s, *b.end_s});
        }
    } else {
        const bool any_speaker = std::any_of(hyp.blocks.begin(), hyp.blocks.end(), [](const SpeakerBlock& b) { return b.speaker_index > 0; });
        if (hyp.masks.empty() && any_speaker) throw std::invalid_argument("mask diarization needs mask predictions");
        out.source = DiarizationSource::mask;
        for (const auto& [k, m] : hyp.masks) {
            for (const auto& [a, b] : mask_to_segments(m, threshold, min_dur_s)) out.segments.push_back({hypothesis_speaker_label(k), a, b});
        }
    }
    return normalized(std::move(out));
}

// Reference annotation from a mixture's binary speaker masks.
inline DiarizationAnnotation reference_diarization(const MixtureExample& ex) {
    DiarizationAnnotation out;
    out.source = DiarizationSource::reference;
    for (const auto& [spk, m] : ex.speaker_masks) {
        for (const auto& [a, b] : mask_to_segments(m)) out.segments.push_back({spk, a, b});
    }
    return normalized(std::move(out));
}

} // namespace spkmask
