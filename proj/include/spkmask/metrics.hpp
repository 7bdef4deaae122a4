#pragma once

#include "spkmask/decode.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

namespace spkmask {

struct WerBreakdown {
    long substitutions = 0;
    long insertions = 0;
    long deletions = 0;
    long ref_word_count = 0;

    long errors() const { return substitutions + insertions + deletions; }
    double wer() const { return ref_word_count > 0 ? static_cast<double>(errors()) / static_cast<double>(ref_word_count) : 0.0; }

    WerBreakdown& operator+=(const WerBreakdown& o) {
        substitutions += o.substitutions;
        insertions += o.insertions;
        deletions += o.deletions;
        ref_word_count += o.ref_word_count;
        return *this;
    }
};

namespace detail {

// Levenshtein alignment with unit costs. On ties the backtrace prefers a
// match/substitution, then an insertion, then a deletion. Empty ref allowed.
inline WerBreakdown align_words(const std::vector<std::string>& ref, const std::vector<std::string>& hyp) {
    const std::size_t n = ref.size(), m = hyp.size();
    std::vector<std::vector<long>> d(n + 1, std::vector<long>(m + 1, 0));
    for (std::size_t i = 0; i <= n; ++i) d[i][0] = static_cast<long>(i);
    for (std::size_t j = 0; j <= m; ++j) d[0][j] = static_cast<long>(j);
    for (std::size_t i = 1; i <= n; ++i) {
        for (std::size_t j = 1; j <= m; ++j) {
            const long diag = d[i - 1][j - 1] + (ref[i - 1] == hyp[j - 1] ? 0 : 1);
            d[i][j] = std::min({diag, d[i][j - 1] + 1, d[i - 1][j] + 1});
        }
    }
    WerBreakdown w;
    w.ref_word_count = static_cast<long>(n);
    std::size_t i = n, j = m;
    while (i > 0 || j > 0) {
        if (i > 0 && j > 0 && d[i][j] == d[i - 1][j - 1] + (ref[i - 1] == hyp[j - 1] ? 0 : 1)) {
            if (ref[i - 1] != hyp[j - 1]) ++w.substitutions;
            --i;
            --j;
        } else if (j > 0 && d[i][j] == d[i][j - 1] + 1) {
            ++w.insertions;
            --j;
        } else {
            ++w.deletions;
            --i;
        }
    }
    return w;
}

} // namespace detail

inline WerBreakdown wer(const std::vector<std::string>& ref, const std::vector<std::string>& hyp) {
    if (ref.empty()) throw std::invalid_argument("wer: empty reference");
    return detail::align_words(ref, hyp);
}

// Permutation-optimal multi-speaker WER: minimum total edit cost over every
// injective assignment of hypothesis streams to reference streams. Unassigned
// hypothesis streams count as insertions, unassigned references as deletions.
inline WerBreakdown cp_wer(const std::vector<std::vector<std::string>>& ref_by_speaker,
                           const std::vector<std::vector<std::string>>& hyp_by_speaker) {
    if (ref_by_speaker.empty()) throw std::invalid_argument("cp_wer: needs at least one reference speaker");
    const std::size_t nr = ref_by_speaker.size(), nh = hyp_by_speaker.size();
    std::vector<std::vector<WerBreakdown>> pair(nr, std::vector<WerBreakdown>(nh));
    for (std::size_t r = 0; r < nr; ++r) {
        for (std::size_t h = 0; h < nh; ++h) pair[r][h] = detail::align_words(ref_by_speaker[r], hyp_by_speaker[h]);
    }
    WerBreakdown best;
    long best_cost = std::numeric_limits<long>::max();
    std::vector<int> assign(nr, -1);
    std::vector<bool> used(nh, false);

    auto evaluate = [&]() {
        WerBreakdown w;
        for (std::size_t r = 0; r < nr; ++r) {
            if (assign[r] >= 0) {
                w += pair[r][static_cast<std::size_t>(assign[r])];
            } else {
                w.deletions += static_cast<long>(ref_by_speaker[r].size());
                w.ref_word_count += static_cast<long>(ref_by_speaker[r].size());
            }
        }
        for (std::size_t h = 0; h < nh; ++h) {
            if (!used[h]) w.insertions += static_cast<long>(hyp_by_speaker[h].size());
        }
        if (w.errors() < best_cost) {
            best_cost = w.errors();
            best = w;
        }
    };
    auto search = [&](auto&& self, std::size_t r) -> void {
        if (r == nr) {
            evaluate();
            return;
        }
        for (std::size_t h = 0; h < nh; ++h) {
            if (used[h]) continue;
            used[h] = true;
            assign[r] = static_cast<int>(h);
            self(self, r + 1);
            used[h] = false;
        }
        assign[r] = -1;
        self(self, r + 1);
    };
    search(search, 0);
    if (best.ref_word_count == 0) throw std::invalid_argument("cp_wer: references contain no words");
    return best;
}

// ---------------------------------------------------------------------------
// DER.

struct ScoringConfig {
    double collar_s = 0.2;
    double frame_resolution_s = 0.01; // used only by frame-level oracles
};

struct DerBreakdown {
    double missed_s = 0.0;
    double false_alarm_s = 0.0;
    double confusion_s = 0.0;
    double scored_ref_s = 0.0;

    double errors_s() const { return missed_s + false_alarm_s + confusion_s; }
    // 0/0 is reported as 0; errors over zero scored reference as infinity.
    double der() const {
        if (scored_ref_s > 0.0) return errors_s() / scored_ref_s;
        return errors_s() > 0.0 ? std::numeric_limits<double>::infinity() : 0.0;
    }

    DerBreakdown& operator+=(const DerBreakdown& o) {
        missed_s += o.missed_s;
        false_alarm_s += o.false_alarm_s;
        confusion_s += o.confusion_s;
        scored_ref_s += o.scored_ref_s;
        return *this;
    }
};

namespace detail {

struct Elementary {
    double start, end;
    std::vector<bool> ref_on, hyp_on;
    bool scored;
};

// Exhaustive one-to-one mapping maximizing total weight; -1 = unmapped.
inline std::vector<int> best_mapping(const std::vector<std::vector<double>>& weight, std::size_t nh) {
    const std::size_t nr = weight.size();
    std::vector<int> assign(nr, -1), best(nr, -1);
    std::vector<bool> used(nh, false);
    double best_score = -1.0;
    auto search = [&](auto&& self, std::size_t r, double score) -> void {
        if (r == nr) {
            if (score > best_score + 1e-12) {
                best_score = score;
                best = assign;
            }
            return;
        }
        for (std::size_t h = 0; h < nh; ++h) {
            if (used[h]) continue;
            used[h] = true;
            assign[r] = static_cast<int>(h);
            self(self, r + 1, score + weight[r][h]);
            used[h] = false;
        }
        assign[r] = -1;
        self(self, r + 1, score);
    };
    search(search, 0, 0.0);
    return best;
}

} // namespace detail

// Segment-based DER. Reference boundaries are surrounded by a no-score
// collar; speakers are mapped one-to-one to maximize scored overlap; a
// region with n_ref reference and n_hyp hypothesis speakers of which
// n_correct are mapped pairs contributes max(0, n_ref - n_hyp) miss,
// max(0, n_hyp - n_ref) false alarm and min(n_ref, n_hyp) - n_correct
// confusion, each weighted by duration.
inline DerBreakdown der(const DiarizationAnnotation& ref_in, const DiarizationAnnotation& hyp_in, const ScoringConfig& cfg = {}) {
    if (cfg.collar_s < 0.0) throw std::invalid_argument("collar must be non-negative");
    const DiarizationAnnotation ref = normalized(ref_in), hyp = normalized(hyp_in);
    if (ref.segments.empty()) throw std::invalid_argument("der: empty reference");
    const auto ref_spk = ref.speakers(), hyp_spk = hyp.speakers();

    std::vector<std::pair<double, double>> no_score;
    std::vector<double> cuts;
    for (const auto& s : ref.segments) {
        for (double b : {s.start_s, s.end_s}) {
            cuts.push_back(b);
            if (cfg.collar_s > 0.0) {
                no_score.emplace_back(b - cfg.collar_s, b + cfg.collar_s);
                cuts.push_back(b - cfg.collar_s);
                cuts.push_back(b + cfg.collar_s);
            }
        }
    }
    for (const auto& s : hyp.segments) {
        cuts.push_back(s.start_s);
        cuts.push_back(s.end_s);
    }
    std::sort(cuts.begin(), cuts.end());
    cuts.erase(std::unique(cuts.begin(), cuts.end()), cuts.end());

    auto index_of = [](const std::vector<std::string>& v, const std::string& s) {
        return static_cast<std::size_t>(std::find(v.begin(), v.end(), s) - v.begin());
    };

    std::vector<detail::Elementary> pieces;
    for (std::size_t i = 0; i + 1 < cuts.size(); ++i) {
        detail::Elementary e{cuts[i], cuts[i + 1], std::vector<bool>(ref_spk.size()), std::vector<bool>(hyp_spk.size()), true};
        const double mid = 0.5 * (e.start + e.end);
        for (const auto& [a, b] : no_score) {
            if (mid > a && mid < b) {
                e.scored = false;
                break;
            }
        }
        if (!e.scored) continue;
        bool any = false;
        for (const auto& s : ref.segments) {
            if (mid > s.start_s && mid < s.end_s) {
                e.ref_on[index_of(ref_spk, s.speaker)] = true;
                any = true;
            }
        }
        for (const auto& s : hyp.segments) {
            if (mid > s.start_s && mid < s.end_s) {
                e.hyp_on[index_of(hyp_spk, s.speaker)] = true;
                any = true;
            }
        }
        if (any) pieces.push_back(std::move(e));
    }

    std::vector<std::vector<double>> overlap(ref_spk.size(), std::vector<double>(hyp_spk.size(), 0.0));
    for (const auto& e : pieces) {
        for (std::size_t r = 0; r < ref_spk.size(); ++r) {
            if (!e.ref_on[r]) continue;
            for (std::size_t h = 0; h < hyp_spk.size(); ++h) {
                if (e.hyp_on[h]) overlap[r][h] += e.end - e.start;
            }
        }
    }
    const auto mapping = detail::best_mapping(overlap, hyp_spk.size());

    DerBreakdown out;
    for (const auto& e : pieces) {
        const double dur = e.end - e.start;
        long nr = 0, nh = 0, nc = 0;
        for (std::size_t r = 0; r < ref_spk.size(); ++r) {
            if (!e.ref_on[r]) continue;
            ++nr;
            if (mapping[r] >= 0 && e.hyp_on[static_cast<std::size_t>(mapping[r])]) ++nc;
        }
        for (bool on : e.hyp_on) nh += on;
        out.scored_ref_s += dur * nr;
        out.missed_s += dur * std::max(0L, nr - nh);
        out.false_alarm_s += dur * std::max(0L, nh - nr);
        out.confusion_s += dur * (std::min(nr, nh) - nc);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Speaker count accuracy.

inline bool sca(int ref_speaker_count, int hyp_speaker_count) {
    if (ref_speaker_count < 0 || hyp_speaker_count < 0) throw std::invalid_argument("speaker counts must be non-negative");
    return ref_speaker_count == hyp_speaker_count;
}

struct ScaAccumulator {
    long correct = 0;
    long total = 0;

    void add(int ref_count, int hyp_count) {
        correct += sca(ref_count, hyp_count) ? 1 : 0;
        ++total;
    }
    double percentage() const { return total > 0 ? 100.0 * static_cast<double>(correct) / static_cast<double>(total) : 0.0; }
};

} // namespace spkmask
