#pragma once

// On-disk formats: corpus and mixture manifests (JSON lines), run-length
// encoded mask files, RTTM, hypothesis dumps and scoring reports. Paths stored
// inside a manifest are relative to the manifest's directory.

#include "spkmask/decode.hpp"
#include "spkmask/error.hpp"
#include "spkmask/labels.hpp"
#include "spkmask/metrics.hpp"
#include "spkmask/signal.hpp"
#include "spkmask/simulate.hpp"

#include <nlohmann/json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

namespace spkmask::io {

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

inline std::string read_text(const fs::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot open " + path.string());
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

inline void write_text(const fs::path& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot write " + path.string());
    f << text;
    if (!f) throw DataError("failed writing " + path.string());
}

inline ojson parse_json(const std::string& text, const std::string& where) {
    try {
        return ojson::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw DataError(where + ": " + e.what());
    }
}

// Calls fn(json, line_number) for every non-blank line.
template <class Fn>
void for_each_jsonl(const fs::path& path, Fn&& fn) {
    std::ifstream f(path);
    if (!f) throw DataError("cannot open " + path.string());
    std::string line;
    int n = 0;
    while (std::getline(f, line)) {
        ++n;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        const std::string where = path.string() + ":" + std::to_string(n);
        try {
            fn(parse_json(line, where), n);
        } catch (const nlohmann::json::exception& e) {
            throw DataError(where + ": " + e.what());
        }
    }
}

// Fixed-precision number formatting for text outputs.
inline std::string fixed(double v, int digits = 3) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", digits, v);
    return buf;
}

// ---------------------------------------------------------------------------
// Corpus manifest.

inline ojson alignments_json(const std::vector<WordAlignment>& al) {
    ojson a = ojson::array();
    for (const auto& w : al) a.push_back(ojson::array({w.word, w.start_s, w.end_s}));
    return a;
}

inline std::vector<WordAlignment> alignments_from_json(const ojson& a) {
    std::vector<WordAlignment> out;
    for (const auto& w : a) {
        if (!w.is_array() || w.size() != 3) throw DataError("alignment entries must be [word, start, end]");
        out.push_back({w[0].get<std::string>(), w[1].get<double>(), w[2].get<double>()});
    }
    return out;
}

inline ojson utterance_json(const Utterance& u, const std::string& audio_path) {
    ojson j;
    j["id"] = u.id;
    j["audio_path"] = audio_path;
    j["speaker_id"] = u.speaker_id;
    j["transcript"] = u.transcript;
    j["alignments"] = alignments_json(u.word_alignments);
    return j;
}

// Writes <dir>/corpus.jsonl and one WAV per utterance under <dir>/wav.
inline fs::path write_corpus(const fs::path& dir, const std::vector<Utterance>& corpus) {
    std::error_code ec;
    fs::create_directories(dir / "wav", ec);
    if (ec) throw DataError("cannot create " + (dir / "wav").string() + ": " + ec.message());
    std::string out;
    for (const auto& u : corpus) {
        const std::string rel = "wav/" + u.id + ".wav";
        save_wav(dir / rel, *u.audio);
        out += utterance_json(u, rel).dump() + "\n";
    }
    const fs::path manifest = dir / "corpus.jsonl";
    write_text(manifest, out);
    return manifest;
}

inline std::vector<Utterance> read_corpus(const fs::path& manifest) {
    std::vector<Utterance> out;
    const fs::path base = manifest.parent_path();
    for_each_jsonl(manifest, [&](const ojson& j, int line) {
        Utterance u;
        u.id = j.at("id").get<std::string>();
        u.speaker_id = j.at("speaker_id").get<std::string>();
        u.transcript = j.at("transcript").get<std::vector<std::string>>();
        u.word_alignments = alignments_from_json(j.at("alignments"));
        u.audio = std::make_shared<AudioClip>(load_wav(base / j.at("audio_path").get<std::string>()));
        try {
            validate(u);
        } catch (const std::invalid_argument& e) {
            throw DataError(manifest.string() + ":" + std::to_string(line) + ": " + e.what());
        }
        out.push_back(std::move(u));
    });
    return out;
}

// ---------------------------------------------------------------------------
// Run-length encoded masks: {speaker: {"length": n, "runs": [[start, len], ...]}}.

inline ojson mask_to_rle(const MaskVector& m) {
    ojson runs = ojson::array();
    std::size_t i = 0;
    while (i < m.size()) {
        if (m.values[i] < 0.5) {
            ++i;
            continue;
        }
        std::size_t j = i;
        while (j < m.size() && m.values[j] >= 0.5) ++j;
        runs.push_back(ojson::array({i, j - i}));
        i = j;
    }
    ojson j;
    j["length"] = m.size();
    j["runs"] = runs;
    return j;
}

inline MaskVector mask_from_rle(const ojson& j) {
    MaskVector m;
    const auto n = j.at("length").get<std::size_t>();
    m.values.assign(n, 0.0);
    for (const auto& r : j.at("runs")) {
        const auto start = r.at(0).get<std::size_t>(), len = r.at(1).get<std::size_t>();
        if (start + len > n) throw DataError("mask run exceeds mask length");
        for (std::size_t f = start; f < start + len; ++f) m.values[f] = 1.0;
    }
    return m;
}

inline ojson masks_to_rle(const std::map<std::string, MaskVector>& masks) {
    ojson j = ojson::object();
    for (const auto& [spk, m] : masks) j[spk] = mask_to_rle(m);
    return j;
}

inline std::map<std::string, MaskVector> masks_from_rle(const ojson& j) {
    std::map<std::string, MaskVector> out;
    for (const auto& [spk, m] : j.items()) out[spk] = mask_from_rle(m);
    return out;
}

// ---------------------------------------------------------------------------
// Mixture manifest.

struct MixtureRecord {
    MixtureExample example;
    double wav_gain = 1.0;
    std::map<std::string, std::vector<int>> labels; // scheme name -> tokens
};

// Mixtures above full scale are attenuated when written; the manifest keeps
// the gain so readers can restore the original amplitude.
inline double write_gain(double peak) { return peak > 1.0 ? 1.0 / peak : 1.0; }

// Writes <dir>/mixtures.jsonl with WAVs under <dir>/wav and masks under
// <dir>/masks. Label sequences for every scheme are embedded.
inline fs::path write_mixtures(const fs::path& dir, const std::vector<MixtureExample>& examples, const Vocabulary& vocab) {
    std::error_code ec;
    fs::create_directories(dir / "wav", ec);
    fs::create_directories(dir / "masks", ec);
    if (ec) throw DataError("cannot create output directories under " + dir.string() + ": " + ec.message());
    std::string out;
    for (const auto& ex : examples) {
        const std::string wav = "wav/" + ex.id + ".wav", masks = "masks/" + ex.id + ".json";
        const double gain = write_gain(ex.peak);
        save_wav(dir / wav, ex.mixture, gain);
        write_text(dir / masks, masks_to_rle(ex.speaker_masks).dump() + "\n");
        ojson j;
        j["id"] = ex.id;
        j["audio_path"] = wav;
        j["case_kind"] = to_string(ex.case_kind);
        j["num_speakers"] = ex.num_speakers;
        ojson sources = ojson::array();
        for (const auto& s : ex.sources) {
            ojson sj;
            sj["utt_id"] = s.utterance.id;
            sj["speaker_id"] = s.utterance.speaker_id;
            sj["offset_s"] = s.offset_s;
            sj["gain"] = s.gain;
            sj["num_samples"] = s.utterance.audio ? s.utterance.audio->samples.size() : 0;
            sj["transcript"] = s.utterance.transcript;
            sj["alignments"] = alignments_json(s.utterance.word_alignments);
            sources.push_back(sj);
        }
        j["sources"] = sources;
        j["masks_path"] = masks;
        ojson labels = ojson::object();
        for (Scheme s : {Scheme::SPK, Scheme::SPK_TS_1, Scheme::SPK_TS_2}) labels[to_string(s)] = build_label(ex, s, vocab).tokens;
        j["labels"] = labels;
        j["peak"] = ex.peak;
        j["wav_gain"] = gain;
        j["alignment_fallback"] = ex.alignment_fallback;
        out += j.dump() + "\n";
    }
    const fs::path manifest = dir / "mixtures.jsonl";
    write_text(manifest, out);
    return manifest;
}

// Source utterances are restored with silent placeholder audio of the right
// length: only their timing and text are needed downstream.
inline std::vector<MixtureRecord> read_mixtures(const fs::path& manifest, bool load_audio = true) {
    std::vector<MixtureRecord> out;
    const fs::path base = manifest.parent_path();
    for_each_jsonl(manifest, [&](const ojson& j, int) {
        MixtureRecord r;
        auto& ex = r.example;
        ex.id = j.at("id").get<std::string>();
        try {
            ex.case_kind = case_kind_from_string(j.at("case_kind").get<std::string>());
        } catch (const std::invalid_argument& e) {
            throw DataError(e.what());
        }
        ex.num_speakers = j.at("num_speakers").get<int>();
        ex.peak = j.value("peak", 0.0);
        ex.alignment_fallback = j.value("alignment_fallback", false);
        r.wav_gain = j.value("wav_gain", 1.0);
        for (const auto& sj : j.at("sources")) {
            MixtureSource s;
            s.utterance.id = sj.at("utt_id").get<std::string>();
            s.utterance.speaker_id = sj.at("speaker_id").get<std::string>();
            s.utterance.transcript = sj.at("transcript").get<std::vector<std::string>>();
            s.utterance.word_alignments = alignments_from_json(sj.at("alignments"));
            auto clip = std::make_shared<AudioClip>();
            clip->samples.assign(sj.at("num_samples").get<std::size_t>(), 0.0);
            s.utterance.audio = std::move(clip);
            s.offset_s = sj.at("offset_s").get<double>();
            s.gain = sj.at("gain").get<double>();
            ex.sources.push_back(std::move(s));
        }
        ex.speaker_masks = masks_from_rle(parse_json(read_text(base / j.at("masks_path").get<std::string>()), ex.id));
        if (load_audio) {
            ex.mixture = load_wav(base / j.at("audio_path").get<std::string>());
            if (r.wav_gain != 1.0) {
                for (double& v : ex.mixture.samples) v /= r.wav_gain;
            }
        }
        if (j.contains("labels")) {
            for (const auto& [k, v] : j.at("labels").items()) r.labels[k] = v.get<std::vector<int>>();
        }
        out.push_back(std::move(r));
    });
    return out;
}

// ---------------------------------------------------------------------------
// Vocabulary file.

inline void write_vocabulary(const fs::path& path, const Vocabulary& v) { write_text(path, v.to_json().dump(1) + "\n"); }

inline Vocabulary read_vocabulary(const fs::path& path) {
    try {
        return Vocabulary::from_json(nlohmann::json::parse(read_text(path)));
    } catch (const std::exception& e) {
        throw DataError(path.string() + ": " + e.what());
    }
}

// ---------------------------------------------------------------------------
// RTTM.

struct RttmFile {
    std::map<std::string, DiarizationAnnotation> by_uri;
};

inline std::string rttm_lines(const std::string& uri, const DiarizationAnnotation& a) {
    std::string out;
    for (const auto& s : normalized(a).segments) {
        out += "SPEAKER " + uri + " 1 " + fixed(s.start_s) + " " + fixed(s.end_s - s.start_s) + " <NA> <NA> " + s.speaker +
               " <NA> <NA>\n";
    }
    return out;
}

inline RttmFile parse_rttm(const std::string& text, const std::string& name = "rttm") {
    RttmFile out;
    std::istringstream in(text);
    std::string line;
    int n = 0;
    while (std::getline(in, line)) {
        ++n;
        if (line.find_first_not_of(" \t\r") == std::string::npos || line[0] == '#') continue;
        std::istringstream ls(line);
        std::vector<std::string> f;
        for (std::string w; ls >> w;) f.push_back(w);
        auto bad = [&](const std::string& why) { return DataError(name + ": malformed RTTM line " + std::to_string(n) + ": " + why); };
        if (f.size() < 8) throw bad("expected at least 8 fields");
        if (f[0] != "SPEAKER") throw bad("unsupported record type " + f[0]);
        double tbeg = 0.0, tdur = 0.0;
        try {
            std::size_t p1 = 0, p2 = 0;
            tbeg = std::stod(f[3], &p1);
            tdur = std::stod(f[4], &p2);
            if (p1 != f[3].size() || p2 != f[4].size()) throw std::invalid_argument("trailing characters");
        } catch (const std::exception&) {
            throw bad("onset and duration must be numbers");
        }
        if (tbeg < 0.0 || tdur < 0.0) throw bad("negative onset or duration");
        auto& ann = out.by_uri[f[1]];
        ann.segments.push_back({f[7], tbeg, tbeg + tdur});
    }
    return out;
}

inline RttmFile read_rttm(const fs::path& path) { return parse_rttm(read_text(path), path.string()); }

// ---------------------------------------------------------------------------
// Hypothesis dump.

struct HypothesisRecord {
    std::string id;
    Hypothesis hyp;
    double lambda = 0.0;
    std::string mask_variant;
    std::string diarization_mode;
};

inline ojson hypothesis_json(const HypothesisRecord& r, const Vocabulary& vocab) {
    ojson j;
    j["id"] = r.id;
    j["scheme"] = to_string(r.hyp.scheme);
    j["lambda"] = r.lambda;
    j["mask_variant"] = r.mask_variant;
    j["diarization_mode"] = r.diarization_mode;
    j["tokens"] = r.hyp.tokens;
    std::string text;
    for (int t : r.hyp.tokens) text += vocab.token_string(t);
    j["text"] = text;
    ojson blocks = ojson::array();
    for (const auto& b : r.hyp.blocks) {
        ojson bj;
        bj["speaker"] = b.speaker_index;
        bj["words"] = b.words;
        bj["start_s"] = b.start_s ? ojson(*b.start_s) : ojson(nullptr);
        bj["end_s"] = b.end_s ? ojson(*b.end_s) : ojson(nullptr);
        blocks.push_back(bj);
    }
    j["blocks"] = blocks;
    j["malformed_tokens"] = r.hyp.malformed_token_count;
    ojson masks = ojson::object();
    for (const auto& [k, m] : r.hyp.masks) masks[std::to_string(k)] = m.values;
    j["masks"] = masks;
    return j;
}

inline HypothesisRecord hypothesis_from_json(const ojson& j) {
    HypothesisRecord r;
    r.id = j.at("id").get<std::string>();
    try {
        r.hyp.scheme = scheme_from_string(j.at("scheme").get<std::string>());
    } catch (const std::invalid_argument& e) {
        throw DataError(e.what());
    }
    r.lambda = j.value("lambda", 0.0);
    r.mask_variant = j.value("mask_variant", "");
    r.diarization_mode = j.value("diarization_mode", "");
    r.hyp.tokens = j.at("tokens").get<std::vector<int>>();
    for (const auto& bj : j.at("blocks")) {
        SpeakerBlock b;
        b.speaker_index = bj.at("speaker").get<int>();
        b.words = bj.at("words").get<std::vector<std::string>>();
        if (!bj.at("start_s").is_null()) b.start_s = bj.at("start_s").get<double>();
        if (!bj.at("end_s").is_null()) b.end_s = bj.at("end_s").get<double>();
        r.hyp.blocks.push_back(std::move(b));
    }
    r.hyp.malformed_token_count = j.value("malformed_tokens", 0);
    if (j.contains("masks")) {
        for (const auto& [k, v] : j.at("masks").items()) {
            MaskVector m;
            m.kind = MaskKind::probability;
            m.values = v.get<std::vector<double>>();
            r.hyp.masks[std::stoi(k)] = std::move(m);
        }
    }
    return r;
}

inline std::vector<HypothesisRecord> read_hypotheses(const fs::path& path) {
    std::vector<HypothesisRecord> out;
    for_each_jsonl(path, [&](const ojson& j, int) { out.push_back(hypothesis_from_json(j)); });
    return out;
}

// ---------------------------------------------------------------------------
// Scoring.

struct ScoreMeta {
    std::string scheme;
    double lambda = 0.0;
    std::string mask_variant;
    std::string diarization_mode;
    double collar_s = 0.2;
};

inline ojson wer_json(const WerBreakdown& w) {
    ojson j;
    j["wer"] = w.wer();
    j["substitutions"] = w.substitutions;
    j["insertions"] = w.insertions;
    j["deletions"] = w.deletions;
    j["ref_words"] = w.ref_word_count;
    return j;
}

inline ojson der_json(const DerBreakdown& d) {
    ojson j;
    const double v = d.der();
    j["der"] = std::isfinite(v) ? ojson(v) : ojson(nullptr);
    j["missed_s"] = d.missed_s;
    j["false_alarm_s"] = d.false_alarm_s;
    j["confusion_s"] = d.confusion_s;
    j["scored_ref_s"] = d.scored_ref_s;
    return j;
}

// Reference word streams: one per speaker in FIFO order.
inline std::vector<std::vector<std::string>> reference_streams(const MixtureExample& ex) {
    std::vector<std::vector<std::string>> out;
    for (const auto& r : reference_speakers(ex)) out.push_back(r.words);
    return out;
}

// Hypothesis word streams: blocks of the same speaker index are concatenated.
inline std::vector<std::vector<std::string>> hypothesis_streams(const Hypothesis& h) {
    std::map<int, std::vector<std::string>> by;
    for (const auto& b : h.blocks) by[b.speaker_index].insert(by[b.speaker_index].end(), b.words.begin(), b.words.end());
    std::vector<std::vector<std::string>> out;
    for (auto& [k, w] : by) out.push_back(std::move(w));
    return out;
}

inline int hypothesis_speaker_count(const Hypothesis& h) {
    std::set<int> ks;
    for (const auto& b : h.blocks) {
        if (b.speaker_index > 0) ks.insert(b.speaker_index);
    }
    return static_cast<int>(ks.size());
}

// Scores every mixture of the manifest. A mixture without a hypothesis counts
// as an empty output. DER is taken from the two RTTM files.
inline ojson score_report(const std::vector<MixtureRecord>& mixtures, const std::vector<HypothesisRecord>& hyps,
                          const RttmFile& ref_rttm, const RttmFile& hyp_rttm, const ScoreMeta& meta) {
    std::map<std::string, const HypothesisRecord*> hyp_by_id;
    for (const auto& h : hyps) hyp_by_id[h.id] = &h;
    ScoringConfig sc;
    sc.collar_s = meta.collar_s;

    WerBreakdown wer_total;
    DerBreakdown der_total;
    ScaAccumulator sca_total;
    ojson per = ojson::array();
    for (const auto& rec : mixtures) {
        const auto& ex = rec.example;
        const auto it = hyp_by_id.find(ex.id);
        const Hypothesis empty;
        const Hypothesis& h = it == hyp_by_id.end() ? empty : it->second->hyp;

        ojson u;
        u["id"] = ex.id;
        const auto refs = reference_streams(ex);
        const auto hs = hypothesis_streams(h);
        WerBreakdown w;
        bool has_words = false;
        for (const auto& r : refs) has_words = has_words || !r.empty();
        if (has_words) {
            w = cp_wer(refs, hs);
            wer_total += w;
            u["cp_wer"] = wer_json(w);
        } else {
            u["cp_wer"] = nullptr;
        }

        const auto rit = ref_rttm.by_uri.find(ex.id);
        if (rit != ref_rttm.by_uri.end() && !normalized(rit->second).segments.empty()) {
            const auto hit = hyp_rttm.by_uri.find(ex.id);
            const DiarizationAnnotation hyp_ann = hit == hyp_rttm.by_uri.end() ? DiarizationAnnotation{} : hit->second;
            const DerBreakdown d = der(rit->second, hyp_ann, sc);
            der_total += d;
            u["der"] = der_json(d);
        } else {
            u["der"] = nullptr;
        }

        const int hc = hypothesis_speaker_count(h);
        sca_total.add(ex.num_speakers, hc);
        u["ref_speakers"] = ex.num_speakers;
        u["hyp_speakers"] = hc;
        u["speaker_count_correct"] = sca(ex.num_speakers, hc);
        per.push_back(u);
    }

    ojson report;
    ojson m;
    m["scheme"] = meta.scheme;
    m["lambda"] = meta.lambda;
    m["mask_variant"] = meta.mask_variant;
    m["diarization_mode"] = meta.diarization_mode;
    m["collar_s"] = meta.collar_s;
    report["meta"] = m;
    ojson corpus;
    corpus["utterances"] = mixtures.size();
    corpus["cp_wer"] = wer_json(wer_total);
    corpus["der"] = der_json(der_total);
    corpus["sca_percent"] = sca_total.percentage();
    report["corpus"] = corpus;
    report["utterances"] = per;
    return report;
}

// ---------------------------------------------------------------------------
// SVG plot of reference masks against predicted mask probabilities.

inline std::string mask_plot_svg(const std::string& title, const std::map<std::string, MaskVector>& reference,
                                 const std::map<int, MaskVector>& predicted) {
    std::size_t frames = 1;
    for (const auto& [k, m] : reference) frames = std::max(frames, m.size());
    for (const auto& [k, m] : predicted) frames = std::max(frames, m.size());
    const std::size_t rows = std::max<std::size_t>(1, std::max(reference.size(), predicted.size()));
    const double w = 800.0, lane = 60.0, left = 90.0, top = 30.0;
    const double h = top + lane * static_cast<double>(rows) + 20.0;
    const double dx = (w - left - 10.0) / static_cast<double>(frames);
    std::ostringstream s;
    s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h << "\">\n";
    s << "<text x=\"10\" y=\"18\" font-family=\"monospace\" font-size=\"13\">" << title << "</text>\n";
    std::size_t row = 0;
    auto ref_it = reference.begin();
    auto pred_it = predicted.begin();
    for (; row < rows; ++row) {
        const double y0 = top + lane * static_cast<double>(row), y1 = y0 + lane - 10.0;
        s << "<rect x=\"" << left << "\" y=\"" << y0 << "\" width=\"" << w - left - 10.0 << "\" height=\"" << y1 - y0
          << "\" fill=\"none\" stroke=\"#999\"/>\n";
        if (ref_it != reference.end()) {
            s << "<text x=\"4\" y=\"" << y0 + 14 << "\" font-family=\"monospace\" font-size=\"11\">" << ref_it->first << "</text>\n";
            const auto& m = ref_it->second;
            for (std::size_t f = 0; f < m.size(); ++f) {
                if (m.values[f] >= 0.5)
                    s << "<rect x=\"" << left + dx * static_cast<double>(f) << "\" y=\"" << y0 << "\" width=\"" << dx
                      << "\" height=\"" << y1 - y0 << "\" fill=\"#cde\"/>\n";
            }
            ++ref_it;
        }
        if (pred_it != predicted.end()) {
            s << "<text x=\"4\" y=\"" << y0 + 28 << "\" font-family=\"monospace\" font-size=\"11\">"
              << hypothesis_speaker_label(pred_it->first) << "</text>\n";
            s << "<polyline fill=\"none\" stroke=\"#c30\" points=\"";
            const auto& m = pred_it->second;
            for (std::size_t f = 0; f < m.size(); ++f)
                s << left + dx * (static_cast<double>(f) + 0.5) << "," << y1 - (y1 - y0) * m.values[f] << " ";
            s << "\"/>\n";
            ++pred_it;
        }
    }
    s << "</svg>\n";
    return s.str();
}

} // namespace spkmask::io
