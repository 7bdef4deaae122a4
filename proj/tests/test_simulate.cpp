#include "test_support.hpp"

#include <gtest/gtest.h>

#include <numbers>

using namespace spkmask;

namespace {

// A tone utterance of whole seconds, one aligned word per second.
Utterance utt(const std::string& id, const std::string& spk, int seconds, double freq, double amp = 0.3) {
    Utterance u;
    u.id = id;
    u.speaker_id = spk;
    auto clip = std::make_shared<AudioClip>();
    for (int i = 0; i < seconds * kSampleRateHz; ++i) clip->samples.push_back(amp * std::sin(2.0 * std::numbers::pi * freq * i / kSampleRateHz));
    u.audio = clip;
    for (int w = 0; w < seconds; ++w) {
        u.transcript.push_back(w % 2 ? "ba" : "ab");
        u.word_alignments.push_back({u.transcript.back(), double(w), double(w + 1)});
    }
    return u;
}

std::vector<std::pair<std::size_t, std::size_t>> runs(const MaskVector& m) {
    std::vector<std::pair<std::size_t, std::size_t>> out;
    for (std::size_t i = 0; i < m.size();) {
        if (m.values[i] < 0.5) {
            ++i;
            continue;
        }
        std::size_t j = i;
        while (j < m.size() && m.values[j] >= 0.5) ++j;
        out.emplace_back(i, j);
        i = j;
    }
    return out;
}

} // namespace

TEST(Case1, ThreeSecondPairWithOneSecondOverlap) {
    const auto a = utt("a", "A", 3, 300), b = utt("b", "B", 3, 500);
    const auto ex = make_case1(a, b, 1.0, 0.0);
    EXPECT_DOUBLE_EQ(ex.mixture.duration_s(), 5.0);
    EXPECT_DOUBLE_EQ(ex.sources[1].offset_s, 2.0);
    EXPECT_EQ(ex.num_speakers, 2);
    EXPECT_EQ(ex.case_kind, CaseKind::case1);
}

TEST(Case1, ZeroOverlapIsConcatenation) {
    const auto a = utt("a", "A", 2, 300), b = utt("b", "B", 2, 500);
    const auto ex = make_case1(a, b, 0.0, 0.0);
    EXPECT_DOUBLE_EQ(ex.mixture.duration_s(), 4.0);
    const auto& ma = ex.speaker_masks.at("A");
    const auto& mb = ex.speaker_masks.at("B");
    for (std::size_t f = 0; f < ma.size(); ++f) EXPECT_FALSE(ma.values[f] > 0.5 && mb.values[f] > 0.5) << f;
}

TEST(Case1, FullOverlapOfShorterUtterance) {
    const auto a = utt("a", "A", 4, 300), b = utt("b", "B", 3, 500);
    const auto ex = make_case1(a, b, 3.0, 0.0);
    EXPECT_DOUBLE_EQ(ex.mixture.duration_s(), 4.0);
    const auto& ma = ex.speaker_masks.at("A");
    const auto& mb = ex.speaker_masks.at("B");
    for (std::size_t f = 50; f < 200; ++f) {
        EXPECT_EQ(ma.values[f], 1.0) << f;
        EXPECT_EQ(mb.values[f], 1.0) << f;
    }
    for (std::size_t f = 0; f < 50; ++f) EXPECT_EQ(mb.values[f], 0.0);
}

TEST(Case1, Errors) {
    const auto a = utt("a", "A", 2, 300), a2 = utt("a2", "A", 2, 350), b = utt("b", "B", 1, 500);
    EXPECT_THROW(make_case1(a, a2, 0.5, 0.0), std::invalid_argument);
    EXPECT_THROW(make_case1(a, b, 1.5, 0.0), std::invalid_argument);
}

TEST(Case2, PaperGeometry) {
    const auto a1 = utt("a1", "A", 3, 300), b = utt("b", "B", 4, 500), a2 = utt("a2", "A", 3, 320);
    const auto ex = make_case2(a1, b, a2, 1.0, 1.0, 0.0);
    EXPECT_DOUBLE_EQ(ex.mixture.duration_s(), 8.0);
    EXPECT_EQ(ex.num_speakers, 2);
    const auto ra = runs(ex.speaker_masks.at("A"));
    const auto rb = runs(ex.speaker_masks.at("B"));
    ASSERT_EQ(ra.size(), 2u);
    EXPECT_EQ(ra[0], std::make_pair(std::size_t{0}, std::size_t{150}));
    EXPECT_EQ(ra[1], std::make_pair(std::size_t{250}, std::size_t{400}));
    ASSERT_EQ(rb.size(), 1u);
    EXPECT_EQ(rb[0], std::make_pair(std::size_t{100}, std::size_t{300}));
}

TEST(Case2, SequentialWithoutOverlap) {
    const auto a1 = utt("a1", "A", 1, 300), b = utt("b", "B", 2, 500), a2 = utt("a2", "A", 1, 320);
    const auto ex = make_case2(a1, b, a2, 0.0, 0.0, 0.0);
    EXPECT_DOUBLE_EQ(ex.mixture.duration_s(), 4.0);
    const auto& ma = ex.speaker_masks.at("A");
    const auto& mb = ex.speaker_masks.at("B");
    for (std::size_t f = 0; f < ma.size(); ++f) EXPECT_FALSE(ma.values[f] > 0.5 && mb.values[f] > 0.5);
    EXPECT_NO_THROW(make_case2(a1, b, a2, 1.0, 1.0, 0.0));
    const auto l1 = utt("l1", "A", 2, 300), l2 = utt("l2", "A", 2, 320), mid = utt("m", "B", 3, 500);
    EXPECT_THROW(make_case2(l1, mid, l2, 2.0, 2.0, 0.0), std::invalid_argument);
    EXPECT_THROW(make_case2(a1, b, utt("c", "C", 1, 200), 0.0, 0.0, 0.0), std::invalid_argument);
}

TEST(MaskTargets, AlignmentsRestrictVad) {
    Utterance u = utt("u", "A", 3, 300);
    u.transcript = {"ab"};
    u.word_alignments = {{"ab", 0.2, 2.8}};
    const auto ex = make_original(u);
    const auto& m = ex.speaker_masks.at("A");
    ASSERT_EQ(m.size(), 150u);
    for (std::size_t f = 0; f < 150; ++f) EXPECT_EQ(m.values[f], (f >= 10 && f < 140) ? 1.0 : 0.0) << f;
    EXPECT_FALSE(ex.alignment_fallback);
}

TEST(MaskTargets, SilentSourceAndFallback) {
    Utterance silent = utt("s", "A", 1, 300);
    auto clip = std::make_shared<AudioClip>(*silent.audio);
    std::fill(clip->samples.begin(), clip->samples.end(), 0.0);
    silent.audio = clip;
    const auto ex = make_original(silent);
    for (double v : ex.speaker_masks.at("A").values) EXPECT_EQ(v, 0.0);

    Utterance bare = utt("n", "A", 1, 300);
    bare.word_alignments.clear();
    const auto fb = make_original(bare);
    EXPECT_TRUE(fb.alignment_fallback);
    for (double v : fb.speaker_masks.at("A").values) EXPECT_EQ(v, 1.0);
}

TEST(MaskTargets, Case2SpeakerMaskIsUnionOfSources) {
    const auto a1 = utt("a1", "A", 2, 300), b = utt("b", "B", 3, 500), a2 = utt("a2", "A", 2, 320);
    auto ex = make_case2(a1, b, a2, 0.5, 0.5, 0.0);
    MaskVector expect;
    expect.values.assign(ex.speaker_masks.at("A").size(), 0.0);
    for (const auto& s : ex.sources) {
        if (s.utterance.speaker_id != "A") continue;
        MixtureExample single;
        single.sources = {s};
        single.mixture.samples.assign(ex.mixture.samples.size(), 0.0);
        const auto part = mask_targets(single).masks.at("A");
        for (std::size_t f = 0; f < part.size(); ++f) expect.values[f] = std::max(expect.values[f], part.values[f]);
    }
    EXPECT_EQ(ex.speaker_masks.at("A").values, expect.values);
}

TEST(Sir, MeasuredMatchesRequested) {
    const auto a = utt("a", "A", 2, 300, 0.3), b = utt("b", "B", 2, 500, 0.1);
    for (double sir : {-5.0, 0.0, 5.0, 10.0}) {
        const auto ex = make_case1(a, b, 0.5, sir);
        EXPECT_NEAR(measured_sir_db(ex), sir, 1e-9);
    }
}

TEST(TrainingSet, RatioCounts) {
    ToyCorpusConfig tc;
    tc.utts_per_speaker = 5;
    const auto corpus = gen_toy_corpus(tc); // 10 utterances
    SimulationConfig sc;
    RatioSpec r;
    r.parts = {{CaseKind::original, 1}, {CaseKind::case1, 1}};
    const auto set = build_training_set(corpus, r, sc, 3);
    std::map<CaseKind, int> counts;
    for (const auto& ex : set.examples) ++counts[ex.case_kind];
    EXPECT_EQ(counts[CaseKind::original], 10);
    EXPECT_EQ(counts[CaseKind::case1], 10);

    r.parts = {{CaseKind::original, 1}, {CaseKind::case1, 1}, {CaseKind::case2, 1}};
    const auto three = build_training_set(corpus, r, sc, 3);
    counts.clear();
    for (const auto& ex : three.examples) ++counts[ex.case_kind];
    EXPECT_EQ(three.skipped.size(), 0u);
    EXPECT_EQ(counts[CaseKind::original], counts[CaseKind::case1]);
    EXPECT_EQ(counts[CaseKind::case1], counts[CaseKind::case2]);
}

TEST(TrainingSet, DeterministicAndSeedSensitive) {
    const auto corpus = gen_toy_corpus(ToyCorpusConfig{});
    RatioSpec r;
    r.parts = {{CaseKind::case1, 1}, {CaseKind::case2, 1}};
    const auto x = build_training_set(corpus, r, SimulationConfig{}, 5);
    const auto y = build_training_set(corpus, r, SimulationConfig{}, 5);
    const auto z = build_training_set(corpus, r, SimulationConfig{}, 6);
    ASSERT_EQ(x.examples.size(), y.examples.size());
    bool differs = false;
    for (std::size_t i = 0; i < x.examples.size(); ++i) {
        EXPECT_EQ(x.examples[i].mixture.samples, y.examples[i].mixture.samples);
        EXPECT_EQ(x.examples[i].id, y.examples[i].id);
        differs = differs || x.examples[i].mixture.samples != z.examples[i].mixture.samples;
    }
    EXPECT_TRUE(differs);
}

TEST(TrainingSet, OverlapsOnGridAndWithinRange) {
    const auto corpus = gen_toy_corpus(ToyCorpusConfig{});
    RatioSpec r;
    r.parts = {{CaseKind::case1, 2}};
    SimulationConfig sc;
    sc.overlap_max_s = 0.5;
    const auto set = build_training_set(corpus, r, sc, 1);
    for (const auto& ex : set.examples) {
        const double overlap = ex.sources[0].utterance.duration_s() - ex.sources[1].offset_s;
        EXPECT_GE(overlap, -1e-9);
        EXPECT_LE(overlap, 0.5 + 1e-9);
        EXPECT_NEAR(overlap / 0.02, std::round(overlap / 0.02), 1e-6);
    }
}

TEST(TrainingSet, FixedOverlapAndInfeasibleSkips) {
    const auto corpus = gen_toy_corpus(ToyCorpusConfig{}); // 0.6-1.0 s utterances
    RatioSpec r;
    r.parts = {{CaseKind::case1, 1}};
    SimulationConfig sc;
    sc.fixed_overlap_s = 0.4;
    const auto set = build_training_set(corpus, r, sc, 1);
    ASSERT_FALSE(set.examples.empty());
    for (const auto& ex : set.examples) {
        const auto la = ex.sources[0].utterance.audio->samples.size();
        const auto off = static_cast<std::size_t>(std::llround(ex.sources[1].offset_s * kSampleRateHz));
        EXPECT_EQ(la - off, 6400u);
    }
    sc.fixed_overlap_s = 5.0;
    const auto none = build_training_set(corpus, r, sc, 1);
    EXPECT_TRUE(none.examples.empty());
    EXPECT_EQ(none.skipped.size(), corpus.size());
    EXPECT_NE(none.skipped.front().find("overlap"), std::string::npos);
}

TEST(TrainingSet, SingleSpeakerCorpusRejected) {
    ToyCorpusConfig tc;
    tc.num_speakers = 1;
    const auto corpus = gen_toy_corpus(tc);
    RatioSpec r;
    r.parts = {{CaseKind::original, 1}};
    EXPECT_THROW(build_training_set(corpus, r, SimulationConfig{}, 1), std::invalid_argument);
}

TEST(ToyCorpus, ShapeAlignmentAndDeterminism) {
    ToyCorpusConfig tc;
    tc.utts_per_speaker = 4;
    const auto c = gen_toy_corpus(tc);
    ASSERT_EQ(c.size(), 8u);
    for (const auto& u : c) {
        EXPECT_NO_THROW(validate(u));
        ASSERT_EQ(u.transcript.size(), u.word_alignments.size());
        EXPECT_NEAR(u.word_alignments.back().end_s, u.duration_s(), 1e-9);
        for (std::size_t w = 0; w < u.transcript.size(); ++w) EXPECT_EQ(u.transcript[w], u.word_alignments[w].word);
    }
    const auto d = gen_toy_corpus(tc);
    for (std::size_t i = 0; i < c.size(); ++i) {
        EXPECT_EQ(c[i].id, d[i].id);
        EXPECT_EQ(c[i].audio->samples, d[i].audio->samples);
    }
}
