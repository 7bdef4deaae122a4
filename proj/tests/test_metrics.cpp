#include "test_support.hpp"

#include <gtest/gtest.h>

using namespace spkmask;

namespace {

std::vector<std::string> words(const std::string& s) { return detail::split_words(s); }

DiarizationAnnotation ann(std::vector<Segment> s) {
    DiarizationAnnotation a;
    a.segments = std::move(s);
    return a;
}

std::vector<std::string> random_words(Rng& rng, std::size_t n) {
    static const char* pool[] = {"ba", "de", "gi", "ko", "mu"};
    std::vector<std::string> out;
    for (std::size_t i = 0; i < n; ++i) out.push_back(pool[rng.index(5)]);
    return out;
}

} // namespace

TEST(Wer, Examples) {
    const auto w = wer(words("a b c d"), words("a x c"));
    EXPECT_EQ(w.substitutions, 1);
    EXPECT_EQ(w.deletions, 1);
    EXPECT_EQ(w.insertions, 0);
    EXPECT_DOUBLE_EQ(w.wer(), 0.5);
    EXPECT_EQ(wer(words("a b"), words("a b")).errors(), 0);
    EXPECT_DOUBLE_EQ(wer(words("a"), words("b c d")).wer(), 3.0);
    EXPECT_EQ(wer(words("a b"), {}).deletions, 2);
    EXPECT_THROW(wer({}, words("a")), std::invalid_argument);
}

TEST(Wer, MatchesRecursiveEditDistance) {
    Rng rng{17};
    for (int trial = 0; trial < 300; ++trial) {
        const auto r = random_words(rng, 1 + rng.index(8));
        const auto h = random_words(rng, rng.index(9));
        const auto w = wer(r, h);
        EXPECT_EQ(w.errors(), oracle::edit_distance(r, h));
        EXPECT_EQ(w.ref_word_count, static_cast<long>(r.size()));
        // S + D = |ref|- matches, S + I = |hyp| - matches.
        EXPECT_EQ(static_cast<long>(r.size()) - w.deletions - w.substitutions, static_cast<long>(h.size()) - w.insertions - w.substitutions);
    }
}

TEST(CpWer, SwappedStreamsAndMissingSpeaker) {
    const std::vector<std::vector<std::string>> ref{words("a b c"), words("d e")};
    EXPECT_EQ(cp_wer(ref, {words("d e"), words("a b c")}).errors(), 0);
    const auto miss = cp_wer(ref, {words("a b c")});
    EXPECT_EQ(miss.deletions, 2);
    EXPECT_DOUBLE_EQ(miss.wer(), 0.4);
    const auto extra = cp_wer(ref, {words("a b c"), words("d e"), words("z")});
    EXPECT_EQ(extra.insertions, 1);
    EXPECT_EQ(extra.errors(), 1);
    EXPECT_THROW(cp_wer({}, {words("a")}), std::invalid_argument);
}

TEST(CpWer, MatchesExhaustivePermutations) {
    Rng rng{23};
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t nr = 1 + rng.index(3), nh = rng.index(4);
        std::vector<std::vector<std::string>> ref, hyp;
        for (std::size_t k = 0; k < nr; ++k) ref.push_back(random_words(rng, 1 + rng.index(5)));
        for (std::size_t k = 0; k < nh; ++k) hyp.push_back(random_words(rng, rng.index(6)));
        EXPECT_EQ(cp_wer(ref, hyp).errors(), oracle::cp_errors_exhaustive(ref, hyp));
    }
}

TEST(Der, IdenticalIsZeroAndErrorsOnEmptyReference) {
    const auto a = ann({{"A", 0.0, 2.0}, {"B", 1.5, 4.0}});
    EXPECT_EQ(der(a, a).der(), 0.0);
    EXPECT_EQ(der(a, a, {0.0}).der(), 0.0);
    EXPECT_THROW(der(ann({}), a), std::invalid_argument);
    EXPECT_THROW(der(a, a, {-0.1}), std::invalid_argument);
}

TEST(Der, ShiftInsideCollarIsFree) {
    const auto ref = ann({{"A", 1.0, 3.0}});
    const auto hyp = ann({{"X", 1.1, 3.1}});
    EXPECT_NEAR(der(ref, hyp, {0.2}).der(), 0.0, 1e-12);
    const auto strict = der(ref, hyp, {0.0});
    EXPECT_NEAR(strict.missed_s, 0.1, 1e-12);
    EXPECT_NEAR(strict.false_alarm_s, 0.1, 1e-12);
    EXPECT_NEAR(strict.der(), 0.1, 1e-12);
}

TEST(Der, ConstructedConfusionAgreesWithFrameOracle) {
    const auto ref = ann({{"A", 0.0, 5.0}, {"B", 5.0, 10.0}});
    const auto hyp = ann({{"X", 0.0, 5.0}, {"Y", 5.0, 9.0}, {"X", 9.0, 10.0}});
    const auto d = der(ref, hyp, {0.0});
    EXPECT_NEAR(d.confusion_s, 1.0, 1e-12);
    EXPECT_NEAR(d.missed_s + d.false_alarm_s, 0.0, 1e-12);
    EXPECT_NEAR(d.der(), 0.1, 1e-12);
    EXPECT_NEAR(oracle::frame_der(ref, hyp, 0.0).der(), 0.1, 1e-9);

    const auto c = der(ref, hyp, {0.25});
    const auto f = oracle::frame_der(ref, hyp, 0.25);
    EXPECT_NEAR(c.errors_s(), f.errors_s, 1e-9);
    EXPECT_NEAR(c.scored_ref_s, f.scored_ref_s, 1e-9);
}

TEST(Der, InvariantToHypothesisRenaming) {
    Rng rng{31};
    for (int trial = 0; trial < 30; ++trial) {
        const auto ref = oracle::random_annotation(rng, 3, 8.0, "r");
        auto hyp = oracle::random_annotation(rng, 3, 8.0, "h");
        const double base = der(ref, hyp).der();
        for (auto& s : hyp.segments) s.speaker = "renamed-" + std::string(1, static_cast<char>('z' - (s.speaker.back() - '0')));
        EXPECT_NEAR(der(ref, hyp).der(), base, 1e-12);
    }
}

TEST(Der, RandomCasesTrackFrameOracle) {
    Rng rng{41};
    for (int trial = 0; trial < 40; ++trial) {
        const auto ref = oracle::random_annotation(rng, 1 + static_cast<int>(rng.index(3)), 6.0, "r");
        const auto hyp = oracle::random_annotation(rng, 1 + static_cast<int>(rng.index(3)), 6.0, "h");
        const auto d = der(ref, hyp, {0.0});
        const auto f = oracle::frame_der(ref, hyp, 0.0);
        // Each boundary can move at most one 10 ms frame's worth of error.
        const double bound = 0.01 * 2.0 * static_cast<double>(ref.segments.size() + hyp.segments.size()) * 3.0;
        EXPECT_NEAR(d.errors_s(), f.errors_s, bound);
        EXPECT_NEAR(d.scored_ref_s, f.scored_ref_s, bound);
    }
}

TEST(Sca, Examples) {
    EXPECT_TRUE(sca(2, 2));
    EXPECT_FALSE(sca(2, 3));
    EXPECT_THROW(sca(-1, 2), std::invalid_argument);
    ScaAccumulator acc;
    acc.add(2, 2);
    acc.add(2, 2);
    acc.add(3, 3);
    acc.add(2, 1);
    EXPECT_DOUBLE_EQ(acc.percentage(), 75.0);
}
