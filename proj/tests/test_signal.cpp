#include "test_support.hpp"

#include <gtest/gtest.h>

#include <fstream>
#include <numbers>

using namespace spkmask;

namespace {

AudioClip tone(double freq, double seconds, double amp = 1.0, int sr = kSampleRateHz) {
    AudioClip c;
    c.sample_rate_hz = sr;
    const auto n = static_cast<std::size_t>(std::llround(seconds * sr));
    for (std::size_t i = 0; i < n; ++i) c.samples.push_back(amp * std::sin(2.0 * std::numbers::pi * freq * static_cast<double>(i) / sr));
    return c;
}

void write_raw_wav(const std::filesystem::path& p, int channels, int bits, int format, std::size_t frames) {
    std::string out;
    auto u32 = [&](std::uint32_t v) { for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff)); };
    auto u16 = [&](std::uint16_t v) { for (int i = 0; i < 2; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff)); };
    const std::uint32_t data = static_cast<std::uint32_t>(frames * channels * bits / 8);
    out += "RIFF";
    u32(36 + data);
    out += "WAVEfmt ";
    u32(16);
    u16(static_cast<std::uint16_t>(format));
    u16(static_cast<std::uint16_t>(channels));
    u32(16000);
    u32(static_cast<std::uint32_t>(16000 * channels * bits / 8));
    u16(static_cast<std::uint16_t>(channels * bits / 8));
    u16(static_cast<std::uint16_t>(bits));
    out += "data";
    u32(data);
    out.append(data, '\0');
    std::ofstream(p, std::ios::binary) << out;
}

} // namespace

TEST(Wav, OneSecondHas16000Samples) {
    const auto dir = oracle::scratch_dir("wav1");
    AudioClip c = tone(440.0, 1.0, 0.5);
    save_wav(dir / "a.wav", c);
    const AudioClip back = load_wav(dir / "a.wav");
    EXPECT_EQ(back.samples.size(), 16000u);
    EXPECT_EQ(back.sample_rate_hz, 16000);
    for (std::size_t i = 0; i < c.samples.size(); ++i) ASSERT_NEAR(back.samples[i], c.samples[i], 1.0 / 32768.0);
}

TEST(Wav, AllZeroFileGivesZeros) {
    const auto dir = oracle::scratch_dir("wav0");
    write_raw_wav(dir / "z.wav", 1, 16, 1, 800);
    const AudioClip c = load_wav(dir / "z.wav");
    ASSERT_EQ(c.samples.size(), 800u);
    for (double s : c.samples) EXPECT_EQ(s, 0.0);
}

TEST(Wav, RejectsStereoAndOtherEncodings) {
    const auto dir = oracle::scratch_dir("wavbad");
    write_raw_wav(dir / "st.wav", 2, 16, 1, 100);
    try {
        load_wav(dir / "st.wav");
        FAIL() << "stereo accepted";
    } catch (const DataError& e) {
        EXPECT_NE(std::string(e.what()).find("unsupported channel count"), std::string::npos);
    }
    write_raw_wav(dir / "f.wav", 1, 32, 3, 100);
    EXPECT_THROW(load_wav(dir / "f.wav"), DataError);
    EXPECT_THROW(load_wav(dir / "missing.wav"), DataError);
}

TEST(Wav, WriteGainScalesOverFullScale) {
    const auto dir = oracle::scratch_dir("wavgain");
    AudioClip c;
    c.samples = {2.0, -1.0, 0.5};
    save_wav(dir / "g.wav", c, 0.5);
    const AudioClip back = load_wav(dir / "g.wav");
    EXPECT_NEAR(back.samples[0], 1.0, 1.0 / 32768.0);
    EXPECT_NEAR(back.samples[1], -0.5, 1.0 / 32768.0);
    EXPECT_NEAR(back.samples[2], 0.25, 1.0 / 32768.0);
}

TEST(Power, Examples) {
    AudioClip c;
    c.samples.assign(100, 0.5);
    EXPECT_DOUBLE_EQ(mean_power(c), 0.25);
    c.samples.assign(100, 0.0);
    EXPECT_DOUBLE_EQ(mean_power(c), 0.0);
    // 100 Hz at 16 kHz: 160 samples per period, 10 whole periods.
    const AudioClip s = tone(100.0, 0.1);
    double direct = 0.0;
    for (double v : s.samples) direct += v * v;
    EXPECT_NEAR(mean_power(s), direct / static_cast<double>(s.samples.size()), 1e-15);
    EXPECT_NEAR(mean_power(s), 0.5, 1e-12);
    EXPECT_THROW(mean_power(AudioClip{}), std::invalid_argument);
}

TEST(SirGain, Examples) {
    EXPECT_DOUBLE_EQ(sir_gain(1.0, 1.0, 0.0), 1.0);
    EXPECT_DOUBLE_EQ(sir_gain(4.0, 1.0, 0.0), 2.0);
    EXPECT_NEAR(sir_gain(1.0, 1.0, 10.0), 0.31623, 1e-5);
    EXPECT_THROW(sir_gain(0.0, 1.0, 0.0), std::invalid_argument);
    EXPECT_THROW(sir_gain(1.0, -1.0, 0.0), std::invalid_argument);
}

TEST(Mix, IdentityDoublingAndOffsets) {
    const AudioClip a = tone(300.0, 2.0, 0.4), b = tone(500.0, 2.0, 0.3);
    std::vector<MixSource> one{{&a, 0.0, 1.0}};
    EXPECT_EQ(mix_at_offsets(one).samples, a.samples);

    std::vector<MixSource> twice{{&a, 0.0, 1.0}, {&a, 0.0, 1.0}};
    const AudioClip d = mix_at_offsets(twice);
    for (std::size_t i = 0; i < a.samples.size(); ++i) ASSERT_DOUBLE_EQ(d.samples[i], 2.0 * a.samples[i]);

    std::vector<MixSource> shifted{{&a, 0.0, 1.0}, {&b, 1.0, 1.0}};
    const AudioClip m = mix_at_offsets(shifted);
    ASSERT_EQ(m.samples.size(), 48000u);
    for (std::size_t i = 0; i < m.samples.size(); ++i) {
        const double ea = i < 32000 ? a.samples[i] : 0.0;
        const double eb = i >= 16000 ? b.samples[i - 16000] : 0.0;
        ASSERT_DOUBLE_EQ(m.samples[i], ea + eb);
    }

    AudioClip other = tone(300.0, 0.5);
    other.sample_rate_hz = 8000;
    std::vector<MixSource> bad{{&a, 0.0, 1.0}, {&other, 0.0, 1.0}};
    EXPECT_THROW(mix_at_offsets(bad), std::invalid_argument);
}

TEST(Mix, NoClippingPeakRecorded) {
    AudioClip a;
    a.samples.assign(10, 0.8);
    std::vector<MixSource> s{{&a, 0.0, 1.0}, {&a, 0.0, 1.0}};
    const AudioClip m = mix_at_offsets(s);
    EXPECT_DOUBLE_EQ(peak_abs(m), 1.6);
}

TEST(LogMel, FramingAndSilence) {
    FeatureConfig cfg;
    AudioClip silence;
    silence.samples.assign(16000, 0.0);
    const FeatureMatrix f = log_mel(silence, cfg);
    EXPECT_EQ(f.num_frames, 98u);
    EXPECT_EQ(feature_frame_count(16000, cfg), 98u);
    for (double v : f.data) ASSERT_DOUBLE_EQ(v, std::log(cfg.log_floor));

    AudioClip tiny;
    tiny.samples.assign(100, 0.1);
    EXPECT_THROW(log_mel(tiny, cfg), std::invalid_argument);
}

TEST(LogMel, ToneArgmaxIsNearestCentre) {
    for (int mels : {16, 40, 80}) {
        FeatureConfig cfg;
        cfg.num_mels = mels;
        const FeatureMatrix f = log_mel(tone(1000.0, 0.5), cfg);
        const auto centres = mel_center_frequencies(cfg);
        int nearest = 0;
        for (int m = 1; m < mels; ++m) {
            if (std::abs(centres[m] - 1000.0) < std::abs(centres[nearest] - 1000.0)) nearest = m;
        }
        for (std::size_t t = 0; t < f.num_frames; ++t) {
            int best = 0;
            for (int m = 1; m < mels; ++m) {
                if (f.at(t, m) > f.at(t, best)) best = m;
            }
            ASSERT_EQ(best, nearest) << "mels " << mels << " frame " << t;
        }
    }
}

TEST(LogMel, FilterbankCoversZeroToNyquist) {
    FeatureConfig cfg;
    const auto edges = mel_edge_frequencies(cfg);
    EXPECT_DOUBLE_EQ(edges.front(), 0.0);
    EXPECT_NEAR(edges.back(), 8000.0, 1e-9);
    EXPECT_NEAR(mel_to_hz(hz_to_mel(1234.5)), 1234.5, 1e-9);
}

TEST(Vad, Examples) {
    AudioClip silence;
    silence.samples.assign(32000, 0.0);
    for (double v : energy_vad(silence).values) EXPECT_EQ(v, 0.0);

    AudioClip full;
    full.samples.assign(32000, 1.0);
    const MaskVector all = energy_vad(full);
    EXPECT_EQ(all.size(), 100u);
    for (double v : all.values) EXPECT_EQ(v, 1.0);

    AudioClip half = tone(440.0, 1.0, 0.5);
    half.samples.resize(32000, 0.0);
    const MaskVector m = energy_vad(half, 20.0, -40.0);
    ASSERT_EQ(m.size(), 100u);
    for (std::size_t f = 0; f < 50; ++f) EXPECT_EQ(m.values[f], 1.0) << f;
    for (std::size_t f = 50; f < 100; ++f) EXPECT_EQ(m.values[f], 0.0) << f;

    EXPECT_THROW(energy_vad(AudioClip{}), std::invalid_argument);
}

TEST(Vad, ThresholdIsRelativeToLoudestFrame) {
    // Second half 30 dB down: active at -40, inactive at -20.
    AudioClip c = tone(440.0, 1.0, 1.0);
    const AudioClip quiet = tone(440.0, 1.0, std::pow(10.0, -30.0 / 20.0));
    c.samples.insert(c.samples.end(), quiet.samples.begin(), quiet.samples.end());
    const MaskVector loose = energy_vad(c, 20.0, -40.0), strict = energy_vad(c, 20.0, -20.0);
    EXPECT_EQ(loose.values[75], 1.0);
    EXPECT_EQ(strict.values[75], 0.0);
    EXPECT_EQ(strict.values[25], 1.0);
}
