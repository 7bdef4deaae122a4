#include "test_support.hpp"

#include <gtest/gtest.h>

using namespace spkmask;
using spkmask::oracle::micro_item;
using spkmask::oracle::micro_model_config;
using spkmask::oracle::micro_vocabulary;

namespace {

const MaskVariant kAllVariants[] = {MaskVariant::L_FC, MaskVariant::L_FC_CNN, MaskVariant::CA_FC, MaskVariant::CA_FC_CNN};

Mat encode_value(const Model& m, const Mat& f) {
    Tape t(false);
    return m.encode(t, f).value();
}

} // namespace

TEST(Encoder, ShapeFinitenessAndDeterminism) {
    const auto v = micro_vocabulary();
    const auto c = micro_model_config(v, MaskVariant::L_FC);
    const Model m(c);
    const Mat zero = Mat::Zero(c.feature_frames(), c.num_mels);
    const Mat out = encode_value(m, zero);
    EXPECT_EQ(out.rows(), c.max_frames);
    EXPECT_EQ(out.cols(), c.hidden_dim);
    EXPECT_TRUE(out.allFinite());
    EXPECT_EQ(encode_value(m, zero), out);
    const auto item = micro_item(v, c, 3);
    EXPECT_GT((encode_value(m, item.features) - out).norm(), 1e-6);
    EXPECT_THROW(encode_value(m, Mat::Zero(5, c.num_mels)), std::invalid_argument);
}

TEST(Decoder, SingleTokenGivesOneRow) {
    const auto v = micro_vocabulary();
    const auto c = micro_model_config(v, MaskVariant::L_FC);
    const Model m(c);
    Tape t(false);
    const Var enc = m.encode(t, Mat::Zero(c.feature_frames(), c.num_mels));
    const std::vector<int> one{v.sot()};
    const auto out = m.decoder_forward(t, enc, one);
    EXPECT_EQ(out.logits.rows(), 1);
    EXPECT_EQ(out.logits.cols(), v.size());
    EXPECT_EQ(out.hidden.cols(), c.hidden_dim);
    const std::vector<int> bad{v.size()};
    EXPECT_THROW(m.decoder_forward(t, enc, bad), std::out_of_range);
}

TEST(Decoder, CausalPrefixInvariance) {
    const auto v = micro_vocabulary();
    const auto c = micro_model_config(v, MaskVariant::L_FC);
    const Model m(c);
    const auto item = micro_item(v, c, 5);
    Tape t(false);
    const Var enc = m.encode(t, item.features);
    const std::vector<int> full = item.tokens;
    const std::vector<int> prefix(full.begin(), full.begin() + 3);
    const Mat a = m.decoder_forward(t, enc, full).logits.value();
    const Mat b = m.decoder_forward(t, enc, prefix).logits.value();
    EXPECT_LT((a.topRows(3) - b).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(AsrLoss, UniformLogitsAndConfidentLogits) {
    const int V = 37;
    const std::vector<int> targets{3, 5, 0, 7};
    EXPECT_NEAR(asr_loss(Mat::Zero(4, V), targets, 0), std::log(double(V)), 1e-12);
    Mat sharp = Mat::Zero(4, V);
    for (int i = 0; i < 4; ++i) sharp(i, targets[i]) = 60.0;
    EXPECT_LT(asr_loss(sharp, targets, 0), 1e-20);
    const std::vector<int> all_pad{0, 0, 0, 0};
    EXPECT_THROW(asr_loss(Mat::Zero(4, V), all_pad, 0), std::invalid_argument);
}

TEST(AsrLoss, PadPositionsExcludedFromMean) {
    Mat logits(3, 4);
    logits << 1, 2, 3, 4, 0.5, -1, 2, 0, 3, 3, 3, 3;
    const std::vector<int> with_pad{1, 2, 0}, without{1, 2};
    EXPECT_NEAR(asr_loss(logits, with_pad, 0), asr_loss(Mat(logits.topRows(2)), without, 0), 1e-15);
}

TEST(Gates, PositionsFollowSpeakerTargets) {
    const Vocabulary v;
    const std::vector<int> targets{v.speaker_token(1), v.char_token('a'), v.speaker_token(2), v.char_token('b'), v.eot()};
    const auto g = gate_positions(targets, v);
    ASSERT_EQ(g.size(), 2u);
    EXPECT_EQ(g[0].position, 0u);
    EXPECT_EQ(g[0].speaker_index, 1);
    EXPECT_EQ(g[1].position, 2u);
    EXPECT_EQ(g[1].speaker_index, 2);
    const std::vector<int> plain{v.char_token('a'), v.eot()};
    EXPECT_TRUE(gate_positions(plain, v).empty());
}

TEST(MaskBranch, ZeroWeightsGiveOneHalf) {
    const auto v = micro_vocabulary();
    for (MaskVariant variant : kAllVariants) {
        const auto c = micro_model_config(v, variant);
        Model m(c);
        auto& ps = m.parameters();
        for (std::size_t i = 0; i < ps.size(); ++i) {
            if (is_mask_branch_parameter(ps.name(i))) ps.value(i).setZero();
        }
        Tape t(false);
        const Var enc = m.encode(t, micro_item(v, c, 1).features);
        const Var row = t.constant(Mat::Random(1, c.hidden_dim));
        const Mat p = m.mask_branch_forward(t, row, enc, false, nullptr).value();
        EXPECT_EQ(p.cols(), c.max_frames) << to_string(variant);
        for (Eigen::Index i = 0; i < p.size(); ++i) ASSERT_DOUBLE_EQ(p(0, i), 0.5) << to_string(variant);
    }
}

TEST(MaskBranch, VariantsOwnTheirParameters) {
    const auto v = micro_vocabulary();
    auto count = [&](MaskVariant variant, const std::string& needle) {
        const Model m(micro_model_config(v, variant));
        int n = 0;
        for (std::size_t i = 0; i < m.parameters().size(); ++i) n += m.parameters().name(i).find(needle) != std::string::npos;
        return n;
    };
    EXPECT_EQ(count(MaskVariant::L_FC, "mask.conv"), 0);
    EXPECT_GT(count(MaskVariant::L_FC_CNN, "mask.conv"), 0);
    EXPECT_EQ(count(MaskVariant::L_FC, "mask.ca"), 0);
    EXPECT_GT(count(MaskVariant::CA_FC, "mask.ca"), 0);
    EXPECT_GT(count(MaskVariant::CA_FC_CNN, "mask.ca"), 0);
    EXPECT_GT(count(MaskVariant::CA_FC_CNN, "mask.conv"), 0);
}

TEST(MaskLoss, Examples) {
    MaskVector y, p;
    y.values = {1, 0, 1, 0};
    p.values = y.values;
    EXPECT_LE(mask_loss(p, y), 1.2e-7);
    p.values = {0.5, 0.5, 0.5, 0.5};
    EXPECT_NEAR(mask_loss(p, y), std::log(2.0), 1e-15);
    p.values = {0.9, 0.2, 0.8, 0.1};
    EXPECT_NEAR(mask_loss(p, y), oracle::bce_direct(y.values, p.values), 1e-15);
    const double hand = -(std::log(0.9) + std::log(0.8) + std::log(0.8) + std::log(0.9)) / 4.0;
    EXPECT_NEAR(mask_loss(p, y), hand, 1e-15);
    MaskVector shorter;
    shorter.values = {1, 0};
    EXPECT_THROW(mask_loss(shorter, y), std::invalid_argument);
}

TEST(MaskLoss, TapeVersionMatchesScalarVersion) {
    Rng rng{7};
    MaskVector y, p;
    for (int i = 0; i < 50; ++i) {
        y.values.push_back(rng.uniform() < 0.5 ? 1.0 : 0.0);
        p.values.push_back(rng.uniform());
    }
    Tape t(false);
    const Var pv = t.constant(Eigen::Map<const Mat>(p.values.data(), 1, 50));
    const Mat yv = Eigen::Map<const Mat>(y.values.data(), 1, 50);
    EXPECT_NEAR(ag::bce_mean(pv, yv, kMaskProbClip).scalar(), mask_loss(p, y), 1e-14);
}

TEST(CombinedLoss, Examples) {
    const std::vector<double> none;
    EXPECT_DOUBLE_EQ(combined_loss(2.0, none, 0.0), 2.0);
    const std::vector<double> four{1.5, 2.5};
    EXPECT_DOUBLE_EQ(combined_loss(2.0, four, 0.5), 3.0);
    EXPECT_DOUBLE_EQ(combined_loss(2.0, four, 0.0), 2.0);
    EXPECT_THROW(combined_loss(2.0, four, 1.5), std::invalid_argument);
}

TEST(GradientCheck, MicroModelCnnVariant) {
    const auto v = micro_vocabulary();
    const auto c = micro_model_config(v, MaskVariant::CA_FC_CNN);
    Model m(c);
    const auto a = micro_item(v, c, 1), b = micro_item(v, c, 2);
    const std::vector<const TrainItem*> items{&a, &b};
    const auto batch = collate(items, v.pad());
    const auto r = oracle::gradient_check(m, v, batch, 0.5, true);
    EXPECT_LT(r.max_rel_error, 1e-4) << r.worst;
}

TEST(Checkpoint, RoundTripIsBitExact) {
    const auto dir = oracle::scratch_dir("ckpt");
    const auto v = micro_vocabulary();
    const Model m(micro_model_config(v, MaskVariant::CA_FC_CNN));
    save_checkpoint(dir / "m.ckpt", m, {{"note", "x"}});
    const auto back = load_checkpoint(dir / "m.ckpt");
    EXPECT_EQ(back.meta.at("note"), "x");
    ASSERT_EQ(back.model.parameters().size(), m.parameters().size());
    for (std::size_t i = 0; i < m.parameters().size(); ++i) EXPECT_EQ(back.model.parameters().value(i), m.parameters().value(i));
    EXPECT_EQ(to_json(back.model.config()), to_json(m.config()));
    io::write_text(dir / "junk.ckpt", "not a checkpoint at all");
    EXPECT_THROW(load_checkpoint(dir / "junk.ckpt"), DataError);
    EXPECT_THROW(load_checkpoint(dir / "absent.ckpt"), DataError);
}
