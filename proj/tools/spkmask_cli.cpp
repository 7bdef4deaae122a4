#include "spkmask/spkmask.hpp"

#include <CLI11.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include <cstdlib>
#include <filesystem>
#include <iostream>

using namespace spkmask;
namespace fs = std::filesystem;

namespace {

enum ExitCode { kOk = 0, kUsage = 1, kData = 2, kInternal = 3 };

void setup_logging() {
    auto logger = spdlog::stderr_color_mt("spkmask");
    logger->set_pattern("[%l] %v");
    spdlog::set_default_logger(logger);
    spdlog::set_level(spdlog::level::info);
    if (const char* lv = std::getenv("SPKMASK_LOG_LEVEL")) spdlog::set_level(spdlog::level::from_str(lv));
}

fs::path ensure_dir(const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec || !fs::is_directory(dir)) throw DataError("cannot create directory " + dir.string() + (ec ? ": " + ec.message() : ""));
    return dir;
}

int cmd_toy_corpus(const RunConfig& cfg) {
    const auto corpus = gen_toy_corpus(cfg.toy_corpus());
    const fs::path dir = ensure_dir(cfg.path("corpus"));
    const auto manifest = io::write_corpus(dir, corpus);
    spdlog::info("wrote {} utterances to {}", corpus.size(), manifest.string());
    return kOk;
}

int cmd_simulate(const RunConfig& cfg) {
    const auto corpus = io::read_corpus(cfg.path("corpus") / "corpus.jsonl");
    const auto sim = cfg.simulation();
    const auto set = build_training_set(corpus, cfg.ratio(), sim, cfg.seed());
    for (const auto& why : set.skipped) spdlog::warn("skipped {}", why);
    const Vocabulary vocab(cfg.vocabulary());
    const fs::path dir = ensure_dir(cfg.path("mixtures"));
    const auto manifest = io::write_mixtures(dir, set.examples, vocab);
    io::write_vocabulary(dir / "vocab.json", vocab);
    std::string rttm;
    for (const auto& ex : set.examples) rttm += io::rttm_lines(ex.id, reference_diarization(ex));
    io::write_text(dir / "reference.rttm", rttm);
    spdlog::info("wrote {} mixtures ({} skipped) to {}", set.examples.size(), set.skipped.size(), manifest.string());
    return kOk;
}

nlohmann::json checkpoint_meta(const Vocabulary& vocab, Scheme scheme, const TrainConfig& tc, long step) {
    return {{"vocab", vocab.to_json()}, {"scheme", to_string(scheme)}, {"lambda", tc.lambda}, {"step", step}};
}

int cmd_train(const RunConfig& cfg) {
    const fs::path mix_dir = cfg.path("mixtures");
    const auto records = io::read_mixtures(mix_dir / "mixtures.jsonl");
    if (records.empty()) throw DataError("training manifest " + (mix_dir / "mixtures.jsonl").string() + " is empty");
    const Vocabulary vocab = io::read_vocabulary(mix_dir / "vocab.json");
    const Scheme scheme = cfg.scheme();
    const FeatureConfig feat = cfg.features();
    const ModelConfig mc = cfg.model(vocab.size());
    const TrainConfig tc = cfg.train();
    const int every = cfg.checkpoint_every_steps();

    std::vector<TrainItem> items;
    for (const auto& r : records) {
        if (mask_frame_count(r.example.mixture.samples.size(), r.example.mixture.sample_rate_hz) > static_cast<std::size_t>(mc.max_frames))
            spdlog::warn("{} is longer than model.max_frames; features and masks are truncated", r.example.id);
        try {
            items.push_back(make_train_item(r.example, scheme, vocab, feat, mc));
        } catch (const std::invalid_argument& e) {
            throw DataError(r.example.id + ": " + e.what());
        } catch (const std::out_of_range& e) {
            throw DataError(r.example.id + ": " + e.what());
        }
    }

    const fs::path run = ensure_dir(cfg.path("run"));
    std::ofstream metrics(run / "metrics.jsonl");
    if (!metrics) throw DataError("cannot write " + (run / "metrics.jsonl").string());

    Model model(mc);
    spdlog::info("training {} items, {} parameters, scheme {}, lambda {}", items.size(), model.parameters().total_elements(),
                 to_string(scheme), tc.lambda);
    const auto result = train_run(model, vocab, items, tc, [&](const StepMetrics& m) {
        io::ojson j;
        j["step"] = m.step;
        j["epoch"] = m.epoch;
        j["lr"] = m.lr;
        j["asr_loss"] = m.asr_loss;
        j["mask_loss"] = m.mask_loss;
        j["combined"] = m.combined;
        j["gated"] = m.gated;
        j["skipped"] = m.skipped;
        metrics << j.dump() << "\n";
        if (m.step % 10 == 0) spdlog::debug("step {} combined {:.6f}", m.step, m.combined);
        if (every > 0 && (m.step + 1) % every == 0) {
            char name[64];
            std::snprintf(name, sizeof name, "step-%06ld.ckpt", m.step + 1);
            save_checkpoint(ensure_dir(run / "checkpoints") / name, model, checkpoint_meta(vocab, scheme, tc, m.step + 1));
        }
    });
    for (const auto& w : result.warnings) spdlog::warn("{}", w);
    save_checkpoint(run / "final.ckpt", model, checkpoint_meta(vocab, scheme, tc, result.steps));
    spdlog::info("{} steps over {} epochs, last epoch loss {:.6f}", result.steps, result.epochs_run, result.last_epoch_loss);
    return kOk;
}

// Reference outputs in hypothesis form: the scheme's label sequence and the
// binary masks, keyed by FIFO speaker index.
Hypothesis oracle_hypothesis(const io::MixtureRecord& r, Scheme scheme, const Vocabulary& vocab) {
    Hypothesis h;
    h.scheme = scheme;
    const auto it = r.labels.find(to_string(scheme));
    h.tokens = it != r.labels.end() ? it->second : build_label(r.example, scheme, vocab).tokens;
    auto parsed = parse_hypothesis(h.tokens, scheme, vocab);
    h.blocks = std::move(parsed.blocks);
    h.malformed_token_count = parsed.malformed_token_count;
    const auto order = speaker_order(r.example);
    for (std::size_t k = 0; k < order.size(); ++k) {
        MaskVector m = r.example.speaker_masks.at(order[k]);
        m.kind = MaskKind::probability;
        h.masks[static_cast<int>(k) + 1] = std::move(m);
    }
    return h;
}

int cmd_decode(const RunConfig& cfg) {
    const auto& dj = cfg.at("decode");
    const bool oracle = dj["oracle"].get<bool>();
    const DiarizationMode mode = cfg.diarization_mode();
    const double threshold = dj["mask_threshold"].get<double>(), min_dur = dj["min_segment_s"].get<double>();
    const int max_len = dj["max_len"].get<int>();
    if (max_len < 2) throw ConfigError("decode.max_len must be at least 2");

    std::optional<LoadedCheckpoint> ckpt;
    Scheme scheme = cfg.scheme();
    double lambda = cfg.train().lambda;
    std::string variant = cfg.at("model")["mask_variant"].get<std::string>();
    std::optional<Vocabulary> vocab;
    if (!oracle) {
        fs::path path = cfg.path("checkpoint");
        if (path.empty()) path = cfg.path("run") / "final.ckpt";
        if (!fs::exists(path)) throw DataError("checkpoint not found: " + path.string());
        ckpt = load_checkpoint(path);
        scheme = scheme_from_string(ckpt->meta.at("scheme").get<std::string>());
        lambda = ckpt->meta.at("lambda").get<double>();
        variant = to_string(ckpt->model.config().mask_variant);
        vocab = Vocabulary::from_json(ckpt->meta.at("vocab"));
    } else {
        vocab = io::read_vocabulary(cfg.path("mixtures") / "vocab.json");
    }
    if (mode == DiarizationMode::timestamps && !has_timestamps(scheme))
        throw ConfigError(std::string("timestamp diarization needs a timestamped scheme, got ") + to_string(scheme));

    const auto records = io::read_mixtures(cfg.path("mixtures") / "mixtures.jsonl", !oracle);
    const FeatureConfig feat = cfg.features();
    const fs::path out = ensure_dir(cfg.path("decode"));
    std::string hyps, rttm;
    for (const auto& r : records) {
        io::HypothesisRecord rec;
        rec.id = r.example.id;
        rec.lambda = lambda;
        rec.mask_variant = variant;
        rec.diarization_mode = mode == DiarizationMode::mask ? "mask" : "timestamps";
        if (oracle) {
            rec.hyp = oracle_hypothesis(r, scheme, *vocab);
        } else {
            const Model& model = ckpt->model;
            const Mat features = pad_features(log_mel(r.example.mixture, feat), model.config().feature_frames(), feat.log_floor);
            rec.hyp = decode_utterance(model, *vocab, features, scheme, max_len, mode == DiarizationMode::mask);
        }
        if (rec.hyp.malformed_token_count > 0) spdlog::warn("{}: {} malformed tokens", rec.id, rec.hyp.malformed_token_count);
        hyps += io::hypothesis_json(rec, *vocab).dump() + "\n";
        rttm += io::rttm_lines(rec.id, hypothesis_to_diarization(rec.hyp, mode, threshold, min_dur));
    }
    io::write_text(out / "hypotheses.jsonl", hyps);
    io::write_text(out / "hypothesis.rttm", rttm);
    spdlog::info("decoded {} mixtures into {}", records.size(), out.string());
    return kOk;
}

int cmd_score(const RunConfig& cfg) {
    const fs::path mix = cfg.path("mixtures"), dec = cfg.path("decode");
    const auto records = io::read_mixtures(mix / "mixtures.jsonl", false);
    const auto hyps = io::read_hypotheses(dec / "hypotheses.jsonl");
    const auto ref_rttm = io::read_rttm(mix / "reference.rttm");
    const auto hyp_rttm = io::read_rttm(dec / "hypothesis.rttm");

    io::ScoreMeta meta;
    meta.collar_s = cfg.scoring().collar_s;
    if (!hyps.empty()) {
        meta.scheme = to_string(hyps.front().hyp.scheme);
        meta.lambda = hyps.front().lambda;
        meta.mask_variant = hyps.front().mask_variant;
        meta.diarization_mode = hyps.front().diarization_mode;
    } else {
        meta.scheme = to_string(cfg.scheme());
        meta.lambda = cfg.train().lambda;
        meta.mask_variant = cfg.at("model")["mask_variant"].get<std::string>();
        meta.diarization_mode = cfg.at("decode")["diarization"].get<std::string>();
    }
    const auto report = io::score_report(records, hyps, ref_rttm, hyp_rttm, meta);
    io::write_text(dec / "report.json", report.dump(2) + "\n");

    if (cfg.at("score")["plots"].get<bool>()) {
        const fs::path plots = ensure_dir(dec / "plots");
        std::map<std::string, const io::HypothesisRecord*> by_id;
        for (const auto& h : hyps) by_id[h.id] = &h;
        for (const auto& r : records) {
            const auto it = by_id.find(r.example.id);
            const std::map<int, MaskVector> none;
            io::write_text(plots / (r.example.id + ".svg"),
                           io::mask_plot_svg(r.example.id, r.example.speaker_masks, it == by_id.end() ? none : it->second->hyp.masks));
        }
    }
    const auto& c = report["corpus"];
    std::cout << "utterances " << c["utterances"].get<std::size_t>() << "  cpWER " << io::fixed(100.0 * c["cp_wer"]["wer"].get<double>(), 2)
              << "%  DER " << (c["der"]["der"].is_null() ? std::string("n/a") : io::fixed(100.0 * c["der"]["der"].get<double>(), 2) + "%")
              << "  SCA " << io::fixed(c["sca_percent"].get<double>(), 2) << "%\n";
    return kOk;
}

} // namespace

int main(int argc, char** argv) {
    setup_logging();
    CLI::App app{"Speaker-mask multi-talker ASR and diarization toolkit"};
    app.require_subcommand(0, 1);
    app.fallthrough();
    std::string config_file;
    std::vector<std::string> overrides;
    bool print_config = false;
    app.add_option("-c,--config", config_file, "JSON config file");
    app.add_option("--set", overrides, "Override one config value: key.path=value (repeatable)")->take_all();
    app.add_flag("--print-config", print_config, "Print the merged config and exit");

    std::map<std::string, int (*)(const RunConfig&)> commands = {
        {"toy-corpus", cmd_toy_corpus}, {"simulate", cmd_simulate}, {"train", cmd_train}, {"decode", cmd_decode}, {"score", cmd_score}};
    const std::map<std::string, std::string> help = {
        {"toy-corpus", "Generate the synthetic corpus (manifest + WAVs)"},
        {"simulate", "Build overlapped mixtures, masks, labels and reference RTTM"},
        {"train", "Train a model; writes metrics JSONL and checkpoints"},
        {"decode", "Greedy-decode mixtures; writes hypotheses JSONL and RTTM"},
        {"score", "Score hypotheses; writes report JSON"}};
    for (const auto& [name, fn] : commands) app.add_subcommand(name, help.at(name));

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? kOk : kUsage;
    }

    RunConfig cfg;
    try {
        if (!config_file.empty()) cfg.merge_file(config_file);
        for (const auto& o : overrides) cfg.set(o);
        if (print_config) {
            std::cout << cfg.tree().dump(2) << "\n";
            return kOk;
        }
        const auto chosen = app.get_subcommands();
        if (chosen.empty()) {
            std::cerr << app.help();
            return kUsage;
        }
        return commands.at(chosen.front()->get_name())(cfg);
    } catch (const ConfigError& e) {
        spdlog::error("config: {}", e.what());
        return kUsage;
    } catch (const DataError& e) {
        spdlog::error("data: {}", e.what());
        return kData;
    } catch (const std::invalid_argument& e) {
        spdlog::error("data: {}", e.what());
        return kData;
    } catch (const std::out_of_range& e) {
        spdlog::error("data: {}", e.what());
        return kData;
    } catch (const std::exception& e) {
        spdlog::error("internal: {}", e.what());
        return kInternal;
    }
}
