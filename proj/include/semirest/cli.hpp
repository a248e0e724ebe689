#pragma once

#include <atomic>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "semirest/config.hpp"
#include "semirest/dataset.hpp"
#include "semirest/metrics.hpp"
#include "semirest/mixmatch.hpp"

namespace semirest {

// ---------------------------------------------------------------------------
// Logging (SEMIREST_LOG = error | info | debug)
// ---------------------------------------------------------------------------

enum class LogLevel { error = 0, info = 1, debug = 2 };

inline LogLevel log_level() {
    static const LogLevel lvl = [] {
        const char* env = std::getenv("SEMIREST_LOG");
        if (!env) return LogLevel::info;
        const std::string s(env);
        if (s == "debug") return LogLevel::debug;
        if (s == "error") return LogLevel::error;
        return LogLevel::info;
    }();
    return lvl;
}

inline void log_info(const std::string& msg) {
    if (log_level() >= LogLevel::info) std::fprintf(stderr, "[semirest] %s\n", msg.c_str());
}

inline void log_error(const std::string& msg) {
    std::fprintf(stderr, "[semirest] error: %s\n", msg.c_str());
}

// ---------------------------------------------------------------------------
// Run manifest
// ---------------------------------------------------------------------------

struct RunManifest {
    std::string command;
    std::string config_path;
    std::string dataset_root;
    std::string out_dir;
    std::uint64_t seed = 0;
    std::string setting;
};

inline void write_manifest(const RunManifest& m, const std::filesystem::path& dir) {
    nlohmann::json j;
    j["command"] = m.command;
    j["config"] = m.config_path;
    j["dataset"] = m.dataset_root;
    j["out"] = m.out_dir;
    j["seed"] = m.seed;
    j["setting"] = m.setting;
    io::spill(dir / "manifest.json", j.dump(2) + "\n");
}

inline void ensure_out_dir(const std::filesystem::path& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw DataError("cannot create output directory '" + dir.string() + "'");
}

// ---------------------------------------------------------------------------
// Commands (library-level; the binary wires them to CLI11 subcommands)
// ---------------------------------------------------------------------------

inline void cmd_synth(const std::filesystem::path& out_dir, const SynthDatasetConfig& cfg,
                      const RunManifest& manifest) {
    ensure_out_dir(out_dir);
    write_manifest(manifest, out_dir);
    generate_synthetic_dataset(out_dir, cfg);
    log_info("synth: wrote dataset under " + out_dir.string());
}

inline MemoryBank build_bank_from_dataset(const std::filesystem::path& data_root,
                                          const RunConfig& cfg) {
    const DatasetLayout layout{data_root};
    const std::vector<std::filesystem::path> images = list_images(layout.train_normal());
    if (images.empty())
        throw ConfigError("build-bank: no training images under " +
                          layout.train_normal().string());
    std::vector<std::vector<float>> features;
    for (const auto& path : images) {
        const PcfMap pcf = image_to_pcf(read_ppm(path), cfg.feature, path.stem().string());
        const std::size_t h = pcf.tensor.extent(0), w = pcf.tensor.extent(1);
        for (std::size_t r = 0; r < h; ++r)
            for (std::size_t c = 0; c < w; ++c) {
                const auto v = pcf.tensor.vec3(r, c);
                features.emplace_back(v.begin(), v.end());
            }
    }
    log_info("build-bank: " + std::to_string(features.size()) + " PCFs from " +
             std::to_string(images.size()) + " images");
    return coreset_subsample(features, cfg.bank.ratio, cfg.bank.seed);
}

inline void cmd_build_bank(const std::filesystem::path& data_root,
                           const std::filesystem::path& out_bank, const RunConfig& cfg) {
    const MemoryBank bank = build_bank_from_dataset(data_root, cfg);
    if (out_bank.has_parent_path()) ensure_out_dir(out_bank.parent_path());
    write_bank(bank, out_bank);
    log_info("build-bank: " + std::to_string(bank.size()) + " entries -> " + out_bank.string());
}

inline TrainingImage load_training_image(const std::filesystem::path& path,
                                         const MemoryBank& bank, const RunConfig& cfg) {
    TrainingImage img;
    img.id = path.stem().string();
    img.image = read_ppm(path);
    const PcfMap pcf = image_to_pcf(img.image, cfg.feature, img.id);
    img.knn3 = compute_knn3(pcf, bank);
    const std::size_t ht = pcf.tensor.extent(0) / cfg.feature.rho;
    const std::size_t wt = pcf.tensor.extent(1) / cfg.feature.rho;
    img.labels.h = ht;
    img.labels.w = wt;
    img.labels.block_h = img.image.extent(0) / ht;
    img.labels.block_w = img.image.extent(1) / wt;
    img.labels.map.assign(ht * wt, kLabelNormal);
    return img;
}

inline TrainingSet load_training_set(const std::filesystem::path& data_root,
                                     const MemoryBank& bank, const RunConfig& cfg) {
    const DatasetLayout layout{data_root};
    TrainingSet set;
    const std::vector<std::filesystem::path> normals = list_images(layout.train_normal());
    if (normals.empty())
        throw ConfigError("train: no training images under " + layout.train_normal().string());
    for (const auto& path : normals)
        set.normals.push_back(load_training_image(path, bank, cfg));

    if (cfg.train.setting == Setting::unsupervised) return set;

    const std::vector<std::filesystem::path> defects = list_images(layout.test_defect());
    if (defects.empty())
        throw ConfigError("train: setting needs defective images under " +
                          layout.test_defect().string());
    if (cfg.train.setting == Setting::semisupervised &&
        !std::filesystem::exists(layout.boxes()))
        throw ConfigError("train: semisupervised setting needs a boxes/ directory");

    const std::size_t take = std::min(cfg.data.defect_train_count, defects.size());
    for (std::size_t i = 0; i < take; ++i) {
        TrainingImage img = load_training_image(defects[i], bank, cfg);
        if (cfg.train.setting == Setting::supervised) {
            const PixelLabelMap mask =
                read_pixel_labels(layout.masks() / (img.id + ".srlb"));
            img.labels = blocks_from_pixels(mask, img.labels.block_h, img.labels.block_w,
                                            cfg.train.eps_plus, cfg.train.eps_minus);
        } else {
            const std::vector<BoundingBox> boxes =
                read_boxes(layout.boxes() / (img.id + ".txt"));
            img.labels =
                blocks_from_boxes(boxes, img.image.extent(0), img.image.extent(1),
                                  img.labels.block_h, img.labels.block_w, cfg.mixmatch.upsilon);
        }
        set.defects.push_back(std::move(img));
    }
    return set;
}

inline void write_train_log(const std::vector<TrainLogEntry>& log,
                            const std::filesystem::path& path) {
    std::string out = "step,loss,lr,windows\n";
    char buf[128];
    for (const TrainLogEntry& e : log) {
        std::snprintf(buf, sizeof(buf), "%zu,%.17g,%.9g,%zu\n", e.step, e.loss, e.lr, e.windows);
        out += buf;
    }
    io::spill(path, out);
}

inline void cmd_train(const std::filesystem::path& data_root,
                      const std::filesystem::path& bank_path,
                      const std::filesystem::path& out_dir, const RunConfig& cfg,
                      const std::optional<std::filesystem::path>& init_ckpt,
                      const RunManifest& manifest) {
    ensure_out_dir(out_dir);
    write_manifest(manifest, out_dir);
    const MemoryBank bank = read_bank(bank_path);
    const TrainingSet data = load_training_set(data_root, bank, cfg);

    TrainContext ctx;
    ctx.bank = &bank;
    ctx.feature = cfg.feature;
    ctx.augment = cfg.augment;
    ctx.mode = cfg.bank.mode;
    ctx.mu = cfg.windows.mu;
    ctx.window_step = cfg.windows.step;

    std::vector<TrainLogEntry> log;
    TrainState state;
    if (cfg.train.setting == Setting::semisupervised) {
        TrainState pretrained;
        if (init_ckpt) {
            const Checkpoint ck = read_checkpoint(*init_ckpt);
            if (!(ck.model.config == cfg.model))
                throw ConfigError("train: --init checkpoint hyperparameters do not match");
            pretrained.model = ck.model;
            pretrained.ema = ck.ema;
            pretrained.moment1.assign(ck.model.params.size(), 0.0f);
            pretrained.moment2.assign(ck.model.params.size(), 0.0f);
            log_info("train: fine-tuning from " + init_ckpt->string());
        } else {
            TrainConfig pre = TrainConfig::defaults_for(Setting::unsupervised);
            pre.steps = cfg.data.pretrain_steps;
            pre.seed = derive_seed(cfg.train.seed, 0xbead);
            std::vector<TrainLogEntry> pre_log;
            pretrained = train(data, ctx, pre, cfg.model, cfg.model_init_seed, &pre_log);
            write_train_log(pre_log, out_dir / "pretrain_log.csv");
            log_info("train: unsupervised pretraining done (" +
                     std::to_string(pre.steps) + " steps)");
        }
        state = finetune_semi(data, ctx, cfg.train, cfg.mixmatch, pretrained, &log);
    } else {
        state = train(data, ctx, cfg.train, cfg.model, cfg.model_init_seed, &log);
    }

    write_checkpoint({state.model, state.ema}, out_dir / "checkpoint.srmd");
    write_train_log(log, out_dir / "train_log.csv");
    log_info("train: wrote " + (out_dir / "checkpoint.srmd").string());
}

// features -> PCF -> PCR -> tokens -> bagged block map -> pixel score map
inline Tensor infer_score_map(const Tensor& image, const SwinModel<float>& model,
                              const MemoryBank& bank, const RunConfig& cfg,
                              const std::string& id) {
    const PcfMap pcf = image_to_pcf(image, cfg.feature, id);
    const TokenTensor tokens = pcr_tokens(pcf, bank, cfg.bank.mode, cfg.feature.rho);
    const std::size_t ht = tokens.tensor.extent(0), wt = tokens.tensor.extent(1);
    const std::size_t mu = std::min({cfg.windows.mu, ht, wt});
    const Tensor theta = bag_predict(model, tokens, mu, cfg.windows.step);
    return postprocess_map(theta, image.extent(0), image.extent(1), cfg.eval.sigma);
}

inline void cmd_infer(const std::filesystem::path& ckpt_path,
                      const std::filesystem::path& bank_path,
                      const std::vector<std::filesystem::path>& image_dirs,
                      const std::filesystem::path& out_dir, const RunConfig& cfg, int threads,
                      const RunManifest& manifest) {
    ensure_out_dir(out_dir);
    write_manifest(manifest, out_dir);
    const Checkpoint ckpt = read_checkpoint(ckpt_path);
    const MemoryBank bank = read_bank(bank_path);

    // evaluation always runs on the EMA parameters
    SwinModel<float> model;
    model.config = ckpt.model.config;
    model.params = ckpt.ema;

    std::vector<std::filesystem::path> images;
    for (const auto& dir : image_dirs) {
        const auto batch = list_images(dir);
        images.insert(images.end(), batch.begin(), batch.end());
    }
    if (images.empty()) throw DataError("infer: no .ppm images in the given directories");

    std::vector<Tensor> scores(images.size());
    std::atomic<std::size_t> next{0};
    auto worker = [&]() {
        for (;;) {
            const std::size_t i = next.fetch_add(1);
            if (i >= images.size()) break;
            const Tensor image = read_ppm(images[i]);
            scores[i] = infer_score_map(image, model, bank, cfg, images[i].stem().string());
        }
    };
    const int nthreads = std::max(1, threads);
    if (nthreads == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (int t = 0; t < nthreads; ++t) pool.emplace_back(worker);
        for (auto& th : pool) th.join();
    }

    for (std::size_t i = 0; i < images.size(); ++i) {
        const std::string stem = images[i].stem().string();
        Tensor as3({scores[i].extent(0), scores[i].extent(1), 1}, scores[i].data);
        write_srft(out_dir / (stem + ".srft"), as3,
                   static_cast<std::uint32_t>(scores[i].extent(0)),
                   static_cast<std::uint32_t>(scores[i].extent(1)));
        write_pgm(out_dir / (stem + ".pgm"), scores[i]);
    }
    log_info("infer: wrote " + std::to_string(images.size()) + " score maps to " +
             out_dir.string());
}

inline void cmd_eval(const std::filesystem::path& scores_dir,
                     const std::filesystem::path& truths_dir,
                     const std::filesystem::path& out_csv, const RunConfig& cfg,
                     const std::string& category = "all") {
    std::vector<std::filesystem::path> score_files;
    for (const auto& entry : std::filesystem::directory_iterator(scores_dir))
        if (entry.is_regular_file() && entry.path().extension() == ".srft")
            score_files.push_back(entry.path());
    std::sort(score_files.begin(), score_files.end());
    if (score_files.empty())
        throw DataError("eval: no .srft score maps under " + scores_dir.string());

    std::vector<std::string> missing;
    std::vector<Tensor> scores;
    std::vector<PixelLabelMap> truths;
    std::vector<std::string> ids;
    for (const auto& sf : score_files) {
        const std::string stem = sf.stem().string();
        const std::filesystem::path tf = truths_dir / (stem + ".srlb");
        if (!std::filesystem::exists(tf)) {
            missing.push_back(stem);
            continue;
        }
        const FloatGrid grid = read_srft(sf);
        if (grid.tensor.extent(2) != 1)
            throw DataError("eval: score map '" + sf.string() + "' must have one channel");
        Tensor map({grid.tensor.extent(0), grid.tensor.extent(1)}, grid.tensor.data);
        scores.push_back(std::move(map));
        truths.push_back(read_pixel_labels(tf));
        ids.push_back(stem);
    }
    for (const auto& entry : std::filesystem::directory_iterator(truths_dir))
        if (entry.is_regular_file() && entry.path().extension() == ".srlb" &&
            !std::filesystem::exists(scores_dir / (entry.path().stem().string() + ".srft")))
            missing.push_back(entry.path().stem().string());
    if (!missing.empty()) {
        std::sort(missing.begin(), missing.end());
        std::string names;
        for (const auto& m : missing) names += (names.empty() ? "" : ", ") + m;
        throw DataError("eval: unmatched score/truth files: " + names);
    }

    bool constant = true;
    const float first_score = scores.front().data.front();
    for (const auto& s : scores) {
        for (float v : s.data)
            if (v != first_score) {
                constant = false;
                break;
            }
        if (!constant) break;
    }
    if (constant)
        log_error("eval: score maps are constant; AP and PRO are degenerate (AUROC = 0.5)");

    const MetricReport report = evaluate_maps(scores, truths, ids, cfg.eval.pro_fpr_limit);

    std::string out = "category,ap,pro,pixel_auroc\n";
    char buf[256];
    std::snprintf(buf, sizeof(buf), "%s,%.9g,%.9g,%.9g\n", category.c_str(), report.ap,
                  report.pro, report.pixel_auroc);
    out += buf;
    for (const PerImageMetrics& m : report.per_image) {
        if (m.degenerate)
            std::snprintf(buf, sizeof(buf), "img:%s,nan,nan,nan\n", m.id.c_str());
        else
            std::snprintf(buf, sizeof(buf), "img:%s,%.9g,%.9g,%.9g\n", m.id.c_str(), m.ap, m.pro,
                          m.auroc);
        out += buf;
    }
    if (out_csv.has_parent_path()) ensure_out_dir(out_csv.parent_path());
    io::spill(out_csv, out);
    std::snprintf(buf, sizeof(buf), "eval: ap=%.4f pro=%.4f pixel_auroc=%.4f", report.ap,
                  report.pro, report.pixel_auroc);
    log_info(buf);
}

// exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
inline int map_exception_to_exit_code() {
    try {
        throw;
    } catch (const ConfigError& e) {
        log_error(e.what());
        return 2;
    } catch (const ArgumentError& e) {
        log_error(e.what());
        return 2;
    } catch (const NumericalError& e) {
        log_error(e.what());
        return 4;
    } catch (const Error& e) {  // data, decode, undefined-metric, state
        log_error(e.what());
        return 3;
    } catch (const std::exception& e) {
        log_error(e.what());
        return 3;
    }
}

}  // namespace semirest
