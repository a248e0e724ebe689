#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>

#include <json.hpp>

#include "semirest/augment.hpp"
#include "semirest/common.hpp"
#include "semirest/mixmatch.hpp"
#include "semirest/pipeline.hpp"
#include "semirest/swin.hpp"
#include "semirest/training.hpp"

namespace semirest {

struct RunConfig {
    FeatureConfig feature;
    struct Bank {
        double ratio = 0.1;
        std::uint64_t seed = 7;
        ResidualMode mode = ResidualMode::square;
    } bank;
    SwinConfig model;
    std::uint64_t model_init_seed = 42;
    struct Windows {
        std::size_t mu = 8;
        std::size_t step = 4;
    } windows;
    TrainConfig train;
    AugmentationConfig augment;
    MixMatchConfig mixmatch;
    struct Eval {
        double sigma = 4.0;
        double pro_fpr_limit = 0.3;
    } eval;
    struct Data {
        std::size_t defect_train_count = 4;
        std::size_t pretrain_steps = 300;  // semisetting without --init
    } data;
};

namespace detail {

template <typename T>
void read_into(const nlohmann::json& j, const char* key, T& dst) {
    if (!j.contains(key)) return;
    try {
        dst = j.at(key).get<T>();
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("config key '") + key + "': " + e.what());
    }
}

inline Setting parse_setting(const std::string& s) {
    if (s == "unsupervised" || s == "un") return Setting::unsupervised;
    if (s == "supervised" || s == "sup") return Setting::supervised;
    if (s == "semisupervised" || s == "semi") return Setting::semisupervised;
    throw ConfigError("unknown setting '" + s + "' (use un, sup or semi)");
}

inline ResidualMode parse_mode(const std::string& s) {
    if (s == "square") return ResidualMode::square;
    if (s == "abs") return ResidualMode::abs;
    throw ConfigError("unknown residual mode '" + s + "' (use square or abs)");
}

}  // namespace detail

// File values overlay the per-setting defaults; CLI-provided setting and seed
// override the file. A master seed fans out to the feature / bank / training
// / initialization streams.
inline RunConfig load_run_config(const std::optional<std::filesystem::path>& path,
                                 const std::optional<std::string>& cli_setting,
                                 const std::optional<std::uint64_t>& cli_seed) {
    nlohmann::json j = nlohmann::json::object();
    if (path) {
        std::ifstream in(*path);
        if (!in) throw ConfigError("cannot open config file '" + path->string() + "'");
        try {
            in >> j;
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError("config file '" + path->string() + "': " + e.what());
        }
    }

    Setting setting = Setting::unsupervised;
    if (j.contains("train") && j["train"].contains("setting"))
        setting = detail::parse_setting(j["train"]["setting"].get<std::string>());
    if (cli_setting) setting = detail::parse_setting(*cli_setting);

    RunConfig cfg;
    cfg.train = TrainConfig::defaults_for(setting);

    using detail::read_into;
    if (j.contains("feature")) {
        const auto& f = j["feature"];
        read_into(f, "d_f", cfg.feature.d_f);
        read_into(f, "seed", cfg.feature.seed);
        read_into(f, "lambda_pe", cfg.feature.lambda_pe);
        read_into(f, "smooth", cfg.feature.smooth);
        read_into(f, "rho", cfg.feature.rho);
    }
    if (j.contains("bank")) {
        const auto& b = j["bank"];
        read_into(b, "ratio", cfg.bank.ratio);
        read_into(b, "seed", cfg.bank.seed);
        if (b.contains("mode")) cfg.bank.mode = detail::parse_mode(b["mode"].get<std::string>());
    }
    if (j.contains("model")) {
        const auto& m = j["model"];
        read_into(m, "embed_dim", cfg.model.embed_dim);
        read_into(m, "blocks", cfg.model.blocks);
        read_into(m, "attn_window", cfg.model.attn_window);
        read_into(m, "heads", cfg.model.heads);
        read_into(m, "mlp_ratio", cfg.model.mlp_ratio);
        read_into(m, "init_seed", cfg.model_init_seed);
    }
    if (j.contains("windows")) {
        const auto& w = j["windows"];
        read_into(w, "mu", cfg.windows.mu);
        read_into(w, "step", cfg.windows.step);
    }
    if (j.contains("train")) {
        const auto& t = j["train"];
        read_into(t, "lr", cfg.train.lr);
        read_into(t, "p", cfg.train.p);
        read_into(t, "eps_plus", cfg.train.eps_plus);
        read_into(t, "eps_minus", cfg.train.eps_minus);
        read_into(t, "b1", cfg.train.b1);
        read_into(t, "b2", cfg.train.b2);
        read_into(t, "b3", cfg.train.b3);
        read_into(t, "weight_decay", cfg.train.weight_decay);
        read_into(t, "ema_decay", cfg.train.ema_decay);
        read_into(t, "steps", cfg.train.steps);
        read_into(t, "seed", cfg.train.seed);
        read_into(t, "dropout_alpha", cfg.train.dropout_alpha);
        if (t.contains("focal")) {
            read_into(t["focal"], "alpha", cfg.train.focal.alpha);
            read_into(t["focal"], "gamma", cfg.train.focal.gamma);
        }
    }
    cfg.train.setting = setting;
    if (j.contains("augment")) {
        const auto& a = j["augment"];
        read_into(a, "alpha1", cfg.augment.alpha1);
        read_into(a, "alpha2", cfg.augment.alpha2);
        read_into(a, "noise_log_sigma", cfg.augment.noise_log_sigma);
        read_into(a, "noise_clip", cfg.augment.noise_clip);
        if (a.contains("noise_per")) {
            const std::string np = a["noise_per"].get<std::string>();
            if (np == "element") cfg.augment.noise_per = NoisePer::element;
            else if (np == "vector") cfg.augment.noise_per = NoisePer::vector;
            else throw ConfigError("augment.noise_per must be 'element' or 'vector'");
        }
    }
    if (j.contains("mixmatch")) {
        const auto& m = j["mixmatch"];
        read_into(m, "gamma", cfg.mixmatch.gamma_sharpen);
        read_into(m, "M", cfg.mixmatch.num_aug);
        read_into(m, "lambda_u", cfg.mixmatch.lambda_u_max);
        read_into(m, "ramp_steps", cfg.mixmatch.ramp_steps);
        read_into(m, "mixup_beta", cfg.mixmatch.mixup_beta);
        read_into(m, "alpha_x", cfg.mixmatch.alpha_x);
        read_into(m, "alpha_u", cfg.mixmatch.alpha_u);
        read_into(m, "gamma_x", cfg.mixmatch.gamma_x);
        read_into(m, "gamma_u", cfg.mixmatch.gamma_u);
        read_into(m, "upsilon", cfg.mixmatch.upsilon);
        read_into(m, "dropout_alpha", cfg.mixmatch.dropout_alpha);
        if (m.contains("mix_scope")) {
            const std::string ms = m["mix_scope"].get<std::string>();
            if (ms == "batch") cfg.mixmatch.mix_scope = MixMatchConfig::MixScope::batch;
            else if (ms == "window") cfg.mixmatch.mix_scope = MixMatchConfig::MixScope::window;
            else throw ConfigError("mixmatch.mix_scope must be 'batch' or 'window'");
        }
    }
    if (j.contains("eval")) {
        read_into(j["eval"], "sigma", cfg.eval.sigma);
        read_into(j["eval"], "pro_fpr_limit", cfg.eval.pro_fpr_limit);
    }
    if (j.contains("data")) {
        read_into(j["data"], "defect_train_count", cfg.data.defect_train_count);
        read_into(j["data"], "pretrain_steps", cfg.data.pretrain_steps);
    }

    if (cli_seed) {
        cfg.feature.seed = derive_seed(*cli_seed, 11);
        cfg.bank.seed = derive_seed(*cli_seed, 12);
        cfg.train.seed = derive_seed(*cli_seed, 13);
        cfg.model_init_seed = derive_seed(*cli_seed, 14);
    }

    cfg.model.input_dim =
        static_cast<std::uint32_t>(cfg.feature.d_f * cfg.feature.rho * cfg.feature.rho);
    cfg.model.patch_size = static_cast<std::uint32_t>(cfg.feature.rho);
    cfg.model.validate();
    cfg.train.validate();
    cfg.augment.validate();
    cfg.mixmatch.validate();
    if (!(cfg.bank.ratio > 0.0) || cfg.bank.ratio > 1.0)
        throw ConfigError("bank.ratio must be in (0, 1]");
    if (cfg.windows.mu < 1 || cfg.windows.step < 1)
        throw ConfigError("windows.mu and windows.step must be >= 1");
    if (cfg.eval.sigma < 0.0) throw ConfigError("eval.sigma must be >= 0");
    return cfg;
}

}  // namespace semirest
