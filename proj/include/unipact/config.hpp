#pragma once

#include <charconv>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "unipact/eval.hpp"

namespace unipact {

// ---------------------------------------------------------------------------
// run configuration: one plain-text key=value file with [section] headers
// drives generation, vocabulary building, training, and evaluation.
// ---------------------------------------------------------------------------

struct RunConfig {
    // [run]
    uint64_t seed = 42;

    // [cohort]
    CohortConfig cohort;

    // [vocab]
    int vocab_max_size = 8192;

    // [encoder] / [decoder]
    ModelConfig model;

    // [stage1] / [stage2]
    float stage1_lr = 3e-3f;
    int stage1_epochs = 2;
    int stage1_batch_size = 8;
    int stage1_max_steps = 0;
    float stage1_group_dropout = 0.15f;

    float stage2_lr = 5e-3f;
    int stage2_epochs = 4;
    int stage2_batch_size = 8;
    int stage2_max_steps = 0;
    float stage2_group_dropout = 0.15f;
    int lora_r = 8;
    int lora_alpha = 16;
    float lora_dropout = 0.05f;

    // [train]
    std::string modality = "full";    // full | ecg_only | ehr_only
    std::string categories = "all";   // all | one canonical category
    float val_fraction = 0.1f;

    // [eval]
    int bootstrap_b = 1000;
};

namespace detail {

inline std::string trim(const std::string& s) {
    size_t b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    size_t e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

template <typename T>
T parse_number(const std::string& key, const std::string& value) {
    T v{};
    const char* first = value.data();
    const char* last = value.data() + value.size();
    auto res = std::from_chars(first, last, v);
    if (res.ec != std::errc() || res.ptr != last)
        throw std::invalid_argument("config: key '" + key + "' has invalid value '" + value +
                                    "'");
    return v;
}

// Shortest round-trip decimal form, deterministic across runs.
template <typename T>
std::string number_to_string(T v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

}  // namespace detail

inline RunConfig parse_run_config(const std::string& text) {
    RunConfig cfg;
    using Setter = std::function<void(RunConfig&, const std::string&, const std::string&)>;
    auto f32 = [](float RunConfig::* field) {
        return [field](RunConfig& c, const std::string& k, const std::string& v) {
            c.*field = detail::parse_number<float>(k, v);
        };
    };
    auto i32 = [](int RunConfig::* field) {
        return [field](RunConfig& c, const std::string& k, const std::string& v) {
            c.*field = detail::parse_number<int>(k, v);
        };
    };
    std::map<std::string, Setter> setters;
    setters["run.seed"] = [](RunConfig& c, const std::string& k, const std::string& v) {
        c.seed = detail::parse_number<uint64_t>(k, v);
    };
    setters["cohort.n_patients"] = [](RunConfig& c, const std::string& k,
                                      const std::string& v) {
        c.cohort.n_patients = detail::parse_number<int>(k, v);
    };
    auto cohort_f32 = [](float CohortConfig::* field) {
        return [field](RunConfig& c, const std::string& k, const std::string& v) {
            c.cohort.*field = detail::parse_number<float>(k, v);
        };
    };
    setters["cohort.beta_ecg"] = cohort_f32(&CohortConfig::beta_ecg);
    setters["cohort.beta_vitals"] = cohort_f32(&CohortConfig::beta_vitals);
    setters["cohort.beta_demo"] = cohort_f32(&CohortConfig::beta_demo);
    setters["cohort.beta_bio"] = cohort_f32(&CohortConfig::beta_bio);
    setters["cohort.label_noise"] = cohort_f32(&CohortConfig::label_noise);
    setters["cohort.obs_fidelity"] = cohort_f32(&CohortConfig::obs_fidelity);
    setters["cohort.ecg_rate_jitter"] = cohort_f32(&CohortConfig::ecg_rate_jitter);
    setters["cohort.ecg_len"] = [](RunConfig& c, const std::string& k, const std::string& v) {
        c.cohort.ecg_len = detail::parse_number<int>(k, v);
    };
    setters["cohort.sample_rate"] = cohort_f32(&CohortConfig::sample_rate);
    setters["vocab.max_size"] = i32(&RunConfig::vocab_max_size);

    auto enc_i32 = [](int EncoderConfig::* field) {
        return [field](RunConfig& c, const std::string& k, const std::string& v) {
            c.model.encoder.*field = detail::parse_number<int>(k, v);
        };
    };
    setters["encoder.patch_len"] = enc_i32(&EncoderConfig::patch_len);
    setters["encoder.d_ecg"] = enc_i32(&EncoderConfig::d_ecg);
    setters["encoder.n_layers"] = enc_i32(&EncoderConfig::n_layers);
    setters["encoder.n_heads"] = enc_i32(&EncoderConfig::n_heads);
    setters["encoder.ffn_mult"] = enc_i32(&EncoderConfig::ffn_mult);
    setters["encoder.max_positions"] = enc_i32(&EncoderConfig::max_positions);

    auto dec_i32 = [](int DecoderConfig::* field) {
        return [field](RunConfig& c, const std::string& k, const std::string& v) {
            c.model.decoder.*field = detail::parse_number<int>(k, v);
        };
    };
    setters["decoder.d_llm"] = dec_i32(&DecoderConfig::d_llm);
    setters["decoder.n_layers"] = dec_i32(&DecoderConfig::n_layers);
    setters["decoder.n_heads"] = dec_i32(&DecoderConfig::n_heads);
    setters["decoder.ffn_mult"] = dec_i32(&DecoderConfig::ffn_mult);
    setters["decoder.max_positions"] = dec_i32(&DecoderConfig::max_positions);

    setters["stage1.lr"] = f32(&RunConfig::stage1_lr);
    setters["stage1.epochs"] = i32(&RunConfig::stage1_epochs);
    setters["stage1.batch_size"] = i32(&RunConfig::stage1_batch_size);
    setters["stage1.max_steps"] = i32(&RunConfig::stage1_max_steps);
    setters["stage1.group_dropout"] = f32(&RunConfig::stage1_group_dropout);
    setters["stage2.lr"] = f32(&RunConfig::stage2_lr);
    setters["stage2.epochs"] = i32(&RunConfig::stage2_epochs);
    setters["stage2.batch_size"] = i32(&RunConfig::stage2_batch_size);
    setters["stage2.max_steps"] = i32(&RunConfig::stage2_max_steps);
    setters["stage2.group_dropout"] = f32(&RunConfig::stage2_group_dropout);
    setters["stage2.lora_r"] = i32(&RunConfig::lora_r);
    setters["stage2.lora_alpha"] = i32(&RunConfig::lora_alpha);
    setters["stage2.lora_dropout"] = f32(&RunConfig::lora_dropout);

    setters["train.modality"] = [](RunConfig& c, const std::string&, const std::string& v) {
        c.modality = v;
    };
    setters["train.categories"] = [](RunConfig& c, const std::string&, const std::string& v) {
        c.categories = v;
    };
    setters["train.val_fraction"] = f32(&RunConfig::val_fraction);
    setters["eval.bootstrap_b"] = i32(&RunConfig::bootstrap_b);

    std::istringstream is(text);
    std::string line, section;
    std::vector<std::string> unknown;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        std::string t = detail::trim(line);
        if (t.empty() || t[0] == '#') continue;
        if (t.front() == '[') {
            if (t.back() != ']')
                throw std::invalid_argument("config: malformed section header at line " +
                                            std::to_string(lineno) + ": " + t);
            section = detail::trim(t.substr(1, t.size() - 2));
            continue;
        }
        size_t eq = t.find('=');
        if (eq == std::string::npos)
            throw std::invalid_argument("config: expected key=value at line " +
                                        std::to_string(lineno) + ": " + t);
        std::string key = detail::trim(t.substr(0, eq));
        std::string value = detail::trim(t.substr(eq + 1));
        std::string full = section.empty() ? key : section + "." + key;
        auto it = setters.find(full);
        if (it == setters.end()) {
            unknown.push_back(full);
            continue;
        }
        it->second(cfg, full, value);
    }
    if (!unknown.empty()) {
        std::string msg = "config: unknown key";
        if (unknown.size() > 1) msg += "s";
        msg += ":";
        for (const auto& k : unknown) msg += " " + k;
        throw std::invalid_argument(msg);
    }
    if (cfg.modality != "full" && cfg.modality != "ecg_only" && cfg.modality != "ehr_only")
        throw std::invalid_argument("config: train.modality must be full, ecg_only, or "
                                    "ehr_only (got '" + cfg.modality + "')");
    bool cat_ok = cfg.categories == "all";
    for (const auto& c : canonical_categories()) cat_ok = cat_ok || cfg.categories == c;
    if (!cat_ok)
        throw std::invalid_argument("config: train.categories must be 'all' or a canonical "
                                    "category (got '" + cfg.categories + "')");
    return cfg;
}

inline std::string serialize_run_config(const RunConfig& c) {
    std::ostringstream os;
    auto num = [](auto v) { return detail::number_to_string(v); };
    os << "[run]\n";
    os << "seed = " << num(c.seed) << "\n\n";
    os << "[cohort]\n";
    os << "n_patients = " << num(c.cohort.n_patients) << "\n";
    os << "beta_ecg = " << num(c.cohort.beta_ecg) << "\n";
    os << "beta_vitals = " << num(c.cohort.beta_vitals) << "\n";
    os << "beta_demo = " << num(c.cohort.beta_demo) << "\n";
    os << "beta_bio = " << num(c.cohort.beta_bio) << "\n";
    os << "label_noise = " << num(c.cohort.label_noise) << "\n";
    os << "obs_fidelity = " << num(c.cohort.obs_fidelity) << "\n";
    os << "ecg_rate_jitter = " << num(c.cohort.ecg_rate_jitter) << "\n";
    os << "ecg_len = " << num(c.cohort.ecg_len) << "\n";
    os << "sample_rate = " << num(c.cohort.sample_rate) << "\n\n";
    os << "[vocab]\n";
    os << "max_size = " << num(c.vocab_max_size) << "\n\n";
    os << "[encoder]\n";
    os << "patch_len = " << num(c.model.encoder.patch_len) << "\n";
    os << "d_ecg = " << num(c.model.encoder.d_ecg) << "\n";
    os << "n_layers = " << num(c.model.encoder.n_layers) << "\n";
    os << "n_heads = " << num(c.model.encoder.n_heads) << "\n";
    os << "ffn_mult = " << num(c.model.encoder.ffn_mult) << "\n";
    os << "max_positions = " << num(c.model.encoder.max_positions) << "\n\n";
    os << "[decoder]\n";
    os << "d_llm = " << num(c.model.decoder.d_llm) << "\n";
    os << "n_layers = " << num(c.model.decoder.n_layers) << "\n";
    os << "n_heads = " << num(c.model.decoder.n_heads) << "\n";
    os << "ffn_mult = " << num(c.model.decoder.ffn_mult) << "\n";
    os << "max_positions = " << num(c.model.decoder.max_positions) << "\n\n";
    os << "[stage1]\n";
    os << "lr = " << num(c.stage1_lr) << "\n";
    os << "epochs = " << num(c.stage1_epochs) << "\n";
    os << "batch_size = " << num(c.stage1_batch_size) << "\n";
    os << "max_steps = " << num(c.stage1_max_steps) << "\n";
    os << "group_dropout = " << num(c.stage1_group_dropout) << "\n\n";
    os << "[stage2]\n";
    os << "lr = " << num(c.stage2_lr) << "\n";
    os << "epochs = " << num(c.stage2_epochs) << "\n";
    os << "batch_size = " << num(c.stage2_batch_size) << "\n";
    os << "max_steps = " << num(c.stage2_max_steps) << "\n";
    os << "group_dropout = " << num(c.stage2_group_dropout) << "\n";
    os << "lora_r = " << num(c.lora_r) << "\n";
    os << "lora_alpha = " << num(c.lora_alpha) << "\n";
    os << "lora_dropout = " << num(c.lora_dropout) << "\n\n";
    os << "[train]\n";
    os << "modality = " << c.modality << "\n";
    os << "categories = " << c.categories << "\n";
    os << "val_fraction = " << num(c.val_fraction) << "\n\n";
    os << "[eval]\n";
    os << "bootstrap_b = " << num(c.bootstrap_b) << "\n";
    return os.str();
}

inline RunConfig load_run_config(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("config: cannot open " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_run_config(buf.str());
}

// UNIPACT_SEED overrides the config seed; returns a log line when applied.
inline std::optional<std::string> apply_env_seed(RunConfig& cfg) {
    const char* env = std::getenv("UNIPACT_SEED");
    if (!env || !*env) return std::nullopt;
    uint64_t v = detail::parse_number<uint64_t>("UNIPACT_SEED", env);
    uint64_t old = cfg.seed;
    cfg.seed = v;
    return "seed overridden by UNIPACT_SEED: " + std::to_string(v) + " (config had " +
           std::to_string(old) + ")";
}

// ---------------------------------------------------------------------------
// derived per-phase configs: every random phase draws from the global seed
// through a distinct tag so phases stay independent but reproducible.
// ---------------------------------------------------------------------------

inline ModelConfig model_config(const RunConfig& cfg) {
    ModelConfig mc = cfg.model;
    mc.seed = derive_seed(cfg.seed, "model-init");
    return mc;
}

inline CohortConfig cohort_config(const RunConfig& cfg) {
    CohortConfig cc = cfg.cohort;
    cc.seed = derive_seed(cfg.seed, "cohort");
    return cc;
}

inline StageConfig stage_config(const RunConfig& cfg, int stage) {
    StageConfig sc;
    sc.stage = stage;
    if (stage == 1) {
        sc.lr = cfg.stage1_lr;
        sc.epochs = cfg.stage1_epochs;
        sc.batch_size = cfg.stage1_batch_size;
        sc.max_steps = cfg.stage1_max_steps;
        sc.group_dropout = cfg.stage1_group_dropout;
        sc.seed = derive_seed(cfg.seed, "stage-1");
    } else if (stage == 2) {
        sc.lr = cfg.stage2_lr;
        sc.epochs = cfg.stage2_epochs;
        sc.batch_size = cfg.stage2_batch_size;
        sc.max_steps = cfg.stage2_max_steps;
        sc.group_dropout = cfg.stage2_group_dropout;
        sc.lora.r = cfg.lora_r;
        sc.lora.alpha = static_cast<float>(cfg.lora_alpha);
        sc.lora.dropout = cfg.lora_dropout;
        sc.seed = derive_seed(cfg.seed, "stage-2");
    } else {
        throw std::invalid_argument("stage_config: stage must be 1 or 2");
    }
    return sc;
}

inline AblationMask modality_mask(const std::string& modality) {
    AblationMask m;
    if (modality == "ecg_only") m.include_ehr = false;
    else if (modality == "ehr_only") m.include_ecg = false;
    else if (modality != "full")
        throw std::invalid_argument("unknown modality '" + modality + "'");
    return m.normalized();
}

inline EvalConfig eval_config(const RunConfig& cfg, int threads = 1) {
    EvalConfig ec;
    ec.bootstrap_b = cfg.bootstrap_b;
    ec.bootstrap_seed = derive_seed(cfg.seed, "bootstrap");
    ec.threads = threads;
    return ec;
}

}  // namespace unipact
