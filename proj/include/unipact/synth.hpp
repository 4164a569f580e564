#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "unipact/common.hpp"
#include "unipact/ecg.hpp"
#include "unipact/ehr.hpp"
#include "unipact/metrics.hpp"

namespace unipact {

using ordered_json = nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// task registry
// ---------------------------------------------------------------------------

struct TaskSpec {
    std::string id;
    std::string category;  // diagnosis | deterioration | icu | mortality
    std::string question;
    float beta_ecg = 0.0f;
    float beta_vitals = 0.0f;
    float beta_demo = 0.0f;
    float beta_bio = 0.0f;
};

// Fixed salt so per-task effect sizes depend only on the task id, never on
// the cohort seed: train and eval cohorts generated with different seeds
// share identical task definitions.
inline constexpr uint64_t kTaskRegistrySalt = 0x7461736b5245471bULL;

// 12 diagnosis, 6 deterioration, 2 ICU, 7 mortality sub-tasks. Per-task
// effect sizes are the base values jittered by a deterministic +-15%
// multiplier so tasks are related but not identical.
inline std::vector<TaskSpec> default_task_registry(float beta_ecg, float beta_vitals,
                                                   float beta_demo, float beta_bio) {
    struct Entry {
        const char* id;
        const char* category;
        const char* question;
    };
    static const Entry entries[] = {
        {"dx-afib", "diagnosis", "Does the patient have atrial fibrillation"},
        {"dx-ischemia", "diagnosis", "Does the patient have myocardial ischemia"},
        {"dx-lvh", "diagnosis", "Does the patient have left ventricular hypertrophy"},
        {"dx-heart-failure", "diagnosis", "Does the patient have decompensated heart failure"},
        {"dx-sepsis", "diagnosis", "Does the patient have sepsis"},
        {"dx-pneumonia", "diagnosis", "Does the patient have pneumonia"},
        {"dx-aki", "diagnosis", "Does the patient have acute kidney injury"},
        {"dx-copd-exacerbation", "diagnosis",
         "Does the patient have an acute exacerbation of COPD"},
        {"dx-ventricular-arrhythmia", "diagnosis",
         "Does the patient have a ventricular arrhythmia"},
        {"dx-valvular-disease", "diagnosis", "Does the patient have significant valvular disease"},
        {"dx-myocarditis", "diagnosis", "Does the patient have myocarditis"},
        {"dx-pulmonary-embolism", "diagnosis", "Does the patient have a pulmonary embolism"},
        {"det-severe-hypoxemia", "deterioration",
         "Will the patient experience severe hypoxemia within 24 hours"},
        {"det-hypotension", "deterioration",
         "Will the patient experience sustained hypotension within 24 hours"},
        {"det-tachyarrhythmia", "deterioration",
         "Will the patient experience a tachyarrhythmia within 24 hours"},
        {"det-respiratory-failure", "deterioration",
         "Will the patient experience respiratory failure within 24 hours"},
        {"det-shock", "deterioration", "Will the patient develop circulatory shock within 24 hours"},
        {"det-cardiac-arrest", "deterioration",
         "Will the patient experience cardiac arrest within 24 hours"},
        {"icu-admission", "icu", "Will the patient require ICU admission within 48 hours"},
        {"icu-prolonged-stay", "icu",
         "Will the patient require an ICU stay longer than 7 days"},
        {"mort-24h", "mortality", "Will the patient die within 24 hours"},
        {"mort-48h", "mortality", "Will the patient die within 48 hours"},
        {"mort-72h", "mortality", "Will the patient die within 72 hours"},
        {"mort-7d", "mortality", "Will the patient die within 7 days"},
        {"mort-14d", "mortality", "Will the patient die within 14 days"},
        {"mort-28d", "mortality", "Will the patient die within 28 days"},
        {"mort-90d", "mortality", "Will the patient die within 90 days"},
    };
    std::vector<TaskSpec> tasks;
    for (const auto& e : entries) {
        Rng rng(derive_seed(kTaskRegistrySalt, e.id));
        auto jitter = [&] { return 1.0f + 0.15f * (2.0f * rng.uniform_f() - 1.0f); };
        TaskSpec t;
        t.id = e.id;
        t.category = e.category;
        t.question = e.question;
        t.beta_ecg = beta_ecg * jitter();
        t.beta_vitals = beta_vitals * jitter();
        t.beta_demo = beta_demo * jitter();
        t.beta_bio = beta_bio * jitter();
        tasks.push_back(t);
    }
    return tasks;
}

// ---------------------------------------------------------------------------
// cohort config and patients
// ---------------------------------------------------------------------------

struct CohortConfig {
    int n_patients = 200;
    float beta_ecg = 1.0f;
    float beta_vitals = 1.0f;
    float beta_demo = 0.5f;
    float beta_bio = 0.5f;
    float label_noise = 0.1f;  // epsilon
    float obs_fidelity = 0.95f;
    // The waveform's beat rate is drawn around the recorded heartrate with
    // this much spread (bpm): the two stay genuinely coupled, but the vitals
    // text keeps exclusive value over what the waveform reveals.
    float ecg_rate_jitter = 15.0f;
    uint64_t seed = 42;
    int ecg_len = 1000;  // L
    float sample_rate = 100.0f;
    std::vector<TaskSpec> tasks;  // filled with the default registry when empty

    std::vector<TaskSpec> effective_tasks() const {
        return tasks.empty() ? default_task_registry(beta_ecg, beta_vitals, beta_demo, beta_bio)
                             : tasks;
    }
};

struct Patient {
    int id = 0;
    EhrRecord ehr;
    EcgSignal ecg;
    float z_ecg = 0.0f, z_vitals = 0.0f, z_demo = 0.0f, z_bio = 0.0f;
    std::map<std::string, int> labels;
};

namespace detail {

inline float clipf(float v, float lo, float hi) { return std::min(hi, std::max(lo, v)); }

// Quasi-periodic 12-lead trace: narrow sinus-like spikes at the strip's beat
// rate plus a later, wider bump whose amplitude carries the ECG-only latent,
// plus white noise.
inline Tensor synth_waveform(int L, float sample_rate, float heartrate_bpm, float z_ecg,
                             Rng& rng) {
    static const float kQrsScale[kEcgLeads] = {1.00f, 0.85f, 0.70f, -0.45f, 0.55f, 0.90f,
                                               0.65f, 1.10f, 0.95f, 0.75f,  0.60f, 0.80f};
    static const float kTwaveScale[kEcgLeads] = {0.60f, 0.75f, 0.50f, 0.35f, -0.40f, 0.55f,
                                                 0.70f, 0.45f, 0.65f, 0.50f, 0.60f,  0.40f};
    float period = sample_rate * 60.0f / heartrate_bpm;  // samples per beat
    float phase = static_cast<float>(rng.uniform(0.0, period));
    float qrs_width = 0.012f * sample_rate;
    float t_width = 0.10f * period;
    float t_offset = 0.35f * period;
    float t_amp = 0.2f + 0.9f * static_cast<float>(logistic(z_ecg));

    std::vector<float> qrs(static_cast<size_t>(L), 0.0f), twave(static_cast<size_t>(L), 0.0f);
    for (float center = phase - period; center < static_cast<float>(L) + period;
         center += period) {
        auto add_bump = [&](std::vector<float>& dst, float c, float w) {
            int lo = std::max(0, static_cast<int>(std::floor(c - 4.0f * w)));
            int hi = std::min(L - 1, static_cast<int>(std::ceil(c + 4.0f * w)));
            for (int t = lo; t <= hi; ++t) {
                float u = (static_cast<float>(t) - c) / w;
                dst[static_cast<size_t>(t)] += std::exp(-0.5f * u * u);
            }
        };
        add_bump(qrs, center, qrs_width);
        add_bump(twave, center + t_offset, t_width);
    }
    Tensor out = Tensor::zeros({L, kEcgLeads});
    float* dst = out.data().data();
    for (int t = 0; t < L; ++t)
        for (int c = 0; c < kEcgLeads; ++c)
            dst[t * kEcgLeads + c] = 1.2f * kQrsScale[c] * qrs[static_cast<size_t>(t)] +
                                     t_amp * kTwaveScale[c] * twave[static_cast<size_t>(t)] +
                                     0.05f * rng.normal_f();
    return out;
}

}  // namespace detail

inline void validate(const CohortConfig& cfg) {
    if (cfg.n_patients < 0) throw std::invalid_argument("cohort: n_patients must be >= 0");
    if (!(cfg.label_noise >= 0.0f && cfg.label_noise < 0.5f))
        throw std::invalid_argument("cohort: label_noise must be in [0, 0.5)");
    for (float b : {cfg.beta_ecg, cfg.beta_vitals, cfg.beta_demo, cfg.beta_bio})
        if (!std::isfinite(b)) throw std::invalid_argument("cohort: effect sizes must be finite");
    if (!(cfg.ecg_rate_jitter >= 0.0f) || !std::isfinite(cfg.ecg_rate_jitter))
        throw std::invalid_argument("cohort: ecg_rate_jitter must be finite and >= 0");
    if (cfg.ecg_len <= 0) throw std::invalid_argument("cohort: ecg_len must be positive");
    std::map<std::string, int> cat_counts;
    for (const auto& t : cfg.effective_tasks()) ++cat_counts[t.category];
    for (const auto& c : canonical_categories())
        if (cat_counts[c] == 0)
            throw std::invalid_argument("cohort: task registry has no '" + c + "' tasks");
}

// Labels come from the latents, not from the rendered features, so feature
// noise caps achievable AUROC below the latent oracle's ceiling.
inline std::vector<Patient> generate_cohort(const CohortConfig& cfg) {
    validate(cfg);
    std::vector<TaskSpec> tasks = cfg.effective_tasks();
    static const char* kRaces[] = {"white", "black African American", "asian", "hispanic",
                                   "other"};
    static const char* kSexes[] = {"female", "male"};

    std::vector<Patient> cohort;
    cohort.reserve(static_cast<size_t>(cfg.n_patients));
    float rho = cfg.obs_fidelity;
    float noise_w = std::sqrt(std::max(0.0f, 1.0f - rho * rho));
    for (int i = 0; i < cfg.n_patients; ++i) {
        uint64_t sp = derive_seed(cfg.seed, "patient-" + std::to_string(i));
        Patient p;
        p.id = i;

        Rng lat(derive_seed(sp, "latents"));
        p.z_ecg = lat.normal_f();
        p.z_vitals = lat.normal_f();
        p.z_demo = lat.normal_f();
        p.z_bio = lat.normal_f();

        Rng erng(derive_seed(sp, "ehr"));
        auto mix = [&](float z) { return rho * z + noise_w * erng.normal_f(); };
        auto& r = p.ehr;
        r.age = detail::clipf(55.0f + 15.0f * mix(p.z_demo), 18.0f, 95.0f);
        r.race = kRaces[erng.uniform_int(5)];
        r.sex = kSexes[erng.uniform_int(2)];
        r.bmi = detail::clipf(27.0f + 6.0f * mix(p.z_bio), 12.0f, 60.0f);
        r.weight = detail::clipf(80.0f + 18.0f * mix(p.z_bio), 35.0f, 200.0f);
        r.height = detail::clipf(167.0f + 12.0f * erng.normal_f(), 120.0f, 210.0f);
        r.temperature = detail::clipf(36.8f + 0.8f * mix(p.z_vitals), 34.0f, 42.0f);
        r.heartrate = detail::clipf(85.0f + 22.0f * mix(p.z_vitals), 40.0f, 180.0f);
        r.resprate = detail::clipf(17.0f + 5.0f * mix(p.z_vitals), 6.0f, 40.0f);
        r.o2sat = detail::clipf(96.0f - 3.5f * mix(p.z_vitals), 70.0f, 100.0f);
        r.sbp = detail::clipf(125.0f + 25.0f * mix(p.z_vitals), 70.0f, 220.0f);
        r.dbp = detail::clipf(75.0f + 15.0f * mix(p.z_vitals), 35.0f, 130.0f);
        r.pain = detail::clipf(4.0f + 2.2f * mix(p.z_vitals), 0.0f, 10.0f);

        Rng wrng(derive_seed(sp, "ecg"));
        float strip_rate = detail::clipf(*r.heartrate + cfg.ecg_rate_jitter * wrng.normal_f(),
                                         40.0f, 180.0f);
        p.ecg.sample_rate = cfg.sample_rate;
        p.ecg.samples =
            detail::synth_waveform(cfg.ecg_len, cfg.sample_rate, strip_rate, p.z_ecg, wrng);

        Rng lrng(derive_seed(sp, "labels"));
        for (const auto& t : tasks) {
            double logit = static_cast<double>(t.beta_ecg) * p.z_ecg +
                           static_cast<double>(t.beta_vitals) * p.z_vitals +
                           static_cast<double>(t.beta_demo) * p.z_demo +
                           static_cast<double>(t.beta_bio) * p.z_bio;
            int y = lrng.bernoulli(logistic(logit)) ? 1 : 0;
            if (lrng.bernoulli(cfg.label_noise)) y ^= 1;
            p.labels[t.id] = y;
        }
        cohort.push_back(std::move(p));
    }
    return cohort;
}

// ---------------------------------------------------------------------------
// latent oracle
// ---------------------------------------------------------------------------

struct ModalitySubset {
    bool ecg = false;
    bool vitals = false;
    bool demo = false;
    bool bio = false;

    static ModalitySubset all() { return {true, true, true, true}; }
};

// AUROC of the true per-task logit restricted to the given modalities
// (excluded latents contribute zero). This is the ceiling any model can
// approach with those inputs.
inline double bayes_oracle_auroc(const std::vector<Patient>& cohort, const TaskSpec& task,
                                 const ModalitySubset& subset) {
    ScoredSet s;
    for (const auto& p : cohort) {
        auto it = p.labels.find(task.id);
        if (it == p.labels.end())
            throw std::invalid_argument("oracle: cohort has no labels for task '" + task.id +
                                        "'");
        double score = 0.0;
        if (subset.ecg) score += static_cast<double>(task.beta_ecg) * p.z_ecg;
        if (subset.vitals) score += static_cast<double>(task.beta_vitals) * p.z_vitals;
        if (subset.demo) score += static_cast<double>(task.beta_demo) * p.z_demo;
        if (subset.bio) score += static_cast<double>(task.beta_bio) * p.z_bio;
        s.scores.push_back(static_cast<float>(score));
        s.labels.push_back(it->second);
    }
    return auroc(s);
}

inline double bayes_oracle_auroc(const std::vector<Patient>& cohort,
                                 const std::vector<TaskSpec>& tasks, const std::string& task_id,
                                 const ModalitySubset& subset) {
    for (const auto& t : tasks)
        if (t.id == task_id) return bayes_oracle_auroc(cohort, t, subset);
    throw std::invalid_argument("oracle: unknown task '" + task_id + "'");
}

// ---------------------------------------------------------------------------
// serialization
// ---------------------------------------------------------------------------

namespace detail {

inline ordered_json ehr_to_json(const EhrRecord& r) {
    ordered_json j = ordered_json::object();
    auto put_num = [&](const char* key, const std::optional<float>& v) {
        if (v) j[key] = *v;
    };
    put_num("age", r.age);
    if (r.race) j["race"] = *r.race;
    if (r.sex) j["sex"] = *r.sex;
    put_num("bmi", r.bmi);
    put_num("weight", r.weight);
    put_num("height", r.height);
    put_num("temperature", r.temperature);
    put_num("heartrate", r.heartrate);
    put_num("resprate", r.resprate);
    put_num("o2sat", r.o2sat);
    put_num("sbp", r.sbp);
    put_num("dbp", r.dbp);
    put_num("pain", r.pain);
    return j;
}

inline EhrRecord ehr_from_json(const ordered_json& j) {
    EhrRecord r;
    auto get_num = [&](const char* key, std::optional<float>& v) {
        if (j.contains(key)) v = j.at(key).get<float>();
    };
    get_num("age", r.age);
    if (j.contains("race")) r.race = j.at("race").get<std::string>();
    if (j.contains("sex")) r.sex = j.at("sex").get<std::string>();
    get_num("bmi", r.bmi);
    get_num("weight", r.weight);
    get_num("height", r.height);
    get_num("temperature", r.temperature);
    get_num("heartrate", r.heartrate);
    get_num("resprate", r.resprate);
    get_num("o2sat", r.o2sat);
    get_num("sbp", r.sbp);
    get_num("dbp", r.dbp);
    get_num("pain", r.pain);
    return r;
}

inline std::string patient_ecg_name(int id) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "p%06d.upct", id);
    return std::string("ecg/") + buf;
}

}  // namespace detail

// Dataset directory layout:
//   manifest.jsonl   one patient per line, stable key order
//   tasks.jsonl      one task per line
//   cohort.json      generation config echo
//   ecg/p%06d.upct   one waveform per patient
inline void serialize_cohort(const std::vector<Patient>& cohort, const CohortConfig& cfg,
                             const std::string& out_dir) {
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(fs::path(out_dir) / "ecg", ec);
    if (ec)
        throw std::runtime_error("serialize_cohort: cannot create directory " + out_dir + ": " +
                                 ec.message());

    std::string manifest_path = (fs::path(out_dir) / "manifest.jsonl").string();
    std::ofstream mf(manifest_path, std::ios::binary);
    if (!mf) throw std::runtime_error("serialize_cohort: cannot write " + manifest_path);
    for (const auto& p : cohort) {
        std::string rel = detail::patient_ecg_name(p.id);
        ordered_json j;
        j["id"] = p.id;
        j["ehr"] = detail::ehr_to_json(p.ehr);
        j["latents"] = {{"ecg", p.z_ecg}, {"vitals", p.z_vitals}, {"demo", p.z_demo},
                        {"bio", p.z_bio}};
        j["labels"] = ordered_json::object();
        for (const auto& [task, y] : p.labels) j["labels"][task] = y;
        j["ecg_path"] = rel;
        j["sample_rate"] = p.ecg.sample_rate;
        mf << j.dump() << '\n';
        write_upct((fs::path(out_dir) / rel).string(), p.ecg.samples);
    }
    mf.close();

    std::string tasks_path = (fs::path(out_dir) / "tasks.jsonl").string();
    std::ofstream tf(tasks_path, std::ios::binary);
    if (!tf) throw std::runtime_error("serialize_cohort: cannot write " + tasks_path);
    for (const auto& t : cfg.effective_tasks()) {
        ordered_json j;
        j["id"] = t.id;
        j["category"] = t.category;
        j["question"] = t.question;
        j["beta_ecg"] = t.beta_ecg;
        j["beta_vitals"] = t.beta_vitals;
        j["beta_demo"] = t.beta_demo;
        j["beta_bio"] = t.beta_bio;
        tf << j.dump() << '\n';
    }
    tf.close();

    std::string cfg_path = (fs::path(out_dir) / "cohort.json").string();
    std::ofstream cf(cfg_path, std::ios::binary);
    if (!cf) throw std::runtime_error("serialize_cohort: cannot write " + cfg_path);
    ordered_json j;
    j["n_patients"] = cfg.n_patients;
    j["beta_ecg"] = cfg.beta_ecg;
    j["beta_vitals"] = cfg.beta_vitals;
    j["beta_demo"] = cfg.beta_demo;
    j["beta_bio"] = cfg.beta_bio;
    j["label_noise"] = cfg.label_noise;
    j["obs_fidelity"] = cfg.obs_fidelity;
    j["ecg_rate_jitter"] = cfg.ecg_rate_jitter;
    j["seed"] = cfg.seed;
    j["ecg_len"] = cfg.ecg_len;
    j["sample_rate"] = cfg.sample_rate;
    cf << j.dump(2) << '\n';
}

struct Dataset {
    std::vector<Patient> patients;
    std::vector<TaskSpec> tasks;
    CohortConfig config;
};

inline std::vector<TaskSpec> load_tasks(const std::string& path) {
    std::ifstream tf(path, std::ios::binary);
    if (!tf) throw std::runtime_error("load_tasks: cannot open " + path);
    std::vector<TaskSpec> tasks;
    std::string line;
    while (std::getline(tf, line)) {
        if (line.empty()) continue;
        ordered_json j = ordered_json::parse(line);
        TaskSpec t;
        t.id = j.at("id").get<std::string>();
        t.category = j.at("category").get<std::string>();
        t.question = j.at("question").get<std::string>();
        t.beta_ecg = j.at("beta_ecg").get<float>();
        t.beta_vitals = j.at("beta_vitals").get<float>();
        t.beta_demo = j.at("beta_demo").get<float>();
        t.beta_bio = j.at("beta_bio").get<float>();
        tasks.push_back(std::move(t));
    }
    return tasks;
}

inline Dataset load_cohort(const std::string& dir) {
    namespace fs = std::filesystem;
    Dataset ds;

    std::string cfg_path = (fs::path(dir) / "cohort.json").string();
    std::ifstream cf(cfg_path, std::ios::binary);
    if (!cf) throw std::runtime_error("load_cohort: cannot open " + cfg_path);
    ordered_json cj = ordered_json::parse(cf);
    ds.config.n_patients = cj.at("n_patients").get<int>();
    ds.config.beta_ecg = cj.at("beta_ecg").get<float>();
    ds.config.beta_vitals = cj.at("beta_vitals").get<float>();
    ds.config.beta_demo = cj.at("beta_demo").get<float>();
    ds.config.beta_bio = cj.at("beta_bio").get<float>();
    ds.config.label_noise = cj.at("label_noise").get<float>();
    ds.config.obs_fidelity = cj.at("obs_fidelity").get<float>();
    ds.config.ecg_rate_jitter = cj.at("ecg_rate_jitter").get<float>();
    ds.config.seed = cj.at("seed").get<uint64_t>();
    ds.config.ecg_len = cj.at("ecg_len").get<int>();
    ds.config.sample_rate = cj.at("sample_rate").get<float>();

    ds.tasks = load_tasks((fs::path(dir) / "tasks.jsonl").string());
    ds.config.tasks = ds.tasks;
    std::string line;

    std::string manifest_path = (fs::path(dir) / "manifest.jsonl").string();
    std::ifstream mf(manifest_path, std::ios::binary);
    if (!mf) throw std::runtime_error("load_cohort: cannot open " + manifest_path);
    while (std::getline(mf, line)) {
        if (line.empty()) continue;
        ordered_json j = ordered_json::parse(line);
        Patient p;
        p.id = j.at("id").get<int>();
        p.ehr = detail::ehr_from_json(j.at("ehr"));
        p.z_ecg = j.at("latents").at("ecg").get<float>();
        p.z_vitals = j.at("latents").at("vitals").get<float>();
        p.z_demo = j.at("latents").at("demo").get<float>();
        p.z_bio = j.at("latents").at("bio").get<float>();
        for (auto& [task, y] : j.at("labels").items()) p.labels[task] = y.get<int>();
        p.ecg.sample_rate = j.at("sample_rate").get<float>();
        p.ecg.samples = read_upct((fs::path(dir) / j.at("ecg_path").get<std::string>()).string());
        ds.patients.push_back(std::move(p));
    }
    return ds;
}

// One-decimal numeric literals 0.0 .. 250.0 covering every clipped field
// range, so rendered values never fall out of vocabulary regardless of which
// cohort built it.
inline std::vector<std::string> numeric_coverage_lines() {
    std::vector<std::string> lines;
    std::string cur;
    for (int k = 0; k <= 2500; ++k) {
        cur += format_fixed(static_cast<double>(k) / 10.0, 1);
        if (k % 50 == 49) {
            lines.push_back(cur);
            cur.clear();
        } else {
            cur.push_back(' ');
        }
    }
    if (!cur.empty()) lines.push_back(cur);
    return lines;
}

}  // namespace unipact
