#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "unipact/checkpoint.hpp"
#include "unipact/fusion.hpp"
#include "unipact/metrics.hpp"
#include "unipact/optim.hpp"
#include "unipact/synth.hpp"

namespace unipact {

// ---------------------------------------------------------------------------
// samples
// ---------------------------------------------------------------------------

// One question-answering instance: rendered EHR sentence groups, a rendered
// question, an optional waveform (borrowed), and a Yes/No answer.
struct Sample {
    std::vector<std::string> prompt_groups;  // rendered sentences, fixed order
    std::string question;                    // includes the answer suffix
    const EcgSignal* ecg = nullptr;          // null = text-only input
    std::string answer;                      // "Yes" | "No"
    std::string subtask_id;
    std::string sample_id;

    std::string prompt_text() const {
        std::string out;
        for (const auto& g : prompt_groups) {
            if (!out.empty()) out.push_back(' ');
            out += g;
        }
        return out;
    }
};

inline std::string patient_sample_id(int id) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "p%06d", id);
    return buf;
}

// One sample per (patient, task). The mask drops sentence groups or the
// waveform at render time (used both for training variants and for
// test-time feature-removal evaluation). Samples borrow the patients'
// waveforms; the cohort must outlive them.
inline std::vector<Sample> make_samples(const std::vector<Patient>& cohort,
                                        const std::vector<TaskSpec>& tasks,
                                        const AblationMask& mask = {},
                                        const TemplateRegistry& reg = TemplateRegistry::defaults()) {
    std::vector<Sample> out;
    out.reserve(cohort.size() * tasks.size());
    for (const auto& p : cohort) {
        PromptText pt = render_prompt(p.ehr, mask, reg);
        std::vector<std::string> groups;
        for (const auto& span : pt.group_spans)
            groups.push_back(pt.text.substr(span.begin, span.end - span.begin));
        for (const auto& t : tasks) {
            auto it = p.labels.find(t.id);
            if (it == p.labels.end())
                throw std::invalid_argument("make_samples: patient " +
                                            patient_sample_id(p.id) + " has no label for task '" +
                                            t.id + "'");
            Sample s;
            s.prompt_groups = groups;
            s.question = render_question(t.id, t.question);
            s.ecg = mask.include_ecg ? &p.ecg : nullptr;
            s.answer = it->second ? "Yes" : "No";
            s.subtask_id = t.id;
            s.sample_id = patient_sample_id(p.id);
            out.push_back(std::move(s));
        }
    }
    return out;
}

// Text lines for vocabulary construction: every rendered prompt + question,
// plus the numeric grid so any in-range one-decimal value stays in-vocab.
inline std::vector<std::string> vocab_corpus(const std::vector<Sample>& samples,
                                             bool include_numeric_grid = true) {
    std::vector<std::string> lines;
    lines.reserve(samples.size() + 64);
    for (const auto& s : samples) {
        std::string line = s.prompt_text();
        if (!line.empty()) line.push_back(' ');
        line += s.question;
        lines.push_back(std::move(line));
    }
    if (include_numeric_grid) {
        auto grid = numeric_coverage_lines();
        lines.insert(lines.end(), grid.begin(), grid.end());
    }
    return lines;
}

// ---------------------------------------------------------------------------
// batches
// ---------------------------------------------------------------------------

struct TrainItem {
    const EcgSignal* ecg = nullptr;
    std::vector<int> prompt_ids;
    std::vector<int> question_ids;
    std::vector<int> answer_ids;  // single Yes/No token
    int64_t n_ecg_rows = 0;
    int64_t length = 0;  // n_ecg_rows + prompt + question + answer
};

// Teacher-forced batch. target_ids[i][t] is the id of token t+1 (pad id
// where the successor is an ECG row or past the end); answer_mask marks
// exactly the positions whose target is an answer token; valid marks real
// (non-padding) positions. Rows are right-padded to max_len.
struct TrainBatch {
    std::vector<TrainItem> items;
    int64_t max_len = 0;
    std::vector<std::vector<int>> target_ids;
    std::vector<std::vector<uint8_t>> answer_mask;
    std::vector<std::vector<uint8_t>> valid;
};

// group_dropout removes each sentence group independently with the given
// probability (rng required when > 0), teaching the model to answer from
// partial context.
inline TrainBatch build_batch(const std::vector<const Sample*>& samples, const Vocab& vocab,
                              const FusionModel& model, float group_dropout = 0.0f,
                              Rng* rng = nullptr) {
    if (samples.empty()) throw std::invalid_argument("build_batch: empty batch");
    if (group_dropout > 0.0f && rng == nullptr)
        throw std::invalid_argument("build_batch: group_dropout requires an rng");
    const int patch_len = model.config().encoder.patch_len;
    TrainBatch batch;
    for (const Sample* s : samples) {
        TrainItem item;
        int answer_id;
        if (s->answer == "Yes")
            answer_id = kYesId;
        else if (s->answer == "No")
            answer_id = kNoId;
        else
            throw std::invalid_argument("build_batch: sample " + s->sample_id + "/" +
                                        s->subtask_id + " answer is neither Yes nor No: '" +
                                        s->answer + "'");
        std::string prompt;
        for (const auto& g : s->prompt_groups) {
            if (group_dropout > 0.0f && rng->bernoulli(group_dropout)) continue;
            if (!prompt.empty()) prompt.push_back(' ');
            prompt += g;
        }
        item.ecg = s->ecg;
        item.prompt_ids = vocab.encode(prompt);
        item.question_ids = vocab.encode(s->question);
        item.answer_ids = {answer_id};
        item.n_ecg_rows = s->ecg ? s->ecg->samples.shape()[0] / patch_len : 0;
        item.length = item.n_ecg_rows + static_cast<int64_t>(item.prompt_ids.size()) +
                      static_cast<int64_t>(item.question_ids.size()) + 1;
        batch.max_len = std::max(batch.max_len, item.length);
        batch.items.push_back(std::move(item));
    }
    for (const auto& item : batch.items) {
        std::vector<int> ids;  // text ids in sequence order
        ids.insert(ids.end(), item.prompt_ids.begin(), item.prompt_ids.end());
        ids.insert(ids.end(), item.question_ids.begin(), item.question_ids.end());
        ids.insert(ids.end(), item.answer_ids.begin(), item.answer_ids.end());
        if (item.length < 2)
            throw std::invalid_argument("build_batch: sample has no context before the answer");
        std::vector<int> tgt(static_cast<size_t>(batch.max_len), kPadId);
        std::vector<uint8_t> mask(static_cast<size_t>(batch.max_len), 0);
        std::vector<uint8_t> valid(static_cast<size_t>(batch.max_len), 0);
        int64_t n = item.n_ecg_rows;
        for (int64_t t = 0; t + 1 < item.length; ++t)
            if (t + 1 >= n) tgt[static_cast<size_t>(t)] = ids[static_cast<size_t>(t + 1 - n)];
        mask[static_cast<size_t>(item.length - 2)] = 1;  // position whose target is the answer
        for (int64_t t = 0; t < item.length; ++t) valid[static_cast<size_t>(t)] = 1;
        batch.target_ids.push_back(std::move(tgt));
        batch.answer_mask.push_back(std::move(mask));
        batch.valid.push_back(std::move(valid));
    }
    return batch;
}

// Mean cross-entropy over the batch's masked positions (one per sample).
// Only masked targets enter the graph: rewriting any unmasked target id
// changes neither the loss nor any gradient.
inline Tensor batch_loss(const FusionModel& model, const TrainBatch& batch, const Mode& m) {
    if (batch.items.empty()) throw std::invalid_argument("batch_loss: empty batch");
    Tensor total;
    bool first = true;
    for (size_t i = 0; i < batch.items.size(); ++i) {
        const TrainItem& item = batch.items[i];
        Tensor rows;
        const Tensor* rows_ptr = nullptr;
        if (item.ecg) {
            rows = model.encode_and_project(*item.ecg, m);
            rows_ptr = &rows;
        }
        FusedInput f = model.assemble(rows_ptr, item.prompt_ids, item.question_ids,
                                      item.answer_ids);
        Tensor h = model.forward_hidden(f, m);
        std::vector<int64_t> positions;
        std::vector<int> targets;
        for (int64_t t = 0; t < item.length; ++t)
            if (batch.answer_mask[i][static_cast<size_t>(t)]) {
                positions.push_back(t);
                targets.push_back(batch.target_ids[i][static_cast<size_t>(t)]);
            }
        Tensor picked = gather_rows(h, positions);
        Tensor logits = model.decoder().head(picked, m);
        Tensor li = cross_entropy(logits, targets,
                                  std::vector<uint8_t>(targets.size(), 1));
        total = first ? li : add(total, li);
        first = false;
    }
    return scale(total, 1.0f / static_cast<float>(batch.items.size()));
}

// ---------------------------------------------------------------------------
// staged training
// ---------------------------------------------------------------------------

struct StageConfig {
    int stage = 1;  // 1: projector only; 2: adapters + projector
    float lr = 1e-3f;
    int epochs = 3;
    int batch_size = 8;
    int max_steps = 0;  // 0 = bounded by epochs only
    LoraConfig lora{};  // adapters created at stage-2 entry if absent
    float group_dropout = 0.0f;
    uint64_t seed = 1;
    bool stage1_applied = false;       // a stage-1 checkpoint was loaded
    bool allow_missing_stage1 = false;

    std::string trainable_set() const {
        return stage == 1 ? "projector" : "adapters+projector";
    }
};

struct LossPoint {
    int step = 0;
    int stage = 0;
    float loss = 0.0f;
};

struct TrainResult {
    std::vector<LossPoint> curve;
    int steps = 0;
    int best_epoch = -1;          // -1 when no validation-based selection ran
    double best_val_auroc = 0.0;  // pooled over all validation samples
};

inline void write_loss_csv(const std::string& path, const std::vector<LossPoint>& curve,
                           bool append = false) {
    std::ofstream f(path, append ? std::ios::app : std::ios::out);
    if (!f) throw std::runtime_error("loss curve: cannot open for write: " + path);
    if (!append) f << "step,stage,loss\n";
    for (const auto& p : curve)
        f << p.step << ',' << p.stage << ',' << format_fixed(p.loss, 6) << '\n';
}

// P(Yes) for one sample under the model's current weights.
inline float score_sample(const FusionModel& model, const Sample& s) {
    NoGradGuard ng;
    Mode m{};
    Tensor rows;
    const Tensor* rows_ptr = nullptr;
    if (s.ecg) {
        rows = model.encode_and_project(*s.ecg, m);
        rows_ptr = &rows;
    }
    FusedInput f = model.assemble(rows_ptr, model.vocab().encode(s.prompt_text()),
                                  model.vocab().encode(s.question), {});
    return model.answer_score(f);
}

// AUROC of P(Yes) against the Yes/No answers, pooled over all samples.
// Returns nothing when every answer is the same class.
inline std::optional<double> pooled_auroc(const FusionModel& model,
                                          const std::vector<Sample>& samples) {
    ScoredSet set;
    for (const auto& s : samples) {
        set.scores.push_back(score_sample(model, s));
        set.labels.push_back(s.answer == "Yes" ? 1 : 0);
    }
    if (set.positives() == 0 || set.negatives() == 0) return std::nullopt;
    return auroc(set);
}

namespace detail {

inline bool in_trainable_set(int stage, const std::string& name) {
    bool projector = name.starts_with("projector.");
    return stage == 1 ? projector : (projector || is_adapter_param(name));
}

}  // namespace detail

// Runs one stage of the two-stage schedule on the model in place.
// Stage 1 updates only the projector; stage 2 creates adapters when absent
// and updates adapters plus projector. Base encoder/decoder weights never
// change. With a nonempty validation set, the parameters are rolled back to
// the epoch with the best pooled validation AUROC.
inline TrainResult train_stage(FusionModel& model, const std::vector<Sample>& train,
                               const std::vector<Sample>& validation, const StageConfig& cfg) {
    if (cfg.stage != 1 && cfg.stage != 2)
        throw std::invalid_argument("train_stage: stage must be 1 or 2, got " +
                                    std::to_string(cfg.stage));
    if (!(cfg.lr > 0.0f) || !std::isfinite(cfg.lr))
        throw std::invalid_argument("train_stage: lr must be positive and finite");
    if (cfg.epochs < 1) throw std::invalid_argument("train_stage: epochs must be >= 1");
    if (cfg.batch_size < 1) throw std::invalid_argument("train_stage: batch_size must be >= 1");
    if (train.empty()) throw std::invalid_argument("train_stage: no training samples");
    if (cfg.stage == 2 && !cfg.stage1_applied && !cfg.allow_missing_stage1)
        throw std::runtime_error(
            "train_stage: stage 2 requires a stage-1 checkpoint "
            "(set allow_missing_stage1 to proceed anyway)");

    if (cfg.stage == 2) {
        bool has_adapters = false;
        for (const auto& [name, t] : model.collect())
            if (is_adapter_param(name)) {
                has_adapters = true;
                break;
            }
        if (!has_adapters) model.add_lora(cfg.lora);
    }

    ParamMap params = model.collect();
    set_trainable(params, false);
    for (auto& [name, t] : params)
        if (detail::in_trainable_set(cfg.stage, name)) t.set_requires_grad(true);
    Adam opt(select_params(params,
                           [&](const std::string& n) { return detail::in_trainable_set(cfg.stage, n); }),
             AdamConfig{cfg.lr});

    auto snapshot = [&params] {
        std::vector<std::vector<float>> snap;
        snap.reserve(params.size());
        for (const auto& [name, t] : params) snap.push_back(t.data());
        return snap;
    };
    auto restore = [&params](const std::vector<std::vector<float>>& snap) {
        for (size_t i = 0; i < params.size(); ++i) params[i].second.data() = snap[i];
    };

    Rng dropout_rng(derive_seed(cfg.seed, "group-dropout"));
    TrainResult res;
    std::vector<std::vector<float>> best;
    bool done = false;
    for (int epoch = 0; epoch < cfg.epochs && !done; ++epoch) {
        std::vector<size_t> order(train.size());
        std::iota(order.begin(), order.end(), 0);
        Rng shuffle_rng(derive_seed(cfg.seed, "epoch-" + std::to_string(epoch)));
        shuffle_rng.shuffle(order);
        for (size_t at = 0; at < order.size(); at += static_cast<size_t>(cfg.batch_size)) {
            std::vector<const Sample*> picked;
            for (size_t j = at; j < std::min(order.size(), at + static_cast<size_t>(cfg.batch_size)); ++j)
                picked.push_back(&train[order[j]]);
            TrainBatch batch = build_batch(picked, model.vocab(), model, cfg.group_dropout,
                                           &dropout_rng);
            Mode m{true, &dropout_rng};
            Tensor loss = batch_loss(model, batch, m);
            opt.zero_grad();
            backward(loss);
            opt.step();
            res.curve.push_back({res.steps, cfg.stage, loss.data()[0]});
            ++res.steps;
            if (cfg.max_steps > 0 && res.steps >= cfg.max_steps) {
                done = true;
                break;
            }
        }
        if (!validation.empty()) {
            auto val = pooled_auroc(model, validation);
            if (val && (res.best_epoch < 0 || *val > res.best_val_auroc)) {
                res.best_epoch = epoch;
                res.best_val_auroc = *val;
                best = snapshot();
            }
        }
    }
    if (res.best_epoch >= 0) restore(best);
    return res;
}

// ---------------------------------------------------------------------------
// multi-task mixing
// ---------------------------------------------------------------------------

// Weighted interleave of several datasets into one stream of n_draws
// samples. Each dataset cycles through seeded reshuffles, so all of its
// items appear before any repeats; draw proportions follow the weights.
inline std::vector<Sample> multitask_mix(const std::vector<std::vector<Sample>>& datasets,
                                         const std::vector<double>& weights, size_t n_draws,
                                         uint64_t seed) {
    if (datasets.size() != weights.size())
        throw std::invalid_argument("multitask_mix: " + std::to_string(datasets.size()) +
                                    " datasets but " + std::to_string(weights.size()) +
                                    " weights");
    double wsum = 0.0;
    std::vector<size_t> eligible;
    for (size_t i = 0; i < datasets.size(); ++i) {
        if (!(weights[i] >= 0.0) || !std::isfinite(weights[i]))
            throw std::invalid_argument("multitask_mix: weights must be finite and >= 0");
        if (!datasets[i].empty() && weights[i] > 0.0) {
            eligible.push_back(i);
            wsum += weights[i];
        }
    }
    if (eligible.empty())
        throw std::invalid_argument("multitask_mix: every dataset is empty or zero-weighted");

    Rng rng(seed);
    std::vector<std::vector<size_t>> order(datasets.size());
    std::vector<size_t> cursor(datasets.size(), 0);
    std::vector<Sample> out;
    out.reserve(n_draws);
    for (size_t k = 0; k < n_draws; ++k) {
        double r = rng.uniform() * wsum;
        size_t pick = eligible.back();
        double acc = 0.0;
        for (size_t i : eligible) {
            acc += weights[i];
            if (r < acc) {
                pick = i;
                break;
            }
        }
        auto& ord = order[pick];
        if (cursor[pick] >= ord.size()) {
            ord.resize(datasets[pick].size());
            std::iota(ord.begin(), ord.end(), 0);
            rng.shuffle(ord);
            cursor[pick] = 0;
        }
        out.push_back(datasets[pick][ord[cursor[pick]++]]);
    }
    return out;
}

}  // namespace unipact
