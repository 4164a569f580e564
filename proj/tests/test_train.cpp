#include <gtest/gtest.h>

#include <algorithm>
#include <map>
#include <set>

#include "unipact/train.hpp"

using namespace unipact;

namespace {

// Tiny deterministic world shared by the training tests: a 16-patient
// cohort, one task per category, a vocabulary built from the rendered text.
struct World {
    CohortConfig cohort_cfg;
    std::vector<Patient> cohort;
    std::vector<TaskSpec> tasks;
    std::vector<Sample> samples;
    Vocab vocab;
    ModelConfig model_cfg;

    explicit World(int n_patients = 16, uint64_t seed = 9) {
        cohort_cfg.n_patients = n_patients;
        cohort_cfg.ecg_len = 100;
        cohort_cfg.seed = seed;
        cohort_cfg.label_noise = 0.0f;
        cohort = generate_cohort(cohort_cfg);
        tasks = cohort_cfg.effective_tasks();
        tasks.resize(4);
        tasks[1] = cohort_cfg.effective_tasks()[12];  // deterioration
        tasks[2] = cohort_cfg.effective_tasks()[18];  // icu
        tasks[3] = cohort_cfg.effective_tasks()[20];  // mortality
        tasks[0] = cohort_cfg.effective_tasks()[0];   // diagnosis
        samples = make_samples(cohort, tasks);
        vocab = Vocab::build(vocab_corpus(samples, /*include_numeric_grid=*/true), 4096);

        model_cfg.encoder.patch_len = 25;  // 4 ECG rows per sample
        model_cfg.encoder.d_ecg = 16;
        model_cfg.encoder.n_layers = 1;
        model_cfg.encoder.n_heads = 2;
        model_cfg.encoder.max_positions = 8;
        model_cfg.decoder.d_llm = 32;
        model_cfg.decoder.n_layers = 1;
        model_cfg.decoder.n_heads = 2;
        model_cfg.decoder.ffn_mult = 2;
        model_cfg.decoder.max_positions = 96;
        model_cfg.seed = 21;
    }

    FusionModel model() const { return FusionModel(vocab, model_cfg); }
};

std::vector<const Sample*> ptrs(const std::vector<Sample>& v, size_t count) {
    std::vector<const Sample*> out;
    for (size_t i = 0; i < std::min(count, v.size()); ++i) out.push_back(&v[i]);
    return out;
}

std::map<std::string, std::vector<float>> param_values(const FusionModel& m) {
    std::map<std::string, std::vector<float>> out;
    for (const auto& [name, t] : m.collect()) out[name] = t.data();
    return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// build_batch
// ---------------------------------------------------------------------------

TEST(BuildBatch, SingleYesSampleMasksExactlyTheAnswerTarget) {
    World w;
    FusionModel model = w.model();
    const Sample* yes = nullptr;
    for (const auto& s : w.samples)
        if (s.answer == "Yes") {
            yes = &s;
            break;
        }
    ASSERT_NE(yes, nullptr);
    TrainBatch b = build_batch({yes}, w.vocab, model);
    ASSERT_EQ(b.items.size(), 1u);
    const TrainItem& it = b.items[0];
    EXPECT_EQ(it.n_ecg_rows, 4);
    EXPECT_EQ(it.answer_ids, (std::vector<int>{kYesId}));
    EXPECT_EQ(it.length, 4 + static_cast<int64_t>(it.prompt_ids.size()) +
                             static_cast<int64_t>(it.question_ids.size()) + 1);
    int masked = 0;
    for (int64_t t = 0; t < b.max_len; ++t)
        if (b.answer_mask[0][static_cast<size_t>(t)]) {
            ++masked;
            EXPECT_EQ(t, it.length - 2);
            EXPECT_EQ(b.target_ids[0][static_cast<size_t>(t)], kYesId);
        }
    EXPECT_EQ(masked, 1);
}

TEST(BuildBatch, MixedLengthsRightPaddedWithFalseMasks) {
    World w;
    FusionModel model = w.model();
    // vary lengths: drop the waveform on two samples, shorten one prompt
    std::vector<Sample> variants(w.samples.begin(), w.samples.begin() + 4);
    variants[1].ecg = nullptr;
    variants[2].ecg = nullptr;
    variants[2].prompt_groups.resize(1);
    std::vector<const Sample*> picked;
    for (const auto& s : variants) picked.push_back(&s);

    TrainBatch b = build_batch(picked, w.vocab, model);
    ASSERT_EQ(b.items.size(), 4u);
    std::set<int64_t> lengths;
    for (const auto& it : b.items) lengths.insert(it.length);
    EXPECT_GT(lengths.size(), 1u);
    for (size_t i = 0; i < 4; ++i) {
        EXPECT_EQ(b.max_len, static_cast<int64_t>(b.target_ids[i].size()));
        for (int64_t t = 0; t < b.max_len; ++t) {
            bool in_range = t < b.items[i].length;
            EXPECT_EQ(b.valid[i][static_cast<size_t>(t)] != 0, in_range);
            if (!in_range) {
                EXPECT_EQ(b.answer_mask[i][static_cast<size_t>(t)], 0);
                EXPECT_EQ(b.target_ids[i][static_cast<size_t>(t)], kPadId);
            }
        }
    }
    EXPECT_EQ(b.items[1].n_ecg_rows, 0);
}

TEST(BuildBatch, RejectsAnswerOtherThanYesNo) {
    World w;
    FusionModel model = w.model();
    Sample bad = w.samples[0];
    bad.answer = "Maybe";
    try {
        build_batch({&bad}, w.vocab, model);
        FAIL() << "expected invalid answer error";
    } catch (const std::invalid_argument& e) {
        std::string msg = e.what();
        EXPECT_NE(msg.find("neither Yes nor No"), std::string::npos);
        EXPECT_NE(msg.find(bad.sample_id), std::string::npos);
    }
}

TEST(BuildBatch, GroupDropoutIsSeededAndBounded) {
    World w;
    FusionModel model = w.model();
    auto picked = ptrs(w.samples, 8);
    Rng r1(42), r2(42);
    TrainBatch a = build_batch(picked, w.vocab, model, 0.5f, &r1);
    TrainBatch b = build_batch(picked, w.vocab, model, 0.5f, &r2);
    bool any_shorter = false;
    for (size_t i = 0; i < a.items.size(); ++i) {
        EXPECT_EQ(a.items[i].prompt_ids, b.items[i].prompt_ids);
        if (a.items[i].prompt_ids.size() < build_batch({picked[i]}, w.vocab, model)
                                               .items[0]
                                               .prompt_ids.size())
            any_shorter = true;
    }
    EXPECT_TRUE(any_shorter);
    EXPECT_THROW(build_batch(picked, w.vocab, model, 0.5f, nullptr), std::invalid_argument);
}

// ---------------------------------------------------------------------------
// loss restriction (answer-only supervision)
// ---------------------------------------------------------------------------

TEST(BatchLoss, UnmaskedTargetsAffectNothing) {
    World w;
    FusionModel model = w.model();
    auto picked = ptrs(w.samples, 3);
    TrainBatch batch = build_batch(picked, w.vocab, model);

    ParamMap params = model.collect();
    set_trainable(params, true);
    Mode m{true, nullptr};

    Tensor loss1 = batch_loss(model, batch, m);
    backward(loss1);
    std::vector<std::vector<float>> grads1;
    for (auto& [name, t] : params) grads1.push_back(t.grad_view());

    for (auto& [name, t] : params) t.zero_grad();
    // scramble every non-answer target
    Rng rng(3);
    for (size_t i = 0; i < batch.items.size(); ++i)
        for (size_t t = 0; t < batch.target_ids[i].size(); ++t)
            if (!batch.answer_mask[i][t])
                batch.target_ids[i][t] = static_cast<int>(rng.uniform_int(w.vocab.size()));

    Tensor loss2 = batch_loss(model, batch, m);
    backward(loss2);
    EXPECT_EQ(loss1.data()[0], loss2.data()[0]);
    size_t k = 0;
    for (auto& [name, t] : params) {
        EXPECT_EQ(grads1[k], t.grad_view()) << name;
        ++k;
    }
}

// ---------------------------------------------------------------------------
// train_stage
// ---------------------------------------------------------------------------

TEST(TrainStage, Stage1UpdatesOnlyProjector) {
    World w;
    FusionModel model = w.model();
    auto before = param_values(model);

    StageConfig cfg;
    cfg.stage = 1;
    cfg.lr = 1e-3f;
    cfg.epochs = 1;
    cfg.batch_size = 4;
    cfg.max_steps = 1;
    cfg.seed = 7;
    TrainResult res = train_stage(model, w.samples, {}, cfg);
    EXPECT_EQ(res.steps, 1);
    ASSERT_EQ(res.curve.size(), 1u);
    EXPECT_EQ(res.curve[0].stage, 1);
    EXPECT_GT(res.curve[0].loss, 0.0f);

    auto after = param_values(model);
    bool projector_changed = false;
    for (const auto& [name, vals] : after) {
        if (name.starts_with("projector.")) {
            if (vals != before.at(name)) projector_changed = true;
        } else {
            EXPECT_EQ(vals, before.at(name)) << name << " must stay frozen in stage 1";
        }
    }
    EXPECT_TRUE(projector_changed);
}

TEST(TrainStage, Stage1GradientIsolation) {
    World w;
    FusionModel model = w.model();
    ParamMap params = model.collect();
    set_trainable(params, false);
    for (auto& [name, t] : params)
        if (name.starts_with("projector.")) t.set_requires_grad(true);

    TrainBatch batch = build_batch(ptrs(w.samples, 4), w.vocab, model);
    Tensor loss = batch_loss(model, batch, Mode{true, nullptr});
    backward(loss);
    for (auto& [name, t] : params) {
        if (name.starts_with("projector.")) continue;
        const auto& g = t.grad_view();
        bool all_zero = true;
        for (float v : g) all_zero = all_zero && v == 0.0f;
        EXPECT_TRUE(g.empty() || all_zero) << name;
    }
}

TEST(TrainStage, Stage2UpdatesAdaptersAndProjectorOnly) {
    World w;
    FusionModel model = w.model();
    StageConfig cfg;
    cfg.stage = 2;
    cfg.lora = LoraConfig{2, 4.0f, 0.0f};
    cfg.lr = 1e-3f;
    cfg.epochs = 1;
    cfg.batch_size = 4;
    cfg.max_steps = 1;
    cfg.stage1_applied = true;
    train_stage(model, w.samples, {}, cfg);  // creates adapters at entry
    auto before = param_values(model);

    cfg.seed = 8;
    train_stage(model, w.samples, {}, cfg);
    auto after = param_values(model);
    bool adapter_changed = false, projector_changed = false;
    for (const auto& [name, vals] : after) {
        if (is_adapter_param(name)) {
            if (vals != before.at(name)) adapter_changed = true;
        } else if (name.starts_with("projector.")) {
            if (vals != before.at(name)) projector_changed = true;
        } else {
            EXPECT_EQ(vals, before.at(name)) << name << " must stay frozen in stage 2";
        }
    }
    EXPECT_TRUE(adapter_changed);
    EXPECT_TRUE(projector_changed);
}

TEST(TrainStage, Stage2RequiresStage1Checkpoint) {
    World w;
    FusionModel model = w.model();
    StageConfig cfg;
    cfg.stage = 2;
    cfg.max_steps = 1;
    cfg.epochs = 1;
    EXPECT_THROW(train_stage(model, w.samples, {}, cfg), std::runtime_error);
    cfg.allow_missing_stage1 = true;
    EXPECT_NO_THROW(train_stage(model, w.samples, {}, cfg));
    EXPECT_EQ(cfg.trainable_set(), "adapters+projector");
}

TEST(TrainStage, DeterministicAcrossRuns) {
    World w;
    StageConfig cfg;
    cfg.stage = 1;
    cfg.epochs = 2;
    cfg.batch_size = 8;
    cfg.seed = 11;

    FusionModel m1 = w.model();
    FusionModel m2 = w.model();
    TrainResult r1 = train_stage(m1, w.samples, {}, cfg);
    TrainResult r2 = train_stage(m2, w.samples, {}, cfg);
    ASSERT_EQ(r1.curve.size(), r2.curve.size());
    for (size_t i = 0; i < r1.curve.size(); ++i) {
        EXPECT_EQ(r1.curve[i].loss, r2.curve[i].loss) << "step " << i;
        EXPECT_EQ(r1.curve[i].step, static_cast<int>(i));
    }
    EXPECT_EQ(param_values(m1), param_values(m2));
}

TEST(TrainStage, ValidationSelectsBestEpochAndRestoresIt) {
    World w;
    StageConfig cfg;
    cfg.stage = 1;
    cfg.epochs = 3;
    cfg.batch_size = 8;
    cfg.lr = 5e-3f;
    cfg.seed = 13;

    std::vector<Sample> val(w.samples.begin(), w.samples.begin() + 12);
    FusionModel model = w.model();
    TrainResult res = train_stage(model, w.samples, val, cfg);
    ASSERT_GE(res.best_epoch, 0);
    ASSERT_LT(res.best_epoch, 3);
    auto got = pooled_auroc(model, val);
    ASSERT_TRUE(got.has_value());
    EXPECT_FLOAT_EQ(static_cast<float>(*got), static_cast<float>(res.best_val_auroc));
}

TEST(TrainStage, CheckpointRoundTripForwardIsBitIdentical) {
    World w;
    FusionModel model = w.model();
    StageConfig cfg;
    cfg.stage = 1;
    cfg.epochs = 1;
    cfg.max_steps = 3;
    train_stage(model, w.samples, {}, cfg);

    float before = score_sample(model, w.samples[0]);
    std::string path =
        (std::filesystem::temp_directory_path() / "train_roundtrip.upck").string();
    ParamMap params = model.collect();
    save_checkpoint(path, params, "");
    FusionModel fresh = w.model();
    ParamMap fp = fresh.collect();
    apply_checkpoint(fp, load_checkpoint(path));
    EXPECT_EQ(score_sample(fresh, w.samples[0]), before);
    std::remove(path.c_str());
}

TEST(TrainStage, LossCsvFormat) {
    std::vector<LossPoint> curve = {{0, 1, 2.5f}, {1, 1, 1.25f}, {2, 2, 0.75f}};
    std::string path = (std::filesystem::temp_directory_path() / "loss_curve.csv").string();
    write_loss_csv(path, curve);
    std::ifstream f(path);
    std::string line;
    std::getline(f, line);
    EXPECT_EQ(line, "step,stage,loss");
    std::getline(f, line);
    EXPECT_EQ(line, "0,1,2.500000");
    std::getline(f, line);
    std::getline(f, line);
    EXPECT_EQ(line, "2,2,0.750000");
    std::remove(path.c_str());
}

// ---------------------------------------------------------------------------
// multitask mixing
// ---------------------------------------------------------------------------

namespace {

std::vector<Sample> tagged_samples(const std::string& task, int n) {
    std::vector<Sample> out;
    for (int i = 0; i < n; ++i) {
        Sample s;
        s.question = "Will outcome " + task + " occur? Answer strictly with Yes or No.";
        s.answer = i % 2 == 0 ? "Yes" : "No";
        s.subtask_id = task;
        s.sample_id = task + "-" + std::to_string(i);
        out.push_back(std::move(s));
    }
    return out;
}

}  // namespace

TEST(MultitaskMix, SingleDatasetIsAShuffle) {
    auto data = tagged_samples("solo", 40);
    auto stream = multitask_mix({data}, {1.0}, 40, 5);
    ASSERT_EQ(stream.size(), 40u);
    std::multiset<std::string> want, got;
    for (const auto& s : data) want.insert(s.sample_id);
    for (const auto& s : stream) got.insert(s.sample_id);
    EXPECT_EQ(want, got);  // every item exactly once
    bool permuted = false;
    for (size_t i = 0; i < stream.size(); ++i)
        if (stream[i].sample_id != data[i].sample_id) permuted = true;
    EXPECT_TRUE(permuted);
    auto again = multitask_mix({data}, {1.0}, 40, 5);
    for (size_t i = 0; i < stream.size(); ++i)
        EXPECT_EQ(stream[i].sample_id, again[i].sample_id);
}

TEST(MultitaskMix, EqualWeightsBalanceWithinThreeSigma) {
    auto a = tagged_samples("alpha", 64);
    auto b = tagged_samples("beta", 64);
    auto stream = multitask_mix({a, b}, {1.0, 1.0}, 10000, 17);
    int n_alpha = 0;
    for (const auto& s : stream) n_alpha += s.subtask_id == "alpha";
    EXPECT_NEAR(n_alpha, 5000, 150);  // 3 * sqrt(10000 * 0.25)
}

TEST(MultitaskMix, BothTasksAppearEarly) {
    auto a = tagged_samples("alpha", 64);
    auto b = tagged_samples("beta", 64);
    auto stream = multitask_mix({a, b}, {1.0, 1.0}, 100, 0);
    bool saw_a = false, saw_b = false;
    for (const auto& s : stream) {
        saw_a = saw_a || s.subtask_id == "alpha";
        saw_b = saw_b || s.subtask_id == "beta";
    }
    EXPECT_TRUE(saw_a);
    EXPECT_TRUE(saw_b);
}

TEST(MultitaskMix, ErrorsOnEmptyAndMismatchedInputs) {
    EXPECT_THROW(multitask_mix({{}, {}}, {1.0, 1.0}, 10, 1), std::invalid_argument);
    auto a = tagged_samples("alpha", 4);
    EXPECT_THROW(multitask_mix({a}, {1.0, 2.0}, 10, 1), std::invalid_argument);
    EXPECT_THROW(multitask_mix({a}, {0.0}, 10, 1), std::invalid_argument);
    EXPECT_THROW(multitask_mix({a}, {-1.0}, 10, 1), std::invalid_argument);
    // empty dataset tolerated while another is drawable
    auto stream = multitask_mix({a, {}}, {1.0, 1.0}, 8, 1);
    EXPECT_EQ(stream.size(), 8u);
}

// ---------------------------------------------------------------------------
// optimization sanity
// ---------------------------------------------------------------------------

TEST(TrainStage, MedianEpochLossDecreasesOverFirstFiveEpochs) {
    World w(12, 33);
    FusionModel model = w.model();
    StageConfig s1;
    s1.stage = 1;
    s1.epochs = 1;
    s1.lr = 2e-3f;
    s1.seed = 3;
    train_stage(model, w.samples, {}, s1);

    StageConfig s2;
    s2.stage = 2;
    s2.lora = LoraConfig{4, 8.0f, 0.0f};
    s2.epochs = 5;
    s2.batch_size = 8;
    s2.lr = 5e-3f;
    s2.seed = 4;
    s2.stage1_applied = true;
    TrainResult res = train_stage(model, w.samples, {}, s2);

    int steps_per_epoch = (static_cast<int>(w.samples.size()) + s2.batch_size - 1) /
                          s2.batch_size;
    std::vector<double> medians;
    for (int e = 0; e < 5; ++e) {
        std::vector<float> losses;
        for (int k = e * steps_per_epoch; k < (e + 1) * steps_per_epoch; ++k)
            losses.push_back(res.curve[static_cast<size_t>(k)].loss);
        std::sort(losses.begin(), losses.end());
        medians.push_back(losses[losses.size() / 2]);
    }
    for (int e = 1; e < 5; ++e) EXPECT_LT(medians[e], medians[0]) << "epoch " << e;
    EXPECT_LT(medians[4], medians[1]);
}

TEST(TrainStage, OverfitsThirtyTwoSamplesWithinFiveHundredSteps) {
    World w(8, 55);  // 8 patients x 4 tasks = 32 samples
    ASSERT_EQ(w.samples.size(), 32u);
    FusionModel model = w.model();

    StageConfig s1;
    s1.stage = 1;
    s1.epochs = 25;  // 100 steps at batch 8
    s1.batch_size = 8;
    s1.lr = 3e-3f;
    s1.seed = 5;
    TrainResult r1 = train_stage(model, w.samples, {}, s1);

    StageConfig s2;
    s2.stage = 2;
    s2.lora = LoraConfig{8, 16.0f, 0.0f};
    s2.epochs = 100;  // capped below
    s2.batch_size = 8;
    s2.max_steps = 500 - r1.steps;
    s2.lr = 5e-3f;
    s2.seed = 6;
    s2.stage1_applied = true;
    TrainResult r2 = train_stage(model, w.samples, {}, s2);
    ASSERT_LE(r1.steps + r2.steps, 500);

    float final_loss = r2.curve.back().loss;
    EXPECT_LT(final_loss, 0.05f) << "steps used: " << r1.steps + r2.steps;
}
