#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "unipact/checkpoint.hpp"
#include "unipact/config.hpp"

namespace unipact {

namespace fs = std::filesystem;

inline constexpr int kCohortFormatVersion = 1;
inline constexpr int kCsvFormatVersion = 1;

// ---------------------------------------------------------------------------
// run-directory plumbing: every command leaves behind the exact config it
// ran with, the resolved seed, and hashes of everything it wrote.
// ---------------------------------------------------------------------------

inline std::string hex64(uint64_t v) {
    char buf[20];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

inline std::string hash_file_hex(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot hash missing file " + path.string());
    uint64_t h = 0xCBF29CE484222325ull;
    char buf[1 << 16];
    while (in) {
        in.read(buf, sizeof(buf));
        std::streamsize got = in.gcount();
        if (got > 0) h = fnv1a64(buf, static_cast<size_t>(got), h);
    }
    return "fnv1a64:" + hex64(h);
}

inline void write_text_file(const fs::path& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << content;
}

struct RunContext {
    fs::path dir;
    std::string command;
    std::vector<std::string> args;
    uint64_t seed = 0;
    std::string seed_source = "config";  // or "env:UNIPACT_SEED"
    std::vector<std::pair<std::string, std::string>> artifacts;  // name -> hash

    void add_artifact(const fs::path& path) {
        artifacts.emplace_back(fs::relative(path, dir).generic_string(), hash_file_hex(path));
    }

    void finish() const {
        ordered_json j;
        j["command"] = command;
        j["args"] = args;
        j["seed"] = seed;
        j["seed_source"] = seed_source;
        j["format_versions"] = {{"checkpoint", kCheckpointVersion},
                                {"cohort", kCohortFormatVersion},
                                {"csv", kCsvFormatVersion}};
        j["artifacts"] = ordered_json::object();
        for (const auto& [name, hash] : artifacts) j["artifacts"][name] = hash;
        write_text_file(dir / "run-info.json", j.dump(2) + "\n");
    }
};

inline RunContext make_run_dir(const std::string& out_dir, const std::string& command,
                               const std::vector<std::string>& args, RunConfig& cfg) {
    RunContext ctx;
    ctx.dir = out_dir;
    ctx.command = command;
    ctx.args = args;
    fs::create_directories(ctx.dir);
    if (auto log = apply_env_seed(cfg)) {
        std::cout << *log << "\n";
        ctx.seed_source = "env:UNIPACT_SEED";
    }
    ctx.seed = cfg.seed;
    write_text_file(ctx.dir / "config.txt", serialize_run_config(cfg));
    ctx.add_artifact(ctx.dir / "config.txt");
    return ctx;
}

// ---------------------------------------------------------------------------
// shared loading helpers
// ---------------------------------------------------------------------------

// Builds a model shaped by the config/vocab and fills it from a checkpoint.
// Adapters are attached first when the checkpoint carries adapter tensors.
inline FusionModel load_model_from_checkpoint(const std::string& path, const Vocab& vocab,
                                              const RunConfig& cfg) {
    Checkpoint ckpt = load_checkpoint(path);
    FusionModel model(vocab, model_config(cfg));
    bool has_adapters = false;
    for (const auto& [name, t] : ckpt.tensors) has_adapters |= is_adapter_param(name);
    if (has_adapters) model.add_lora(stage_config(cfg, 2).lora);
    ParamMap params = model.collect();
    try {
        apply_checkpoint(params, ckpt);
    } catch (const std::exception& e) {
        throw std::runtime_error("checkpoint '" + path +
                                 "' is incompatible with the current config/vocab: " +
                                 e.what());
    }
    return model;
}

inline std::vector<TaskSpec> select_tasks(const std::vector<TaskSpec>& tasks,
                                          const std::string& categories) {
    if (categories == "all") return tasks;
    std::vector<TaskSpec> out;
    for (const auto& t : tasks)
        if (t.category == categories) out.push_back(t);
    if (out.empty())
        throw std::invalid_argument("no tasks in category '" + categories + "'");
    return out;
}

// Patient-level split so no patient contributes to both sides.
inline std::pair<std::vector<Patient>, std::vector<Patient>> split_patients(
    const std::vector<Patient>& patients, float val_fraction, uint64_t seed) {
    if (val_fraction < 0.0f || val_fraction >= 1.0f)
        throw std::invalid_argument("val_fraction must be in [0, 1)");
    std::vector<size_t> order(patients.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng(derive_seed(seed, "val-split"));
    rng.shuffle(order);
    size_t n_val = static_cast<size_t>(std::lround(val_fraction * patients.size()));
    std::pair<std::vector<Patient>, std::vector<Patient>> out;
    for (size_t i = 0; i < order.size(); ++i)
        (i < n_val ? out.second : out.first).push_back(patients[order[i]]);
    return out;
}

// ---------------------------------------------------------------------------
// subcommands
// ---------------------------------------------------------------------------

struct GenDataOpts {
    std::string config_path;
    std::string out_dir;
};

inline int cmd_gen_data(const GenDataOpts& o, const std::vector<std::string>& args) {
    RunConfig cfg = load_run_config(o.config_path);
    RunContext ctx = make_run_dir(o.out_dir, "gen-data", args, cfg);

    CohortConfig cc = cohort_config(cfg);
    std::vector<Patient> cohort = generate_cohort(cc);
    fs::path data_dir = ctx.dir / "data";
    serialize_cohort(cohort, cc, data_dir.string());

    ctx.add_artifact(data_dir / "manifest.jsonl");
    ctx.add_artifact(data_dir / "tasks.jsonl");
    ctx.add_artifact(data_dir / "cohort.json");
    uint64_t ecg_hash = 0xCBF29CE484222325ull;
    for (const auto& p : cohort) {
        std::string rel = "ecg/" + patient_sample_id(p.id) + ".upct";
        std::string h = hash_file_hex(data_dir / rel);
        ecg_hash = fnv1a64(h.data(), h.size(), ecg_hash);
    }
    ctx.artifacts.emplace_back("data/ecg/*", "fnv1a64:" + hex64(ecg_hash));
    ctx.finish();

    std::cout << "generated " << cohort.size() << " patients, " << cc.effective_tasks().size()
              << " tasks -> " << data_dir.string() << "\n";
    return 0;
}

struct BuildVocabOpts {
    std::string config_path;
    std::string data_dir;
    std::string out_path;
};

inline int cmd_build_vocab(const BuildVocabOpts& o) {
    RunConfig cfg = o.config_path.empty() ? RunConfig{} : load_run_config(o.config_path);
    Dataset ds = load_cohort(o.data_dir);
    auto samples = make_samples(ds.patients, ds.tasks);
    Vocab vocab = Vocab::build(vocab_corpus(samples), static_cast<size_t>(cfg.vocab_max_size));
    if (!o.out_path.empty()) {
        fs::path out(o.out_path);
        if (out.has_parent_path()) fs::create_directories(out.parent_path());
    }
    vocab.save(o.out_path);
    std::cout << "vocabulary of " << vocab.size() << " tokens -> " << o.out_path << "\n";
    return 0;
}

struct TrainOpts {
    std::string config_path;
    std::string data_dir;
    std::string vocab_path;
    std::string out_dir;
    int stage = 1;
    std::string init_path;
    bool allow_missing_init = false;
};

inline int cmd_train(const TrainOpts& o, const std::vector<std::string>& args) {
    RunConfig cfg = load_run_config(o.config_path);
    RunContext ctx = make_run_dir(o.out_dir, "train", args, cfg);

    if (o.stage == 2 && o.init_path.empty() && !o.allow_missing_init)
        throw std::runtime_error(
            "stage 2 requires a stage-1 checkpoint (--init); pass --allow-missing-init to "
            "proceed anyway");

    Dataset ds = load_cohort(o.data_dir);
    Vocab vocab = Vocab::load(o.vocab_path);
    FusionModel model(vocab, model_config(cfg));
    if (!o.init_path.empty()) {
        Checkpoint init = load_checkpoint(o.init_path);
        ParamMap params = model.collect();
        try {
            apply_checkpoint(params, init);
        } catch (const std::exception& e) {
            throw std::runtime_error("--init checkpoint '" + o.init_path +
                                     "' is incompatible: " + e.what());
        }
    }

    std::vector<TaskSpec> tasks = select_tasks(ds.tasks, cfg.categories);
    AblationMask mask = modality_mask(cfg.modality);
    auto [train_patients, val_patients] =
        split_patients(ds.patients, cfg.val_fraction, cfg.seed);
    std::vector<Sample> train_samples = make_samples(train_patients, tasks, mask);
    std::vector<Sample> val_samples = make_samples(val_patients, tasks, mask);

    StageConfig sc = stage_config(cfg, o.stage);
    sc.stage1_applied = !o.init_path.empty();
    sc.allow_missing_stage1 = o.allow_missing_init;
    TrainResult result = train_stage(model, train_samples, val_samples, sc);

    fs::path ckpt_path = ctx.dir / "checkpoint.upck";
    save_checkpoint(ckpt_path.string(), model.collect(), serialize_run_config(cfg));
    fs::path loss_path = ctx.dir / "loss.csv";
    write_loss_csv(loss_path.string(), result.curve);
    ctx.add_artifact(ckpt_path);
    ctx.add_artifact(loss_path);
    ctx.finish();

    std::cout << "stage " << o.stage << " (" << sc.trainable_set() << "): " << result.steps
              << " steps on " << train_samples.size() << " samples";
    if (!result.curve.empty())
        std::cout << ", final loss " << format_fixed(result.curve.back().loss, 4);
    if (result.best_epoch >= 0)
        std::cout << ", best val AUROC " << format_fixed(result.best_val_auroc, 4) << " (epoch "
                  << result.best_epoch << ")";
    std::cout << " -> " << ckpt_path.string() << "\n";
    return 0;
}

struct EvalOpts {
    std::string config_path;
    std::string data_dir;
    std::string vocab_path;
    std::string ckpt_path;
    std::string out_dir;
    std::string ablate_plan;  // empty = plain evaluation
    std::vector<std::string> cells;  // "name=path"
    int threads = 1;
};

inline std::map<std::string, std::string> parse_cells(const std::vector<std::string>& cells) {
    std::map<std::string, std::string> out;
    for (const auto& c : cells) {
        size_t eq = c.find('=');
        if (eq == std::string::npos || eq == 0 || eq == c.size() - 1)
            throw std::invalid_argument("--cell expects name=path (got '" + c + "')");
        out[c.substr(0, eq)] = c.substr(eq + 1);
    }
    return out;
}

inline int cmd_eval(const EvalOpts& o, const std::vector<std::string>& args) {
    RunConfig cfg = load_run_config(o.config_path);
    RunContext ctx =
        make_run_dir(o.out_dir, o.ablate_plan.empty() ? "eval" : "ablate", args, cfg);

    Dataset ds = load_cohort(o.data_dir);
    Vocab vocab = Vocab::load(o.vocab_path);
    EvalConfig ec = eval_config(cfg, o.threads);

    if (o.ablate_plan.empty()) {
        FusionModel model = load_model_from_checkpoint(o.ckpt_path, vocab, cfg);
        auto samples = make_samples(ds.patients, ds.tasks);
        EvalOutput out = evaluate_model(model, samples, ds.tasks, ec);

        fs::path scores_path = ctx.dir / "scores.csv";
        write_scores_csv(scores_path.string(), out.rows);
        fs::path report_path = ctx.dir / "report.json";
        write_text_file(report_path, report_to_json(out.report).dump(2) + "\n");
        ctx.add_artifact(scores_path);
        ctx.add_artifact(report_path);
        ctx.finish();
        std::cout << format_report_table(out.report);
        return 0;
    }

    AblationPlan plan = parse_plan(o.ablate_plan);
    std::map<std::string, std::string> cells = parse_cells(o.cells);
    // The primary checkpoint fills the plan's reference cell when not given.
    const char* ref = plan == AblationPlan::B ? "unified" : "full";
    if (!o.ckpt_path.empty() && !cells.count(ref)) cells[ref] = o.ckpt_path;
    ModelLoader loader = [&](const std::string& path) {
        return load_model_from_checkpoint(path, vocab, cfg);
    };
    AblationTable table = run_ablation(plan, cells, loader, ds.patients, ds.tasks, ec);

    fs::path ablation_path = ctx.dir / "ablation.json";
    write_text_file(ablation_path, ablation_to_json(table).dump(2) + "\n");
    ctx.add_artifact(ablation_path);
    ctx.finish();
    std::cout << format_ablation_table(table);
    return 0;
}

struct PredictOpts {
    std::string config_path;
    std::string vocab_path;
    std::string ckpt_path;
    std::string record_json;  // manifest line or bare EHR object
    std::string ecg_path;
    bool no_ecg = false;
    float sample_rate = 100.0f;
    std::string question;
    // inline record fields
    std::optional<float> age, bmi, weight, height, temperature, heartrate, resprate, o2sat,
        sbp, dbp, pain;
    std::optional<std::string> race, sex;
};

inline EhrRecord record_from_opts(const PredictOpts& o) {
    EhrRecord rec;
    if (!o.record_json.empty()) {
        ordered_json j = ordered_json::parse(o.record_json, nullptr, true);
        if (j.contains("ehr")) j = j.at("ehr");  // accept a full manifest line
        rec = detail::ehr_from_json(j);
    }
    auto override_f = [](std::optional<float>& dst, const std::optional<float>& src) {
        if (src) dst = src;
    };
    override_f(rec.age, o.age);
    override_f(rec.bmi, o.bmi);
    override_f(rec.weight, o.weight);
    override_f(rec.height, o.height);
    override_f(rec.temperature, o.temperature);
    override_f(rec.heartrate, o.heartrate);
    override_f(rec.resprate, o.resprate);
    override_f(rec.o2sat, o.o2sat);
    override_f(rec.sbp, o.sbp);
    override_f(rec.dbp, o.dbp);
    override_f(rec.pain, o.pain);
    if (o.race) rec.race = o.race;
    if (o.sex) rec.sex = o.sex;
    validate(rec);
    return rec;
}

inline int cmd_predict(const PredictOpts& o) {
    if (o.question.empty()) throw std::invalid_argument("predict: --question is required");
    if (o.ecg_path.empty() && !o.no_ecg)
        throw std::invalid_argument("predict: provide --ecg <file> or --no-ecg");

    RunConfig cfg = load_run_config(o.config_path);
    if (auto log = apply_env_seed(cfg)) std::cout << *log << "\n";
    Vocab vocab = Vocab::load(o.vocab_path);
    FusionModel model = load_model_from_checkpoint(o.ckpt_path, vocab, cfg);

    EhrRecord rec = record_from_opts(o);
    PromptText prompt = render_prompt(rec, AblationMask{}, TemplateRegistry::defaults());
    std::string question = render_question("cli", o.question);

    Tensor rows;
    const Tensor* rows_ptr = nullptr;
    if (!o.no_ecg) {
        EcgSignal sig;
        sig.samples = read_upct(o.ecg_path);
        sig.sample_rate = o.sample_rate;
        rows = model.encode_and_project(sig);
        rows_ptr = &rows;
    }
    FusedInput f = model.assemble(rows_ptr, vocab.encode(prompt.text),
                                  vocab.encode(question), {});
    std::string answer = model.generate(f, 1);
    float score = model.answer_score(f);

    std::cout << "ecg rows: " << (rows_ptr ? rows.shape()[0] : 0) << "\n";
    std::cout << "prompt: " << prompt.text << "\n";
    std::cout << "question: " << question << "\n";
    std::cout << "answer: " << answer << "\n";
    std::cout << "score: " << format_fixed(score, 4) << "\n";
    return 0;
}

struct ReportOpts {
    std::string scores_path;
    std::string tasks_path;
    std::string out_path;
    int bootstrap_b = 1000;
    uint64_t seed = 42;
};

inline int cmd_report(const ReportOpts& o) {
    std::vector<ScoreRow> rows = read_scores_csv(o.scores_path);
    std::vector<TaskSpec> tasks = load_tasks(o.tasks_path);
    EvalConfig ec;
    ec.bootstrap_b = o.bootstrap_b;
    ec.bootstrap_seed = derive_seed(o.seed, "bootstrap");
    EvalReport report = report_from_rows(rows, tasks, ec);
    if (!o.out_path.empty())
        write_text_file(o.out_path, report_to_json(report).dump(2) + "\n");
    std::cout << format_report_table(report);
    return 0;
}

// ---------------------------------------------------------------------------
// argument surface
// ---------------------------------------------------------------------------

inline std::string single_line(std::string s) {
    for (auto& c : s)
        if (c == '\n') c = ';';
    return s;
}

inline int run_cli(int argc, const char* const* argv) {
    CLI::App app{"multimodal prognostic question answering over EHR text and 12-lead ECG"};
    app.require_subcommand(1);
    std::vector<std::string> args(argv, argv + argc);

    GenDataOpts gen;
    CLI::App* gen_cmd = app.add_subcommand("gen-data", "generate a synthetic cohort");
    gen_cmd->add_option("--config", gen.config_path, "run config file")->required();
    gen_cmd->add_option("--out", gen.out_dir, "output run directory")->required();

    BuildVocabOpts bv;
    CLI::App* bv_cmd = app.add_subcommand("build-vocab", "build a vocabulary from a cohort");
    bv_cmd->add_option("--config", bv.config_path, "run config file");
    bv_cmd->add_option("--data", bv.data_dir, "cohort directory")->required();
    bv_cmd->add_option("--out", bv.out_path, "vocabulary output file")->required();

    TrainOpts tr;
    CLI::App* tr_cmd = app.add_subcommand("train", "train one stage");
    tr_cmd->add_option("--config", tr.config_path, "run config file")->required();
    tr_cmd->add_option("--data", tr.data_dir, "cohort directory")->required();
    tr_cmd->add_option("--vocab", tr.vocab_path, "vocabulary file")->required();
    tr_cmd->add_option("--out", tr.out_dir, "output run directory")->required();
    tr_cmd->add_option("--stage", tr.stage, "training stage (1 or 2)")
        ->required()
        ->check(CLI::IsMember({1, 2}));
    tr_cmd->add_option("--init", tr.init_path, "checkpoint to start from");
    tr_cmd->add_flag("--allow-missing-init", tr.allow_missing_init,
                     "run stage 2 without a stage-1 checkpoint");

    EvalOpts ev;
    CLI::App* ev_cmd = app.add_subcommand("eval", "evaluate a checkpoint on a cohort");
    ev_cmd->add_option("--config", ev.config_path, "run config file")->required();
    ev_cmd->add_option("--data", ev.data_dir, "cohort directory")->required();
    ev_cmd->add_option("--vocab", ev.vocab_path, "vocabulary file")->required();
    ev_cmd->add_option("--ckpt", ev.ckpt_path, "checkpoint to evaluate");
    ev_cmd->add_option("--out", ev.out_dir, "output run directory")->required();
    ev_cmd->add_option("--ablate", ev.ablate_plan, "ablation plan (A, B, or C)");
    ev_cmd->add_option("--cell", ev.cells, "plan cell checkpoint as name=path");
    ev_cmd->add_option("--threads", ev.threads, "evaluation threads")->default_val(1);

    EvalOpts ab;
    CLI::App* ab_cmd = app.add_subcommand("ablate", "run an ablation plan (eval --ablate)");
    ab_cmd->add_option("--config", ab.config_path, "run config file")->required();
    ab_cmd->add_option("--data", ab.data_dir, "cohort directory")->required();
    ab_cmd->add_option("--vocab", ab.vocab_path, "vocabulary file")->required();
    ab_cmd->add_option("--ckpt", ab.ckpt_path, "reference checkpoint");
    ab_cmd->add_option("--out", ab.out_dir, "output run directory")->required();
    ab_cmd->add_option("--plan", ab.ablate_plan, "ablation plan (A, B, or C)")->required();
    ab_cmd->add_option("--cell", ab.cells, "plan cell checkpoint as name=path");
    ab_cmd->add_option("--threads", ab.threads, "evaluation threads")->default_val(1);

    PredictOpts pr;
    CLI::App* pr_cmd = app.add_subcommand("predict", "answer one question for one record");
    pr_cmd->add_option("--config", pr.config_path, "run config file")->required();
    pr_cmd->add_option("--vocab", pr.vocab_path, "vocabulary file")->required();
    pr_cmd->add_option("--ckpt", pr.ckpt_path, "checkpoint")->required();
    pr_cmd->add_option("--question", pr.question, "question text")->required();
    pr_cmd->add_option("--record", pr.record_json, "EHR record or manifest line as JSON");
    pr_cmd->add_option("--ecg", pr.ecg_path, "ECG tensor file (.upct)");
    pr_cmd->add_flag("--no-ecg", pr.no_ecg, "predict without ECG rows");
    pr_cmd->add_option("--sample-rate", pr.sample_rate, "ECG sample rate in Hz")
        ->default_val(100.0f);
    pr_cmd->add_option("--age", pr.age, "age in years");
    pr_cmd->add_option("--race", pr.race, "race");
    pr_cmd->add_option("--sex", pr.sex, "sex");
    pr_cmd->add_option("--bmi", pr.bmi, "body mass index");
    pr_cmd->add_option("--weight", pr.weight, "weight in kg");
    pr_cmd->add_option("--height", pr.height, "height in cm");
    pr_cmd->add_option("--temperature", pr.temperature, "temperature in Celsius");
    pr_cmd->add_option("--heartrate", pr.heartrate, "heart rate in bpm");
    pr_cmd->add_option("--resprate", pr.resprate, "respiratory rate per minute");
    pr_cmd->add_option("--o2sat", pr.o2sat, "oxygen saturation percent");
    pr_cmd->add_option("--sbp", pr.sbp, "systolic blood pressure");
    pr_cmd->add_option("--dbp", pr.dbp, "diastolic blood pressure");
    pr_cmd->add_option("--pain", pr.pain, "pain score 0-10");

    ReportOpts rp;
    CLI::App* rp_cmd = app.add_subcommand("report", "rebuild a report from a score CSV");
    rp_cmd->add_option("--scores", rp.scores_path, "score CSV")->required();
    rp_cmd->add_option("--tasks", rp.tasks_path, "tasks.jsonl mapping sub-tasks to categories")
        ->required();
    rp_cmd->add_option("--out", rp.out_path, "report JSON output path");
    rp_cmd->add_option("--bootstrap-b", rp.bootstrap_b, "bootstrap resamples")
        ->default_val(1000);
    rp_cmd->add_option("--seed", rp.seed, "bootstrap seed")->default_val(42);

    try {
        app.parse(argc, argv);
        if (app.got_subcommand(gen_cmd)) return cmd_gen_data(gen, args);
        if (app.got_subcommand(bv_cmd)) return cmd_build_vocab(bv);
        if (app.got_subcommand(tr_cmd)) return cmd_train(tr, args);
        if (app.got_subcommand(ev_cmd)) return cmd_eval(ev, args);
        if (app.got_subcommand(ab_cmd)) {
            if (ab.ablate_plan.empty())
                throw std::invalid_argument("ablate: --plan is required");
            return cmd_eval(ab, args);
        }
        if (app.got_subcommand(pr_cmd)) return cmd_predict(pr);
        if (app.got_subcommand(rp_cmd)) return cmd_report(rp);
        throw std::runtime_error("no subcommand selected");
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "error: " << single_line(e.what()) << "\n";
        return e.get_exit_code() == 0 ? 1 : e.get_exit_code();
    } catch (const std::exception& e) {
        std::cerr << "error: " << single_line(e.what()) << "\n";
        return 1;
    }
}

}  // namespace unipact
