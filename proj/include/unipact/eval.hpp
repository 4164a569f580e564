#pragma once

#include <functional>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "unipact/metrics.hpp"
#include "unipact/train.hpp"

namespace unipact {

// ---------------------------------------------------------------------------
// model evaluation
// ---------------------------------------------------------------------------

struct EvalConfig {
    int bootstrap_b = 1000;
    uint64_t bootstrap_seed = 17;
    int threads = 1;
};

struct EvalOutput {
    std::vector<ScoreRow> rows;  // (subtask, sample) scores in deterministic order
    EvalReport report;
};

inline std::map<std::string, std::string> category_map(const std::vector<TaskSpec>& tasks) {
    std::map<std::string, std::string> out;
    for (const auto& t : tasks) out[t.id] = t.category;
    return out;
}

// Per-subtask AUROC + bootstrap CI from already-scored rows, aggregated into
// the category/overall report. Bootstrap seeds derive from the sub-task id so
// results do not depend on sub-task evaluation order.
inline EvalReport report_from_rows(const std::vector<ScoreRow>& rows,
                                   const std::vector<TaskSpec>& tasks,
                                   const EvalConfig& cfg = {}) {
    auto groups = group_scores(rows);
    std::vector<SubtaskResult> results;
    for (const auto& [subtask, set] : groups) {
        SubtaskResult r;
        r.subtask_id = subtask;
        r.n_pos = set.positives();
        r.n_neg = set.negatives();
        if (r.n_pos == 0 || r.n_neg == 0)
            throw DegenerateSetError("report: sub-task '" + subtask +
                                     "' has a single class (" + std::to_string(r.n_pos) +
                                     " pos, " + std::to_string(r.n_neg) + " neg)");
        r.auroc = auroc(set);
        auto [lo, hi] = bootstrap_ci(set, cfg.bootstrap_b,
                                     derive_seed(cfg.bootstrap_seed, subtask));
        r.ci_lo = lo;
        r.ci_hi = hi;
        results.push_back(std::move(r));
    }
    return aggregate(results, category_map(tasks));
}

// Scores every sample with the model, groups by sub-task, and aggregates
// into the category/overall report with bootstrap CIs. Score row order is
// fixed by the sample order, independent of the thread count.
inline EvalOutput evaluate_model(const FusionModel& model, const std::vector<Sample>& samples,
                                 const std::vector<TaskSpec>& tasks,
                                 const EvalConfig& cfg = {}) {
    if (samples.empty()) throw std::invalid_argument("evaluate_model: no samples");
    EvalOutput out;
    out.rows.resize(samples.size());
    parallel_chunks(samples.size(), cfg.threads, [&](size_t b, size_t e, size_t) {
        for (size_t i = b; i < e; ++i) {
            const Sample& s = samples[i];
            out.rows[i] = ScoreRow{s.subtask_id, s.sample_id, score_sample(model, s),
                                   s.answer == "Yes" ? 1 : 0};
        }
    });
    out.report = report_from_rows(out.rows, tasks, cfg);
    return out;
}

// ---------------------------------------------------------------------------
// report formatting
// ---------------------------------------------------------------------------

inline ordered_json report_to_json(const EvalReport& rep) {
    ordered_json j;
    j["overall"] = rep.overall;
    j["robust_total"] = rep.robust_total;
    j["ci_method"] = "percentile bootstrap";
    j["categories"] = ordered_json::array();
    for (const auto& c : rep.categories) {
        ordered_json cj;
        cj["name"] = c.name;
        cj["mean_auroc"] = c.mean;
        cj["n_subtasks"] = c.n_subtasks;
        cj["robust"] = c.robust;
        j["categories"].push_back(cj);
    }
    j["subtasks"] = ordered_json::array();
    for (const auto& s : rep.subtasks) {
        ordered_json sj;
        sj["id"] = s.subtask_id;
        sj["auroc"] = s.auroc;
        sj["ci_lo"] = s.ci_lo;
        sj["ci_hi"] = s.ci_hi;
        sj["n_pos"] = s.n_pos;
        sj["n_neg"] = s.n_neg;
        j["subtasks"].push_back(sj);
    }
    j["robust_excluded"] = rep.robust_excluded;
    return j;
}

inline std::string format_report_table(const EvalReport& rep) {
    std::ostringstream os;
    os << "category        mean-AUROC  subtasks  robust\n";
    char line[96];
    for (const auto& c : rep.categories) {
        std::snprintf(line, sizeof(line), "%-15s %10.4f  %8d  %6d\n", c.name.c_str(), c.mean,
                      c.n_subtasks, c.robust);
        os << line;
    }
    std::snprintf(line, sizeof(line), "%-15s %10.4f  %8zu  %6d\n", "overall", rep.overall,
                  rep.subtasks.size(), rep.robust_total);
    os << line;
    if (!rep.robust_excluded.empty()) {
        os << "excluded from robust counting (<5 per class):";
        for (const auto& id : rep.robust_excluded) os << ' ' << id;
        os << '\n';
    }
    return os.str();
}

// ---------------------------------------------------------------------------
// ablation plans
// ---------------------------------------------------------------------------

// A: modality comparison across separately trained checkpoints.
// B: per-category single-task checkpoints vs the unified checkpoint.
// C: one checkpoint, inputs degraded at evaluation time.
enum class AblationPlan { A, B, C };

inline AblationPlan parse_plan(const std::string& s) {
    if (s == "A" || s == "a") return AblationPlan::A;
    if (s == "B" || s == "b") return AblationPlan::B;
    if (s == "C" || s == "c") return AblationPlan::C;
    throw std::invalid_argument("ablation: unknown plan '" + s + "' (expected A, B, or C)");
}

struct AblationRow {
    std::string label;
    EvalReport report;
    double mean = 0.0;  // over category means
    double sd = 0.0;    // sample SD over category means
};

struct AblationTable {
    std::string plan;
    std::vector<AblationRow> rows;
};

using ModelLoader = std::function<FusionModel(const std::string& checkpoint_path)>;

namespace detail {

inline const std::string& require_cell(const std::map<std::string, std::string>& checkpoints,
                                       const std::string& plan, const std::string& cell) {
    auto it = checkpoints.find(cell);
    if (it == checkpoints.end())
        throw std::runtime_error("ablation plan " + plan + ": missing checkpoint for cell '" +
                                 cell + "'");
    return it->second;
}

inline AblationRow eval_row(const std::string& label, const FusionModel& model,
                            const std::vector<Sample>& samples,
                            const std::vector<TaskSpec>& tasks, const EvalConfig& cfg) {
    AblationRow row;
    row.label = label;
    row.report = evaluate_model(model, samples, tasks, cfg).report;
    std::vector<double> cat_means;
    for (const auto& c : row.report.categories) cat_means.push_back(c.mean);
    auto [mean, sd] = mean_sd(cat_means);
    row.mean = mean;
    row.sd = sd;
    return row;
}

}  // namespace detail

// Plan-C evaluation masks, in fixed row order after the full-model row.
inline std::vector<std::pair<std::string, AblationMask>> plan_c_conditions() {
    std::vector<std::pair<std::string, AblationMask>> rows;
    AblationMask m;
    rows.emplace_back("full", m);
    m = AblationMask{};
    m.include_demographics = false;
    rows.emplace_back("w/o demographics", m);
    m = AblationMask{};
    m.include_biometrics = false;
    rows.emplace_back("w/o biometrics", m);
    m = AblationMask{};
    m.include_vitals = false;
    rows.emplace_back("w/o vitals", m);
    m = AblationMask{};
    m.include_ecg = false;
    rows.emplace_back("w/o ECG", m);
    m = AblationMask{};
    m.include_ehr = false;
    rows.emplace_back("w/o all EHR", m);
    return rows;
}

// Evaluates the requested plan. `checkpoints` maps plan cells to checkpoint
// paths: plan A needs full/ecg_only/ehr_only, plan B needs unified plus
// single:<category> for each canonical category, plan C needs full.
inline AblationTable run_ablation(AblationPlan plan,
                                  const std::map<std::string, std::string>& checkpoints,
                                  const ModelLoader& load_model,
                                  const std::vector<Patient>& cohort,
                                  const std::vector<TaskSpec>& tasks,
                                  const EvalConfig& cfg = {}) {
    AblationTable table;
    if (plan == AblationPlan::A) {
        table.plan = "A";
        struct Cell {
            const char* name;
            AblationMask mask;
        };
        std::vector<Cell> cells;
        cells.push_back({"full", AblationMask{}});
        AblationMask ecg_only;
        ecg_only.include_ehr = false;
        cells.push_back({"ecg_only", ecg_only});
        AblationMask ehr_only;
        ehr_only.include_ecg = false;
        cells.push_back({"ehr_only", ehr_only});
        for (const auto& cell : cells) {
            FusionModel model = load_model(detail::require_cell(checkpoints, "A", cell.name));
            auto samples = make_samples(cohort, tasks, cell.mask);
            table.rows.push_back(detail::eval_row(cell.name, model, samples, tasks, cfg));
        }
    } else if (plan == AblationPlan::B) {
        table.plan = "B";
        FusionModel unified = load_model(detail::require_cell(checkpoints, "B", "unified"));
        auto all_samples = make_samples(cohort, tasks);
        table.rows.push_back(detail::eval_row("unified", unified, all_samples, tasks, cfg));
        for (const auto& cat : canonical_categories()) {
            std::string cell = "single:" + cat;
            FusionModel model = load_model(detail::require_cell(checkpoints, "B", cell));
            std::vector<TaskSpec> cat_tasks;
            for (const auto& t : tasks)
                if (t.category == cat) cat_tasks.push_back(t);
            if (cat_tasks.empty())
                throw std::invalid_argument("ablation plan B: no tasks in category '" + cat +
                                            "'");
            auto samples = make_samples(cohort, cat_tasks);
            table.rows.push_back(detail::eval_row(cell, model, samples, cat_tasks, cfg));
        }
    } else {
        table.plan = "C";
        FusionModel model = load_model(detail::require_cell(checkpoints, "C", "full"));
        for (const auto& [label, mask] : plan_c_conditions()) {
            auto samples = make_samples(cohort, tasks, mask);
            table.rows.push_back(detail::eval_row(label, model, samples, tasks, cfg));
        }
    }
    return table;
}

inline ordered_json ablation_to_json(const AblationTable& table) {
    ordered_json j;
    j["plan"] = table.plan;
    j["rows"] = ordered_json::array();
    for (const auto& r : table.rows) {
        ordered_json rj;
        rj["label"] = r.label;
        rj["mean"] = r.mean;
        rj["sd"] = r.sd;
        rj["report"] = report_to_json(r.report);
        j["rows"].push_back(rj);
    }
    return j;
}

inline std::string format_ablation_table(const AblationTable& table) {
    std::ostringstream os;
    os << "ablation plan " << table.plan << "\n";
    os << "row                  mean+-sd (over categories)\n";
    char line[96];
    for (const auto& r : table.rows) {
        std::snprintf(line, sizeof(line), "%-20s %.4f +- %.4f\n", r.label.c_str(), r.mean,
                      r.sd);
        os << line;
    }
    return os.str();
}

}  // namespace unipact
