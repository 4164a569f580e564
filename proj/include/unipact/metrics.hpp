#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "unipact/common.hpp"

namespace unipact {

struct DegenerateSetError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Per-sample scores and binary labels for one sub-task.
struct ScoredSet {
    std::vector<float> scores;
    std::vector<int> labels;

    size_t size() const { return scores.size(); }
    int positives() const { return static_cast<int>(std::count(labels.begin(), labels.end(), 1)); }
    int negatives() const { return static_cast<int>(labels.size()) - positives(); }
};

// Probability that a random positive outscores a random negative, ties at
// 1/2 (Mann-Whitney). Rank-based: O(n log n), exactly equal to the pairwise
// count because mean ranks encode tie halves.
inline double auroc(const ScoredSet& s) {
    if (s.scores.size() != s.labels.size())
        throw std::invalid_argument("auroc: scores/labels size mismatch");
    size_t n = s.size();
    int pos = s.positives(), neg = s.negatives();
    if (pos == 0 || neg == 0)
        throw DegenerateSetError("auroc: degenerate set with " + std::to_string(pos) +
                                 " positives and " + std::to_string(neg) + " negatives");
    std::vector<size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(),
              [&](size_t a, size_t b) { return s.scores[a] < s.scores[b]; });
    double rank_sum_pos = 0.0;
    size_t i = 0;
    while (i < n) {
        size_t j = i;
        while (j < n && s.scores[idx[j]] == s.scores[idx[i]]) ++j;
        double mean_rank = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j));  // 1-based
        for (size_t k = i; k < j; ++k)
            if (s.labels[idx[k]] == 1) rank_sum_pos += mean_rank;
        i = j;
    }
    double u = rank_sum_pos - 0.5 * pos * (pos + 1.0);
    return u / (static_cast<double>(pos) * neg);
}

// Percentile bootstrap (2.5th, 97.5th) over B seeded sample-level resamples
// with replacement; single-class resamples are redrawn with a bounded retry
// budget.
inline std::pair<double, double> bootstrap_ci(const ScoredSet& s, int B, uint64_t seed) {
    if (B < 1) throw std::invalid_argument("bootstrap_ci: B must be >= 1");
    if (s.positives() == 0 || s.negatives() == 0)
        throw DegenerateSetError("bootstrap_ci: degenerate input set");
    Rng rng(seed);
    size_t n = s.size();
    std::vector<double> stats;
    stats.reserve(static_cast<size_t>(B));
    constexpr int kMaxRetriesPerResample = 100;
    ScoredSet re;
    re.scores.resize(n);
    re.labels.resize(n);
    for (int b = 0; b < B; ++b) {
        int attempt = 0;
        while (true) {
            int pos = 0;
            for (size_t i = 0; i < n; ++i) {
                size_t k = static_cast<size_t>(rng.uniform_int(static_cast<uint64_t>(n)));
                re.scores[i] = s.scores[k];
                re.labels[i] = s.labels[k];
                pos += s.labels[k];
            }
            if (pos > 0 && pos < static_cast<int>(n)) break;
            if (++attempt > kMaxRetriesPerResample)
                throw DegenerateSetError(
                    "bootstrap_ci: retry budget exhausted drawing a two-class resample");
        }
        stats.push_back(auroc(re));
    }
    std::sort(stats.begin(), stats.end());
    auto quantile = [&](double p) {
        double pos = p * (static_cast<double>(stats.size()) - 1.0);
        size_t lo = static_cast<size_t>(std::floor(pos));
        size_t hi = std::min(lo + 1, stats.size() - 1);
        double frac = pos - static_cast<double>(lo);
        return stats[lo] * (1.0 - frac) + stats[hi] * frac;
    };
    return {quantile(0.025), quantile(0.975)};
}

// ---------------------------------------------------------------------------
// aggregation
// ---------------------------------------------------------------------------

inline constexpr double kRobustCiLowerBound = 0.8;
inline constexpr int kRobustMinClassCount = 5;

struct SubtaskResult {
    std::string subtask_id;
    double auroc = 0.0;
    double ci_lo = 0.0;
    double ci_hi = 0.0;
    int n_pos = 0;
    int n_neg = 0;
};

struct CategoryReport {
    std::string name;
    double mean = 0.0;
    int n_subtasks = 0;
    int robust = 0;
};

struct EvalReport {
    std::vector<SubtaskResult> subtasks;
    std::vector<CategoryReport> categories;
    double overall = 0.0;
    int robust_total = 0;
    std::vector<std::string> robust_excluded;  // too few per-class samples
};

inline const std::vector<std::string>& canonical_categories() {
    static const std::vector<std::string> cats = {"diagnosis", "deterioration", "icu",
                                                  "mortality"};
    return cats;
}

// Category mean = mean over its sub-tasks; overall = unweighted mean of the
// category means. Robust = CI lower bound > 0.8, counted only for sub-tasks
// with at least 5 samples in each class.
inline EvalReport aggregate(const std::vector<SubtaskResult>& results,
                            const std::map<std::string, std::string>& subtask_category) {
    EvalReport report;
    report.subtasks = results;
    std::map<std::string, std::vector<const SubtaskResult*>> by_cat;
    for (const auto& r : results) {
        auto it = subtask_category.find(r.subtask_id);
        if (it == subtask_category.end())
            throw std::invalid_argument("aggregate: sub-task '" + r.subtask_id +
                                        "' has no category mapping");
        by_cat[it->second].push_back(&r);
    }
    // canonical categories first, then any extras in lexicographic order
    std::vector<std::string> order;
    for (const auto& c : canonical_categories())
        if (by_cat.count(c)) order.push_back(c);
    for (const auto& [c, v] : by_cat)
        if (std::find(order.begin(), order.end(), c) == order.end()) order.push_back(c);

    double cat_mean_sum = 0.0;
    for (const auto& cat : order) {
        CategoryReport cr;
        cr.name = cat;
        for (const SubtaskResult* r : by_cat[cat]) {
            cr.mean += r->auroc;
            ++cr.n_subtasks;
            if (r->n_pos < kRobustMinClassCount || r->n_neg < kRobustMinClassCount) {
                report.robust_excluded.push_back(r->subtask_id);
            } else if (r->ci_lo > kRobustCiLowerBound) {
                ++cr.robust;
            }
        }
        cr.mean /= static_cast<double>(cr.n_subtasks);
        cat_mean_sum += cr.mean;
        report.robust_total += cr.robust;
        report.categories.push_back(cr);
    }
    if (!order.empty()) report.overall = cat_mean_sum / static_cast<double>(order.size());
    std::sort(report.robust_excluded.begin(), report.robust_excluded.end());
    return report;
}

// 100*(a-b)/b; callers format to one decimal.
inline double relative_improvement(double a, double b) {
    if (b <= 0.0)
        throw std::invalid_argument("relative_improvement: baseline must be positive, got " +
                                    std::to_string(b));
    return 100.0 * (a - b) / b;
}

// Mean and sample standard deviation (n-1) over category means, as used by
// ablation tables.
inline std::pair<double, double> mean_sd(const std::vector<double>& values) {
    if (values.empty()) throw std::invalid_argument("mean_sd: empty input");
    double mean = std::accumulate(values.begin(), values.end(), 0.0) /
                  static_cast<double>(values.size());
    if (values.size() == 1) return {mean, 0.0};
    double acc = 0.0;
    for (double v : values) acc += (v - mean) * (v - mean);
    return {mean, std::sqrt(acc / (static_cast<double>(values.size()) - 1.0))};
}

// ---------------------------------------------------------------------------
// score files: CSV subtask_id,sample_id,score,label
// ---------------------------------------------------------------------------

struct ScoreRow {
    std::string subtask_id;
    std::string sample_id;
    float score = 0.0f;
    int label = 0;
};

inline void write_scores_csv(const std::string& path, const std::vector<ScoreRow>& rows) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("scores: cannot open for write: " + path);
    f << "subtask_id,sample_id,score,label\n";
    for (const auto& r : rows)
        f << r.subtask_id << ',' << r.sample_id << ',' << format_fixed(r.score, 6) << ','
          << r.label << '\n';
}

inline std::vector<ScoreRow> read_scores_csv(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("scores: cannot open: " + path);
    std::vector<ScoreRow> rows;
    std::string line;
    if (!std::getline(f, line) || line != "subtask_id,sample_id,score,label")
        throw std::runtime_error("scores: bad header in " + path);
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        std::istringstream ss(line);
        ScoreRow r;
        std::string score_s, label_s;
        if (!std::getline(ss, r.subtask_id, ',') || !std::getline(ss, r.sample_id, ',') ||
            !std::getline(ss, score_s, ',') || !std::getline(ss, label_s))
            throw std::runtime_error("scores: malformed row in " + path + ": " + line);
        r.score = std::stof(score_s);
        r.label = std::stoi(label_s);
        rows.push_back(r);
    }
    return rows;
}

inline std::map<std::string, ScoredSet> group_scores(const std::vector<ScoreRow>& rows) {
    std::map<std::string, ScoredSet> out;
    for (const auto& r : rows) {
        out[r.subtask_id].scores.push_back(r.score);
        out[r.subtask_id].labels.push_back(r.label);
    }
    return out;
}

}  // namespace unipact
