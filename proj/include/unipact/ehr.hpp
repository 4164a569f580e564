#pragma once

#include <cmath>
#include <fstream>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "unipact/common.hpp"

namespace unipact {

// One structured pre-ICU snapshot. Every field is independently optional;
// numeric fields carry the units used by the prompt templates (years, kg/m²,
// kg, cm, °C, bpm, breaths/min, %, mmHg, mmHg, 0-10 score).
struct EhrRecord {
    std::optional<float> age;
    std::optional<std::string> race;
    std::optional<std::string> sex;

    std::optional<float> bmi;
    std::optional<float> weight;
    std::optional<float> height;

    std::optional<float> temperature;
    std::optional<float> heartrate;
    std::optional<float> resprate;
    std::optional<float> o2sat;
    std::optional<float> sbp;
    std::optional<float> dbp;
    std::optional<float> pain;
};

inline void validate(const EhrRecord& rec) {
    auto check = [](const std::optional<float>& v, const char* name) {
        if (v && !std::isfinite(*v))
            throw std::invalid_argument(std::string("ehr record: field ") + name +
                                        " is not finite");
    };
    check(rec.age, "age");
    check(rec.bmi, "bmi");
    check(rec.weight, "weight");
    check(rec.height, "height");
    check(rec.temperature, "temperature");
    check(rec.heartrate, "heartrate");
    check(rec.resprate, "resprate");
    check(rec.o2sat, "o2sat");
    check(rec.sbp, "sbp");
    check(rec.dbp, "dbp");
    check(rec.pain, "pain");
}

struct AblationMask {
    bool include_demographics = true;
    bool include_biometrics = true;
    bool include_vitals = true;
    bool include_ecg = true;
    bool include_ehr = true;

    // include_ehr=false overrides the per-group flags.
    AblationMask normalized() const {
        AblationMask m = *this;
        if (!m.include_ehr) {
            m.include_demographics = false;
            m.include_biometrics = false;
            m.include_vitals = false;
        }
        return m;
    }
};

struct GroupSpan {
    std::string group;
    size_t begin = 0;
    size_t end = 0;
};

struct PromptText {
    std::string text;
    std::vector<GroupSpan> group_spans;
};

// ---------------------------------------------------------------------------
// sentence templates
// ---------------------------------------------------------------------------

// A group sentence template is "<prefix>: <segment>, <segment>, ...". where
// each segment holds {field} placeholders. Segments whose fields are absent
// from the record are dropped; a sentence with no surviving segment is
// omitted entirely.
struct TemplateRegistry {
    std::string demographics;
    std::string vitals;
    std::string biometrics;

    static TemplateRegistry defaults() {
        TemplateRegistry r;
        r.demographics = "The demographics information: {age} year-old, {race}, {sex}.";
        r.vitals =
            "The vital parameters: temperature {temperature}, heartrate {heartrate}, "
            "resprate {resprate}, o2sat {o2sat}, sbp {sbp}, dbp {dbp}, pain {pain}.";
        r.biometrics = "The biometrics information: bmi {bmi}, weight {weight}, height {height}.";
        return r;
    }

    static TemplateRegistry load(const std::string& path) {
        std::ifstream f(path);
        if (!f) throw std::runtime_error("template registry: cannot open: " + path);
        TemplateRegistry r = defaults();
        std::string line;
        int lineno = 0;
        while (std::getline(f, line)) {
            ++lineno;
            size_t start = line.find_first_not_of(" \t\r");
            if (start == std::string::npos || line[start] == '#') continue;
            size_t eq = line.find('=');
            if (eq == std::string::npos)
                throw std::runtime_error("template registry: line " + std::to_string(lineno) +
                                         " is not key=value: " + line);
            std::string key = line.substr(start, eq - start);
            while (!key.empty() && (key.back() == ' ' || key.back() == '\t')) key.pop_back();
            std::string value = line.substr(eq + 1);
            while (!value.empty() && (value.back() == '\r' || value.back() == '\n'))
                value.pop_back();
            if (key == "demographics")
                r.demographics = value;
            else if (key == "vitals")
                r.vitals = value;
            else if (key == "biometrics")
                r.biometrics = value;
            else
                throw std::runtime_error("template registry: unknown group key '" + key + "' in " +
                                         path);
        }
        r.validate_templates();
        return r;
    }

    void validate_templates() const {
        for (const auto* t : {&demographics, &vitals, &biometrics}) {
            if (t->find(": ") == std::string::npos)
                throw std::runtime_error("template registry: template missing ': ' separator: " +
                                         *t);
            if (t->empty() || t->back() != '.')
                throw std::runtime_error("template registry: template must end with '.': " + *t);
        }
    }
};

namespace detail {

inline std::optional<std::string> field_text(const EhrRecord& rec, std::string_view name) {
    auto num = [](const std::optional<float>& v) -> std::optional<std::string> {
        if (!v) return std::nullopt;
        return format_fixed(*v, 1);
    };
    if (name == "age") return num(rec.age);
    if (name == "race") return rec.race;
    if (name == "sex") return rec.sex;
    if (name == "bmi") return num(rec.bmi);
    if (name == "weight") return num(rec.weight);
    if (name == "height") return num(rec.height);
    if (name == "temperature") return num(rec.temperature);
    if (name == "heartrate") return num(rec.heartrate);
    if (name == "resprate") return num(rec.resprate);
    if (name == "o2sat") return num(rec.o2sat);
    if (name == "sbp") return num(rec.sbp);
    if (name == "dbp") return num(rec.dbp);
    if (name == "pain") return num(rec.pain);
    throw std::runtime_error("template registry: unknown field placeholder '{" + std::string(name) +
                             "}'");
}

// Renders one group sentence, or "" when no segment survives.
inline std::string render_group(const std::string& tpl, const EhrRecord& rec) {
    size_t colon = tpl.find(": ");
    std::string prefix = tpl.substr(0, colon + 2);
    std::string body = tpl.substr(colon + 2);
    if (!body.empty() && body.back() == '.') body.pop_back();

    std::vector<std::string> kept;
    size_t pos = 0;
    while (pos <= body.size()) {
        size_t next = body.find(", ", pos);
        std::string seg = body.substr(pos, next == std::string::npos ? std::string::npos
                                                                     : next - pos);
        pos = next == std::string::npos ? body.size() + 1 : next + 2;

        std::string rendered;
        bool all_present = true;
        size_t i = 0;
        while (i < seg.size()) {
            if (seg[i] == '{') {
                size_t close = seg.find('}', i);
                if (close == std::string::npos)
                    throw std::runtime_error("template registry: unclosed placeholder in: " + seg);
                auto v = field_text(rec, std::string_view(seg).substr(i + 1, close - i - 1));
                if (!v) {
                    all_present = false;
                    break;
                }
                rendered += *v;
                i = close + 1;
            } else {
                rendered.push_back(seg[i]);
                ++i;
            }
        }
        if (all_present && !rendered.empty()) kept.push_back(rendered);
    }
    if (kept.empty()) return "";
    std::string out = prefix;
    for (size_t k = 0; k < kept.size(); ++k) {
        if (k) out += ", ";
        out += kept[k];
    }
    out.push_back('.');
    return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// rendering
// ---------------------------------------------------------------------------

// Renders the included groups in fixed order (demographics, vitals,
// biometrics), joined by single spaces. Absent fields drop out of their
// sentence; empty groups drop their sentence; a fully-masked record renders
// as "".
inline PromptText render_prompt(const EhrRecord& rec, const AblationMask& mask,
                                const TemplateRegistry& reg = TemplateRegistry::defaults()) {
    AblationMask m = mask.normalized();
    PromptText out;
    struct GroupPlan {
        const char* name;
        bool included;
        const std::string* tpl;
    };
    const GroupPlan plan[] = {
        {"demographics", m.include_demographics, &reg.demographics},
        {"vitals", m.include_vitals, &reg.vitals},
        {"biometrics", m.include_biometrics, &reg.biometrics},
    };
    for (const auto& g : plan) {
        if (!g.included) continue;
        std::string sentence = detail::render_group(*g.tpl, rec);
        if (sentence.empty()) continue;
        if (!out.text.empty()) out.text.push_back(' ');
        size_t begin = out.text.size();
        out.text += sentence;
        out.group_spans.push_back({g.name, begin, out.text.size()});
    }
    return out;
}

inline constexpr std::string_view kAnswerSuffix = "? Answer strictly with Yes or No.";

// "<question>? Answer strictly with Yes or No." with exactly one question
// mark at the join; applying it to an already-rendered question is a no-op.
inline std::string render_question(const std::string& task_id, const std::string& question_text) {
    std::string q = question_text;
    while (!q.empty() && (q.back() == ' ' || q.back() == '\t' || q.back() == '\n')) q.pop_back();
    if (q.size() >= kAnswerSuffix.size() &&
        std::string_view(q).substr(q.size() - kAnswerSuffix.size()) == kAnswerSuffix)
        return q;
    while (!q.empty() && (q.back() == '?' || q.back() == ' ')) q.pop_back();
    if (q.empty())
        throw std::invalid_argument("render_question: empty question for task '" + task_id + "'");
    return q + std::string(kAnswerSuffix);
}

// Role, task description, EHR prompt, and question joined by single spaces
// (empty parts skipped). ECG content never appears here; it enters the
// sequence as embeddings.
inline std::string assemble_full_text(const std::string& role, const std::string& task_desc,
                                      const PromptText& prompt, const std::string& question) {
    std::string out;
    for (const std::string* part : {&role, &task_desc, &prompt.text, &question}) {
        if (part->empty()) continue;
        if (!out.empty()) out.push_back(' ');
        out += *part;
    }
    return out;
}

}  // namespace unipact
