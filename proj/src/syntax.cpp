#include "nnlens/syntax.hpp"

#include <sstream>

#include "nnlens/errors.hpp"

namespace nnlens {

using ordered_json = nlohmann::ordered_json;

const ConditionResult* TaskResult::condition(const std::string& name) const {
    for (const auto& [c, r] : conditions)
        if (c == name) return &r;
    return nullptr;
}

EvalItem make_eval_item(const Sentence& s) {
    const SentenceMeta& m = s.meta;
    if (m.verb_index < 0 || static_cast<size_t>(m.verb_index) >= s.tokens.size())
        throw ContractError("eval item: verb_index out of range");
    if (m.verb_correct == Vocab::kUnk || m.verb_wrong == Vocab::kUnk)
        throw ContractError("eval item: OOV verb form reached evaluation; filter upstream");
    if (m.verb_correct == m.verb_wrong)
        throw ContractError("eval item: verb_correct equals verb_wrong");
    EvalItem it;
    it.full = s.tokens;
    it.prefix.assign(s.tokens.begin(), s.tokens.begin() + m.verb_index);
    it.verb_position = static_cast<size_t>(m.verb_index);
    it.v_correct = m.verb_correct;
    it.v_wrong = m.verb_wrong;
    it.condition = m.condition;
    return it;
}

namespace {

bool sentence_oov(const Sentence& s) {
    return s.meta.verb_correct == Vocab::kUnk || s.meta.verb_wrong == Vocab::kUnk ||
           s.meta.verb_correct == s.meta.verb_wrong;
}

TaskResult evaluate_with(const ModelInterface& model, const Corpus& task,
                         bool (*eval_one)(const ModelInterface&, const EvalItem&)) {
    TaskResult res;
    res.task = task.task;
    res.generated = task.sentences.size();

    std::vector<EvalItem> items;
    items.reserve(task.sentences.size());
    for (const Sentence& s : task.sentences) {
        if (sentence_oov(s)) {
            ++res.filtered_oov;
            continue;
        }
        items.push_back(make_eval_item(s));
    }

    std::vector<char> ok(items.size(), 0);
#pragma omp parallel for schedule(dynamic)
    for (size_t i = 0; i < items.size(); ++i) ok[i] = eval_one(model, items[i]) ? 1 : 0;

    for (size_t i = 0; i < items.size(); ++i) {
        auto it = std::find_if(res.conditions.begin(), res.conditions.end(),
                               [&](const auto& p) { return p.first == items[i].condition; });
        if (it == res.conditions.end()) {
            res.conditions.emplace_back(items[i].condition, ConditionResult{});
            it = res.conditions.end() - 1;
        }
        it->second.total += 1;
        it->second.correct += ok[i] ? 1 : 0;
        ++res.evaluated;
    }
    return res;
}

} // namespace

bool eval_item_recurrent(const ModelInterface& model, const EvalItem& item) {
    if (item.v_correct == Vocab::kUnk || item.v_wrong == Vocab::kUnk)
        throw ContractError("eval item: OOV verb form reached evaluation; filter upstream");
    if (item.prefix.empty()) throw ContractError("eval item: empty prefix");
    ForwardResult fr = model.forward(item.prefix);
    const size_t last = item.prefix.size() - 1;
    const double lc = fr.logits.at(last, static_cast<size_t>(item.v_correct));
    const double lw = fr.logits.at(last, static_cast<size_t>(item.v_wrong));
    return lc > lw;
}

bool eval_item_masked(const ModelInterface& model, const EvalItem& item) {
    if (item.v_correct == Vocab::kUnk || item.v_wrong == Vocab::kUnk)
        throw ContractError("eval item: OOV verb form reached evaluation; filter upstream");
    if (item.verb_position >= item.full.size())
        throw ContractError("eval item: mask position outside the sentence");
    std::vector<int> masked = item.full;
    masked[item.verb_position] = Vocab::kMask;
    ForwardResult fr = model.forward(masked);
    const double lc = fr.logits.at(item.verb_position, static_cast<size_t>(item.v_correct));
    const double lw = fr.logits.at(item.verb_position, static_cast<size_t>(item.v_wrong));
    return lc > lw;
}

TaskResult evaluate_recurrent(const ModelInterface& model, const Corpus& task) {
    if (model.is_masked())
        throw ContractError("evaluate_recurrent requires a causal or recurrent model");
    return evaluate_with(model, task, eval_item_recurrent);
}

TaskResult evaluate_masked(const ModelInterface& model, const Corpus& task) {
    if (!model.is_masked())
        throw ContractError("evaluate_masked requires a model in masked mode");
    return evaluate_with(model, task, eval_item_masked);
}

TaskResult evaluate(const ModelInterface& model, const Corpus& task) {
    return model.is_masked() ? evaluate_masked(model, task) : evaluate_recurrent(model, task);
}

std::string condition_table(
    const std::vector<std::pair<std::string, std::map<std::string, TaskResult>>>& per_model) {
    std::ostringstream os;
    os << std::left;
    const int task_w = 12, cond_w = 6, col_w = 12;
    os.width(task_w);
    os << "task";
    os.width(cond_w);
    os << "cond";
    for (const auto& [name, _] : per_model) {
        os.width(col_w);
        os << name;
    }
    os << "\n";

    // Row set comes from the first model's results to keep a stable order.
    if (per_model.empty()) return os.str();
    for (const auto& [task_name, result] : per_model.front().second) {
        for (const auto& [cond, _] : result.conditions) {
            os.width(task_w);
            os << task_name;
            os.width(cond_w);
            os << cond;
            for (const auto& [model_name, results] : per_model) {
                auto it = results.find(task_name);
                const ConditionResult* cr =
                    it == results.end() ? nullptr : it->second.condition(cond);
                char buf[32];
                if (cr)
                    std::snprintf(buf, sizeof(buf), "%.3f", cr->accuracy());
                else
                    std::snprintf(buf, sizeof(buf), "-");
                os.width(col_w);
                os << buf;
            }
            os << "\n";
        }
    }
    return os.str();
}

ordered_json syntax_results_json(
    const std::vector<std::pair<std::string, std::map<std::string, TaskResult>>>& per_model) {
    ordered_json out;
    out["models"] = ordered_json::object();
    for (const auto& [model_name, results] : per_model) {
        ordered_json jm;
        for (const auto& [task_name, result] : results) {
            ordered_json jt;
            jt["generated"] = result.generated;
            jt["evaluated"] = result.evaluated;
            jt["filtered_oov"] = result.filtered_oov;
            ordered_json jc = ordered_json::object();
            for (const auto& [cond, cr] : result.conditions)
                jc[cond] = {{"total", cr.total}, {"correct", cr.correct},
                            {"accuracy", cr.accuracy()}};
            jt["conditions"] = std::move(jc);
            jm[task_name] = std::move(jt);
        }
        out["models"][model_name] = std::move(jm);
    }
    return out;
}

} // namespace nnlens
