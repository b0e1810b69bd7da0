#pragma once

#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "nnlens/corpus.hpp"
#include "nnlens/model.hpp"

namespace nnlens {

// One targeted-evaluation item: decide between the correct- and wrong-
// number verb form at the verb position.
struct EvalItem {
    std::vector<int> prefix;  // tokens up to but excluding the verb
    std::vector<int> full;    // complete sentence
    size_t verb_position = 0;
    int v_correct = -1;
    int v_wrong = -1;
    std::string condition;
};

struct ConditionResult {
    size_t total = 0;
    size_t correct = 0;
    double accuracy() const { return total == 0 ? 0.0 : double(correct) / double(total); }
};

struct TaskResult {
    std::string task;
    // Condition order follows first appearance in the corpus.
    std::vector<std::pair<std::string, ConditionResult>> conditions;
    size_t generated = 0;
    size_t evaluated = 0;
    size_t filtered_oov = 0; // items dropped because a verb form is OOV

    const ConditionResult* condition(const std::string& name) const;
};

// Builds the item, throwing ContractError when either verb form is <unk>
// or the two forms coincide (such sentences must be filtered upstream).
EvalItem make_eval_item(const Sentence& s);

// Strict comparison: correct iff logit(v_correct) > logit(v_wrong); ties
// count as incorrect.
bool eval_item_recurrent(const ModelInterface& model, const EvalItem& item);
bool eval_item_masked(const ModelInterface& model, const EvalItem& item);

// Corpus-level evaluation with OOV filtering and per-condition accuracy.
TaskResult evaluate_recurrent(const ModelInterface& model, const Corpus& task);
TaskResult evaluate_masked(const ModelInterface& model, const Corpus& task);

// Dispatches on model.is_masked().
TaskResult evaluate(const ModelInterface& model, const Corpus& task);

// Plain-text table, rows = (task, condition), one column per model.
std::string condition_table(
    const std::vector<std::pair<std::string, std::map<std::string, TaskResult>>>& per_model);

nlohmann::ordered_json syntax_results_json(
    const std::vector<std::pair<std::string, std::map<std::string, TaskResult>>>& per_model);

} // namespace nnlens
