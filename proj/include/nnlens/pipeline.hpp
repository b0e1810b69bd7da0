#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "nnlens/config.hpp"

namespace nnlens {

// Fixed workspace layout: workspace/{corpus,models,activations,results}.
struct Workspace {
    std::filesystem::path root;

    std::filesystem::path corpus_dir() const { return root / "corpus"; }
    std::filesystem::path models_dir() const { return root / "models"; }
    std::filesystem::path activations_dir() const { return root / "activations"; }
    std::filesystem::path results_dir() const { return root / "results"; }
    std::filesystem::path lock_file() const { return root / ".lock"; }
};

// Derived name of the configured model's checkpoint (within models/).
std::string model_name(const Config& cfg);

// The comma list (or "all") expanded to concrete task names.
std::vector<std::string> task_list(const std::string& spec, const Config& cfg);

// Runs one subcommand (generate, train-lm, extract, syntax, probe,
// attribute, all). Holds the workspace lock for the duration. Throws
// nnlens::Error subclasses on failure; missing upstream artifacts name the
// producing subcommand.
void run_subcommand(const std::string& command, const Config& cfg);

const std::vector<std::string>& subcommand_names();

} // namespace nnlens
