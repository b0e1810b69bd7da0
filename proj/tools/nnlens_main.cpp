#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "nnlens/config.hpp"
#include "nnlens/errors.hpp"
#include "nnlens/pipeline.hpp"

int main(int argc, char** argv) {
    CLI::App app{"nnlens - activation extraction, probing, targeted syntactic evaluation, "
                 "and Shapley-based feature attribution for small language models"};
    app.require_subcommand(1);

    std::string config_path;
    std::string workspace_flag;
    bool print_config = false;

    struct SubState {
        CLI::App* sub;
        std::vector<std::string> overrides;
    };
    // Option bindings hold references into these elements; size is fixed
    // up front so they never move.
    std::vector<SubState> subs(nnlens::subcommand_names().size());
    for (size_t i = 0; i < subs.size(); ++i) {
        CLI::App* sub = app.add_subcommand(nnlens::subcommand_names()[i]);
        subs[i].sub = sub;
        sub->add_option("--config", config_path, "JSON config file");
        sub->add_option("--workspace", workspace_flag,
                        "workspace root (overrides NNLENS_WORKSPACE and the config)");
        sub->add_flag("--print-config", print_config, "print the effective config and exit");
        sub->add_option("overrides", subs[i].overrides, "key=value config overrides");
    }

    CLI11_PARSE(app, argc, argv);

    try {
        std::optional<std::filesystem::path> file;
        if (!config_path.empty()) file = config_path;
        const SubState* active = nullptr;
        for (const SubState& st : subs)
            if (st.sub->parsed()) active = &st;
        nnlens::Config cfg =
            nnlens::load_config(file, active ? active->overrides : std::vector<std::string>{});

        // Workspace precedence: --workspace > NNLENS_WORKSPACE > config.
        if (const char* env = std::getenv("NNLENS_WORKSPACE"); env && *env) cfg.workspace = env;
        if (!workspace_flag.empty()) cfg.workspace = workspace_flag;

        if (print_config) {
            std::cout << nnlens::config_json(cfg).dump(2) << "\n";
            return 0;
        }
        nnlens::run_subcommand(active->sub->get_name(), cfg);
        return 0;
    } catch (const nnlens::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
