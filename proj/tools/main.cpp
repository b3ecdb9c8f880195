// maskrestore command-line driver.

#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "maskrestore/commands.hpp"

int main(int argc, char** argv) {
    using namespace maskrestore;
    CLI::App app{"Masked pre-training, attribution-guided fine-tuning and evaluation for image restoration"};
    app.require_subcommand(1);
    app.set_help_all_flag("--help-all", "Show help for every command");

    std::string config_file;
    std::vector<std::string> sets;
    bool print_config = false;
    std::map<std::string, std::string> values;

    const std::map<std::string, std::string> help = {
        {"synth", "write training, test and probe datasets"},
        {"pretrain", "jointly train the restorer and the AdaSAM mask sampler"},
        {"mac-rank", "rank restorer layers by mask attribute conductance"},
        {"finetune", "fine-tune the top-k% layers with feature fusion"},
        {"eval", "PSNR/SSIM per degradation kind and latent CKA"},
        {"twin-infer", "restore images with complementary mask pairs"},
        {"train-extractor", "train the frozen feature extractor on textures"},
    };
    for (const auto& name : kCommands) {
        CLI::App* sub = app.add_subcommand(name, help.at(name));
        sub->add_option("-c,--config", config_file, "config file ([section] / key = value)")->check(CLI::ExistingFile);
        sub->add_option("--set", sets, "override as section.key=value (repeatable)");
        sub->add_flag("--print-config", print_config, "print the effective config and exit");
        for (const auto& f : config_fields())
            sub->add_option("--" + f.name(), values[f.name()], f.help + " [" + f.range() + "]");
    }
    CLI11_PARSE(app, argc, argv);

    const std::string command = app.get_subcommands().front()->get_name();
    std::vector<std::pair<std::string, std::string>> overrides;
    for (const auto& s : sets) {
        const auto eq = s.find('=');
        if (eq == std::string::npos) {
            std::cerr << "maskrestore " << command << ": --set expects section.key=value, got '" << s << "'\n";
            return 2;
        }
        overrides.emplace_back(s.substr(0, eq), s.substr(eq + 1));
    }
    // Dedicated flags win over --set.
    for (const auto& f : config_fields())
        if (app.get_subcommands().front()->count("--" + f.name())) overrides.emplace_back(f.name(), values[f.name()]);

    RunConfig config;
    try {
        config = parse_config(command, config_file, overrides);
    } catch (const std::exception& e) {
        std::cerr << "maskrestore " << command << ": " << e.what() << '\n';
        return 2;
    }
    if (print_config) {
        std::cout << format_config(config);
        return 0;
    }
    return run_command(config, std::cout, std::cerr);
}
