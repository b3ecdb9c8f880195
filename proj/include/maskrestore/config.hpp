#pragma once

// Run configuration: flat "key = value" lines grouped under [section]
// headers. Every field is addressed as "section.key"; unknown keys and
// out-of-range values are rejected with the field name and legal range.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

namespace maskrestore {

class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

inline const std::vector<std::string> kCommands = {"synth", "pretrain", "mac-rank", "finetune",
                                                   "eval",  "twin-infer", "train-extractor"};

struct RunConfig {
    std::string command;

    // [run]
    std::size_t seed = 1;
    std::string dir;  // empty: <root>/<timestamp>-s<seed>
    std::string root = "runs";

    // [data]
    std::string data_dir;  // empty: <run dir>/data
    std::size_t size = 32;
    std::size_t train_count = 256;
    std::size_t test_count = 16;
    std::size_t probe_per_kind = 8;
    std::string train_kinds = "gaussian_noise,gaussian_blur,jpeg";
    std::string eval_kinds = "gaussian_noise,gaussian_blur,jpeg,pepper,speckle";

    // [model]
    std::size_t base_channels = 16;

    // [mask]
    double ratio = 0.5;
    double loss_weight = 1e-4;

    // [optim]
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double lr_min = 1e-6;

    // [pretrain]
    std::size_t pretrain_steps = 5000;
    std::size_t pretrain_batch = 8;
    double pretrain_lr = 2e-4;
    std::string pretrain_mode = "joint";
    std::size_t checkpoint_every = 1000;

    // [mac]
    double delta = 100.0;
    std::size_t mac_steps = 64;
    double path_ratio = 0.5;
    std::string quadrature = "left";
    std::string aggregation = "absolute";

    // [finetune]
    double k_percent = 30.0;
    std::size_t finetune_steps = 1000;
    std::size_t finetune_batch = 8;
    double finetune_lr = 2e-4;
    std::string selection = "mac";
    bool fusion = true;
    std::string extractor;  // empty: bundled fixture

    // [eval]
    std::string eval_mode = "single";
    bool noise_reference = true;

    // [paths] overrides for stage artifacts; empty means "inside the run dir"
    std::string pretrain_checkpoint;
    std::string report;
    std::string finetune_checkpoint;
    std::string input;   // twin-infer input directory of .ppm files
    std::string output;  // train-extractor output checkpoint

    // [extractor]
    std::size_t extractor_steps = 600;
};

struct ConfigField {
    std::string section;
    std::string key;
    std::string help;
    std::variant<double RunConfig::*, std::size_t RunConfig::*, std::string RunConfig::*, bool RunConfig::*> member;
    double lo = 0.0;  // numeric range, inclusive unless the flag says otherwise
    double hi = 0.0;
    bool lo_open = false;
    bool hi_open = false;
    std::vector<std::string> choices;  // strings: allowed values (empty = free text)

    std::string name() const { return section + "." + key; }
    std::string range() const;
};

const std::vector<ConfigField>& config_fields();
const ConfigField& config_field(const std::string& name);  // throws on unknown names

// Assigns one field from text, validating type and range.
void set_field(RunConfig& config, const std::string& name, const std::string& value);
std::string get_field(const RunConfig& config, const std::string& name);

// Applies a config file on top of `config`.
void apply_config_file(RunConfig& config, const std::filesystem::path& path);
void apply_config_text(RunConfig& config, const std::string& text, const std::string& origin = "<text>");

// Cross-field checks (e.g. kinds parse, run dir shape).
void validate(const RunConfig& config);

// Parses the file (optional) then the "section.key" -> value overrides.
RunConfig parse_config(const std::string& command, const std::filesystem::path& file,
                       const std::vector<std::pair<std::string, std::string>>& overrides);

// Every field, grouped by section, in registry order. Parsing the result reproduces the config.
std::string format_config(const RunConfig& config);

std::vector<std::string> split_list(const std::string& text);

}  // namespace maskrestore
