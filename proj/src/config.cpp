#include "maskrestore/config.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include "maskrestore/attribution.hpp"
#include "maskrestore/degrade.hpp"

namespace maskrestore {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

std::string format_number(double v) {
    char buf[64];
    const auto r = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, r.ptr);
}

ConfigField real(const char* section, const char* key, const char* help, double RunConfig::*m, double lo, double hi,
                 bool lo_open = false, bool hi_open = false) {
    return {section, key, help, m, lo, hi, lo_open, hi_open, {}};
}

ConfigField count(const char* section, const char* key, const char* help, std::size_t RunConfig::*m, double lo,
                  double hi = kInf) {
    return {section, key, help, m, lo, hi, false, false, {}};
}

ConfigField text(const char* section, const char* key, const char* help, std::string RunConfig::*m,
                 std::vector<std::string> choices = {}) {
    return {section, key, help, m, 0, 0, false, false, std::move(choices)};
}

ConfigField flag(const char* section, const char* key, const char* help, bool RunConfig::*m) {
    return {section, key, help, m, 0, 0, false, false, {}};
}

std::vector<ConfigField> build_fields() {
    return {
        count("run", "seed", "master seed for every random stream", &RunConfig::seed, 0),
        text("run", "dir", "run directory (default <root>/<timestamp>-s<seed>)", &RunConfig::dir),
        text("run", "root", "parent of generated run directories", &RunConfig::root),

        text("data", "dir", "dataset directory (default <run dir>/data)", &RunConfig::data_dir),
        count("data", "size", "square image size, multiple of 8 and >= 32", &RunConfig::size, 32, 1024),
        count("data", "train_count", "training pairs written by synth", &RunConfig::train_count, 1),
        count("data", "test_count", "test images per degradation kind", &RunConfig::test_count, 1),
        count("data", "probe_per_kind", "MAC probe images per training kind", &RunConfig::probe_per_kind, 1),
        text("data", "train_kinds", "comma-separated degradation kinds seen in training", &RunConfig::train_kinds),
        text("data", "eval_kinds", "comma-separated degradation kinds evaluated", &RunConfig::eval_kinds),

        count("model", "base_channels", "restorer channels at level 1", &RunConfig::base_channels, 4, 256),

        real("mask", "ratio", "fraction of pixels masked in pre-training", &RunConfig::ratio, 0, 1, true, true),
        real("mask", "loss_weight", "weight of the mask-selection loss", &RunConfig::loss_weight, 0, kInf),

        real("optim", "beta1", "Adam first-moment decay", &RunConfig::beta1, 0, 1, false, true),
        real("optim", "beta2", "Adam second-moment decay", &RunConfig::beta2, 0, 1, false, true),
        real("optim", "eps", "Adam denominator epsilon", &RunConfig::eps, 0, kInf, true),
        real("optim", "lr_min", "final learning rate of the cosine schedule", &RunConfig::lr_min, 0, kInf, true),

        count("pretrain", "steps", "pre-training steps", &RunConfig::pretrain_steps, 1),
        count("pretrain", "batch", "pre-training batch size", &RunConfig::pretrain_batch, 1, 1024),
        real("pretrain", "lr", "initial learning rate", &RunConfig::pretrain_lr, 0, 1, true),
        text("pretrain", "mode", "joint or alternate updates of restorer and AdaSAM", &RunConfig::pretrain_mode,
             {"joint", "alternate"}),
        count("pretrain", "checkpoint_every", "steps between periodic checkpoints (0 = off)",
              &RunConfig::checkpoint_every, 0),

        real("mac", "delta", "sharpness of the per-pixel switch", &RunConfig::delta, 0, kInf, true),
        count("mac", "steps", "quadrature steps", &RunConfig::mac_steps, 4, 100000),
        real("mac", "ratio", "partial path ratio r", &RunConfig::path_ratio, 0, 1, true),
        text("mac", "quadrature", "left or trapezoid", &RunConfig::quadrature, {"left", "trapezoid"}),
        text("mac", "aggregation", "absolute or plain sum of per-unit values", &RunConfig::aggregation,
             {"absolute", "plain"}),

        real("finetune", "k_percent", "percentage of restorer layers fine-tuned", &RunConfig::k_percent, 0, 100, true),
        count("finetune", "steps", "fine-tuning steps", &RunConfig::finetune_steps, 1),
        count("finetune", "batch", "fine-tuning batch size", &RunConfig::finetune_batch, 1, 1024),
        real("finetune", "lr", "initial learning rate", &RunConfig::finetune_lr, 0, 1, true),
        text("finetune", "selection", "mac, random or all", &RunConfig::selection, {"mac", "random", "all"}),
        flag("finetune", "fusion", "fuse extractor features into the restorer", &RunConfig::fusion),
        text("finetune", "extractor", "extractor checkpoint (default: bundled fixture)", &RunConfig::extractor),

        text("eval", "mode", "single or twin (complementary masks)", &RunConfig::eval_mode, {"single", "twin"}),
        flag("eval", "noise_reference", "add a uniform-noise row to the CKA matrix", &RunConfig::noise_reference),

        text("paths", "pretrain_checkpoint", "stage-1 checkpoint", &RunConfig::pretrain_checkpoint),
        text("paths", "report", "layer report from mac-rank", &RunConfig::report),
        text("paths", "finetune_checkpoint", "stage-2 checkpoint", &RunConfig::finetune_checkpoint),
        text("paths", "input", "twin-infer input directory", &RunConfig::input),
        text("paths", "output", "train-extractor output checkpoint", &RunConfig::output),

        count("extractor", "steps", "extractor training steps", &RunConfig::extractor_steps, 1),
    };
}

bool parse_bool(const std::string& v, bool& out) {
    if (v == "true" || v == "1" || v == "yes" || v == "on") return out = true, true;
    if (v == "false" || v == "0" || v == "no" || v == "off") return out = false, true;
    return false;
}

}  // namespace

std::string ConfigField::range() const {
    if (std::holds_alternative<bool RunConfig::*>(member)) return "true|false";
    if (std::holds_alternative<std::string RunConfig::*>(member)) {
        if (choices.empty()) return "any text";
        std::string s;
        for (const auto& c : choices) s += (s.empty() ? "" : "|") + c;
        return s;
    }
    const std::string l = lo_open ? "(" : "[", h = hi_open || std::isinf(hi) ? ")" : "]";
    return l + format_number(lo) + ", " + (std::isinf(hi) ? "inf" : format_number(hi)) + h;
}

const std::vector<ConfigField>& config_fields() {
    static const std::vector<ConfigField> fields = build_fields();
    return fields;
}

const ConfigField& config_field(const std::string& name) {
    for (const auto& f : config_fields())
        if (f.name() == name) return f;
    throw ConfigError("unknown config key '" + name + "'");
}

void set_field(RunConfig& config, const std::string& name, const std::string& raw) {
    const ConfigField& f = config_field(name);
    const std::string value = trim(raw);
    auto bad = [&](const std::string& why) {
        return ConfigError(name + " = '" + value + "': " + why + " (legal: " + f.range() + ")");
    };
    std::visit(
        [&](auto member) {
            using M = std::remove_reference_t<decltype(config.*member)>;
            if constexpr (std::is_same_v<M, std::string>) {
                if (!f.choices.empty() && std::find(f.choices.begin(), f.choices.end(), value) == f.choices.end())
                    throw bad("not an allowed value");
                config.*member = value;
            } else if constexpr (std::is_same_v<M, bool>) {
                bool b = false;
                if (!parse_bool(value, b)) throw bad("not a boolean");
                config.*member = b;
            } else {
                double v = 0.0;
                const auto r = std::from_chars(value.data(), value.data() + value.size(), v);
                if (value.empty() || r.ec != std::errc() || r.ptr != value.data() + value.size())
                    throw bad("not a number");
                if (!std::isfinite(v)) throw bad("not finite");
                const bool below = f.lo_open ? v <= f.lo : v < f.lo;
                const bool above = f.hi_open ? v >= f.hi : v > f.hi;
                if (below || above) throw bad("out of range");
                if constexpr (std::is_same_v<M, std::size_t>) {
                    if (v != std::floor(v)) throw bad("not an integer");
                    if (v >= 18446744073709551616.0) throw bad("too large");
                    std::size_t n = 0;
                    const auto ri = std::from_chars(value.data(), value.data() + value.size(), n);
                    config.*member = ri.ec == std::errc() && ri.ptr == value.data() + value.size()
                                         ? n
                                         : static_cast<std::size_t>(v);
                } else {
                    config.*member = v;
                }
            }
        },
        f.member);
}

std::string get_field(const RunConfig& config, const std::string& name) {
    const ConfigField& f = config_field(name);
    return std::visit(
        [&](auto member) -> std::string {
            using M = std::remove_cvref_t<decltype(config.*member)>;
            if constexpr (std::is_same_v<M, std::string>)
                return config.*member;
            else if constexpr (std::is_same_v<M, bool>)
                return config.*member ? "true" : "false";
            else if constexpr (std::is_same_v<M, std::size_t>)
                return std::to_string(config.*member);
            else
                return format_number(config.*member);
        },
        f.member);
}

void apply_config_text(RunConfig& config, const std::string& text, const std::string& origin) {
    std::istringstream in(text);
    std::string line, section;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const std::string where = origin + ":" + std::to_string(line_no) + ": ";
        const auto hash = line.find_first_of("#;");
        const std::string body = trim(hash == std::string::npos ? line : line.substr(0, hash));
        if (body.empty()) continue;
        if (body.front() == '[') {
            if (body.back() != ']') throw ConfigError(where + "malformed section header '" + body + "'");
            section = trim(body.substr(1, body.size() - 2));
            continue;
        }
        const auto eq = body.find('=');
        if (eq == std::string::npos) throw ConfigError(where + "expected 'key = value', got '" + body + "'");
        if (section.empty()) throw ConfigError(where + "key outside any [section]");
        try {
            set_field(config, section + "." + trim(body.substr(0, eq)), body.substr(eq + 1));
        } catch (const ConfigError& e) {
            throw ConfigError(where + e.what());
        }
    }
}

void apply_config_file(RunConfig& config, const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("config file not found: " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    apply_config_text(config, ss.str(), path.string());
}

std::vector<std::string> split_list(const std::string& text) {
    std::vector<std::string> out;
    std::string item;
    std::istringstream in(text);
    while (std::getline(in, item, ',')) {
        item = trim(item);
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

void validate(const RunConfig& config) {
    if (!config.command.empty() && std::find(kCommands.begin(), kCommands.end(), config.command) == kCommands.end())
        throw ConfigError("unknown command '" + config.command + "'");
    if (config.size % 8 != 0) throw ConfigError("data.size = " + std::to_string(config.size) + ": must be a multiple of 8");
    for (const char* key : {"data.train_kinds", "data.eval_kinds"}) {
        const auto kinds = split_list(get_field(config, key));
        if (kinds.empty()) throw ConfigError(std::string(key) + ": at least one degradation kind is required");
        for (const auto& k : kinds) {
            try {
                parse_kind(k);
            } catch (const std::invalid_argument&) {
                throw ConfigError(std::string(key) +
                                  ": unknown kind '" + k +
                                  "' (legal: gaussian_noise|gaussian_blur|jpeg|pepper|speckle|poisson)");
            }
        }
    }
}

RunConfig parse_config(const std::string& command, const std::filesystem::path& file,
                       const std::vector<std::pair<std::string, std::string>>& overrides) {
    RunConfig config;
    config.command = command;
    if (!file.empty()) apply_config_file(config, file);
    for (const auto& [k, v] : overrides) set_field(config, k, v);
    validate(config);
    return config;
}

std::string format_config(const RunConfig& config) {
    std::ostringstream out;
    std::string section;
    for (const auto& f : config_fields()) {
        if (f.section != section) {
            out << (section.empty() ? "" : "\n") << '[' << f.section << "]\n";
            section = f.section;
        }
        out << f.key << " = " << get_field(config, f.name()) << '\n';
    }
    return out.str();
}

}  // namespace maskrestore
