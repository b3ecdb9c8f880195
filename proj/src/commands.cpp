#include "maskrestore/commands.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace maskrestore {

namespace fs = std::filesystem;

namespace {

struct Context {
    const RunConfig& config;
    fs::path run;
    fs::path data;
    std::ostream& out;
};

std::vector<DegradationKind> kinds_of(const std::string& list) {
    std::vector<DegradationKind> kinds;
    for (const auto& name : split_list(list)) kinds.push_back(parse_kind(name));
    return kinds;
}

ScheduleSpec schedule(const RunConfig& c, double lr, std::size_t steps) {
    return {lr, c.lr_min, steps, c.beta1, c.beta2, c.eps};
}

fs::path artifact(const Context& ctx, const std::string& override_path, const char* name) {
    return override_path.empty() ? ctx.run / name : fs::path(override_path);
}

void require_file(const fs::path& path, const std::string& what, const std::string& hint) {
    if (!fs::exists(path)) throw CommandError(what + " not found: " + path.string() + " (" + hint + ")");
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path);
    out << text;
    if (!out) throw CommandError("failed writing " + path.string());
}

void write_curve(const fs::path& path, const TrainResult& result, bool with_mask_loss) {
    std::ostringstream s;
    s << (with_mask_loss ? "step,masked_l1,mask_loss,lr\n" : "step,l1,lr\n");
    s << std::setprecision(9);
    for (const auto& r : result.curve) {
        s << r.step << ',' << r.loss;
        if (with_mask_loss) s << ',' << r.mask_loss;
        s << ',' << r.lr << '\n';
    }
    write_text(path, s.str());
}

std::vector<EvalSet> read_sets(const fs::path& dir, const std::vector<DegradationKind>& kinds) {
    std::vector<EvalSet> sets;
    for (auto k : kinds) {
        const fs::path d = dir / kind_name(k);
        require_file(d / "manifest.txt", "dataset for " + kind_name(k), "run `maskrestore synth` with this kind first");
        sets.push_back({k, read_dataset(d)});
    }
    return sets;
}

// ---------------------------------------------------------------- commands

void cmd_synth(const Context& ctx) {
    const auto& c = ctx.config;
    std::vector<DegradationSampler> mix;
    for (auto k : kinds_of(c.train_kinds)) mix.push_back(DegradationSampler::training_range(k));
    const auto train = make_training_set(c.train_count, c.size, c.seed, mix);
    write_dataset(ctx.data / "train", train);
    const auto eval = make_eval_sets(kinds_of(c.eval_kinds), c.test_count, c.size, c.seed);
    for (const auto& s : eval) write_dataset(ctx.data / "eval" / kind_name(s.kind), s.pairs);
    const auto probe = make_eval_sets(kinds_of(c.train_kinds), c.probe_per_kind, c.size, derive_seed(c.seed, 0x9b0be));
    for (const auto& s : probe) write_dataset(ctx.data / "probe" / kind_name(s.kind), s.pairs);
    ctx.out << "synth: " << train.size() << " training pairs, " << eval.size() << " test kinds x " << c.test_count
            << " images -> " << ctx.data.string() << '\n';
}

void cmd_pretrain(const Context& ctx) {
    const auto& c = ctx.config;
    require_file(ctx.data / "train" / "manifest.txt", "training set", "run `maskrestore synth` first");
    const auto data = read_dataset(ctx.data / "train");
    Stage1 models = make_stage1(RestorerConfig{3, c.base_channels}, AdaSamConfig{}, c.seed);
    PretrainConfig pc;
    pc.steps = c.pretrain_steps;
    pc.batch = c.pretrain_batch;
    pc.ratio = c.ratio;
    pc.mask_loss_weight = c.loss_weight;
    pc.schedule = schedule(c, c.pretrain_lr, c.pretrain_steps);
    pc.seed = c.seed;
    pc.alternate = c.pretrain_mode == "alternate";
    pc.checkpoint_every = c.checkpoint_every;
    auto periodic = [&](const Stage1& m) {
        const fs::path p = ctx.run / ("pretrain_step" + std::to_string(m.step) + ".ckpt");
        save_checkpoint(p, stage1_checkpoint(m, c));
    };
    const TrainResult result = pretrain(models, data, pc, periodic);
    write_curve(ctx.run / "pretrain_loss.csv", result, true);
    if (result.halted) throw CommandError("pretraining halted: " + result.halt_reason);
    const fs::path ckpt = artifact(ctx, c.pretrain_checkpoint, "pretrain.ckpt");
    save_checkpoint(ckpt, stage1_checkpoint(models, c));
    const auto& curve = result.curve;
    ctx.out << "pretrain: " << curve.size() << " steps, masked L1 " << curve.front().loss << " -> " << curve.back().loss
            << " -> " << ckpt.string() << '\n';
}

void cmd_mac_rank(const Context& ctx) {
    const auto& c = ctx.config;
    const fs::path ckpt = artifact(ctx, c.pretrain_checkpoint, "pretrain.ckpt");
    require_file(ckpt, "pre-training checkpoint", "run `maskrestore pretrain` first or set paths.pretrain_checkpoint");
    const Stage1 models = load_stage1(ckpt);
    const auto probe = flatten(read_sets(ctx.data / "probe", kinds_of(c.train_kinds)));
    MacConfig mc;
    mc.delta = c.delta;
    mc.ratio = c.path_ratio;
    mc.steps = c.mac_steps;
    mc.mask_ratio = c.ratio;
    mc.quadrature = parse_quadrature(c.quadrature);
    mc.aggregation = parse_aggregation(c.aggregation);
    mc.k_percent = c.k_percent;
    mc.seed = c.seed;
    const LayerReport report = mac_rank(models.restorer, &models.adasam, probe, mc);
    const fs::path path = artifact(ctx, c.report, "layers.txt");
    write_report(path, report);
    ctx.out << "mac-rank: " << report.layers.size() << " layers, " << report.selected().size() << " selected at k="
            << c.k_percent << "% -> " << path.string() << '\n';
}

void cmd_finetune(const Context& ctx) {
    const auto& c = ctx.config;
    const fs::path ckpt = artifact(ctx, c.pretrain_checkpoint, "pretrain.ckpt");
    require_file(ckpt, "pre-training checkpoint", "run `maskrestore pretrain` first or set paths.pretrain_checkpoint");
    require_file(ctx.data / "train" / "manifest.txt", "training set", "run `maskrestore synth` first");
    Stage1 stage1 = load_stage1(ckpt);

    std::set<std::string> selected;
    const auto names = stage1.restorer.params.names();
    if (c.selection == "all" || c.k_percent >= 100.0) {
        selected = {names.begin(), names.end()};
    } else if (c.selection == "random") {
        selected = random_selection(stage1.restorer, c.k_percent, c.seed);
    } else {
        const fs::path report_path = artifact(ctx, c.report, "layers.txt");
        require_file(report_path, "layer report",
                     "finetune with k < 100 needs `maskrestore mac-rank` first, or set paths.report");
        const LayerReport stored = read_report(report_path);
        std::vector<std::pair<std::string, double>> scores;
        for (const auto& l : stored.layers) scores.emplace_back(l.name, l.score);
        selected = selection_from_report(rank_and_select(scores, c.k_percent), stage1.restorer);
    }

    const fs::path extractor_path = c.extractor.empty() ? default_extractor_path() : fs::path(c.extractor);
    require_file(extractor_path, "extractor checkpoint", "run `maskrestore train-extractor` or set finetune.extractor");
    Stage2 models{stage1.restorer, {}, load_extractor(extractor_path), c.fusion, {}, {}, 0};
    models.fusion = make_fusion(models.extractor, models.restorer, c.seed);

    std::map<std::string, std::uint64_t> before;
    for (const auto& n : names) before[n] = models.restorer.params.group_hash(n);

    const auto data = read_dataset(ctx.data / "train");
    FinetuneConfig fc;
    fc.steps = c.finetune_steps;
    fc.batch = c.finetune_batch;
    fc.schedule = schedule(c, c.finetune_lr, c.finetune_steps);
    fc.seed = c.seed;
    fc.use_fusion = c.fusion;
    const TrainResult result = finetune(models, selected, data, fc);
    write_curve(ctx.run / "finetune_loss.csv", result, false);
    if (result.halted) throw CommandError("fine-tuning halted: " + result.halt_reason);

    std::ostringstream freeze, sel;
    std::size_t violations = 0;
    for (const auto& n : names) {
        const bool trainable = selected.count(n) > 0;
        const std::uint64_t after = models.restorer.params.group_hash(n);
        const bool unchanged = after == before[n];
        if (!trainable && !unchanged) ++violations;
        freeze << n << ' ' << (trainable ? "trainable" : "frozen") << ' ' << std::hex << before[n] << ' ' << after
               << std::dec << ' ' << (unchanged ? "unchanged" : "changed") << '\n';
        if (trainable) sel << n << '\n';
    }
    write_text(ctx.run / "freeze_check.txt", freeze.str());
    write_text(ctx.run / "selected.txt", sel.str());
    if (violations) throw CommandError(std::to_string(violations) + " frozen groups changed during fine-tuning");

    Checkpoint out;
    out.modules = {{"restorer", kRestorerVersion}, {"fusion", kFusionVersion}, {"extractor", kExtractorVersion}};
    out.meta = {{"model.base_channels", std::to_string(c.base_channels)},
                {"finetune.fusion", c.fusion ? "true" : "false"},
                {"finetune.selected", std::to_string(selected.size())}};
    out.step = models.step;
    store_params(out, "restorer", models.restorer.params);
    store_params(out, "fusion", models.fusion.params);
    store_params(out, "extractor", models.extractor.params);
    const fs::path path = artifact(ctx, c.finetune_checkpoint, "finetune.ckpt");
    save_checkpoint(path, out);
    ctx.out << "finetune: " << selected.size() << "/" << names.size() << " restorer groups trainable, L1 "
            << result.curve.front().loss << " -> " << result.curve.back().loss << " -> " << path.string() << '\n';
}

void cmd_eval(const Context& ctx) {
    const auto& c = ctx.config;
    const auto sets = read_sets(ctx.data / "eval", kinds_of(c.eval_kinds));
    const fs::path ft = artifact(ctx, c.finetune_checkpoint, "finetune.ckpt");
    const fs::path pt = artifact(ctx, c.pretrain_checkpoint, "pretrain.ckpt");
    EvalOptions opt;
    opt.seed = c.seed;
    opt.ratio = c.ratio;
    opt.noise_reference = c.noise_reference;
    opt.mode = c.eval_mode == "twin" ? InferMode::twin : InferMode::single;
    EvalReport report;
    std::string source;
    if (opt.mode == InferMode::single && fs::exists(ft)) {
        const Checkpoint ck = load_checkpoint(ft);
        ck.require_module("restorer", kRestorerVersion);
        ck.require_module("fusion", kFusionVersion);
        ck.require_module("extractor", kExtractorVersion);
        RestorerConfig rc{3, std::stoul(ck.require_meta("model.base_channels"))};
        Restorer<float> restorer = make_restorer<float>(rc, 0);
        restore_params(ck, "restorer", restorer.params);
        Extractor<float> extractor = make_extractor<float>(ExtractorConfig{}, 0);
        restore_params(ck, "extractor", extractor.params);
        Fusion<float> fusion = make_fusion(extractor, restorer, 0);
        restore_params(ck, "fusion", fusion.params);
        if (ck.require_meta("finetune.fusion") == "true") {
            opt.fusion = &fusion;
            opt.extractor = &extractor;
        }
        report = evaluate(restorer, sets, opt);
        source = ft.string();
    } else {
        require_file(pt, "checkpoint", "eval needs finetune.ckpt or pretrain.ckpt; run the earlier stages first");
        const Stage1 models = load_stage1(pt);
        opt.adasam = &models.adasam;
        report = evaluate(models.restorer, sets, opt);
        source = pt.string();
    }
    write_text(ctx.run / "metrics.txt", report_emit(report.records, ReportFormat::table));
    write_text(ctx.run / "metrics.csv", report_emit(report.records, ReportFormat::csv));
    std::ostringstream summary;
    summary << std::fixed << "checkpoint " << source << "\nmode " << c.eval_mode << "\nkinds " << report.records.size()
            << std::setprecision(2) << "\npsnr_mean " << report.psnr_mean << std::setprecision(4) << "\npsnr_variance "
            << report.psnr_variance << "\nssim_mean " << report.ssim_mean << std::setprecision(6)
            << "\nssim_variance " << report.ssim_variance << '\n';
    write_text(ctx.run / "summary.txt", summary.str());
    write_text(ctx.run / "cka.txt", cka_table(report.cka_labels, report.cka));
    ctx.out << report_emit(report.records, ReportFormat::table);
}

void cmd_twin_infer(const Context& ctx) {
    const auto& c = ctx.config;
    const fs::path pt = artifact(ctx, c.pretrain_checkpoint, "pretrain.ckpt");
    require_file(pt, "pre-training checkpoint", "run `maskrestore pretrain` first or set paths.pretrain_checkpoint");
    const Stage1 models = load_stage1(pt);
    fs::path input = c.input;
    if (input.empty()) input = ctx.data / "eval" / split_list(c.eval_kinds).front();
    if (!fs::is_directory(input)) throw CommandError("paths.input: not a directory: " + input.string());
    std::vector<fs::path> files;
    if (fs::exists(input / "manifest.txt")) {
        std::ifstream m(input / "manifest.txt");
        std::string line;
        while (std::getline(m, line)) {
            if (line.empty() || line[0] == '#') continue;
            std::istringstream is(line);
            std::string clean, degraded;
            is >> clean >> degraded;
            files.push_back(input / degraded);
        }
    } else {
        for (const auto& e : fs::directory_iterator(input))
            if (e.path().extension() == ".ppm") files.push_back(e.path());
        std::sort(files.begin(), files.end());
    }
    if (files.empty()) throw CommandError("paths.input: no .ppm images in " + input.string());
    const fs::path dir = ctx.run / "twin";
    fs::create_directories(dir);
    for (std::size_t i = 0; i < files.size(); ++i) {
        const Image image = read_pnm(files[i]);
        Rng rng(c.seed, Stream::mask, i);
        const MaskPlan plan = adasam_plan(models.adasam, image, c.ratio, rng);
        Image restored = twin_mask_infer(models.restorer, image, plan.mask);
        clip_unit(restored);
        const std::string stem = files[i].stem().string();
        write_pnm(dir / (stem + "_restored.ppm"), restored);
        write_mask(dir / (stem + "_mask.pgm"), plan.mask, image.height, image.width);
    }
    ctx.out << "twin-infer: " << files.size() << " images -> " << dir.string() << '\n';
}

void cmd_train_extractor(const Context& ctx) {
    const auto& c = ctx.config;
    ExtractorTrainConfig tc;
    tc.steps = c.extractor_steps;
    tc.seed = c.seed;
    tc.size = c.size;
    const auto result = train_extractor(ExtractorConfig{}, tc);
    const fs::path path = artifact(ctx, c.output, "extractor.ckpt");
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    save_checkpoint(path, extractor_checkpoint(result.extractor));
    ctx.out << "train-extractor: held-out texture accuracy " << result.accuracy << " -> " << path.string() << '\n';
}

}  // namespace

std::string report_emit(std::span<const MetricRecord> records, ReportFormat format) {
    std::ostringstream s;
    s << std::fixed;
    if (format == ReportFormat::csv) {
        s << "kind,psnr,ssim,n\n";
        for (const auto& r : records)
            s << r.kind << ',' << std::setprecision(2) << r.psnr << ',' << std::setprecision(4) << r.ssim << ','
              << r.count << '\n';
    } else {
        s << std::left << std::setw(16) << "kind" << std::right << std::setw(8) << "psnr" << std::setw(9) << "ssim"
          << std::setw(6) << "n" << '\n';
        for (const auto& r : records)
            s << std::left << std::setw(16) << r.kind << std::right << std::setw(8) << std::setprecision(2) << r.psnr
              << std::setw(9) << std::setprecision(4) << r.ssim << std::setw(6) << r.count << '\n';
    }
    return s.str();
}

std::string cka_table(const std::vector<std::string>& labels, const std::vector<std::vector<double>>& matrix) {
    std::ostringstream s;
    s << std::fixed << std::setprecision(4) << std::left << std::setw(16) << "kind";
    for (const auto& l : labels) s << ' ' << std::setw(16) << l;
    s << '\n';
    for (std::size_t i = 0; i < matrix.size(); ++i) {
        s << std::setw(16) << labels[i];
        for (double v : matrix[i]) s << ' ' << std::setw(16) << v;
        s << '\n';
    }
    return s.str();
}

fs::path resolve_run_dir(const RunConfig& config) {
    if (!config.dir.empty()) return config.dir;
    const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    char stamp[32];
    std::strftime(stamp, sizeof stamp, "%Y%m%d-%H%M%S", &tm);
    return fs::path(config.root) / (std::string(stamp) + "-s" + std::to_string(config.seed));
}

fs::path default_extractor_path() { return fs::path(MASKRESTORE_SOURCE_DIR) / "fixtures" / "extractor.ckpt"; }

Checkpoint stage1_checkpoint(const Stage1& models, const RunConfig& config) {
    Checkpoint ck;
    ck.modules = {{"restorer", kRestorerVersion}, {"adasam", kAdaSamVersion}};
    ck.meta = {{"model.base_channels", std::to_string(models.restorer.config.base_channels)},
               {"data.size", std::to_string(config.size)}};
    ck.step = models.step;
    ck.rng_states["batch"] = Rng(config.seed, Stream::batch, models.step).state();
    store_params(ck, "restorer", models.restorer.params);
    store_params(ck, "adasam", models.adasam.params);
    return ck;
}

Stage1 load_stage1(const fs::path& path) {
    const Checkpoint ck = load_checkpoint(path);
    ck.require_module("restorer", kRestorerVersion);
    ck.require_module("adasam", kAdaSamVersion);
    const std::size_t base = std::stoul(ck.require_meta("model.base_channels"));
    Stage1 models = make_stage1(RestorerConfig{3, base}, AdaSamConfig{}, 0);
    restore_params(ck, "restorer", models.restorer.params);
    restore_params(ck, "adasam", models.adasam.params);
    models.step = ck.step;
    return models;
}

Checkpoint extractor_checkpoint(const Extractor<float>& extractor) {
    Checkpoint ck;
    ck.modules = {{"extractor", kExtractorVersion}};
    store_params(ck, "extractor", extractor.params);
    return ck;
}

Extractor<float> load_extractor(const fs::path& path) {
    const Checkpoint ck = load_checkpoint(path);
    ck.require_module("extractor", kExtractorVersion);
    Extractor<float> extractor = make_extractor<float>(ExtractorConfig{}, 0);
    restore_params(ck, "extractor", extractor.params);
    extractor.params.set_all_trainable(false);
    return extractor;
}

int run_command(const RunConfig& config, std::ostream& out, std::ostream& err) {
    try {
        validate(config);
        const fs::path run = resolve_run_dir(config);
        fs::create_directories(run);
        const fs::path data = config.data_dir.empty() ? run / "data" : fs::path(config.data_dir);
        RunConfig effective = config;
        effective.dir = run.string();
        write_text(run / "config.ini", "# " + config.command + "\n" + format_config(effective));
        const Context ctx{config, run, data, out};
        if (config.command == "synth")
            cmd_synth(ctx);
        else if (config.command == "pretrain")
            cmd_pretrain(ctx);
        else if (config.command == "mac-rank")
            cmd_mac_rank(ctx);
        else if (config.command == "finetune")
            cmd_finetune(ctx);
        else if (config.command == "eval")
            cmd_eval(ctx);
        else if (config.command == "twin-infer")
            cmd_twin_infer(ctx);
        else if (config.command == "train-extractor")
            cmd_train_extractor(ctx);
        else
            throw ConfigError("unknown command '" + config.command + "'");
        return 0;
    } catch (const std::exception& e) {
        err << "maskrestore " << config.command << ": " << e.what() << '\n';
        return 1;
    }
}

}  // namespace maskrestore
