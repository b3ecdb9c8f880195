// Acceptance suite: one PASS/FAIL line per criterion.
//
// Exit status is non-zero when a criterion fails that is not listed in
// --known-failures. Known failures still print FAIL.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "maskrestore/attribution.hpp"
#include "maskrestore/commands.hpp"
#include "maskrestore/pipeline.hpp"
#include "oracles.hpp"
#include "scenarios.hpp"

using namespace maskrestore;
using maskrestore::testing::T64;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;
using K = DegradationKind;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::string fmt(const char* pattern, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, pattern, args...);
    return buf;
}

std::string join(const std::vector<double>& v, const char* pattern = "%.3f") {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? " " : "") + fmt(pattern, v[i]);
    return s;
}

// ---------------------------------------------------------------- 1-9

Outcome autodiff_soundness() {
    const auto t0 = Clock::now();
    double worst = 0.0;
    std::size_t checked = 0, skipped = 0;
    for (std::uint64_t seed = 1; checked < 100; ++seed) {
        const maskrestore::testing::RandomGraph g{seed, 8};
        const auto x0 = g.initial_point();
        auto built = g.build(x0, true);
        // Central differences are meaningless across a kink of abs/relu.
        if (built.kink_margin < 0.02) {
            ++skipped;
            continue;
        }
        built.output.backward();
        std::vector<double> grad;
        for (const auto& leaf : built.leaves) {
            if (leaf.has_grad())
                grad.insert(grad.end(), leaf.grad().begin(), leaf.grad().end());
            else
                grad.insert(grad.end(), leaf.numel(), 0.0);
        }
        const auto fd = finite_difference_gradient<double>([&](const std::vector<double>& v) { return g.value(v); },
                                                           x0, 1e-3);
        worst = std::max(worst, maskrestore::testing::relative_error(grad, fd));
        ++checked;
    }
    const double t = seconds_since(t0);
    return {worst < 1e-4 && t < 30.0,
            fmt("max rel err %.2e over %zu graphs (%zu near-kink draws skipped), %.1f s", worst, checked, skipped, t)};
}

Outcome ig_completeness() {
    double worst = 0.0;
    for (std::uint64_t seed = 1; seed <= 20; ++seed) {
        const auto net = maskrestore::testing::SmoothNet::random(seed);
        const T64 x = maskrestore::testing::random_tensor({6}, seed + 100, -1.0, 1.0);
        const T64 base = T64::zeros({6});
        const auto ig = integrated_gradients(net.scalar(), x, base, 1024);
        const double delta = net.value(x.to_vector()) - net.value(base.to_vector());
        worst = std::max(worst, std::abs(std::accumulate(ig.begin(), ig.end(), 0.0) - delta));
    }
    return {worst < 1e-3, fmt("max |sum IG - dF| %.2e over 20 nets at N=1024", worst)};
}

Outcome conductance_completeness() {
    double worst = 0.0;
    for (std::uint64_t seed = 1; seed <= 20; ++seed) {
        const auto net = maskrestore::testing::SmoothNet::random(seed);
        const T64 x = maskrestore::testing::random_tensor({6}, seed + 100, -1.0, 1.0);
        const T64 base = T64::zeros({6});
        const double delta = net.value(x.to_vector()) - net.value(base.to_vector());
        for (const char* layer : {"pre", "post"}) {
            const auto c = layer_conductance(net.probe_fn(), layer, x, base, 1024);
            worst = std::max(worst, std::abs(std::accumulate(c.begin(), c.end(), 0.0) - delta));
        }
    }
    return {worst < 1e-3, fmt("max |sum cond - dF| %.2e over 20 nets x 2 layers", worst)};
}

PathSpec unmasked_path(std::size_t pixels, double ratio, std::size_t steps, std::uint64_t seed) {
    Rng rng(seed, Stream::alpha_order);
    PathSpec spec;
    spec.alpha = assign_alpha(std::vector<Mask>{Mask(pixels, 0)}, ratio, 100.0, rng);
    spec.delta = 100.0;
    spec.ratio = ratio;
    spec.steps = steps;
    return spec;
}

Outcome mac_correctness() {
    double worst_rel = 0.0;
    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
        const auto net = maskrestore::testing::LinearNet::random(seed);
        const T64 x = maskrestore::testing::random_tensor({1, 4, 4}, seed + 30);
        const T64 base = T64::zeros({1, 4, 4});
        const double expected =
            aggregate(net.analytic_conductance(x.to_vector(), base.to_vector()), Aggregation::absolute);
        const double got = mac_layer(net.probe_fn(), "hidden", x, base, unmasked_path(16, 1.0, 256, seed));
        worst_rel = std::max(worst_rel, std::abs(got - expected) / expected);
    }
    std::size_t monotone = 0;
    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
        const auto net = maskrestore::testing::ImageNet::random(seed);
        const T64 x = maskrestore::testing::random_tensor({1, 6, 6}, seed + 40);
        const T64 base = T64::zeros({1, 6, 6});
        std::vector<double> mac;
        for (std::size_t n : {16u, 32u, 64u, 128u, 256u})
            mac.push_back(mac_layer(net.probe_fn(), "post", x, base, unmasked_path(36, 1.0, n, seed)));
        bool ok = true;
        for (std::size_t i = 0; i + 2 < mac.size(); ++i)
            ok = ok && std::abs(mac[i] - mac[i + 1]) >= std::abs(mac[i + 1] - mac[i + 2]);
        monotone += ok;
    }
    return {worst_rel < 0.01 && monotone == 10,
            fmt("linear oracle max rel err %.2e; refinement non-increasing on %zu/10 nets", worst_rel, monotone)};
}

Outcome sampler_exactness() {
    Rng pick(2024);
    std::size_t exact = 0;
    for (int t = 0; t < 50; ++t) {
        const std::size_t h = 1 + pick.index(32), w = 1 + pick.index(32);
        const double rho = pick.uniform(0.01, 0.99);
        std::vector<double> s(h * w);
        for (auto& v : s) v = pick.uniform(0.1, 1.0);
        const double total = std::accumulate(s.begin(), s.end(), 0.0);
        for (auto& v : s) v /= total;
        Rng rng(t, Stream::mask);
        const MaskPlan plan = sample_mask(s, h, w, rho, rng);
        const auto expected = static_cast<std::size_t>(std::floor(static_cast<double>(h * w) * rho));
        const auto set = static_cast<std::size_t>(std::count(plan.mask.begin(), plan.mask.end(), 1));
        exact += plan.n_mask == expected && set == expected;
    }
    const double oracle = 0.4 * (0.3 / 0.6) + 0.3 * (0.4 / 0.7);
    const std::vector<double> s{0.4, 0.3, 0.2, 0.1};
    int hits = 0;
    const int draws = 100000;
    for (int d = 0; d < draws; ++d) {
        Rng rng(99, Stream::mask, d);
        const MaskPlan p = sample_mask(s, 2, 2, 0.5, rng);
        hits += p.mask[0] && p.mask[1];
    }
    const double freq = static_cast<double>(hits) / draws;
    return {exact == 50 && std::abs(freq - oracle) < 0.01,
            fmt("exact counts %zu/50; P(first two) %.4f vs oracle %.4f", exact, freq, oracle)};
}

Outcome gradient_separation() {
    const auto r = maskrestore::testing::gradient_separation(100, 1);
    return {r.ok() && r.steps == 100,
            fmt("%zu joint steps: restoration leaks %zu, mask leaks %zu, joint mismatches %zu, idle %zu", r.steps,
                r.restoration_leaks, r.mask_leaks, r.joint_mismatch, r.idle_steps)};
}

Outcome metric_fidelity() {
    const Image a(3, 32, 32, 0.5);
    Image b = a;
    for (auto& v : b.pixels) v += 16.0 / 255.0;
    const double p = psnr(a, b).db;
    const Image r = maskrestore::testing::random_image(3, 32, 32, 5);
    const double s = ssim(r, r);
    Rng rng(3);
    const std::size_t n = 40, d = 3;
    std::vector<double> x(n * d), y(n * 5);
    for (auto& v : x) v = rng.normal();
    for (auto& v : y) v = rng.normal();
    const double t = 1.1;
    const double q[3][3] = {{std::cos(t), -std::sin(t), 0}, {std::sin(t), std::cos(t), 0}, {0, 0, 1}};
    std::vector<double> xq(n * d, 0.0), xs = x;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j)
            for (std::size_t k = 0; k < d; ++k) xq[i * d + j] += x[i * d + k] * q[k][j];
    for (auto& v : xs) v *= 4.2;
    const double id_err = std::abs(cka(x, d, x, d) - 1.0);
    const double orth_err = std::abs(cka(xq, d, y, 5) - cka(x, d, y, 5));
    const double scale_err = std::abs(cka(xs, d, y, 5) - cka(x, d, y, 5));
    const bool ok = std::abs(p - 24.05) <= 0.01 && std::abs(s - 1.0) <= 1e-9 && id_err <= 1e-9 && orth_err <= 1e-9 &&
                    scale_err <= 1e-9;
    return {ok, fmt("PSNR %.4f dB; SSIM(a,a)-1 %.1e; CKA identity %.1e, orthogonal %.1e, scale %.1e", p, s - 1.0,
                    id_err, orth_err, scale_err)};
}

Outcome degradation_synthesis() {
    const Image gray(3, 64, 64, 0.5);
    const Image noisy = add_gaussian_noise(gray, 15.0, 11);
    double sum = 0.0, sq = 0.0;
    for (std::size_t i = 0; i < gray.pixels.size(); ++i) {
        const double dv = (noisy.pixels[i] - gray.pixels[i]) * 255.0;
        sum += dv;
        sq += dv * dv;
    }
    const double cnt = static_cast<double>(gray.pixels.size());
    const double sd = std::sqrt(sq / cnt - (sum / cnt) * (sum / cnt));
    double worst_jpeg = 1e9;
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        const Image img = gen_clean(seed, 32);
        worst_jpeg = std::min(worst_jpeg, psnr(img, jpeg_artifact(img, 100)).db);
    }
    double worst_mass = 0.0;
    for (double sigma : {0.1, 0.8, 1.6, 2.4, 3.0}) {
        const auto k = gaussian_kernel(kBlurKernelSize, sigma);
        double m = 0.0;
        for (double u : k)
            for (double v : k) m += u * v;
        worst_mass = std::max(worst_mass, std::abs(m - 1.0));
    }
    return {std::abs(sd - 15.0) <= 0.5 && worst_jpeg >= 45.0 && worst_mass <= 1e-9,
            fmt("noise std %.3f; JPEG q100 min PSNR %.2f dB; blur mass err %.1e", sd, worst_jpeg, worst_mass)};
}

Outcome fusion_identities() {
    const auto extractor = make_extractor<float>({}, 2);
    const auto restorer = make_restorer<float>({}, 3);
    const auto fusion = make_fusion(extractor, restorer, 4);
    std::size_t bitwise = 0;
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        const Tensor<float> x = cast<float>(maskrestore::testing::random_tensor({2, 3, 32, 32}, seed));
        const LevelHook<float> hook = make_fusion_hook(fusion, extractor, x);
        bitwise += restorer_forward(restorer, x).to_vector() == restorer_forward(restorer, x, &hook).to_vector();
    }
    const T64 f1 = maskrestore::testing::random_tensor({2, 4, 3, 3}, 7);
    const T64 f2 = maskrestore::testing::random_tensor({2, 4, 3, 3}, 8);
    const bool select1 = blend(f1, f2, T64::full({2, 4}, 1.0)).to_vector() == f1.to_vector();
    const bool select0 = blend(f1, f2, T64::full({2, 4}, 0.0)).to_vector() == f2.to_vector();
    return {bitwise == 5 && select1 && select0,
            fmt("zero-init no-op bitwise on %zu/5 batches; w=1 exact %s, w=0 exact %s", bitwise,
                select1 ? "yes" : "no", select0 ? "yes" : "no")};
}

// ---------------------------------------------------------------- 10-14

struct SeedRun {
    double drop = 0.0;
    double pretrain_seconds = 0.0;
    double twin = 0.0, single = 0.0;
    std::map<std::string, std::pair<double, double>> psnr;  // variant -> (in-distribution, OOD)
    std::vector<std::string> freeze_violations;
};

double mean_psnr(const EvalReport& r, const std::set<std::string>& kinds) {
    double s = 0.0;
    int n = 0;
    for (const auto& rec : r.records)
        if (kinds.count(rec.kind)) {
            s += rec.psnr;
            ++n;
        }
    return s / n;
}

SeedRun run_seed(std::uint64_t seed, const Extractor<float>& extractor, bool with_ablations) {
    SeedRun out;
    // Stage 1 on the noise-only set.
    const std::vector<DegradationSampler> noise{DegradationSampler::training_range(K::gaussian_noise)};
    const auto pdata = make_training_set(256, 32, seed, noise);
    Stage1 s1 = make_stage1({}, {}, seed);
    PretrainConfig pc;
    pc.steps = 200;
    pc.seed = seed;
    pc.schedule.lr_max = 5e-4;
    pc.schedule.total_steps = 200;
    const auto t0 = Clock::now();
    const TrainResult tr = pretrain(s1, pdata, pc);
    out.pretrain_seconds = seconds_since(t0);
    double first = 0.0, last = 0.0;
    for (std::size_t i = 0; i < 10; ++i) {
        first += tr.curve[i].loss / 10.0;
        last += tr.curve[tr.curve.size() - 1 - i].loss / 10.0;
    }
    out.drop = 1.0 - last / first;

    const std::vector<K> nk{K::gaussian_noise};
    const auto nsets = make_eval_sets(nk, 16, 32, seed + 1000);
    EvalOptions o;
    o.latent_cka = false;
    o.seed = seed;
    out.single = evaluate(s1.restorer, nsets, o).psnr_mean;
    o.mode = InferMode::twin;
    o.adasam = &s1.adasam;
    out.twin = evaluate(s1.restorer, nsets, o).psnr_mean;
    if (!with_ablations) return out;

    // Stage 2 variants from the same checkpoint and step budget.
    const std::vector<K> train_kinds{K::gaussian_noise, K::gaussian_blur, K::jpeg};
    std::vector<DegradationSampler> mix;
    for (K k : train_kinds) mix.push_back(DegradationSampler::training_range(k));
    const auto fdata = make_training_set(256, 32, seed + 7, mix);
    const auto probe = flatten(make_eval_sets(train_kinds, 4, 32, seed + 2000));
    MacConfig mc;
    mc.steps = 32;
    mc.seed = seed;
    const auto scores = mac_scores(s1.restorer, &s1.adasam, probe, mc);
    const std::vector<K> eval_kinds{K::gaussian_noise, K::gaussian_blur, K::jpeg, K::pepper, K::speckle};
    const auto esets = make_eval_sets(eval_kinds, 16, 32, seed + 3000);

    auto finetune_variant = [&](const std::string& name, const std::set<std::string>& selected) {
        Stage2 s2;
        s2.restorer = cast_restorer<float>(s1.restorer, true);
        s2.extractor = extractor;
        s2.fusion = make_fusion(s2.extractor, s2.restorer, seed);
        const auto before = maskrestore::testing::group_hashes(s2.restorer.params);
        FinetuneConfig fc;
        fc.steps = 100;
        fc.seed = seed;
        fc.schedule.lr_max = 5e-4;
        fc.schedule.total_steps = 100;
        finetune(s2, selected, fdata, fc);
        for (const auto& g : maskrestore::testing::freeze_check(before, s2.restorer.params, selected).moved_frozen)
            out.freeze_violations.push_back(name + ":" + g);
        EvalOptions eo;
        eo.fusion = &s2.fusion;
        eo.extractor = &s2.extractor;
        eo.latent_cka = false;
        const auto r = evaluate(s2.restorer, esets, eo);
        out.psnr[name] = {mean_psnr(r, {"gaussian_noise", "gaussian_blur", "jpeg"}), mean_psnr(r, {"pepper", "speckle"})};
    };
    finetune_variant("mac30", selection_from_report(rank_and_select(scores, 30), s1.restorer));
    finetune_variant("random30", random_selection(s1.restorer, 30, seed));
    finetune_variant("all100", selection_from_report(rank_and_select(scores, 100), s1.restorer));
    finetune_variant("mac10", selection_from_report(rank_and_select(scores, 10), s1.restorer));
    return out;
}

// ---------------------------------------------------------------- 15

Outcome pipeline_smoke(const fs::path& cli, const fs::path& config, const fs::path& work) {
    if (!fs::exists(cli)) return {false, "CLI binary not found: " + cli.string()};
    const fs::path run = work / "smoke";
    fs::remove_all(run);
    fs::create_directories(run);
    const auto t0 = Clock::now();
    for (const char* cmd : {"synth", "pretrain", "mac-rank", "finetune", "eval"}) {
        const std::string line = "\"" + cli.string() + "\" " + cmd + " -c \"" + config.string() + "\" --set run.dir=\"" +
                                 run.string() + "\" > \"" + (run / (std::string(cmd) + ".log")).string() + "\" 2>&1";
        if (std::system(line.c_str()) != 0) return {false, std::string(cmd) + " failed, see " + (run / cmd).string() + ".log"};
    }
    const double t = seconds_since(t0);
    std::vector<std::string> missing;
    for (const char* f : {"config.ini", "data/train/manifest.txt", "pretrain.ckpt", "pretrain_loss.csv", "layers.txt",
                          "finetune.ckpt", "finetune_loss.csv", "selected.txt", "freeze_check.txt", "metrics.txt",
                          "metrics.csv", "summary.txt", "cka.txt"})
        if (!fs::exists(run / f) || fs::file_size(run / f) == 0) missing.push_back(f);
    std::string detail = fmt("%.0f s", t);
    if (!missing.empty()) {
        detail += "; missing:";
        for (const auto& m : missing) detail += " " + m;
    } else {
        detail += ", all artifacts present in " + run.string();
    }
    return {missing.empty() && t < 1200.0, detail};
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Acceptance criteria"};
    std::string cli_path = MASKRESTORE_CLI_PATH;
    std::string config_path = std::string(MASKRESTORE_SOURCE_DIR) + "/configs/smoke.ini";
    std::string work = (fs::temp_directory_path() / "maskrestore_acceptance").string();
    std::vector<int> known_failures, only;
    app.add_option("--cli", cli_path, "maskrestore binary");
    app.add_option("--config", config_path, "config for the pipeline smoke run");
    app.add_option("--work", work, "scratch directory");
    app.add_option("--known-failures", known_failures, "criteria whose FAIL does not affect the exit status")
        ->delimiter(',');
    app.add_option("--only", only, "run only these criteria")->delimiter(',');
    CLI11_PARSE(app, argc, argv);

    const std::set<int> selected(only.begin(), only.end());
    auto wanted = [&](int id) { return selected.empty() || selected.count(id); };
    const std::set<int> known(known_failures.begin(), known_failures.end());
    int unexpected = 0;
    auto report = [&](int id, const char* title, const Outcome& o) {
        const char* status = o.pass ? "PASS" : "FAIL";
        std::cout << status << " [" << (id < 10 ? " " : "") << id << "] " << title << ": " << o.detail;
        if (!o.pass && known.count(id)) std::cout << " (known)";
        std::cout << std::endl;
        if (!o.pass && !known.count(id)) ++unexpected;
    };

    const std::vector<std::pair<const char*, std::function<Outcome()>>> quick = {
        {"autodiff soundness", autodiff_soundness},
        {"IG completeness", ig_completeness},
        {"conductance layer completeness", conductance_completeness},
        {"MAC correctness", mac_correctness},
        {"sampler exactness", sampler_exactness},
        {"gradient separation", gradient_separation},
        {"metric fidelity", metric_fidelity},
        {"degradation synthesis", degradation_synthesis},
        {"fusion identities", fusion_identities},
    };
    for (std::size_t i = 0; i < quick.size(); ++i)
        if (wanted(static_cast<int>(i) + 1)) report(static_cast<int>(i) + 1, quick[i].first, quick[i].second());

    const bool need_seeds = wanted(10) || wanted(11) || wanted(12) || wanted(13) || wanted(14);
    if (need_seeds) {
        const bool ablations = wanted(12) || wanted(13) || wanted(14);
        const auto extractor = load_extractor(default_extractor_path());
        std::vector<SeedRun> runs;
        for (std::uint64_t seed = 1; seed <= 5; ++seed) {
            const auto t0 = Clock::now();
            runs.push_back(run_seed(seed, extractor, ablations));
            std::cerr << "seed " << seed << " done in " << fmt("%.0f", seconds_since(t0)) << " s" << std::endl;
        }
        auto collect = [&](auto f) {
            std::vector<double> v;
            for (const auto& r : runs) v.push_back(f(r));
            return v;
        };
        if (wanted(10)) {
            const auto drops = collect([](const SeedRun& r) { return r.drop; });
            const auto secs = collect([](const SeedRun& r) { return r.pretrain_seconds; });
            const double total = std::accumulate(secs.begin(), secs.end(), 0.0);
            report(10, "pre-training smoke",
                   {median(drops) >= 0.5 && total < 600.0,
                    fmt("masked L1 drop per seed [%s], median %.3f; 5 runs took %.0f s", join(drops).c_str(),
                        median(drops), total)});
        }
        if (wanted(11)) {
            const auto gap = collect([](const SeedRun& r) { return r.twin - r.single; });
            report(11, "twin-mask observation",
                   {median(gap) > 0.0, fmt("twin minus single PSNR per seed [%s] dB, median %+.3f",
                                           join(gap, "%+.2f").c_str(), median(gap))});
        }
        if (ablations) {
            auto in = [](const SeedRun& r, const char* v) { return r.psnr.at(v).first; };
            auto ood = [](const SeedRun& r, const char* v) { return r.psnr.at(v).second; };
            if (wanted(12)) {
                const auto gap = collect([&](const SeedRun& r) { return in(r, "mac30") - in(r, "random30"); });
                report(12, "MAC-30% vs random-30%",
                       {median(gap) >= 0.0, fmt("held-out PSNR gap per seed [%s] dB, median %+.3f",
                                                join(gap, "%+.3f").c_str(), median(gap))});
            }
            if (wanted(13)) {
                const auto in_gap = collect([&](const SeedRun& r) { return in(r, "all100") - in(r, "mac10"); });
                const auto ood_gap = collect([&](const SeedRun& r) { return ood(r, "mac10") - ood(r, "all100"); });
                report(13, "100% vs 10% trade-off",
                       {median(in_gap) >= 0.0 && median(ood_gap) >= 0.0,
                        fmt("in-dist 100%%-10%% [%s] median %+.3f; OOD 10%%-100%% [%s] median %+.3f",
                            join(in_gap, "%+.3f").c_str(), median(in_gap), join(ood_gap, "%+.3f").c_str(),
                            median(ood_gap))});
            }
            if (wanted(14)) {
                std::size_t violations = 0;
                for (const auto& r : runs) violations += r.freeze_violations.size();
                std::string detail = fmt("%zu fine-tuning runs, %zu frozen groups moved", runs.size() * 4, violations);
                for (const auto& r : runs)
                    for (const auto& v : r.freeze_violations) detail += " " + v;
                report(14, "freeze contract", {violations == 0, detail});
            }
        }
    }
    if (wanted(15)) report(15, "end-to-end pipeline smoke", pipeline_smoke(cli_path, config_path, work));
    return unexpected == 0 ? 0 : 1;
}
