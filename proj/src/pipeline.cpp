#include "maskrestore/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>
#include <optional>

namespace maskrestore {

// ---------------------------------------------------------------- optimization

double lr_at(std::size_t step, const ScheduleSpec& spec) {
    if (spec.total_steps == 0) return spec.lr_max;
    if (step > spec.total_steps)
        throw std::out_of_range("schedule step " + std::to_string(step) + " beyond total " +
                                std::to_string(spec.total_steps));
    if (step == spec.total_steps) return spec.lr_min;
    const double t = static_cast<double>(step) / static_cast<double>(spec.total_steps);
    return spec.lr_min + 0.5 * (spec.lr_max - spec.lr_min) * (1.0 + std::cos(std::numbers::pi * t));
}

template <typename T>
void adam_step(ParamSet<T>& params, AdamState<T>& state, double lr, const ScheduleSpec& spec) {
    struct Slot {
        std::string key;
        Tensor<T>* tensor;
    };
    std::vector<Slot> slots;
    for (auto& g : params.groups()) {
        if (!g.trainable) continue;
        slots.push_back({g.name + ".weight", &g.weight});
        if (g.bias) slots.push_back({g.name + ".bias", &*g.bias});
    }
    for (const auto& s : slots) {
        if (!s.tensor->has_grad()) continue;
        const auto grad = s.tensor->grad();
        for (std::size_t i = 0; i < grad.size(); ++i)
            if (!std::isfinite(grad[i]))
                throw NonFiniteGradient("non-finite gradient in " + s.key + " at element " + std::to_string(i) +
                                        " (step " + std::to_string(state.step + 1) + ")");
    }
    ++state.step;
    const double c1 = 1.0 - std::pow(spec.beta1, static_cast<double>(state.step));
    const double c2 = 1.0 - std::pow(spec.beta2, static_cast<double>(state.step));
    for (const auto& s : slots) {
        if (!s.tensor->has_grad()) continue;
        auto& m = state.m[s.key];
        auto& v = state.v[s.key];
        const std::size_t n = s.tensor->numel();
        if (m.size() != n) m.assign(n, T(0));
        if (v.size() != n) v.assign(n, T(0));
        const auto grad = s.tensor->grad();
        auto w = s.tensor->mutable_data();
        for (std::size_t i = 0; i < n; ++i) {
            const double g = grad[i];
            m[i] = static_cast<T>(spec.beta1 * m[i] + (1.0 - spec.beta1) * g);
            v[i] = static_cast<T>(spec.beta2 * v[i] + (1.0 - spec.beta2) * g * g);
            const double mh = m[i] / c1, vh = v[i] / c2;
            w[i] = static_cast<T>(w[i] - lr * mh / (std::sqrt(vh) + spec.eps));
        }
    }
    params.zero_grad();
}

template void adam_step<float>(ParamSet<float>&, AdamState<float>&, double, const ScheduleSpec&);
template void adam_step<double>(ParamSet<double>&, AdamState<double>&, double, const ScheduleSpec&);

// ---------------------------------------------------------------- data

std::vector<ImagePair> make_training_set(std::size_t count, std::size_t size, std::uint64_t seed,
                                         std::span<const DegradationSampler> mix) {
    std::vector<std::uint64_t> seeds(count);
    for (std::size_t i = 0; i < count; ++i) seeds[i] = derive_seed(seed, i);
    return make_pair_batch(seeds, mix, size);
}

std::vector<EvalSet> make_eval_sets(std::span<const DegradationKind> kinds, std::size_t count, std::size_t size,
                                    std::uint64_t seed) {
    if (kinds.empty() || count == 0) throw std::invalid_argument("evaluation needs at least one kind and one image");
    const std::uint64_t base = derive_seed(seed, 0x7e57);
    std::vector<Image> clean(count);
    for (std::size_t i = 0; i < count; ++i) clean[i] = gen_clean(derive_seed(base, i), size);
    std::vector<EvalSet> sets;
    for (DegradationKind kind : kinds) {
        EvalSet set{kind, {}};
        const DegradationSampler level = DegradationSampler::test_level(kind);
        for (std::size_t i = 0; i < count; ++i) {
            DegradationSpec spec{kind, level.lo, derive_seed(derive_seed(base, i), static_cast<std::uint64_t>(kind))};
            set.pairs.push_back({clean[i], degrade(clean[i], spec), spec});
        }
        sets.push_back(std::move(set));
    }
    return sets;
}

std::vector<ImagePair> flatten(std::span<const EvalSet> sets) {
    std::vector<ImagePair> all;
    for (const auto& s : sets) all.insert(all.end(), s.pairs.begin(), s.pairs.end());
    return all;
}

// ---------------------------------------------------------------- stage 1

Stage1 make_stage1(const RestorerConfig& restorer, const AdaSamConfig& adasam, std::uint64_t seed) {
    Stage1 s;
    s.restorer = make_restorer<float>(restorer, seed);
    s.adasam = make_adasam<float>(adasam, seed);
    return s;
}

MaskPlan adasam_plan(const AdaSam<float>& adasam, const Image& image, double ratio, Rng& rng) {
    const Tensor<float> scores = adasam_scores(adasam, detach(to_tensor<float>(image)));
    const std::vector<double> s(scores.data().begin(), scores.data().end());
    return plan_from_scores(s, image.height, image.width, adasam.config.patch, ratio, rng);
}

namespace {

std::vector<const ImagePair*> pick_batch(std::span<const ImagePair> data, std::size_t batch, std::uint64_t seed,
                                         std::size_t step) {
    Rng pick(seed, Stream::batch, step);
    std::vector<const ImagePair*> out(batch);
    for (auto& p : out) p = &data[pick.index(data.size())];
    return out;
}

struct Divergence {
    double factor;
    std::size_t patience;
    double initial = std::numeric_limits<double>::quiet_NaN();
    std::size_t over = 0;

    // Returns a reason when training must stop.
    std::string check(double loss) {
        if (!std::isfinite(loss)) return "non-finite loss " + std::to_string(loss);
        if (std::isnan(initial)) initial = loss;
        over = loss > factor * initial ? over + 1 : 0;
        if (over >= patience)
            return "loss above " + std::to_string(factor) + "x its initial value " + std::to_string(initial) + " for " +
                   std::to_string(patience) + " consecutive steps";
        return {};
    }
};

void check_data(std::span<const ImagePair> data, std::size_t batch) {
    if (data.empty()) throw std::invalid_argument("training set is empty");
    if (batch == 0) throw std::invalid_argument("batch size must be positive");
}

}  // namespace

TrainResult pretrain(Stage1& models, std::span<const ImagePair> data, const PretrainConfig& config,
                     const Stage1Callback& on_checkpoint) {
    check_data(data, config.batch);
    mask_count(1, 1, config.ratio);  // range check only
    TrainResult result;
    Divergence guard{config.divergence_factor, config.divergence_patience};
    auto& restorer = models.restorer;
    auto& adasam = models.adasam;
    const std::size_t patch = adasam.config.patch;
    for (std::size_t s = 0; s < config.steps; ++s) {
        const std::size_t step = models.step;
        const double lr = lr_at(std::min(step, config.schedule.total_steps), config.schedule);
        const auto batch = pick_batch(data, config.batch, config.seed, step);
        const std::size_t h = batch.front()->clean.height, w = batch.front()->clean.width;

        std::vector<Image> masked, clean;
        std::vector<Mask> masks;
        std::vector<Tensor<float>> maps;
        std::vector<std::vector<std::size_t>> regions;
        for (std::size_t b = 0; b < batch.size(); ++b) {
            const Image& degraded = batch[b]->degraded;
            const Tensor<float> scores = adasam_scores(adasam, to_tensor<float>(degraded));
            Tensor<float> map = importance_map(scores, h, w, patch);
            const std::vector<double> sv(map.data().begin(), map.data().end());
            Rng mask_rng(config.seed, Stream::mask, step * config.batch + b);
            MaskPlan plan = sample_mask(sv, h, w, config.ratio, mask_rng);
            masked.push_back(apply_mask(degraded, plan.mask));
            clean.push_back(batch[b]->clean);
            masks.push_back(std::move(plan.mask));
            maps.push_back(std::move(map));
            regions.push_back(std::move(plan.indices));
        }
        const Tensor<float> input = to_batch<float>(masked);
        const Tensor<float> target = to_batch<float>(clean);
        const Tensor<float> pred = restorer_forward(restorer, input);
        const Tensor<float> loss_r = restoration_loss(pred, target, mask_tensor<float>(masks, h, w));

        // Errors come from the detached prediction: AdaSAM never sees a gradient
        // through the restorer and the restorer never sees the mask loss.
        std::vector<Tensor<float>> parts;
        for (std::size_t b = 0; b < batch.size(); ++b) {
            const auto errors = per_pixel_error(clean[b], to_image(detach(pred), b));
            parts.push_back(mask_loss(errors, maps[b], regions[b], config.mask_loss_weight));
        }
        Tensor<float> loss_m = parts.front();
        for (std::size_t b = 1; b < parts.size(); ++b) loss_m = add(loss_m, parts[b]);
        loss_m = mul_scalar(loss_m, 1.0f / static_cast<float>(parts.size()));

        const bool update_r = config.objectives != Objectives::mask_only && (!config.alternate || step % 2 == 0);
        const bool update_m = config.objectives != Objectives::restoration_only && (!config.alternate || step % 2 == 1);
        std::optional<Tensor<float>> total;
        if (update_r && update_m)
            total = add(loss_r, loss_m);
        else if (update_r)
            total = loss_r;
        else if (update_m)
            total = loss_m;
        if (total && total->requires_grad()) total->backward();
        try {
            if (update_r) adam_step(restorer.params, models.restorer_opt, lr, config.schedule);
            if (update_m) adam_step(adasam.params, models.adasam_opt, lr, config.schedule);
        } catch (const NonFiniteGradient& e) {
            result.halted = true;
            result.halt_reason = e.what();
            break;
        }
        restorer.params.zero_grad();
        adasam.params.zero_grad();

        const double lr_value = loss_r.item();
        result.curve.push_back({step, lr_value, loss_m.item(), lr});
        ++models.step;
        if (const std::string why = guard.check(lr_value); !why.empty()) {
            result.halted = true;
            result.halt_reason = why + " at step " + std::to_string(step);
            break;
        }
        if (config.checkpoint_every && on_checkpoint && models.step % config.checkpoint_every == 0)
            on_checkpoint(models);
    }
    return result;
}

// ---------------------------------------------------------------- attribution driver

std::vector<std::pair<std::string, double>> mac_scores(const Restorer<float>& restorer, const AdaSam<float>* adasam,
                                                       std::span<const ImagePair> probe, const MacConfig& config) {
    if (probe.empty()) throw std::invalid_argument("MAC probe batch is empty");
    const std::size_t h = probe.front().clean.height, w = probe.front().clean.width;
    std::vector<Image> degraded, clean;
    std::vector<Mask> masks;
    const std::vector<double> uniform(h * w, 1.0 / static_cast<double>(h * w));
    for (std::size_t i = 0; i < probe.size(); ++i) {
        Rng rng(config.seed, Stream::probe, i);
        MaskPlan plan = adasam ? adasam_plan(*adasam, probe[i].degraded, config.mask_ratio, rng)
                               : sample_mask(uniform, h, w, config.mask_ratio, rng);
        degraded.push_back(probe[i].degraded);
        clean.push_back(probe[i].clean);
        masks.push_back(std::move(plan.mask));
    }
    const Tensor<double> x = to_batch<double>(degraded);
    const Tensor<double> baseline = Tensor<double>::full(x.shape(), kMaskFill);
    const Tensor<double> target = to_batch<double>(clean);
    Rng alpha_rng(config.seed, Stream::alpha_order);
    PathSpec spec;
    spec.alpha = assign_alpha(masks, config.ratio, config.delta, alpha_rng);
    spec.delta = config.delta;
    spec.ratio = config.ratio;
    spec.steps = config.steps;
    spec.quadrature = config.quadrature;
    const Restorer<double> net = cast_restorer<double>(restorer, false);
    const auto layers = mac_layers(restorer_probe(net, target), x, baseline, spec, config.aggregation);
    std::vector<std::pair<std::string, double>> scores;
    for (const auto& l : layers) scores.emplace_back(l.name, l.score);
    return scores;
}

LayerReport mac_rank(const Restorer<float>& restorer, const AdaSam<float>* adasam, std::span<const ImagePair> probe,
                     const MacConfig& config) {
    return rank_and_select(mac_scores(restorer, adasam, probe, config), config.k_percent);
}

// ---------------------------------------------------------------- stage 2

std::set<std::string> selection_from_report(const LayerReport& report, const Restorer<float>& restorer) {
    std::set<std::string> in_report;
    for (const auto& l : report.layers) {
        if (!restorer.params.contains(l.name))
            throw std::invalid_argument("layer report names '" + l.name + "', which the restorer does not have");
        in_report.insert(l.name);
    }
    for (const auto& name : restorer.params.names())
        if (!in_report.count(name))
            throw std::invalid_argument("layer report is missing restorer group '" + name + "'");
    const auto sel = report.selected();
    return {sel.begin(), sel.end()};
}

std::set<std::string> random_selection(const Restorer<float>& restorer, double k_percent, std::uint64_t seed) {
    auto names = restorer.params.names();
    const std::size_t keep = selection_count(names.size(), k_percent);
    Rng rng(seed, Stream::layer_choice);
    std::shuffle(names.begin(), names.end(), rng.engine());
    return {names.begin(), names.begin() + static_cast<long>(keep)};
}

TrainResult finetune(Stage2& models, const std::set<std::string>& selected, std::span<const ImagePair> data,
                     const FinetuneConfig& config) {
    check_data(data, config.batch);
    auto& restorer = models.restorer;
    restorer.params.set_all_trainable(false);
    restorer.params.set_trainable(selected, true);
    models.fusion.params.set_all_trainable(true);
    models.extractor.params.set_all_trainable(false);
    models.use_fusion = config.use_fusion;
    TrainResult result;
    Divergence guard{10.0, 100};
    for (std::size_t s = 0; s < config.steps; ++s) {
        const std::size_t step = models.step;
        const double lr = lr_at(std::min(step, config.schedule.total_steps), config.schedule);
        const auto batch = pick_batch(data, config.batch, derive_seed(config.seed, 2), step);
        std::vector<Image> degraded, clean;
        for (const auto* p : batch) {
            degraded.push_back(p->degraded);
            clean.push_back(p->clean);
        }
        const Tensor<float> input = to_batch<float>(degraded);
        const Tensor<float> out = config.use_fusion
                                      ? restore_batch(restorer, input, &models.fusion, &models.extractor)
                                      : restore_batch(restorer, input);
        const Tensor<float> loss = mean(abs(sub(out, to_batch<float>(clean))));
        if (loss.requires_grad()) loss.backward();
        try {
            adam_step(restorer.params, models.restorer_opt, lr, config.schedule);
            if (config.use_fusion) adam_step(models.fusion.params, models.fusion_opt, lr, config.schedule);
        } catch (const NonFiniteGradient& e) {
            result.halted = true;
            result.halt_reason = e.what();
            break;
        }
        models.fusion.params.zero_grad();
        result.curve.push_back({step, loss.item(), 0.0, lr});
        ++models.step;
        if (const std::string why = guard.check(loss.item()); !why.empty()) {
            result.halted = true;
            result.halt_reason = why + " at step " + std::to_string(step);
            break;
        }
    }
    return result;
}

// ---------------------------------------------------------------- inference

Tensor<float> restore_batch(const Restorer<float>& restorer, const Tensor<float>& batch, const Fusion<float>* fusion,
                            const Extractor<float>* extractor, RestorerTrace<float>* trace) {
    if (fusion && extractor) {
        const LevelHook<float> hook = make_fusion_hook(*fusion, *extractor, batch);
        return restorer_forward(restorer, batch, &hook, trace);
    }
    return restorer_forward<float>(restorer, batch, nullptr, trace);
}

std::vector<Image> restore_images(const Restorer<float>& restorer, std::span<const Image> images,
                                  const Fusion<float>* fusion, const Extractor<float>* extractor) {
    std::vector<Image> out;
    constexpr std::size_t kChunk = 8;
    for (std::size_t start = 0; start < images.size(); start += kChunk) {
        const auto chunk = images.subspan(start, std::min(kChunk, images.size() - start));
        const Tensor<float> pred = detach(restore_batch(restorer, to_batch<float>(chunk), fusion, extractor));
        for (std::size_t n = 0; n < chunk.size(); ++n) out.push_back(to_image(pred, n));
    }
    return out;
}

std::vector<Image> twin_mask_infer(const Restorer<float>& restorer, std::span<const Image> images,
                                   std::span<const Mask> masks) {
    if (images.size() != masks.size()) throw std::invalid_argument("twin_mask_infer: one mask per image required");
    std::vector<Image> first, second;
    for (std::size_t i = 0; i < images.size(); ++i) {
        const auto [m, complement] = twin_mask_pair(masks[i]);
        first.push_back(apply_mask(images[i], m));
        second.push_back(apply_mask(images[i], complement));
    }
    const auto a = restore_images(restorer, first);
    const auto b = restore_images(restorer, second);
    std::vector<Image> out;
    for (std::size_t i = 0; i < images.size(); ++i) {
        Image o = a[i];
        const std::size_t plane = o.plane();
        for (std::size_t c = 0; c < o.channels; ++c)
            for (std::size_t p = 0; p < plane; ++p)
                o.pixels[c * plane + p] = masks[i][p] ? a[i].pixels[c * plane + p] : b[i].pixels[c * plane + p];
        out.push_back(std::move(o));
    }
    return out;
}

Image twin_mask_infer(const Restorer<float>& restorer, const Image& image, const Mask& mask) {
    return twin_mask_infer(restorer, std::span<const Image>(&image, 1), std::span<const Mask>(&mask, 1)).front();
}

// ---------------------------------------------------------------- evaluation

std::vector<double> latent_features(const Restorer<float>& restorer, std::span<const Image> images,
                                    const Fusion<float>* fusion, const Extractor<float>* extractor,
                                    std::size_t* width) {
    std::vector<double> rows;
    constexpr std::size_t kChunk = 8;
    for (std::size_t start = 0; start < images.size(); start += kChunk) {
        const auto chunk = images.subspan(start, std::min(kChunk, images.size() - start));
        RestorerTrace<float> tr;
        restore_batch(restorer, to_batch<float>(chunk), fusion, extractor, &tr);
        const Tensor<float>& z = tr.latent;
        const std::size_t n = z.dim(0), c = z.dim(1), plane = z.dim(2) * z.dim(3);
        *width = c;
        const auto v = z.data();
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t p = 0; p < plane; ++p)
                for (std::size_t ch = 0; ch < c; ++ch) rows.push_back(v[(i * c + ch) * plane + p]);
    }
    return rows;
}

EvalReport evaluate(const Restorer<float>& restorer, std::span<const EvalSet> sets, const EvalOptions& options) {
    if (sets.empty()) throw std::invalid_argument("evaluate: no test sets");
    EvalReport report;
    std::vector<std::vector<double>> features;
    std::size_t feature_width = 0;
    for (std::size_t k = 0; k < sets.size(); ++k) {
        const auto& set = sets[k];
        if (set.pairs.empty()) throw std::invalid_argument("evaluate: empty test set for " + kind_name(set.kind));
        std::vector<Image> inputs;
        for (const auto& p : set.pairs) inputs.push_back(p.degraded);
        std::vector<Image> outputs;
        if (options.mode == InferMode::twin) {
            std::vector<Mask> masks;
            const std::size_t h = inputs.front().height, w = inputs.front().width;
            const std::vector<double> uniform(h * w, 1.0 / static_cast<double>(h * w));
            for (std::size_t i = 0; i < inputs.size(); ++i) {
                Rng rng(options.seed, Stream::mask, k * 100000 + i);
                masks.push_back(options.adasam ? adasam_plan(*options.adasam, inputs[i], options.ratio, rng).mask
                                               : sample_mask(uniform, h, w, options.ratio, rng).mask);
            }
            outputs = twin_mask_infer(restorer, inputs, masks);
        } else {
            outputs = restore_images(restorer, inputs, options.fusion, options.extractor);
        }
        MetricRecord rec{kind_name(set.kind), 0.0, 0.0, inputs.size(), 0};
        for (std::size_t i = 0; i < outputs.size(); ++i) {
            clip_unit(outputs[i]);
            const Psnr p = psnr(outputs[i], set.pairs[i].clean);
            rec.psnr += p.db;
            rec.exact += p.exact ? 1 : 0;
            rec.ssim += ssim(outputs[i], set.pairs[i].clean);
        }
        rec.psnr /= static_cast<double>(rec.count);
        rec.ssim /= static_cast<double>(rec.count);
        report.records.push_back(rec);
        if (options.latent_cka) {
            features.push_back(latent_features(restorer, inputs, options.fusion, options.extractor, &feature_width));
            report.cka_labels.push_back(rec.kind);
        }
    }
    const double n = static_cast<double>(report.records.size());
    for (const auto& r : report.records) {
        report.psnr_mean += r.psnr / n;
        report.ssim_mean += r.ssim / n;
    }
    for (const auto& r : report.records) {
        report.psnr_variance += (r.psnr - report.psnr_mean) * (r.psnr - report.psnr_mean) / n;
        report.ssim_variance += (r.ssim - report.ssim_mean) * (r.ssim - report.ssim_mean) / n;
    }
    if (options.latent_cka) {
        if (options.noise_reference) {
            const Image& like = sets.front().pairs.front().clean;
            std::vector<Image> noise(sets.front().pairs.size(), Image(like.channels, like.height, like.width));
            Rng rng(options.seed, Stream::probe, 0x5eed);
            for (auto& im : noise)
                for (auto& v : im.pixels) v = rng.uniform();
            features.push_back(latent_features(restorer, noise, options.fusion, options.extractor, &feature_width));
            report.cka_labels.push_back("noise");
        }
        const std::size_t k = features.size();
        report.cka.assign(k, std::vector<double>(k, 0.0));
        for (std::size_t i = 0; i < k; ++i)
            for (std::size_t j = i; j < k; ++j) {
                if (features[i].size() != features[j].size())
                    throw std::invalid_argument("evaluate: latent CKA needs equally sized test sets");
                report.cka[i][j] = report.cka[j][i] =
                    i == j ? 1.0 : cka(features[i], feature_width, features[j], feature_width);
            }
    }
    return report;
}

// ---------------------------------------------------------------- extractor

ExtractorTrainResult train_extractor(const ExtractorConfig& config, const ExtractorTrainConfig& train) {
    ExtractorTrainResult result{make_extractor<float>(config, train.seed), {}, 0.0};
    auto& net = result.extractor;
    AdamState<float> opt;
    const ScheduleSpec schedule{train.lr, train.lr * 0.01, train.steps};
    const std::size_t classes = config.classes;
    auto sample = [&](Rng& rng, std::size_t count, std::vector<std::size_t>& labels) {
        std::vector<Image> images;
        labels.clear();
        for (std::size_t b = 0; b < count; ++b) {
            const std::size_t label = rng.index(std::min(classes, kTextureClasses));
            labels.push_back(label);
            images.push_back(gen_texture(label, rng.engine()(), train.size));
        }
        return to_batch<float>(images);
    };
    std::vector<std::size_t> labels;
    for (std::size_t step = 0; step < train.steps; ++step) {
        Rng rng(train.seed, Stream::batch, step);
        const Tensor<float> batch = sample(rng, train.batch, labels);
        const Tensor<float> probs = softmax(extractor_logits(net, batch), 1);
        std::vector<std::size_t> picked(labels.size());
        for (std::size_t b = 0; b < labels.size(); ++b) picked[b] = b * classes + labels[b];
        const Tensor<float> loss = neg(mean(log(add_scalar(gather(probs, picked), 1e-12f))));
        loss.backward();
        adam_step(net.params, opt, lr_at(step, schedule), schedule);
        result.loss_curve.push_back(loss.item());
    }
    Rng rng(train.seed, Stream::probe);
    const Tensor<float> held = sample(rng, 128, labels);
    const Tensor<float> logits = extractor_logits(net, held);
    std::size_t correct = 0;
    for (std::size_t b = 0; b < labels.size(); ++b) {
        const auto row = logits.data().subspan(b * classes, classes);
        const auto best = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
        correct += best == labels[b] ? 1 : 0;
    }
    result.accuracy = static_cast<double>(correct) / static_cast<double>(labels.size());
    return result;
}

}  // namespace maskrestore
