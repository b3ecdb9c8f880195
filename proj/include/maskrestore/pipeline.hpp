#pragma once

// Training stages, twin-mask inference and evaluation.

#include <cstdint>
#include <functional>
#include <map>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "maskrestore/attribution.hpp"
#include "maskrestore/degrade.hpp"
#include "maskrestore/fusion.hpp"
#include "maskrestore/masking.hpp"
#include "maskrestore/metrics.hpp"
#include "maskrestore/models.hpp"

namespace maskrestore {

// ---------------------------------------------------------------- optimization

struct ScheduleSpec {
    double lr_max = 2e-4;
    double lr_min = 1e-6;
    std::size_t total_steps = 5000;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// Cosine decay from lr_max at step 0 to lr_min at total_steps.
double lr_at(std::size_t step, const ScheduleSpec& spec);

class NonFiniteGradient : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

template <typename T>
struct AdamState {
    std::size_t step = 0;
    std::map<std::string, std::vector<T>> m;  // keyed "<group>.weight" / "<group>.bias"
    std::map<std::string, std::vector<T>> v;
};

// One bias-corrected Adam update of every trainable group, then clears grads.
// A non-finite gradient anywhere rejects the whole step before any write.
template <typename T>
void adam_step(ParamSet<T>& params, AdamState<T>& state, double lr, const ScheduleSpec& spec);

// ---------------------------------------------------------------- data

std::vector<ImagePair> make_training_set(std::size_t count, std::size_t size, std::uint64_t seed,
                                         std::span<const DegradationSampler> mix);

struct EvalSet {
    DegradationKind kind;
    std::vector<ImagePair> pairs;
};

// The same clean images for every kind, each at its fixed test level.
std::vector<EvalSet> make_eval_sets(std::span<const DegradationKind> kinds, std::size_t count, std::size_t size,
                                    std::uint64_t seed);

std::vector<ImagePair> flatten(std::span<const EvalSet> sets);

// ---------------------------------------------------------------- stage 1

enum class Objectives { both, restoration_only, mask_only };

struct PretrainConfig {
    std::size_t steps = 5000;
    std::size_t batch = 8;
    double ratio = kDefaultMaskRatio;
    double mask_loss_weight = kDefaultMaskLossWeight;
    ScheduleSpec schedule;
    std::uint64_t seed = 1;
    bool alternate = false;  // update restorer on even steps, AdaSAM on odd steps
    Objectives objectives = Objectives::both;
    std::size_t checkpoint_every = 0;
    double divergence_factor = 10.0;
    std::size_t divergence_patience = 100;
};

struct StepLog {
    std::size_t step = 0;
    double loss = 0.0;       // masked-region L1 (stage 1) or whole-image L1 (stage 2)
    double mask_loss = 0.0;  // stage 1 only
    double lr = 0.0;
};

struct TrainResult {
    std::vector<StepLog> curve;
    bool halted = false;
    std::string halt_reason;
};

struct Stage1 {
    Restorer<float> restorer;
    AdaSam<float> adasam;
    AdamState<float> restorer_opt;
    AdamState<float> adasam_opt;
    std::size_t step = 0;
};

Stage1 make_stage1(const RestorerConfig& restorer, const AdaSamConfig& adasam, std::uint64_t seed);

using Stage1Callback = std::function<void(const Stage1&)>;

TrainResult pretrain(Stage1& models, std::span<const ImagePair> data, const PretrainConfig& config,
                     const Stage1Callback& on_checkpoint = {});

// AdaSAM plan for one degraded image.
MaskPlan adasam_plan(const AdaSam<float>& adasam, const Image& image, double ratio, Rng& rng);

// ---------------------------------------------------------------- attribution driver

struct MacConfig {
    double delta = 100.0;
    double ratio = 0.5;  // r
    std::size_t steps = 64;
    double mask_ratio = kDefaultMaskRatio;
    Quadrature quadrature = Quadrature::left;
    Aggregation aggregation = Aggregation::absolute;
    double k_percent = 30.0;
    std::uint64_t seed = 1;
};

// MAC score of every restorer group over a probe batch. Probe masks come from
// AdaSAM when given, otherwise from a uniform pixel map.
std::vector<std::pair<std::string, double>> mac_scores(const Restorer<float>& restorer, const AdaSam<float>* adasam,
                                                       std::span<const ImagePair> probe, const MacConfig& config);

LayerReport mac_rank(const Restorer<float>& restorer, const AdaSam<float>* adasam, std::span<const ImagePair> probe,
                     const MacConfig& config);

// ---------------------------------------------------------------- stage 2

struct FinetuneConfig {
    std::size_t steps = 1000;
    std::size_t batch = 8;
    ScheduleSpec schedule;
    std::uint64_t seed = 1;
    bool use_fusion = true;
};

struct Stage2 {
    Restorer<float> restorer;
    Fusion<float> fusion;
    Extractor<float> extractor;
    bool use_fusion = true;
    AdamState<float> restorer_opt;
    AdamState<float> fusion_opt;
    std::size_t step = 0;
};

// Rejects reports whose layer names differ from the restorer's groups.
std::set<std::string> selection_from_report(const LayerReport& report, const Restorer<float>& restorer);
std::set<std::string> random_selection(const Restorer<float>& restorer, double k_percent, std::uint64_t seed);

TrainResult finetune(Stage2& models, const std::set<std::string>& selected, std::span<const ImagePair> data,
                     const FinetuneConfig& config);

// ---------------------------------------------------------------- inference

// Restorer output for a [N,C,H,W] batch, with fusion when both are given.
Tensor<float> restore_batch(const Restorer<float>& restorer, const Tensor<float>& batch,
                            const Fusion<float>* fusion = nullptr, const Extractor<float>* extractor = nullptr,
                            RestorerTrace<float>* trace = nullptr);

std::vector<Image> restore_images(const Restorer<float>& restorer, std::span<const Image> images,
                                  const Fusion<float>* fusion = nullptr, const Extractor<float>* extractor = nullptr);

// O = M * f(x masked by M) + (1-M) * f(x masked by 1-M).
Image twin_mask_infer(const Restorer<float>& restorer, const Image& image, const Mask& mask);
std::vector<Image> twin_mask_infer(const Restorer<float>& restorer, std::span<const Image> images,
                                   std::span<const Mask> masks);

// ---------------------------------------------------------------- evaluation

struct MetricRecord {
    std::string kind;
    double psnr = 0.0;
    double ssim = 0.0;
    std::size_t count = 0;
    std::size_t exact = 0;  // images whose PSNR hit the cap
};

struct EvalReport {
    std::vector<MetricRecord> records;
    double psnr_mean = 0.0;
    double psnr_variance = 0.0;  // population variance across kinds
    double ssim_mean = 0.0;
    double ssim_variance = 0.0;
    std::vector<std::string> cka_labels;
    std::vector<std::vector<double>> cka;  // latent CKA between kinds
};

enum class InferMode { single, twin };

struct EvalOptions {
    InferMode mode = InferMode::single;
    const Fusion<float>* fusion = nullptr;
    const Extractor<float>* extractor = nullptr;
    const AdaSam<float>* adasam = nullptr;  // twin masks; uniform when null
    double ratio = kDefaultMaskRatio;
    std::uint64_t seed = 1;
    bool latent_cka = true;
    bool noise_reference = false;  // adds a row of uniform-noise inputs to the CKA matrix
    std::size_t batch = 8;
};

EvalReport evaluate(const Restorer<float>& restorer, std::span<const EvalSet> sets, const EvalOptions& options);

// Rows (image, position), columns channels of the restorer's latent features.
std::vector<double> latent_features(const Restorer<float>& restorer, std::span<const Image> images,
                                    const Fusion<float>* fusion, const Extractor<float>* extractor,
                                    std::size_t* width);

// ---------------------------------------------------------------- extractor

struct ExtractorTrainConfig {
    std::size_t steps = 600;
    std::size_t batch = 16;
    std::size_t size = 32;
    double lr = 2e-3;
    std::uint64_t seed = 7;
};

struct ExtractorTrainResult {
    Extractor<float> extractor;
    std::vector<double> loss_curve;
    double accuracy = 0.0;  // on fresh texture samples
};

ExtractorTrainResult train_extractor(const ExtractorConfig& config, const ExtractorTrainConfig& train);

}  // namespace maskrestore
