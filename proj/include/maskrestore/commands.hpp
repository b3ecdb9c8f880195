#pragma once

// Stage commands behind the CLI. Each command writes its artifacts into the
// run directory (see resolve_run_dir) together with the effective config.
//
// Run directory layout:
//   config.ini                 effective configuration
//   data/train/                synth: training pairs
//   data/eval/<kind>/          synth: test pairs per kind
//   data/probe/<kind>/         synth: attribution probe pairs
//   pretrain.ckpt              pretrain (plus pretrain_step<N>.ckpt)
//   pretrain_loss.csv
//   layers.txt                 mac-rank
//   finetune.ckpt              finetune
//   finetune_loss.csv, selected.txt, freeze_check.txt
//   metrics.txt, metrics.csv,  eval
//   summary.txt, cka.txt
//   twin/                      twin-infer: <name>_restored.ppm, <name>_mask.pgm
//   extractor.ckpt             train-extractor

#include <filesystem>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "maskrestore/checkpoint.hpp"
#include "maskrestore/config.hpp"
#include "maskrestore/pipeline.hpp"

namespace maskrestore {

class CommandError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

enum class ReportFormat { table, csv };

// Header plus one line per record; PSNR with 2 decimals, SSIM with 4.
std::string report_emit(std::span<const MetricRecord> records, ReportFormat format);
std::string cka_table(const std::vector<std::string>& labels, const std::vector<std::vector<double>>& matrix);

std::filesystem::path resolve_run_dir(const RunConfig& config);
std::filesystem::path default_extractor_path();

// Stage checkpoints.
Checkpoint stage1_checkpoint(const Stage1& models, const RunConfig& config);
Stage1 load_stage1(const std::filesystem::path& path);
Checkpoint extractor_checkpoint(const Extractor<float>& extractor);
Extractor<float> load_extractor(const std::filesystem::path& path);

// Runs config.command. Returns 0 iff every artifact was written; errors are
// reported on `err` naming the offending field or file.
int run_command(const RunConfig& config, std::ostream& out, std::ostream& err);

}  // namespace maskrestore
