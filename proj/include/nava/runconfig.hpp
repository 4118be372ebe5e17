#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "nava/model.hpp"
#include "nava/sampler.hpp"
#include "nava/train.hpp"

namespace nava {

// Flat key=value run configuration: file values first, CLI overrides on
// top. Unknown keys are errors, and the fully resolved config is echoed
// into every output directory.
struct RunConfig {
    // model.*
    ModelConfig model;
    // data.*
    int64_t train_clips = 2048;
    int64_t val_clips = 256;
    uint64_t train_seed_start = 1000;
    uint64_t val_seed_start = 500000;
    uint64_t eval_seed_start = 900000;
    double speech_frac = 0.75;
    int dur_min = 4;
    int dur_max = 8;
    // train.*
    TrainConfig train;
    std::string stages_text = "0-2500:t2a=3,t2av=1;2500-5000:t2a=1,t2av=2";
    int64_t checkpoint_every = 1000;
    std::string train_data;  // dataset path
    // sample.*
    int sample_steps = 50;
    int sample_duration = 4;
    // eval.*
    int eval_n_clips = 100;
    int eval_steps = 20;
    // ablate.*
    std::string ablate_sweep = "align";
    std::string ablate_grid = "0,1";

    uint64_t seed = 42;

    // CLI-only parameters (never read from the file).
    std::string out_dir;
    std::string checkpoint_path;
    std::string resume_path;
    std::string prompt;
    std::string task = "t2av";
    GuidanceScales scales;
    std::optional<uint64_t> cli_seed;
    std::optional<int64_t> cli_steps;
    std::optional<int> cli_n_clips;
    std::string ablate_mode;

    // Applies one file/override assignment; throws ConfigError on unknown
    // keys or bad values.
    void set(const std::string& key, const std::string& value);

    // Finishes construction: parses stages, applies CLI overrides and
    // validates everything.
    void finalize();

    std::string resolved_text() const;  // sorted key=value echo
};

RunConfig load_run_config(const std::string& path_or_empty,
                          const std::vector<std::string>& overrides);

void write_text_file(const std::string& path, const std::string& text);
std::string read_text_file(const std::string& path);

GuidanceScales parse_scales(const std::string& text);

}  // namespace nava
