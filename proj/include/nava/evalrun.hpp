#pragma once

#include <cstdint>

#include "nava/metrics.hpp"
#include "nava/model.hpp"
#include "nava/sampler.hpp"

namespace nava {

struct EvalOptions {
    int n_clips = 100;
    int steps = 20;
    GuidanceScales scales;
    uint64_t eval_seed_start = 900000;
    double speech_frac = 0.75;
    int dur_min = 4;
    int dur_max = 8;
};

// Generates held-out specs, samples the model on their prompts and scores
// each clip against the spec's known ground truth.
EvalReport evaluate_model(const ModelConfig& cfg, const ModelParams& params,
                          const EvalOptions& opts);

struct BindingResult {
    int samples = 0;
    int successes = 0;
    double success_rate = 0.0;
};

// Two-span prompts assigning distinct speakers; success means the audio's
// first-half envelope is closer to the first speaker and the second half
// closer to the second.
BindingResult evaluate_binding(const ModelConfig& cfg,
                               const ModelParams& params, int n_samples,
                               int steps, const GuidanceScales& scales,
                               uint64_t seed_start);

}  // namespace nava
