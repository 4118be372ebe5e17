#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "nava/tensor.hpp"

namespace nava {

// Decodes the dominant band per time unit: tokens are averaged within each
// unit and the argmax over the band channels wins (lowest index on ties).
std::vector<int> decode_unit_bands(const Tensor& tokens, int tokens_per_unit,
                                   int band_channels);

// Agreement between the video blob track and the audio band track, mapped
// to [-1, 1]: 2 * (matching units / units) - 1.
double sync_score(const Tensor& video_tokens, const Tensor& audio_tokens,
                  int tr_video, int tr_audio);

// Cosine between the time-mean of the audio's envelope channels and the
// frozen envelope table entry; 0 by convention for a zero vector.
double timbre_similarity(const Tensor& audio_tokens, int speaker_id);

// Cosine restricted to a unit range [unit_begin, unit_end).
double timbre_similarity_units(const Tensor& audio_tokens, int speaker_id,
                               int tr_audio, int unit_begin, int unit_end);

// Nearest-trajectory classification of the decoded band sequence over all
// patterns; ties break toward the lowest pattern id.
int classify_pattern(const Tensor& audio_tokens, int tr_audio);
int pattern_accuracy(const Tensor& audio_tokens, int tr_audio, int pattern_id);

struct ClipScores {
    uint64_t seed = 0;
    int speaker_id = -1;
    int pattern_id = -1;
    double sync = 0.0;
    bool has_timbre = false;
    double timbre = 0.0;
    int pattern_match = 0;
};

struct EvalReport {
    double sync_mean = 0.0;
    double timbre_mean = 0.0;   // over clips with has_timbre
    double pattern_mean = 0.0;
    std::vector<ClipScores> clips;

    void finalize();  // recomputes the means from the breakdown
};

std::string report_to_jsonl(const EvalReport& report);

// Generator self-checks that must pass before model scores mean anything:
// matched clips score high, mismatched pairings score near zero, pattern
// classification is near-perfect on clean clips and at chance on noise.
struct CalibrationResult {
    bool passed = false;
    double matched_sync_min = 0.0;
    double mismatch_abs_mean = 0.0;
    double matched_pattern_acc = 0.0;
    double noise_pattern_acc = 0.0;
    double matched_timbre_min = 0.0;
};

CalibrationResult run_calibration(uint64_t seed);

// Percentile bootstrap confidence interval for the mean of paired deltas.
std::pair<double, double> paired_bootstrap_ci(const std::vector<double>& deltas,
                                              int resamples, uint64_t seed,
                                              double coverage = 0.95);

}  // namespace nava
