#include "nava/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "nava/data.hpp"
#include "nava/errors.hpp"
#include "nava/rng.hpp"

namespace nava {

std::vector<int> decode_unit_bands(const Tensor& tokens, int tokens_per_unit,
                                   int band_channels) {
    if (!tokens.valid() || tokens.rank() != 2)
        throw ShapeError("decode_unit_bands: tokens must be [T x D]");
    if (tokens.dim(0) % tokens_per_unit != 0)
        throw ShapeError("decode_unit_bands: token count " +
                         std::to_string(tokens.dim(0)) +
                         " is not a multiple of the unit size " +
                         std::to_string(tokens_per_unit));
    const int64_t units = tokens.dim(0) / tokens_per_unit;
    const int64_t d = tokens.dim(1);
    std::vector<int> bands(static_cast<size_t>(units));
    for (int64_t u = 0; u < units; ++u) {
        int best = 0;
        double best_val = -1e300;
        for (int c = 0; c < band_channels; ++c) {
            double acc = 0.0;
            for (int k = 0; k < tokens_per_unit; ++k)
                acc += tokens.at(u * tokens_per_unit + k, c);
            if (acc > best_val) {
                best_val = acc;
                best = c;
            }
        }
        bands[static_cast<size_t>(u)] = best;
        (void)d;
    }
    return bands;
}

double sync_score(const Tensor& video_tokens, const Tensor& audio_tokens,
                  int tr_video, int tr_audio) {
    const std::vector<int> blobs =
        decode_unit_bands(video_tokens, tr_video, kNumBands);
    const std::vector<int> bands =
        decode_unit_bands(audio_tokens, tr_audio, kNumBands);
    if (blobs.size() != bands.size())
        throw ShapeError("sync_score: durations differ, " +
                         std::to_string(blobs.size()) + " vs " +
                         std::to_string(bands.size()) + " units");
    int matches = 0;
    for (size_t u = 0; u < blobs.size(); ++u)
        if (blobs[u] == bands[u]) ++matches;
    return 2.0 * static_cast<double>(matches) /
               static_cast<double>(blobs.size()) -
           1.0;
}

namespace {

double envelope_cosine(const double* mean, int64_t n, int speaker_id) {
    const Tensor& env = speaker_envelopes()[static_cast<size_t>(speaker_id)];
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (int64_t d = kNumBands; d < n; ++d) {
        dot += mean[d] * env.at(d);
        na += mean[d] * mean[d];
        nb += env.at(d) * env.at(d);
    }
    if (na <= 0.0 || nb <= 0.0) return 0.0;
    return dot / (std::sqrt(na) * std::sqrt(nb));
}

}  // namespace

double timbre_similarity(const Tensor& audio_tokens, int speaker_id) {
    if (speaker_id < 0 || speaker_id >= kNumSpeakers)
        throw ConfigError("timbre_similarity: speaker " +
                          std::to_string(speaker_id) + " out of range");
    if (!audio_tokens.valid() || audio_tokens.rank() != 2 ||
        audio_tokens.dim(1) != kAudioDim)
        throw ShapeError("timbre_similarity: audio tokens must be [T x " +
                         std::to_string(kAudioDim) + "]");
    const int64_t t = audio_tokens.dim(0);
    std::vector<double> mean(kAudioDim, 0.0);
    for (int64_t i = 0; i < t; ++i)
        for (int64_t d = 0; d < kAudioDim; ++d)
            mean[static_cast<size_t>(d)] += audio_tokens.at(i, d);
    for (double& v : mean) v /= static_cast<double>(t);
    return envelope_cosine(mean.data(), kAudioDim, speaker_id);
}

double timbre_similarity_units(const Tensor& audio_tokens, int speaker_id,
                               int tr_audio, int unit_begin, int unit_end) {
    if (unit_begin < 0 || unit_end <= unit_begin)
        throw ConfigError("timbre_similarity_units: bad unit range");
    const int64_t row_begin = static_cast<int64_t>(unit_begin) * tr_audio;
    const int64_t row_end = static_cast<int64_t>(unit_end) * tr_audio;
    if (row_end > audio_tokens.dim(0))
        throw ShapeError("timbre_similarity_units: range exceeds clip");
    std::vector<double> mean(kAudioDim, 0.0);
    for (int64_t i = row_begin; i < row_end; ++i)
        for (int64_t d = 0; d < kAudioDim; ++d)
            mean[static_cast<size_t>(d)] += audio_tokens.at(i, d);
    for (double& v : mean) v /= static_cast<double>(row_end - row_begin);
    return envelope_cosine(mean.data(), kAudioDim, speaker_id);
}

int classify_pattern(const Tensor& audio_tokens, int tr_audio) {
    const std::vector<int> decoded =
        decode_unit_bands(audio_tokens, tr_audio, kNumBands);
    const int units = static_cast<int>(decoded.size());
    int best = 0;
    int best_dist = units + 1;
    for (int pid = 0; pid < kNumPatterns; ++pid) {
        int dist = 0;
        for (int u = 0; u < units; ++u)
            if (decoded[static_cast<size_t>(u)] != pattern_band(pid, u)) ++dist;
        if (dist < best_dist) {  // ties keep the lowest pattern id
            best_dist = dist;
            best = pid;
        }
    }
    return best;
}

int pattern_accuracy(const Tensor& audio_tokens, int tr_audio,
                     int pattern_id) {
    if (pattern_id < 0 || pattern_id >= kNumPatterns)
        throw ConfigError("pattern_accuracy: pattern " +
                          std::to_string(pattern_id) + " out of range");
    return classify_pattern(audio_tokens, tr_audio) == pattern_id ? 1 : 0;
}

void EvalReport::finalize() {
    sync_mean = 0.0;
    timbre_mean = 0.0;
    pattern_mean = 0.0;
    int timbre_count = 0;
    for (const ClipScores& c : clips) {
        sync_mean += c.sync;
        pattern_mean += c.pattern_match;
        if (c.has_timbre) {
            timbre_mean += c.timbre;
            ++timbre_count;
        }
    }
    if (!clips.empty()) {
        sync_mean /= static_cast<double>(clips.size());
        pattern_mean /= static_cast<double>(clips.size());
    }
    if (timbre_count > 0) timbre_mean /= static_cast<double>(timbre_count);
}

std::string report_to_jsonl(const EvalReport& report) {
    std::ostringstream os;
    os.precision(17);
    for (size_t i = 0; i < report.clips.size(); ++i) {
        const ClipScores& c = report.clips[i];
        os << "{\"clip\":" << i << ",\"seed\":" << c.seed
           << ",\"speaker\":" << c.speaker_id << ",\"pattern\":" << c.pattern_id
           << ",\"sync\":" << c.sync << ",\"pattern_match\":" << c.pattern_match;
        if (c.has_timbre) os << ",\"timbre\":" << c.timbre;
        os << "}\n";
    }
    os << "{\"summary\":true,\"clips\":" << report.clips.size()
       << ",\"sync_mean\":" << report.sync_mean << ",\"timbre_mean\":"
       << report.timbre_mean << ",\"pattern_mean\":" << report.pattern_mean
       << "}\n";
    return os.str();
}

CalibrationResult run_calibration(uint64_t seed) {
    CalibrationResult r;
    constexpr int kClips = 100;
    std::vector<LatentClip> clips;
    std::vector<ClipSpec> specs;
    double matched_min = 1.0;
    double matched_pattern = 0.0;
    double matched_timbre_min = 1.0;
    for (int i = 0; i < kClips; ++i) {
        // Speech clips so the envelope calibration is measurable; force
        // single-turn by retrying the derived spec.
        uint64_t s = derive_seed(seed, 0xca11 + static_cast<uint64_t>(i));
        ClipSpec spec = spec_from_seed(s, 1.0, 4, 8);
        while (turn_count(spec) != 1) {
            s = derive_seed(s, 0x6e657874u);
            spec = spec_from_seed(s, 1.0, 4, 8);
        }
        auto [clip, prompt] = generate_clip(spec);
        matched_min = std::min(
            matched_min, sync_score(clip.video_tokens, clip.audio_tokens,
                                    clip.tr_video, clip.tr_audio));
        matched_pattern += pattern_accuracy(clip.audio_tokens, clip.tr_audio,
                                            spec.pattern_id);
        matched_timbre_min =
            std::min(matched_timbre_min,
                     timbre_similarity(clip.audio_tokens, spec.speaker_id));
        clips.push_back(std::move(clip));
        specs.push_back(spec);
    }
    r.matched_sync_min = matched_min;
    r.matched_pattern_acc = matched_pattern / kClips;
    r.matched_timbre_min = matched_timbre_min;

    // Random mismatched pairings across different patterns.
    Rng rng(derive_seed(seed, 0x6d69736du));
    double abs_sum = 0.0;
    int pairs = 0;
    while (pairs < 100) {
        const int a = static_cast<int>(rng.uniform_int(kClips));
        const int b = static_cast<int>(rng.uniform_int(kClips));
        if (specs[static_cast<size_t>(a)].pattern_id ==
                specs[static_cast<size_t>(b)].pattern_id ||
            specs[static_cast<size_t>(a)].duration_units !=
                specs[static_cast<size_t>(b)].duration_units)
            continue;
        abs_sum += sync_score(clips[static_cast<size_t>(b)].video_tokens,
                              clips[static_cast<size_t>(a)].audio_tokens,
                              clips[static_cast<size_t>(b)].tr_video,
                              clips[static_cast<size_t>(a)].tr_audio);
        ++pairs;
    }
    r.mismatch_abs_mean = std::abs(abs_sum / pairs);

    // Pure-noise tokens against uniformly drawn pattern ids.
    double noise_acc = 0.0;
    constexpr int kNoiseDraws = 400;
    for (int i = 0; i < kNoiseDraws; ++i) {
        const int units = 4 + static_cast<int>(rng.uniform_int(5));
        Tensor tokens({static_cast<int64_t>(units * kTokensPerUnitAudio),
                       kAudioDim});
        for (double& v : tokens.values()) v = rng.normal();
        const int pid = static_cast<int>(rng.uniform_int(kNumPatterns));
        noise_acc += pattern_accuracy(tokens, kTokensPerUnitAudio, pid);
    }
    r.noise_pattern_acc = noise_acc / kNoiseDraws;

    r.passed = r.matched_sync_min > 0.9 && r.mismatch_abs_mean < 0.2 &&
               r.matched_pattern_acc > 0.98 &&
               std::abs(r.noise_pattern_acc - 1.0 / kNumPatterns) < 0.05 &&
               r.matched_timbre_min > 0.8;
    return r;
}

std::pair<double, double> paired_bootstrap_ci(const std::vector<double>& deltas,
                                              int resamples, uint64_t seed,
                                              double coverage) {
    if (deltas.empty())
        throw ConfigError("paired_bootstrap_ci: no deltas given");
    Rng rng(derive_seed(seed, 0x626f6f74u));
    std::vector<double> means;
    means.reserve(static_cast<size_t>(resamples));
    const size_t n = deltas.size();
    for (int r = 0; r < resamples; ++r) {
        double acc = 0.0;
        for (size_t i = 0; i < n; ++i)
            acc += deltas[rng.uniform_int(n)];
        means.push_back(acc / static_cast<double>(n));
    }
    std::sort(means.begin(), means.end());
    const double alpha = (1.0 - coverage) / 2.0;
    const size_t lo_idx = static_cast<size_t>(
        alpha * static_cast<double>(means.size() - 1) + 0.5);
    const size_t hi_idx = static_cast<size_t>(
        (1.0 - alpha) * static_cast<double>(means.size() - 1) + 0.5);
    return {means[lo_idx], means[hi_idx]};
}

}  // namespace nava
