#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "nava/context.hpp"
#include "nava/tensor.hpp"

namespace nava {

// Toy-corpus structural constants. The generator encodes events as one of
// 8 frequency bands == 8 blob positions; the envelope subspace occupies the
// audio channels past the bands.
constexpr int kNumSpeakers = 8;
constexpr int kNumPatterns = 16;
constexpr int kNumBands = 8;
constexpr int kAudioDim = 12;    // 8 band channels + 4 envelope channels
constexpr int kVideoDim = 16;    // 8 blob channels + 8 distractor channels
constexpr int kTokensPerUnitAudio = 8;
constexpr int kTokensPerUnitVideo = 4;
constexpr int kReferenceLength = 8;
constexpr double kTokenNoiseSigma = 0.05;
constexpr double kTokenClamp = 3.0;

struct ClipSpec {
    uint64_t seed = 0;
    int speaker_id = 0;
    int pattern_id = 0;
    int duration_units = 4;
    bool has_speech = false;

    bool operator==(const ClipSpec&) const = default;
};

// Ground truth carried with every generated clip. Matched clips have
// blob_positions == active_bands at every time unit; unit_speakers tracks
// the active speaker per unit (two-turn clips switch at the midpoint).
struct CorrespondenceTrace {
    std::vector<int> blob_positions;
    std::vector<int> active_bands;
    std::vector<int> unit_speakers;
    Tensor speaker_envelope;  // [kAudioDim], primary speaker
};

struct LatentClip {
    Tensor video_tokens;  // [T_v x kVideoDim]
    Tensor audio_tokens;  // [T_a x kAudioDim]
    int tr_video = kTokensPerUnitVideo;
    int tr_audio = kTokensPerUnitAudio;
    CorrespondenceTrace truth;

    int duration_units() const {
        return static_cast<int>(video_tokens.dim(0)) / tr_video;
    }
};

// Frozen speaker envelope table: unit vectors in the envelope subspace
// (band channels zero), regenerated deterministically until all pairwise
// cosines are below 0.5.
const std::vector<Tensor>& speaker_envelopes();

// Band trajectory of a pattern. Even units follow a carrier shared by all
// patterns; odd units identify the pattern. The prompt names only the
// pattern's offset, so text narrows a clip to two candidate trajectories
// and cross-modal agreement has to settle the rest.
int pattern_band(int pattern_id, int unit);
int pattern_offset(int pattern_id);  // what the prompt names
int turn_count(const ClipSpec& spec);
int second_speaker(const ClipSpec& spec);
int turn_boundary_unit(int duration_units);  // first unit of the second turn

std::pair<LatentClip, PromptRecord> generate_clip(const ClipSpec& spec);

Tensor generate_reference_utterance(int speaker_id, uint64_t seed);

inline constexpr char kDatasetMagic[] = "NAVATOY1";

struct DatasetEntry {
    ClipSpec spec;
    LatentClip clip;
    PromptRecord prompt;
};

void write_dataset(const std::vector<DatasetEntry>& entries,
                   const std::string& path);
std::vector<DatasetEntry> read_dataset(const std::string& path);

// Deterministic spec family used for train/val/eval splits; the seed fully
// determines speaker, pattern, duration and speech-ness.
ClipSpec spec_from_seed(uint64_t seed, double speech_frac, int dur_min,
                        int dur_max);

}  // namespace nava
