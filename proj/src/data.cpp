#include "nava/data.hpp"

#include <algorithm>
#include <cmath>

#include "nava/errors.hpp"
#include "nava/io.hpp"
#include "nava/rng.hpp"

namespace nava {

namespace {

constexpr uint64_t kEnvelopeBaseSeed = 0x4e415641u;  // table derivation root
constexpr double kBumpAmplitude = 1.0;

double clamp_token(double v) {
    return std::min(kTokenClamp, std::max(-kTokenClamp, v));
}

std::vector<Tensor> make_envelope_table() {
    // Unit vectors in the envelope subspace; retry the whole draw until all
    // pairwise cosines are < 0.5 so speakers stay separable.
    const int env_dim = kAudioDim - kNumBands;
    for (uint64_t attempt = 0;; ++attempt) {
        Rng rng(derive_seed(kEnvelopeBaseSeed, attempt));
        std::vector<std::vector<double>> vecs(kNumSpeakers,
                                              std::vector<double>(env_dim));
        for (auto& v : vecs) {
            double norm2 = 0.0;
            for (double& x : v) {
                x = rng.normal();
                norm2 += x * x;
            }
            const double inv = 1.0 / std::sqrt(norm2);
            for (double& x : v) x *= inv;
        }
        bool ok = true;
        for (int i = 0; i < kNumSpeakers && ok; ++i) {
            for (int j = i + 1; j < kNumSpeakers && ok; ++j) {
                double dot = 0.0;
                for (int d = 0; d < env_dim; ++d) dot += vecs[i][d] * vecs[j][d];
                if (dot >= 0.5) ok = false;
            }
        }
        if (!ok) continue;
        std::vector<Tensor> table;
        table.reserve(kNumSpeakers);
        for (const auto& v : vecs) {
            std::vector<double> full(kAudioDim, 0.0);
            for (int d = 0; d < env_dim; ++d) full[kNumBands + d] = v[d];
            table.push_back(Tensor({kAudioDim}, std::move(full)));
        }
        return table;
    }
}

const std::string& number_word(int n) {
    static const std::vector<std::string> words = {
        "zero", "one", "two",    "three",    "four",     "five",
        "six",  "seven", "eight", "nine",    "ten",      "eleven",
        "twelve", "thirteen", "fourteen", "fifteen"};
    return words[static_cast<size_t>(n)];
}

void validate_spec(const ClipSpec& spec) {
    if (spec.speaker_id < 0 || spec.speaker_id >= kNumSpeakers)
        throw ConfigError("speaker_id " + std::to_string(spec.speaker_id) +
                          " out of range [0, " + std::to_string(kNumSpeakers) +
                          ")");
    if (spec.pattern_id < 0 || spec.pattern_id >= kNumPatterns)
        throw ConfigError("pattern_id " + std::to_string(spec.pattern_id) +
                          " out of range [0, " + std::to_string(kNumPatterns) +
                          ")");
    if (spec.duration_units < 1)
        throw ConfigError("duration_units must be positive");
}

std::string build_prompt_text(const ClipSpec& spec) {
    const std::string pat = "pattern " + number_word(pattern_offset(spec.pattern_id));
    if (!spec.has_speech) return pat + " plays";
    const int turns = turn_count(spec);
    std::string text = "speaker:" + std::to_string(spec.speaker_id) +
                       " says <S>" + pat + "<E>";
    if (turns == 2) {
        text += " then speaker:" + std::to_string(second_speaker(spec)) +
                " says <S>" + pat + "<E>";
    }
    return text;
}

}  // namespace

const std::vector<Tensor>& speaker_envelopes() {
    static const std::vector<Tensor> table = make_envelope_table();
    return table;
}

int pattern_offset(int pattern_id) { return pattern_id % kNumBands; }

int pattern_band(int pattern_id, int unit) {
    if (unit % 2 == 0) return unit % kNumBands;  // shared carrier
    const int m = (unit - 1) / 2;
    const int lo = pattern_id % kNumBands;
    const int hi = pattern_id / kNumBands;  // 0 or 1: slow vs fast walk
    return (lo + m * (1 + 2 * hi)) % kNumBands;
}

int turn_count(const ClipSpec& spec) {
    if (!spec.has_speech) return 0;
    if (spec.duration_units < 2) return 1;
    return (derive_seed(spec.seed, 0x7475726eu) & 1) ? 2 : 1;
}

int second_speaker(const ClipSpec& spec) {
    const int step = 1 + static_cast<int>(derive_seed(spec.seed, 0x73706b32u) %
                                          (kNumSpeakers - 1));
    return (spec.speaker_id + step) % kNumSpeakers;
}

int turn_boundary_unit(int duration_units) { return (duration_units + 1) / 2; }

std::pair<LatentClip, PromptRecord> generate_clip(const ClipSpec& spec) {
    validate_spec(spec);
    const int n = spec.duration_units;
    const int t_v = n * kTokensPerUnitVideo;
    const int t_a = n * kTokensPerUnitAudio;

    LatentClip clip;
    clip.truth.blob_positions.resize(static_cast<size_t>(n));
    clip.truth.active_bands.resize(static_cast<size_t>(n));
    clip.truth.unit_speakers.resize(static_cast<size_t>(n));
    clip.truth.speaker_envelope =
        speaker_envelopes()[static_cast<size_t>(spec.speaker_id)].clone();

    const int turns = turn_count(spec);
    const int boundary = turn_boundary_unit(n);
    for (int u = 0; u < n; ++u) {
        const int band = pattern_band(spec.pattern_id, u);
        clip.truth.blob_positions[static_cast<size_t>(u)] = band;
        clip.truth.active_bands[static_cast<size_t>(u)] = band;
        clip.truth.unit_speakers[static_cast<size_t>(u)] =
            (turns == 2 && u >= boundary) ? second_speaker(spec)
                                          : spec.speaker_id;
    }

    Rng rng(derive_seed(spec.seed, 0x636c6970u));

    clip.video_tokens = Tensor({t_v, kVideoDim});
    double* vp = clip.video_tokens.data();
    for (int i = 0; i < t_v; ++i) {
        const int u = i / kTokensPerUnitVideo;
        const int band = clip.truth.blob_positions[static_cast<size_t>(u)];
        for (int d = 0; d < kVideoDim; ++d) {
            double v = rng.normal() * kTokenNoiseSigma;
            if (d == band) v += kBumpAmplitude;
            vp[i * kVideoDim + d] = clamp_token(v);
        }
    }

    clip.audio_tokens = Tensor({t_a, kAudioDim});
    double* ap = clip.audio_tokens.data();
    for (int i = 0; i < t_a; ++i) {
        const int u = i / kTokensPerUnitAudio;
        const int band = clip.truth.active_bands[static_cast<size_t>(u)];
        const Tensor& env =
            speaker_envelopes()[static_cast<size_t>(
                clip.truth.unit_speakers[static_cast<size_t>(u)])];
        for (int d = 0; d < kAudioDim; ++d) {
            double v = rng.normal() * kTokenNoiseSigma;
            if (d == band) v += kBumpAmplitude;
            if (spec.has_speech) v += env.at(d);
            ap[i * kAudioDim + d] = clamp_token(v);
        }
    }

    PromptRecord record = parse_prompt(build_prompt_text(spec));
    return {std::move(clip), std::move(record)};
}

Tensor generate_reference_utterance(int speaker_id, uint64_t seed) {
    if (speaker_id < 0 || speaker_id >= kNumSpeakers)
        throw ConfigError("speaker_id " + std::to_string(speaker_id) +
                          " out of range [0, " + std::to_string(kNumSpeakers) +
                          ")");
    Rng rng(derive_seed(seed, 0x72656675u));
    const Tensor& env = speaker_envelopes()[static_cast<size_t>(speaker_id)];
    Tensor ref({kReferenceLength, kAudioDim});
    double* p = ref.data();
    for (int i = 0; i < kReferenceLength; ++i)
        for (int d = 0; d < kAudioDim; ++d)
            p[i * kAudioDim + d] =
                clamp_token(env.at(d) + rng.normal() * kTokenNoiseSigma);
    return ref;
}

void write_dataset(const std::vector<DatasetEntry>& entries,
                   const std::string& path) {
    ByteWriter w;
    w.u32(static_cast<uint32_t>(entries.size()));
    for (const DatasetEntry& e : entries) {
        w.u64(e.spec.seed);
        w.u32(static_cast<uint32_t>(e.spec.speaker_id));
        w.u32(static_cast<uint32_t>(e.spec.pattern_id));
        w.u32(static_cast<uint32_t>(e.spec.duration_units));
        w.u8(e.spec.has_speech ? 1 : 0);
        w.tensor(e.clip.video_tokens);
        w.tensor(e.clip.audio_tokens);
        const auto& tr = e.clip.truth;
        w.u32(static_cast<uint32_t>(tr.blob_positions.size()));
        for (int b : tr.blob_positions) w.u32(static_cast<uint32_t>(b));
        for (int b : tr.active_bands) w.u32(static_cast<uint32_t>(b));
        for (int s : tr.unit_speakers) w.u32(static_cast<uint32_t>(s));
        w.tensor(tr.speaker_envelope);
        w.str(e.prompt.text);
    }
    write_file_with_crc(path, kDatasetMagic, w);
}

std::vector<DatasetEntry> read_dataset(const std::string& path) {
    ByteReader r = read_file_with_crc(path, kDatasetMagic);
    const uint32_t count = r.u32();
    std::vector<DatasetEntry> entries;
    entries.reserve(count);
    for (uint32_t i = 0; i < count; ++i) {
        DatasetEntry e;
        e.spec.seed = r.u64();
        e.spec.speaker_id = static_cast<int>(r.u32());
        e.spec.pattern_id = static_cast<int>(r.u32());
        e.spec.duration_units = static_cast<int>(r.u32());
        e.spec.has_speech = r.u8() != 0;
        e.clip.video_tokens = r.tensor();
        e.clip.audio_tokens = r.tensor();
        const uint32_t n = r.u32();
        auto& tr = e.clip.truth;
        tr.blob_positions.resize(n);
        tr.active_bands.resize(n);
        tr.unit_speakers.resize(n);
        for (uint32_t u = 0; u < n; ++u)
            tr.blob_positions[u] = static_cast<int>(r.u32());
        for (uint32_t u = 0; u < n; ++u)
            tr.active_bands[u] = static_cast<int>(r.u32());
        for (uint32_t u = 0; u < n; ++u)
            tr.unit_speakers[u] = static_cast<int>(r.u32());
        tr.speaker_envelope = r.tensor();
        e.prompt = parse_prompt(r.str());
        entries.push_back(std::move(e));
    }
    if (!r.done()) throw IoError("trailing bytes after payload in " + path);
    return entries;
}

ClipSpec spec_from_seed(uint64_t seed, double speech_frac, int dur_min,
                        int dur_max) {
    if (dur_min < 1 || dur_max < dur_min)
        throw ConfigError("bad duration range [" + std::to_string(dur_min) +
                          ", " + std::to_string(dur_max) + "]");
    ClipSpec spec;
    spec.seed = seed;
    spec.speaker_id =
        static_cast<int>(derive_seed(seed, 0x73706561u) % kNumSpeakers);
    spec.pattern_id =
        static_cast<int>(derive_seed(seed, 0x70617474u) % kNumPatterns);
    spec.duration_units =
        dur_min + static_cast<int>(derive_seed(seed, 0x64757261u) %
                                   static_cast<uint64_t>(dur_max - dur_min + 1));
    const double u = static_cast<double>(derive_seed(seed, 0x73706368u) >> 11) *
                     0x1.0p-53;
    spec.has_speech = u < speech_frac;
    return spec;
}

}  // namespace nava
