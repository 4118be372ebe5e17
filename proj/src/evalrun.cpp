#include "nava/evalrun.hpp"

#include "nava/context.hpp"
#include "nava/data.hpp"
#include "nava/rng.hpp"

namespace nava {

EvalReport evaluate_model(const ModelConfig& cfg, const ModelParams& params,
                          const EvalOptions& opts) {
    EvalReport report;
    for (int i = 0; i < opts.n_clips; ++i) {
        const ClipSpec spec =
            spec_from_seed(opts.eval_seed_start + static_cast<uint64_t>(i),
                           opts.speech_frac, opts.dur_min, opts.dur_max);
        auto [truth_clip, prompt] = generate_clip(spec);

        SampleRequest req;
        req.prompt = prompt.text;
        req.task = Task::T2AV;
        req.steps = opts.steps;
        req.seed = derive_seed(spec.seed, 0x6576616cu);
        req.scales = opts.scales;
        req.duration_units = spec.duration_units;
        for (size_t si = 0; si < prompt.spans.size(); ++si) {
            if (!prompt.spans[si].speaker) continue;
            req.span_references[static_cast<int>(si)] =
                generate_reference_utterance(
                    *prompt.spans[si].speaker,
                    derive_seed(spec.seed, 0x72656600u + si));
        }
        const SampleResult out = sample(req, cfg, params);

        ClipScores scores;
        scores.seed = spec.seed;
        scores.speaker_id = spec.speaker_id;
        scores.pattern_id = spec.pattern_id;
        scores.sync = sync_score(out.video, out.audio, truth_clip.tr_video,
                                 truth_clip.tr_audio);
        scores.pattern_match =
            pattern_accuracy(out.audio, truth_clip.tr_audio, spec.pattern_id);
        if (spec.has_speech && turn_count(spec) == 1) {
            scores.has_timbre = true;
            scores.timbre = timbre_similarity(out.audio, spec.speaker_id);
        }
        report.clips.push_back(scores);
    }
    report.finalize();
    return report;
}

BindingResult evaluate_binding(const ModelConfig& cfg,
                               const ModelParams& params, int n_samples,
                               int steps, const GuidanceScales& scales,
                               uint64_t seed_start) {
    BindingResult result;
    for (int i = 0; i < n_samples; ++i) {
        const uint64_t seed =
            derive_seed(seed_start, 0x62696e64u + static_cast<uint64_t>(i));
        Rng rng(seed);
        const int speaker_a = static_cast<int>(rng.uniform_int(kNumSpeakers));
        int speaker_b = static_cast<int>(rng.uniform_int(kNumSpeakers - 1));
        if (speaker_b >= speaker_a) ++speaker_b;
        const int pattern = static_cast<int>(rng.uniform_int(kNumPatterns));
        const int duration = 4 + 2 * static_cast<int>(rng.uniform_int(3));

        const std::string pat_word = word_of(2 + pattern_offset(pattern));
        SampleRequest req;
        req.prompt = "speaker:" + std::to_string(speaker_a) +
                     " says <S>pattern " + pat_word + "<E> then speaker:" +
                     std::to_string(speaker_b) + " says <S>pattern " +
                     pat_word + "<E>";
        req.task = Task::T2AV;
        req.steps = steps;
        req.seed = derive_seed(seed, 0x73616d32u);
        req.scales = scales;
        req.duration_units = duration;
        req.span_references[0] = generate_reference_utterance(
            speaker_a, derive_seed(seed, 0x72656631u));
        req.span_references[1] = generate_reference_utterance(
            speaker_b, derive_seed(seed, 0x72656632u));

        const SampleResult out = sample(req, cfg, params);
        const int boundary = turn_boundary_unit(duration);
        const int tr_a = kTokensPerUnitAudio;
        const double first_a = timbre_similarity_units(out.audio, speaker_a,
                                                       tr_a, 0, boundary);
        const double first_b = timbre_similarity_units(out.audio, speaker_b,
                                                       tr_a, 0, boundary);
        const double second_a = timbre_similarity_units(
            out.audio, speaker_a, tr_a, boundary, duration);
        const double second_b = timbre_similarity_units(
            out.audio, speaker_b, tr_a, boundary, duration);
        result.samples += 1;
        if (first_a > first_b && second_b > second_a) result.successes += 1;
    }
    result.success_rate = result.samples
                              ? static_cast<double>(result.successes) /
                                    static_cast<double>(result.samples)
                              : 0.0;
    return result;
}

}  // namespace nava
