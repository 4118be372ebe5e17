#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "nava/context.hpp"
#include "nava/model.hpp"
#include "nava/task.hpp"
#include "nava/tensor.hpp"

namespace nava {

struct GuidanceScales {
    double text = 0.0;
    double align = 0.0;
    double timbre = 0.0;

    void validate() const;
};

struct SampleRequest {
    std::string prompt;
    std::map<int, Tensor> span_references;  // span index -> reference tokens
    Task task = Task::T2AV;
    std::optional<Tensor> first_frame;      // TI2AV: [tr_video x d_v_in]
    int steps = 50;
    uint64_t seed = 0;
    GuidanceScales scales;
    int duration_units = 4;
    double tr_audio = 8;
    double tr_video = 4;

    void validate(const ModelConfig& cfg) const;
};

// The four denoising passes of one guidance step. Passes whose scale is
// exactly zero are skipped and left as empty handles.
struct GuidancePasses {
    ModelOutput full;    // (c, a, tau)
    ModelOutput text;    // context replaced by the null-context token
    ModelOutput align;   // cross-modal attention dropped
    ModelOutput timbre;  // timbre tokens replaced by null-timbre tokens
};

// v_hat = full + s_text*(full-text) + s_align*(full-align)
//              + s_timbre*(full-timbre), applied per modality.
ModelOutput compose_guidance(const GuidancePasses& passes,
                             const GuidanceScales& scales);

// Runs the required forwards at one (z_t, t) and composes them. The three
// context variants must come from the same full context (see
// make_context_variants).
struct ContextVariants {
    ContextSequence full;
    ContextSequence text_null;
    ContextSequence timbre_null;
};

ContextVariants make_context_variants(const ContextSequence& full,
                                      const ModelParams& params);

ModelOutput guided_velocity(const Tensor& z_audio, const Tensor& z_video,
                            const ContextVariants& ctx, double t,
                            const GuidanceScales& scales,
                            const ModelConfig& cfg, const ModelParams& params,
                            double tr_audio = 8, double tr_video = 4,
                            GuidancePasses* passes_out = nullptr);

struct SampleResult {
    Tensor audio;  // empty for T2V
    Tensor video;  // empty for T2A
    std::vector<double> audio_step_norms;
    std::vector<double> video_step_norms;
};

// Euler integration of the guided velocity field from seeded noise over a
// uniform grid t = 0 .. 1.
SampleResult sample(const SampleRequest& request, const ModelConfig& cfg,
                    const ModelParams& params);

// Builds the full context for a request: parses the prompt, encodes the
// provided references (spans without one get the null-timbre token).
ContextSequence request_context(const SampleRequest& request,
                                const ModelParams& params);

inline constexpr char kSampleMagic[] = "NAVASAMP";

void write_sample_file(const std::string& path, const SampleRequest& request,
                       const SampleResult& result);
struct SampleFile {
    std::string metadata;
    Tensor audio;
    Tensor video;
};
SampleFile read_sample_file(const std::string& path);

}  // namespace nava
