#include "nava/sampler.hpp"

#include <cmath>
#include <cstring>
#include <sstream>

#include "nava/data.hpp"
#include "nava/io.hpp"
#include "nava/rng.hpp"

namespace nava {

void GuidanceScales::validate() const {
    for (double s : {text, align, timbre}) {
        if (!(s >= 0.0) || !std::isfinite(s))
            throw ConfigError("guidance scales must be finite and >= 0");
    }
}

void SampleRequest::validate(const ModelConfig& cfg) const {
    scales.validate();
    if (steps < 1) throw ConfigError("sampling steps must be >= 1");
    if (duration_units < 1) throw ConfigError("duration_units must be >= 1");
    if (tr_audio <= 0 || tr_video <= 0)
        throw ConfigError("token rates must be positive");
    if (task == Task::TI2AV) {
        if (!first_frame || !first_frame->valid())
            throw ConfigError("TI2AV requests need a first-frame tensor");
        if (first_frame->rank() != 2 ||
            first_frame->dim(0) != static_cast<int64_t>(tr_video) ||
            first_frame->dim(1) != cfg.d_v_in)
            throw ShapeError("first frame must be [tr_video x d_v_in]");
    } else if (first_frame) {
        throw ConfigError("first_frame is only valid for the ti2av task");
    }
}

ModelOutput compose_guidance(const GuidancePasses& passes,
                             const GuidanceScales& scales) {
    auto compose_one = [&](const Tensor& full, const Tensor& text,
                           const Tensor& align, const Tensor& timbre) {
        if (!full.valid()) return Tensor();
        Tensor acc = full;
        auto apply = [&](double s, const Tensor& pass) {
            if (s == 0.0) return;
            if (!pass.valid())
                throw NumericError(
                    "compose_guidance: missing pass for a nonzero scale");
            acc = add(acc, scale(sub(full, pass), s));
        };
        apply(scales.text, text);
        apply(scales.align, align);
        apply(scales.timbre, timbre);
        return acc;
    };
    ModelOutput out;
    out.v_audio = compose_one(passes.full.v_audio, passes.text.v_audio,
                              passes.align.v_audio, passes.timbre.v_audio);
    out.v_video = compose_one(passes.full.v_video, passes.text.v_video,
                              passes.align.v_video, passes.timbre.v_video);
    return out;
}

ContextVariants make_context_variants(const ContextSequence& full,
                                      const ModelParams& params) {
    ContextVariants v;
    v.full = full;
    v.text_null = null_text_context(params);
    v.timbre_null = replace_all_timbre(full, params);
    return v;
}

ModelOutput guided_velocity(const Tensor& z_audio, const Tensor& z_video,
                            const ContextVariants& ctx, double t,
                            const GuidanceScales& scales,
                            const ModelConfig& cfg, const ModelParams& params,
                            double tr_audio, double tr_video,
                            GuidancePasses* passes_out) {
    scales.validate();
    GuidancePasses passes;
    auto run = [&](const ContextSequence& c, bool drop_cross,
                   const char* pass_name) {
        try {
            return model_forward(z_audio, z_video, c, t, drop_cross, cfg,
                                 params, tr_audio, tr_video);
        } catch (const NumericError& e) {
            throw NumericError(std::string("guidance pass '") + pass_name +
                               "' failed: " + e.what());
        }
    };
    passes.full = run(ctx.full, false, "full");
    if (scales.text != 0.0) passes.text = run(ctx.text_null, false, "text-null");
    if (scales.align != 0.0) passes.align = run(ctx.full, true, "align-null");
    if (scales.timbre != 0.0)
        passes.timbre = run(ctx.timbre_null, false, "timbre-null");
    ModelOutput out = compose_guidance(passes, scales);
    if (passes_out) *passes_out = passes;
    return out;
}

ContextSequence request_context(const SampleRequest& request,
                                const ModelParams& params) {
    PromptRecord record = parse_prompt(request.prompt);
    std::map<int, TimbreEmbedding> timbre_map;
    for (const auto& [span_idx, ref] : request.span_references) {
        if (span_idx < 0 || span_idx >= static_cast<int>(record.spans.size()))
            throw ConfigError("reference provided for span " +
                              std::to_string(span_idx) + " but prompt has " +
                              std::to_string(record.spans.size()) + " spans");
        timbre_map[span_idx] = encode_timbre(ref, params);
    }
    return augment_context(record, timbre_map, params);
}

namespace {

double l2_norm(const Tensor& t) {
    double acc = 0.0;
    for (double v : t.values()) acc += v * v;
    return std::sqrt(acc);
}

}  // namespace

SampleResult sample(const SampleRequest& request, const ModelConfig& cfg,
                    const ModelParams& params) {
    request.validate(cfg);
    const bool want_audio = task_has_audio(request.task);
    const bool want_video = task_has_video(request.task);
    const int64_t t_a =
        want_audio ? static_cast<int64_t>(request.duration_units *
                                          request.tr_audio)
                   : 0;
    const int64_t t_v =
        want_video ? static_cast<int64_t>(request.duration_units *
                                          request.tr_video)
                   : 0;

    Rng rng(derive_seed(request.seed, 0x73616d70u));
    Tensor z_a, z_v;
    if (want_audio) {
        z_a = Tensor({t_a, cfg.d_a_in});
        for (double& v : z_a.values()) v = rng.normal();
    }
    if (want_video) {
        z_v = Tensor({t_v, cfg.d_v_in});
        for (double& v : z_v.values()) v = rng.normal();
    }

    auto impose_clean = [&]() {
        if (request.task != Task::TI2AV) return;
        const int64_t rows = static_cast<int64_t>(request.tr_video);
        std::memcpy(z_v.data(), request.first_frame->data(),
                    static_cast<size_t>(rows * cfg.d_v_in) * sizeof(double));
    };
    impose_clean();

    ContextVariants ctx =
        make_context_variants(request_context(request, params), params);

    SampleResult result;
    const double dt = 1.0 / static_cast<double>(request.steps);
    for (int k = 0; k < request.steps; ++k) {
        const double t = static_cast<double>(k) * dt;
        ModelOutput v;
        try {
            v = guided_velocity(z_a, z_v, ctx, t, request.scales, cfg, params,
                                request.tr_audio, request.tr_video);
        } catch (const NumericError& e) {
            throw NumericError("sampling aborted at step " + std::to_string(k) +
                               ": " + e.what());
        }
        if (want_audio) {
            result.audio_step_norms.push_back(l2_norm(v.v_audio));
            double* pz = z_a.data();
            const double* pv = v.v_audio.data();
            for (int64_t i = 0; i < z_a.numel(); ++i) pz[i] += dt * pv[i];
        }
        if (want_video) {
            result.video_step_norms.push_back(l2_norm(v.v_video));
            double* pz = z_v.data();
            const double* pv = v.v_video.data();
            for (int64_t i = 0; i < z_v.numel(); ++i) pz[i] += dt * pv[i];
        }
        impose_clean();
        for (const Tensor* zt : {&z_a, &z_v}) {
            if (!zt->valid()) continue;
            for (double v2 : zt->values()) {
                if (!std::isfinite(v2))
                    throw NumericError("non-finite latent state at step " +
                                       std::to_string(k));
            }
        }
    }
    result.audio = z_a;
    result.video = z_v;
    return result;
}

namespace {

std::string request_metadata(const SampleRequest& r,
                             const SampleResult& result) {
    std::ostringstream os;
    os.precision(17);
    os << "prompt=" << r.prompt << "\ntask=" << task_name(r.task)
       << "\nsteps=" << r.steps << "\nseed=" << r.seed
       << "\nduration_units=" << r.duration_units << "\ntr_audio="
       << r.tr_audio << "\ntr_video=" << r.tr_video << "\nscales="
       << r.scales.text << ',' << r.scales.align << ',' << r.scales.timbre
       << "\n";
    auto norms = [&](const char* key, const std::vector<double>& v) {
        os << key << '=';
        for (size_t i = 0; i < v.size(); ++i) {
            if (i) os << ',';
            os << v[i];
        }
        os << "\n";
    };
    norms("audio_step_norms", result.audio_step_norms);
    norms("video_step_norms", result.video_step_norms);
    return os.str();
}

}  // namespace

void write_sample_file(const std::string& path, const SampleRequest& request,
                       const SampleResult& result) {
    TensorContainer c;
    c.version = 1;
    c.config_text = request_metadata(request, result);
    if (result.audio.valid()) c.tensors.emplace("audio", result.audio);
    if (result.video.valid()) c.tensors.emplace("video", result.video);
    write_tensor_container(path, kSampleMagic, c);
}

SampleFile read_sample_file(const std::string& path) {
    TensorContainer c = read_tensor_container(path, kSampleMagic, 1);
    SampleFile f;
    f.metadata = c.config_text;
    auto it = c.tensors.find("audio");
    if (it != c.tensors.end()) f.audio = it->second;
    it = c.tensors.find("video");
    if (it != c.tensors.end()) f.video = it->second;
    return f;
}

}  // namespace nava
