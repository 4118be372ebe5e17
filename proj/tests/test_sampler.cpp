#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "nava/data.hpp"
#include "nava/sampler.hpp"
#include "nava/train.hpp"
#include "oracles.hpp"

using namespace nava;
using nava::test::bitwise_equal;
using nava::test::max_abs_diff;

namespace {

ModelConfig tiny_config() {
    ModelConfig cfg;
    cfg.n_hal = 1;
    cfg.n_ufl = 1;
    cfg.d_model = 16;
    cfg.n_heads = 2;
    cfg.d_c = 8;
    cfg.d_ff = 24;
    cfg.d_etim = 8;
    return cfg;
}

ModelParams lively_params(const ModelConfig& cfg, uint64_t seed) {
    ModelParams params = init_params(cfg, seed);
    Rng noise(derive_seed(seed, 0xabcdu));
    for (auto& [name, t] : params.tensors)
        if (name.find("mod.") != std::string::npos)
            for (double& v : t.values()) v += 0.05 * noise.normal();
    return params;
}

std::string temp_path(const std::string& name) {
    return (std::filesystem::temp_directory_path() / name).string();
}

}  // namespace

TEST_CASE("zero scales reproduce the conditional forward bitwise") {
    const ModelConfig cfg = tiny_config();
    const ModelParams params = lively_params(cfg, 3);
    Rng rng(4);
    Tensor z_a = Tensor::randn({8, cfg.d_a_in}, rng);
    Tensor z_v = Tensor::randn({4, cfg.d_v_in}, rng);
    const PromptRecord rec = parse_prompt("speaker:2 says <S>pattern one<E>");
    std::map<int, TimbreEmbedding> tm;
    tm[0] = encode_timbre(generate_reference_utterance(2, 9), params);
    ContextVariants ctx =
        make_context_variants(augment_context(rec, tm, params), params);

    ModelOutput direct =
        model_forward(z_a, z_v, ctx.full, 0.4, false, cfg, params, 8.0, 4.0);
    ModelOutput guided = guided_velocity(z_a, z_v, ctx, 0.4, {}, cfg, params,
                                         8.0, 4.0);
    CHECK(bitwise_equal(direct.v_audio, guided.v_audio));
    CHECK(bitwise_equal(direct.v_video, guided.v_video));
}

TEST_CASE("text-only guidance equals 2*full - text_null") {
    const ModelConfig cfg = tiny_config();
    const ModelParams params = lively_params(cfg, 5);
    Rng rng(6);
    Tensor z_a = Tensor::randn({8, cfg.d_a_in}, rng);
    Tensor z_v = Tensor::randn({4, cfg.d_v_in}, rng);
    ContextVariants ctx = make_context_variants(
        augment_context(parse_prompt("pattern three plays"), {}, params),
        params);

    GuidanceScales scales;
    scales.text = 1.0;
    ModelOutput guided =
        guided_velocity(z_a, z_v, ctx, 0.5, scales, cfg, params, 8.0, 4.0);

    ModelOutput full =
        model_forward(z_a, z_v, ctx.full, 0.5, false, cfg, params, 8.0, 4.0);
    ModelOutput text = model_forward(z_a, z_v, ctx.text_null, 0.5, false, cfg,
                                     params, 8.0, 4.0);
    for (int64_t i = 0; i < guided.v_audio.numel(); ++i) {
        const double expect = 2.0 * full.v_audio.at(i) - text.v_audio.at(i);
        CHECK(std::abs(guided.v_audio.at(i) - expect) < 1e-12);
    }
}

TEST_CASE("random scales match an independent four-pass composition") {
    const ModelConfig cfg = tiny_config();
    for (uint64_t seed = 0; seed < 5; ++seed) {
        const ModelParams params = lively_params(cfg, 20 + seed);
        Rng rng(30 + seed);
        Tensor z_a = Tensor::randn({8, cfg.d_a_in}, rng);
        Tensor z_v = Tensor::randn({4, cfg.d_v_in}, rng);
        const PromptRecord rec =
            parse_prompt("speaker:1 says <S>pattern two<E>");
        std::map<int, TimbreEmbedding> tm;
        tm[0] = encode_timbre(
            generate_reference_utterance(1, 40 + seed), params);
        ContextVariants ctx =
            make_context_variants(augment_context(rec, tm, params), params);

        GuidanceScales scales;
        scales.text = rng.uniform(0.1, 2.0);
        scales.align = rng.uniform(0.1, 2.0);
        scales.timbre = rng.uniform(0.1, 2.0);
        const double t = rng.uniform(0.0, 1.0);

        ModelOutput guided = guided_velocity(z_a, z_v, ctx, t, scales, cfg,
                                             params, 8.0, 4.0);

        // Manual recomputation from four independently run forwards.
        ModelOutput full =
            model_forward(z_a, z_v, ctx.full, t, false, cfg, params, 8.0, 4.0);
        ModelOutput text = model_forward(z_a, z_v, ctx.text_null, t, false,
                                         cfg, params, 8.0, 4.0);
        ModelOutput align =
            model_forward(z_a, z_v, ctx.full, t, true, cfg, params, 8.0, 4.0);
        ModelOutput timbre = model_forward(z_a, z_v, ctx.timbre_null, t, false,
                                           cfg, params, 8.0, 4.0);
        for (int64_t i = 0; i < guided.v_audio.numel(); ++i) {
            const double expect =
                full.v_audio.at(i) +
                scales.text * (full.v_audio.at(i) - text.v_audio.at(i)) +
                scales.align * (full.v_audio.at(i) - align.v_audio.at(i)) +
                scales.timbre * (full.v_audio.at(i) - timbre.v_audio.at(i));
            CHECK(std::abs(guided.v_audio.at(i) - expect) < 1e-12);
        }
        for (int64_t i = 0; i < guided.v_video.numel(); ++i) {
            const double expect =
                full.v_video.at(i) +
                scales.text * (full.v_video.at(i) - text.v_video.at(i)) +
                scales.align * (full.v_video.at(i) - align.v_video.at(i)) +
                scales.timbre * (full.v_video.at(i) - timbre.v_video.at(i));
            CHECK(std::abs(guided.v_video.at(i) - expect) < 1e-12);
        }
    }
}

TEST_CASE("composition coefficients sum to one (probe evaluations)") {
    Rng rng(50);
    for (int probe = 0; probe < 3; ++probe) {
        // All four passes equal a shared constant field: any affine
        // combination whose coefficients sum to 1 must return it unchanged.
        Tensor field = Tensor::randn({6, 4}, rng);
        GuidancePasses passes;
        passes.full.v_audio = field;
        passes.text.v_audio = field;
        passes.align.v_audio = field;
        passes.timbre.v_audio = field;
        GuidanceScales scales;
        scales.text = rng.uniform(0.0, 3.0);
        scales.align = rng.uniform(0.0, 3.0);
        scales.timbre = rng.uniform(0.0, 3.0);
        ModelOutput out = compose_guidance(passes, scales);
        CHECK(max_abs_diff(out.v_audio, field) < 1e-12);
    }
}

TEST_CASE("timbre-null pass is vacuous without speech spans") {
    const ModelConfig cfg = tiny_config();
    const ModelParams params = lively_params(cfg, 60);
    Rng rng(61);
    Tensor z_a = Tensor::randn({8, cfg.d_a_in}, rng);
    ContextVariants ctx = make_context_variants(
        augment_context(parse_prompt("pattern five plays"), {}, params),
        params);
    ModelOutput full = model_forward(z_a, Tensor(), ctx.full, 0.3, false, cfg,
                                     params, 8.0, 4.0);
    ModelOutput timbre = model_forward(z_a, Tensor(), ctx.timbre_null, 0.3,
                                       false, cfg, params, 8.0, 4.0);
    CHECK(bitwise_equal(full.v_audio, timbre.v_audio));
}

TEST_CASE("single Euler step equals the manual update") {
    const ModelConfig cfg = tiny_config();
    const ModelParams params = lively_params(cfg, 70);
    SampleRequest req;
    req.prompt = "pattern one plays";
    req.task = Task::T2AV;
    req.steps = 1;
    req.seed = 99;
    req.duration_units = 2;

    const SampleResult out = sample(req, cfg, params);

    Rng rng(derive_seed(99, 0x73616d70u));
    Tensor z_a({16, cfg.d_a_in});
    for (double& v : z_a.values()) v = rng.normal();
    Tensor z_v({8, cfg.d_v_in});
    for (double& v : z_v.values()) v = rng.normal();
    ContextVariants ctx = make_context_variants(
        augment_context(parse_prompt(req.prompt), {}, params), params);
    ModelOutput v = guided_velocity(z_a, z_v, ctx, 0.0, {}, cfg, params, 8.0,
                                    4.0);
    for (int64_t i = 0; i < z_a.numel(); ++i)
        CHECK(out.audio.at(i) == z_a.at(i) + v.v_audio.at(i));
    for (int64_t i = 0; i < z_v.numel(); ++i)
        CHECK(out.video.at(i) == z_v.at(i) + v.v_video.at(i));
}

TEST_CASE("sampling is deterministic and writes stable files") {
    const ModelConfig cfg = tiny_config();
    const ModelParams params = lively_params(cfg, 80);
    SampleRequest req;
    req.prompt = "speaker:3 says <S>pattern two<E>";
    req.span_references[0] = generate_reference_utterance(3, 7);
    req.task = Task::T2AV;
    req.steps = 5;
    req.seed = 123;
    req.duration_units = 3;
    req.scales.align = 1.0;

    const SampleResult a = sample(req, cfg, params);
    const SampleResult b = sample(req, cfg, params);
    CHECK(bitwise_equal(a.audio, b.audio));
    CHECK(bitwise_equal(a.video, b.video));
    CHECK(a.audio_step_norms == b.audio_step_norms);

    const std::string p1 = temp_path("nava_sample1.nsmp");
    const std::string p2 = temp_path("nava_sample2.nsmp");
    write_sample_file(p1, req, a);
    write_sample_file(p2, req, b);
    CHECK(nava::test::files_identical(p1, p2));
    const SampleFile f = read_sample_file(p1);
    CHECK(bitwise_equal(f.audio, a.audio));
    CHECK(bitwise_equal(f.video, a.video));
    CHECK(f.metadata.find("task=t2av") != std::string::npos);
}

TEST_CASE("t2a requests produce no video block") {
    const ModelConfig cfg = tiny_config();
    const ModelParams params = lively_params(cfg, 90);
    SampleRequest req;
    req.prompt = "pattern one plays";
    req.task = Task::T2A;
    req.steps = 2;
    req.seed = 5;
    req.duration_units = 2;
    const SampleResult out = sample(req, cfg, params);
    CHECK(out.audio.valid());
    CHECK_FALSE(out.video.valid());
    const std::string p = temp_path("nava_sample_t2a.nsmp");
    write_sample_file(p, req, out);
    const SampleFile f = read_sample_file(p);
    CHECK(f.audio.valid());
    CHECK_FALSE(f.video.valid());
}

TEST_CASE("ti2av keeps the clean frame imposed after every step") {
    const ModelConfig cfg = tiny_config();
    const ModelParams params = lively_params(cfg, 95);
    Rng rng(96);
    SampleRequest req;
    req.prompt = "pattern one plays";
    req.task = Task::TI2AV;
    req.steps = 4;
    req.seed = 6;
    req.duration_units = 2;
    req.first_frame = Tensor::randn({4, cfg.d_v_in}, rng);
    const SampleResult out = sample(req, cfg, params);
    for (int64_t i = 0; i < 4; ++i)
        for (int64_t j = 0; j < cfg.d_v_in; ++j)
            CHECK(out.video.at(i, j) == req.first_frame->at(i, j));

    SampleRequest bad = req;
    bad.first_frame.reset();
    CHECK_THROWS_AS(sample(bad, cfg, params), ConfigError);
}

TEST_CASE("euler integration shows first-order convergence") {
    // Analytic field with a known flow: dz/dt = -z, z(1) = z0 * exp(-1).
    // The integrator seam is exercised directly by stepping a scalar state
    // with the same update rule used by sample().
    auto integrate = [](int steps) {
        double z = 1.0;
        const double dt = 1.0 / steps;
        for (int k = 0; k < steps; ++k) z += dt * (-z);
        return z;
    };
    const double exact = std::exp(-1.0);
    const double e1 = std::abs(integrate(20) - exact);
    const double e2 = std::abs(integrate(40) - exact);
    const double e3 = std::abs(integrate(80) - exact);
    CHECK(e1 / e2 > 1.7);
    CHECK(e1 / e2 < 2.3);
    CHECK(e2 / e3 > 1.7);
    CHECK(e2 / e3 < 2.3);
}

TEST_CASE("a model trained on one pair transports eps toward x") {
    // Overfit the tiny model to a single (x, eps) pair, then check that
    // sampling from that eps lands near x and that the residual shrinks
    // when the step count doubles.
    const ModelConfig cfg = tiny_config();
    ModelParams params = init_params(cfg, 100);

    const ClipSpec spec{1234, 2, 3, 2, false};
    auto [clip, prompt] = generate_clip(spec);

    Rng rng(derive_seed(777, 0x73616d70u));
    Tensor eps_a({16, cfg.d_a_in});
    for (double& v : eps_a.values()) v = rng.normal();
    Tensor eps_v({8, cfg.d_v_in});
    for (double& v : eps_v.values()) v = rng.normal();

    // Hand-rolled training loop on the fixed pair, uniform t.
    std::map<std::string, Tensor> m1, m2;
    for (auto& [name, t] : params.tensors) {
        m1.emplace(name, Tensor::zeros(t.shape()));
        m2.emplace(name, Tensor::zeros(t.shape()));
    }
    Rng tr(1);
    const double lr = 3e-3, b1 = 0.9, b2 = 0.999, aeps = 1e-8;
    for (int step = 1; step <= 400; ++step) {
        Tape tape;
        TapeScope scope(tape);
        const double t = tr.uniform();
        auto [z_a, tgt_a] = flow_interpolate(clip.audio_tokens, eps_a, t);
        auto [z_v, tgt_v] = flow_interpolate(clip.video_tokens, eps_v, t);
        ContextSequence ctx =
            augment_context(prompt, {}, params);
        ModelOutput out =
            model_forward(z_a, z_v, ctx, t, false, cfg, params, 8.0, 4.0);
        Tensor da = sub(out.v_audio, tgt_a);
        Tensor dv = sub(out.v_video, tgt_v);
        Tensor loss = scale(add(sum(mul(da, da)), sum(mul(dv, dv))),
                            1.0 / (192 + 128));
        backward(loss, tape);
        for (auto& [name, t2] : params.tensors) {
            if (!t2.has_grad()) continue;
            auto& g = t2.grad();
            auto& m = m1.at(name).values();
            auto& v = m2.at(name).values();
            auto& w = t2.values();
            for (size_t i = 0; i < w.size(); ++i) {
                m[i] = b1 * m[i] + (1 - b1) * g[i];
                v[i] = b2 * v[i] + (1 - b2) * g[i] * g[i];
                const double mh = m[i] / (1 - std::pow(b1, step));
                const double vh = v[i] / (1 - std::pow(b2, step));
                w[i] -= lr * mh / (std::sqrt(vh) + aeps);
            }
            t2.zero_grad();
        }
    }

    SampleRequest req;
    req.prompt = prompt.text;
    req.task = Task::T2AV;
    req.seed = 777;  // same derivation as the eps above
    req.duration_units = 2;

    auto recovery_error = [&](int steps) {
        SampleRequest r = req;
        r.steps = steps;
        const SampleResult out = sample(r, cfg, params);
        double acc = 0.0;
        for (int64_t i = 0; i < out.audio.numel(); ++i)
            acc += std::abs(out.audio.at(i) - clip.audio_tokens.at(i));
        return acc / static_cast<double>(out.audio.numel());
    };
    const double e8 = recovery_error(8);
    const double e16 = recovery_error(16);
    CHECK(e8 < 0.5);
    CHECK(e16 <= e8 * 1.05);
}
