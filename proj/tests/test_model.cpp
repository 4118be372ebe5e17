#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "nava/context.hpp"
#include "nava/model.hpp"
#include "oracles.hpp"

using namespace nava;
using nava::test::bitwise_equal;
using nava::test::finite_difference;
using nava::test::max_rel_error;

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

ContextSequence small_context(const ModelParams& params, uint64_t seed) {
    const PromptRecord rec = parse_prompt("pattern three plays");
    (void)seed;
    return augment_context(rec, {}, params);
}

std::string temp_path(const std::string& name) {
    return (std::filesystem::temp_directory_path() / name).string();
}

}  // namespace

TEST_CASE("build_av_mask counts and block structure") {
    const AvMask open = build_av_mask(2, 3, false);
    CHECK(open.true_count() == 25);

    const AvMask dropped = build_av_mask(2, 3, true);
    CHECK(dropped.true_count() == 2 * 2 + 3 * 3);
    for (int64_t i = 0; i < 5; ++i) {
        for (int64_t j = 0; j < 5; ++j) {
            const bool same_block = (i < 2) == (j < 2);
            CHECK(dropped.at(i, j) == same_block);
            // drop mask equals the block diagonal of the open mask
            CHECK(dropped.at(i, j) == (open.at(i, j) && same_block));
        }
    }
}

TEST_CASE("scaled_positions implements the rate rescaling") {
    auto [audio, video] = scaled_positions(4, 3, 8.0, 4.0);
    CHECK(audio == std::vector<double>{0.0, 0.5, 1.0, 1.5});
    CHECK(video == std::vector<double>{0.0, 1.0, 2.0});

    auto [a2, v2] = scaled_positions(3, 3, 4.0, 4.0);
    CHECK(a2 == std::vector<double>{0.0, 1.0, 2.0});

    CHECK_THROWS_AS(scaled_positions(2, 2, 0.0, 4.0), ConfigError);
    CHECK_THROWS_AS(scaled_positions(2, 2, 8.0, -1.0), ConfigError);
}

TEST_CASE("audio index 2k shares the rotation of video index k") {
    auto [audio, video] = scaled_positions(16, 8, 8.0, 4.0);
    Rng rng(1);
    Tensor x = Tensor::randn({1, 8}, rng);
    for (int k = 0; k < 8; ++k) {
        CHECK(audio[static_cast<size_t>(2 * k)] ==
              video[static_cast<size_t>(k)]);
        Tensor ra = rope_apply(x, {audio[static_cast<size_t>(2 * k)]});
        Tensor rv = rope_apply(x, {video[static_cast<size_t>(k)]});
        CHECK(bitwise_equal(ra, rv));
    }
}

TEST_CASE("zero-gate init makes every block the identity") {
    const ModelConfig cfg = tiny_config();
    const ModelParams params = init_params(cfg, 7);
    Rng rng(2);
    Tensor h_a = Tensor::randn({6, cfg.d_model}, rng);
    Tensor h_v = Tensor::randn({4, cfg.d_model}, rng);
    ContextSequence ctx = small_context(params, 3);
    Tensor t_vec = time_embedding(0.4, cfg, params);
    const AvMask mask = build_av_mask(6, 4, false);
    auto [pos_a, pos_v] = scaled_positions(6, 4, 8.0, 4.0);

    auto [out_a, out_v] =
        hal_block(h_a, h_v, ctx.tokens, t_vec, mask, cfg, params, 0, pos_a,
                  pos_v);
    CHECK(bitwise_equal(out_a, h_a));
    CHECK(bitwise_equal(out_v, h_v));

    Tensor fused = concat({h_a, h_v}, 0);
    std::vector<double> joint = pos_a;
    joint.insert(joint.end(), pos_v.begin(), pos_v.end());
    Tensor out = ufl_block(fused, ctx.tokens, t_vec, mask, cfg, params, 0,
                           joint);
    CHECK(bitwise_equal(out, fused));
}

TEST_CASE("zero-gate init: forward equals head(norm(input projection))") {
    const ModelConfig cfg = tiny_config();
    const ModelParams params = init_params(cfg, 8);
    Rng rng(3);
    Tensor z_a = Tensor::randn({8, cfg.d_a_in}, rng);
    Tensor z_v = Tensor::randn({4, cfg.d_v_in}, rng);
    ContextSequence ctx = small_context(params, 4);

    ModelOutput out =
        model_forward(z_a, z_v, ctx, 0.3, false, cfg, params, 8.0, 4.0);
    REQUIRE(out.v_audio.valid());
    REQUIRE(out.v_video.valid());

    // Manual composition: in-projection, layer norm, head affine.
    Tensor h = add_rowvec(matmul(z_a, params.at("in.audio.w")),
                          params.at("in.audio.b"));
    Tensor n = layer_norm(h);
    Tensor expect = add_rowvec(matmul(n, params.at("head.audio.w")),
                               params.at("head.audio.b"));
    CHECK(bitwise_equal(out.v_audio, expect));
}

TEST_CASE("cross-drop causality is exact on the full forward") {
    const ModelConfig cfg = tiny_config();
    for (uint64_t seed = 0; seed < 20; ++seed) {
        ModelParams params = init_params(cfg, 100 + seed);
        // Break the identity so attention actually mixes tokens.
        Rng noise(200 + seed);
        for (auto& [name, t] : params.tensors) {
            if (name.find("mod.") != std::string::npos)
                for (double& v : t.values()) v += 0.05 * noise.normal();
        }
        Rng rng(300 + seed);
        Tensor z_a = Tensor::randn({8, cfg.d_a_in}, rng);
        Tensor z_v = Tensor::randn({4, cfg.d_v_in}, rng);
        ContextSequence ctx = small_context(params, seed);

        ModelOutput base =
            model_forward(z_a, z_v, ctx, 0.5, true, cfg, params, 8.0, 4.0);
        Tensor z_v2 = Tensor::randn({4, cfg.d_v_in}, rng);
        for (double& v : z_v2.values()) v *= 17.0;
        ModelOutput pert =
            model_forward(z_a, z_v2, ctx, 0.5, true, cfg, params, 8.0, 4.0);
        CHECK(bitwise_equal(base.v_audio, pert.v_audio));
        CHECK_FALSE(bitwise_equal(base.v_video, pert.v_video));

        Tensor z_a2 = Tensor::randn({8, cfg.d_a_in}, rng);
        ModelOutput pert2 =
            model_forward(z_a2, z_v, ctx, 0.5, true, cfg, params, 8.0, 4.0);
        CHECK(bitwise_equal(base.v_video, pert2.v_video));

        // With coupling restored the invariance must disappear.
        ModelOutput open1 =
            model_forward(z_a, z_v, ctx, 0.5, false, cfg, params, 8.0, 4.0);
        ModelOutput open2 =
            model_forward(z_a, z_v2, ctx, 0.5, false, cfg, params, 8.0, 4.0);
        CHECK_FALSE(bitwise_equal(open1.v_audio, open2.v_audio));
    }
}

TEST_CASE("cross-drop causality inside a single hal block") {
    const ModelConfig cfg = tiny_config();
    ModelParams params = init_params(cfg, 11);
    Rng noise(12);
    for (auto& [name, t] : params.tensors)
        if (name.find("mod.") != std::string::npos)
            for (double& v : t.values()) v += 0.05 * noise.normal();
    Rng rng(13);
    Tensor h_a = Tensor::randn({6, cfg.d_model}, rng);
    Tensor h_v = Tensor::randn({4, cfg.d_model}, rng);
    Tensor h_v2 = Tensor::randn({4, cfg.d_model}, rng);
    ContextSequence ctx = small_context(params, 5);
    Tensor t_vec = time_embedding(0.2, cfg, params);
    const AvMask mask = build_av_mask(6, 4, true);
    auto [pos_a, pos_v] = scaled_positions(6, 4, 8.0, 4.0);

    auto [a1, v1] = hal_block(h_a, h_v, ctx.tokens, t_vec, mask, cfg, params,
                              0, pos_a, pos_v);
    auto [a2, v2] = hal_block(h_a, h_v2, ctx.tokens, t_vec, mask, cfg, params,
                              0, pos_a, pos_v);
    CHECK(bitwise_equal(a1, a2));
}

TEST_CASE("context permutation: identical tokens leave output unchanged") {
    const ModelConfig cfg = tiny_config();
    ModelParams params = init_params(cfg, 14);
    Rng rng(15);
    Tensor h_a = Tensor::randn({4, cfg.d_model}, rng);
    Tensor t_vec = time_embedding(0.7, cfg, params);
    const AvMask mask = build_av_mask(4, 0, false);
    auto [pos_a, pos_v] = scaled_positions(4, 0, 8.0, 4.0);

    // Three identical context rows: any permutation is the same tensor.
    Tensor row = Tensor::randn({1, cfg.d_c}, rng);
    Tensor ctx3 = concat({row, row, row}, 0);
    auto [o1, unused1] = hal_block(h_a, Tensor(), ctx3, t_vec, mask, cfg,
                                   params, 0, pos_a, pos_v);
    // Rebuild in "permuted" order (identical values).
    Tensor ctx3b = concat({row, row, row}, 0);
    auto [o2, unused2] = hal_block(h_a, Tensor(), ctx3b, t_vec, mask, cfg,
                                   params, 0, pos_a, pos_v);
    CHECK(bitwise_equal(o1, o2));
}

TEST_CASE("masked padding context tokens do not change the output") {
    const ModelConfig cfg = tiny_config();
    ModelParams params = init_params(cfg, 16);
    Rng noise(17);
    for (auto& [name, t] : params.tensors)
        if (name.find("mod.") != std::string::npos)
            for (double& v : t.values()) v += 0.05 * noise.normal();
    Rng rng(18);
    Tensor z_a = Tensor::randn({8, cfg.d_a_in}, rng);
    Tensor z_v = Tensor::randn({4, cfg.d_v_in}, rng);
    ContextSequence ctx = small_context(params, 6);

    ModelOutput base =
        model_forward(z_a, z_v, ctx, 0.25, false, cfg, params, 8.0, 4.0);

    ContextSequence padded;
    Tensor junk = Tensor::randn({2, cfg.d_c}, rng);
    padded.tokens = concat({ctx.tokens, junk}, 0);
    padded.roles = ctx.roles;
    padded.roles.push_back(Role::NullText);
    padded.roles.push_back(Role::NullText);
    std::vector<bool> key_mask(static_cast<size_t>(padded.length()), true);
    key_mask[static_cast<size_t>(padded.length() - 2)] = false;
    key_mask[static_cast<size_t>(padded.length() - 1)] = false;

    ModelOutput withpad = model_forward(z_a, z_v, padded, 0.25, false, cfg,
                                        params, 8.0, 4.0, &key_mask);
    CHECK(bitwise_equal(base.v_audio, withpad.v_audio));
    CHECK(bitwise_equal(base.v_video, withpad.v_video));
}

TEST_CASE("ufl attention is equivariant to token permutation") {
    const ModelConfig cfg = tiny_config();
    ModelParams params = init_params(cfg, 19);
    Rng noise(20);
    for (auto& [name, t] : params.tensors)
        if (name.find("mod.") != std::string::npos)
            for (double& v : t.values()) v += 0.05 * noise.normal();
    Rng rng(21);
    Tensor h = Tensor::randn({5, cfg.d_model}, rng);
    ContextSequence ctx = small_context(params, 7);
    Tensor t_vec = time_embedding(0.6, cfg, params);
    const AvMask mask = build_av_mask(5, 0, false);
    std::vector<double> pos = {0.0, 0.5, 1.0, 1.5, 2.0};

    Tensor out = ufl_block(h, ctx.tokens, t_vec, mask, cfg, params, 0, pos);

    // Swap tokens 1 and 3 together with their positions.
    auto rows = split(h, {1, 1, 1, 1, 1}, 0);
    Tensor h2 = concat({rows[0], rows[3], rows[2], rows[1], rows[4]}, 0);
    std::vector<double> pos2 = {0.0, 1.5, 1.0, 0.5, 2.0};
    Tensor out2 = ufl_block(h2, ctx.tokens, t_vec, mask, cfg, params, 0, pos2);

    auto o1 = split(out, {1, 1, 1, 1, 1}, 0);
    auto o2 = split(out2, {1, 1, 1, 1, 1}, 0);
    CHECK(nava::test::max_abs_diff(o1[1], o2[3]) < 1e-12);
    CHECK(nava::test::max_abs_diff(o1[3], o2[1]) < 1e-12);
    CHECK(nava::test::max_abs_diff(o1[0], o2[0]) < 1e-12);
}

TEST_CASE("single-modality forward works (T2A path)") {
    const ModelConfig cfg = tiny_config();
    const ModelParams params = init_params(cfg, 22);
    Rng rng(23);
    Tensor z_a = Tensor::randn({8, cfg.d_a_in}, rng);
    ContextSequence ctx = small_context(params, 8);
    ModelOutput out =
        model_forward(z_a, Tensor(), ctx, 0.5, false, cfg, params, 8.0, 4.0);
    CHECK(out.v_audio.valid());
    CHECK_FALSE(out.v_video.valid());
    CHECK(out.v_audio.shape() == Shape{8, cfg.d_a_in});
}

TEST_CASE("fully-unified topology runs and differs from nava") {
    ModelConfig cfg = tiny_config();
    cfg.topology = Topology::FullyUnified;
    const ModelParams params = init_params(cfg, 24);
    Rng rng(25);
    Tensor z_a = Tensor::randn({8, cfg.d_a_in}, rng);
    Tensor z_v = Tensor::randn({4, cfg.d_v_in}, rng);
    ContextSequence ctx = small_context(params, 9);
    ModelOutput out =
        model_forward(z_a, z_v, ctx, 0.5, false, cfg, params, 8.0, 4.0);
    CHECK(out.v_audio.valid());
    CHECK(out.v_video.valid());

    // Unified schema carries context-stream parameters.
    CHECK(params.has("in.ctx.w"));
    CHECK(params.has("hal0.ctxtok.attn.wq"));
}

TEST_CASE("hal blocks hold strictly more parameters than ufl blocks") {
    const ModelConfig cfg = tiny_config();
    const ModelParams params = init_params(cfg, 26);
    const int64_t hal = params.elements_with_prefix("hal0.");
    const int64_t ufl = params.elements_with_prefix("ufl0.");
    CHECK(hal > ufl);
}

TEST_CASE("determinism: identical inputs give bitwise identical outputs") {
    const ModelConfig cfg = tiny_config();
    const ModelParams params = init_params(cfg, 27);
    Rng rng(28);
    Tensor z_a = Tensor::randn({8, cfg.d_a_in}, rng);
    Tensor z_v = Tensor::randn({4, cfg.d_v_in}, rng);
    ContextSequence ctx = small_context(params, 10);
    ModelOutput a =
        model_forward(z_a, z_v, ctx, 0.5, false, cfg, params, 8.0, 4.0);
    ModelOutput b =
        model_forward(z_a, z_v, ctx, 0.5, false, cfg, params, 8.0, 4.0);
    CHECK(bitwise_equal(a.v_audio, b.v_audio));
    CHECK(bitwise_equal(a.v_video, b.v_video));
}

TEST_CASE("full-model parameter gradients match finite differences") {
    ModelConfig cfg = tiny_config();
    const uint64_t seed = 31;
    ModelParams params = init_params(cfg, seed);
    // Perturb modulation weights so every sub-step participates.
    Rng noise(32);
    for (auto& [name, t] : params.tensors)
        if (name.find("mod.") != std::string::npos)
            for (double& v : t.values()) v += 0.05 * noise.normal();

    Rng rng(33);
    Tensor z_a = Tensor::randn({4, cfg.d_a_in}, rng);
    Tensor z_v = Tensor::randn({2, cfg.d_v_in}, rng);
    Tensor w_a = Tensor::randn({4, cfg.d_a_in}, rng);
    Tensor w_v = Tensor::randn({2, cfg.d_v_in}, rng);
    const PromptRecord rec = parse_prompt("speaker:1 says <S>pattern one<E>");
    Tensor ref = Tensor::randn({3, cfg.d_a_in}, rng);

    auto loss_fn = [&]() {
        std::map<int, TimbreEmbedding> tm;
        tm[0] = encode_timbre(ref, params);
        ContextSequence ctx = augment_context(rec, tm, params);
        ModelOutput out =
            model_forward(z_a, z_v, ctx, 0.37, false, cfg, params, 8.0, 4.0);
        return add(sum(mul(out.v_audio, w_a)), sum(mul(out.v_video, w_v)));
    };

    // Check a representative subset of parameters end to end.
    const std::vector<std::string> names = {
        "in.audio.w",         "hal0.audio.attn.wq", "hal0.video.ffn.w1",
        "hal0.ctx.wk",        "hal0.audio.mod.w",   "ufl0.attn.wv",
        "ufl0.xattn.wq",      "ufl0.mod.b",         "head.video.w",
        "time.w1",            "etim.w1",            "text_emb",
        "ctx_pos_emb",        "span_start_emb",
    };
    for (const std::string& name : names) {
        Tensor& p = params.at(name);
        p.zero_grad();
        const std::vector<double> fd = finite_difference(
            [&]() { return loss_fn().item(); }, p, 1e-4);
        Tape tape;
        {
            TapeScope scope(tape);
            backward(loss_fn(), tape);
        }
        REQUIRE(p.has_grad());
        const double err = max_rel_error(p.grad(), fd, 1e-5);
        INFO("parameter ", name, " rel err ", err);
        CHECK(err < 1e-3);
        for (auto& [n2, t2] : params.tensors) t2.zero_grad();
    }

    // The null-timbre token trains through spans without a reference.
    auto null_loss_fn = [&]() {
        ContextSequence ctx = augment_context(rec, {}, params);
        ModelOutput out =
            model_forward(z_a, z_v, ctx, 0.37, false, cfg, params, 8.0, 4.0);
        return add(sum(mul(out.v_audio, w_a)), sum(mul(out.v_video, w_v)));
    };
    Tensor& nt = params.at("null_timbre");
    const std::vector<double> fd = finite_difference(
        [&]() { return null_loss_fn().item(); }, nt, 1e-4);
    Tape tape;
    {
        TapeScope scope(tape);
        backward(null_loss_fn(), tape);
    }
    REQUIRE(nt.has_grad());
    CHECK(max_rel_error(nt.grad(), fd, 1e-5) < 1e-3);
}

TEST_CASE("checkpoints round-trip and verify the schema") {
    const ModelConfig cfg = tiny_config();
    const ModelParams params = init_params(cfg, 41);
    const std::string path = temp_path("nava_test_ckpt.nckpt");
    save_checkpoint(path, cfg, params);
    auto [cfg2, params2] = load_checkpoint(path);
    CHECK(cfg2 == cfg);
    REQUIRE(params2.tensors.size() == params.tensors.size());
    for (const auto& [name, t] : params.tensors)
        CHECK(bitwise_equal(t, params2.at(name)));

    // Same content, same bytes.
    const std::string path2 = temp_path("nava_test_ckpt2.nckpt");
    save_checkpoint(path2, cfg, params);
    CHECK(nava::test::files_identical(path, path2));

    // A checkpoint written under a different schema fails loudly.
    ModelConfig other = cfg;
    other.n_ufl = 2;
    const ModelParams params3 = init_params(other, 42);
    const std::string path3 = temp_path("nava_test_ckpt3.nckpt");
    save_checkpoint(path3, cfg, params3);
    CHECK_THROWS_WITH_AS(load_checkpoint(path3), doctest::Contains("ufl1."),
                         IoError);
}

TEST_CASE("model_forward validates inputs") {
    const ModelConfig cfg = tiny_config();
    const ModelParams params = init_params(cfg, 51);
    Rng rng(52);
    ContextSequence ctx = small_context(params, 11);
    Tensor z_a = Tensor::randn({8, cfg.d_a_in}, rng);
    CHECK_THROWS_AS(model_forward(Tensor(), Tensor(), ctx, 0.5, false, cfg,
                                  params),
                    ShapeError);
    CHECK_THROWS_AS(model_forward(z_a, Tensor(), ctx, 1.5, false, cfg, params),
                    ConfigError);
    Tensor bad = Tensor::randn({8, cfg.d_a_in + 1}, rng);
    CHECK_THROWS_AS(model_forward(bad, Tensor(), ctx, 0.5, false, cfg, params),
                    ShapeError);
}
