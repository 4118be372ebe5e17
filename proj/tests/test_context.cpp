#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "nava/context.hpp"
#include "nava/model.hpp"
#include "oracles.hpp"

using namespace nava;
using nava::test::bitwise_equal;

namespace {

ModelConfig tiny_config() {
    ModelConfig cfg;
    cfg.n_hal = 1;
    cfg.n_ufl = 1;
    cfg.d_model = 16;
    cfg.n_heads = 2;
    cfg.d_c = 8;
    cfg.d_ff = 32;
    cfg.d_etim = 8;
    return cfg;
}

std::vector<Role> roles_of(const ContextSequence& seq) { return seq.roles; }

}  // namespace

TEST_CASE("parse_prompt extracts spans and binds directives") {
    PromptRecord none = parse_prompt("pattern three rises");
    CHECK(none.spans.empty());
    CHECK(none.text == "pattern three rises");

    PromptRecord one = parse_prompt("a speaker says <S>pattern three<E>");
    REQUIRE(one.spans.size() == 1);
    CHECK(one.spans[0].text == "pattern three");
    CHECK_FALSE(one.spans[0].speaker.has_value());

    PromptRecord two = parse_prompt("<S>a<E> then <S>b<E>");
    REQUIRE(two.spans.size() == 2);
    CHECK(two.spans[0].text == "a");
    CHECK(two.spans[1].text == "b");
    CHECK(two.spans[0].begin < two.spans[1].begin);

    PromptRecord bound =
        parse_prompt("speaker:3 says <S>pattern one<E> then speaker:5 says "
                     "<S>pattern two<E>");
    REQUIRE(bound.spans.size() == 2);
    CHECK(bound.spans[0].speaker == 3);
    CHECK(bound.spans[1].speaker == 5);
}

TEST_CASE("parse_prompt rejects malformed span structure") {
    CHECK_THROWS_AS(parse_prompt("<S>unterminated"), ConfigError);
    CHECK_THROWS_AS(parse_prompt("stray end<E>"), ConfigError);
    CHECK_THROWS_AS(parse_prompt("<S>outer <S>inner<E> tail<E>"), ConfigError);
}

TEST_CASE("encode_text round-trips every vocabulary word") {
    CHECK(encode_text(parse_prompt("")).empty());

    for (const std::string& w : vocabulary()) {
        if (w == "<S>" || w == "<E>") continue;
        const PromptRecord rec = parse_prompt(w);
        const std::vector<int> ids = encode_text(rec);
        REQUIRE(ids.size() == 1);
        CHECK(decode_text(ids) == w);
    }
    CHECK(vocabulary().size() == kVocabSize);

    const PromptRecord rec = parse_prompt("pattern three plays");
    CHECK(encode_text(rec) == encode_text(rec));

    CHECK_THROWS_WITH_AS(encode_text(parse_prompt("pattern xylophone")),
                         doctest::Contains("xylophone"), ConfigError);
}

TEST_CASE("directives are control syntax, not context tokens") {
    const PromptRecord rec = parse_prompt("speaker:3 says <S>pattern one<E>");
    const std::vector<int> ids = encode_text(rec);
    // says, <S>, pattern, one, <E>
    CHECK(ids.size() == 5);
    CHECK(ids[0] == word_id("says"));
    CHECK(ids[1] == kSpanStartId);
    CHECK(ids[4] == kSpanEndId);
}

TEST_CASE("encode_timbre pools over time before projecting") {
    ModelConfig cfg = tiny_config();
    ModelParams params = init_params(cfg, 1);

    // Constant rows: pooling returns the row itself, so the embedding equals
    // the single-row embedding.
    Tensor constant({4, 12});
    for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 12; ++j)
            constant.data()[i * 12 + j] = 0.1 * (j + 1);
    Tensor row({1, 12});
    for (int j = 0; j < 12; ++j) row.data()[j] = 0.1 * (j + 1);
    CHECK(bitwise_equal(encode_timbre(constant, params).vector,
                        encode_timbre(row, params).vector));

    // Mean-pool is order-invariant.
    Rng rng(5);
    Tensor ref = Tensor::randn({6, 12}, rng);
    Tensor shuffled({6, 12});
    const int perm[6] = {3, 1, 5, 0, 4, 2};
    for (int i = 0; i < 6; ++i)
        for (int j = 0; j < 12; ++j)
            shuffled.data()[i * 12 + j] = ref.at(perm[i], j);
    const Tensor a = encode_timbre(ref, params).vector;
    const Tensor b = encode_timbre(shuffled, params).vector;
    for (int j = 0; j < a.numel(); ++j)
        CHECK(a.at(j) == doctest::Approx(b.at(j)).epsilon(1e-12));
}

TEST_CASE("augment_context emits the span structure in order") {
    ModelConfig cfg = tiny_config();
    ModelParams params = init_params(cfg, 2);

    const PromptRecord plain = parse_prompt("pattern three plays");
    ContextSequence seq = augment_context(plain, {}, params);
    CHECK(seq.length() == 3);
    for (Role r : roles_of(seq)) CHECK(r == Role::Text);

    const PromptRecord spanned =
        parse_prompt("speaker:1 says <S>pattern three<E>");
    Rng rng(7);
    std::map<int, TimbreEmbedding> tm;
    tm[0] = TimbreEmbedding{Tensor::randn({1, cfg.d_c}, rng)};
    ContextSequence s2 = augment_context(spanned, tm, params);
    const std::vector<Role> expected = {Role::Text, Role::SpanStart,
                                        Role::Timbre, Role::Text, Role::Text,
                                        Role::SpanEnd};
    CHECK(roles_of(s2) == expected);

    // Missing map entries fall back to the null-timbre token.
    ContextSequence s3 = augment_context(spanned, {}, params);
    CHECK(s3.roles[2] == Role::NullTimbre);
}

TEST_CASE("swapping the timbre map swaps exactly the timbre rows") {
    ModelConfig cfg = tiny_config();
    ModelParams params = init_params(cfg, 3);
    const PromptRecord rec =
        parse_prompt("speaker:0 says <S>pattern one<E> then speaker:2 says "
                     "<S>pattern one<E>");
    Rng rng(11);
    TimbreEmbedding ta{Tensor::randn({1, cfg.d_c}, rng)};
    TimbreEmbedding tb{Tensor::randn({1, cfg.d_c}, rng)};

    ContextSequence fwd = augment_context(rec, {{0, ta}, {1, tb}}, params);
    ContextSequence swp = augment_context(rec, {{0, tb}, {1, ta}}, params);
    REQUIRE(fwd.roles == swp.roles);

    std::vector<int64_t> timbre_rows;
    for (int64_t i = 0; i < fwd.length(); ++i) {
        if (fwd.roles[static_cast<size_t>(i)] == Role::Timbre)
            timbre_rows.push_back(i);
    }
    REQUIRE(timbre_rows.size() == 2);
    for (int64_t i = 0; i < fwd.length(); ++i) {
        for (int64_t j = 0; j < cfg.d_c; ++j) {
            if (i == timbre_rows[0]) {
                // Row carries its own position embedding, so swapped maps
                // exchange the timbre component only.
                CHECK(fwd.tokens.at(i, j) - ta.vector.at(j) ==
                      doctest::Approx(swp.tokens.at(i, j) - tb.vector.at(j))
                          .epsilon(1e-12));
            } else if (i == timbre_rows[1]) {
                CHECK(fwd.tokens.at(i, j) - tb.vector.at(j) ==
                      doctest::Approx(swp.tokens.at(i, j) - ta.vector.at(j))
                          .epsilon(1e-12));
            } else {
                CHECK(fwd.tokens.at(i, j) == swp.tokens.at(i, j));
            }
        }
    }
}

TEST_CASE("role sequence recovers the span structure (injectivity)") {
    ModelConfig cfg = tiny_config();
    ModelParams params = init_params(cfg, 4);
    for (const char* prompt :
         {"pattern one plays", "says <S>pattern one<E>",
          "<S>a<E> then <S>pattern three fast<E>",
          "speaker:1 says <S>one<E> speaker:2 says <S>two<E>"}) {
        const PromptRecord rec = parse_prompt(prompt);
        ContextSequence seq = augment_context(rec, {}, params);
        // Recover span count and span text lengths from roles alone.
        std::vector<int> lengths;
        int current = -1;
        for (size_t i = 0; i < seq.roles.size(); ++i) {
            if (seq.roles[i] == Role::SpanStart) current = 0;
            else if (seq.roles[i] == Role::SpanEnd) {
                lengths.push_back(current);
                current = -1;
            } else if (current >= 0 && seq.roles[i] == Role::Text)
                ++current;
        }
        REQUIRE(lengths.size() == rec.spans.size());
        for (size_t s = 0; s < rec.spans.size(); ++s) {
            const auto words = encode_text(parse_prompt(rec.spans[s].text));
            CHECK(lengths[s] == static_cast<int>(words.size()));
        }
    }
}

TEST_CASE("drop_conditions endpoints") {
    ModelConfig cfg = tiny_config();
    ModelParams params = init_params(cfg, 5);
    const PromptRecord rec =
        parse_prompt("speaker:0 says <S>pattern one<E> then speaker:1 says "
                     "<S>pattern two<E>");
    Rng r1(1);
    std::map<int, TimbreEmbedding> tm;
    tm[0] = TimbreEmbedding{Tensor::randn({1, cfg.d_c}, r1)};
    tm[1] = TimbreEmbedding{Tensor::randn({1, cfg.d_c}, r1)};
    const ContextSequence seq = augment_context(rec, tm, params);

    Rng rng(2);
    ContextSequence keep = drop_conditions(seq, 0.0, false, rng, params);
    CHECK(bitwise_equal(keep.tokens, seq.tokens));
    CHECK(keep.roles == seq.roles);

    ContextSequence all = drop_conditions(seq, 1.0, false, rng, params);
    CHECK(all.length() == seq.length());
    for (int64_t i = 0; i < all.length(); ++i) {
        const Role before = seq.roles[static_cast<size_t>(i)];
        const Role after = all.roles[static_cast<size_t>(i)];
        if (before == Role::Timbre) CHECK(after == Role::NullTimbre);
        else CHECK(after == before);
    }

    ContextSequence nul = drop_conditions(seq, 0.3, true, rng, params);
    CHECK(nul.length() == 1);
    CHECK(nul.roles[0] == Role::NullText);

    // Determinism under a fixed seed.
    Rng ra(33), rb(33);
    ContextSequence da = drop_conditions(seq, 0.5, false, ra, params);
    ContextSequence db = drop_conditions(seq, 0.5, false, rb, params);
    CHECK(da.roles == db.roles);
    CHECK(bitwise_equal(da.tokens, db.tokens));
}

TEST_CASE("null context is a single learned token") {
    ModelConfig cfg = tiny_config();
    ModelParams params = init_params(cfg, 6);
    ContextSequence nul = null_text_context(params);
    CHECK(nul.length() == 1);
    CHECK(nul.roles[0] == Role::NullText);
    CHECK(bitwise_equal(nul.tokens, params.at("null_ctx")));
}
