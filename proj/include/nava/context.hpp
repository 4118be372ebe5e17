#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "nava/rng.hpp"
#include "nava/tensor.hpp"

namespace nava {

struct ModelParams;  // model.hpp

// Closed word-level vocabulary. Ids 0/1 are the span boundary markers.
constexpr int kVocabSize = 64;
constexpr int kSpanStartId = 0;
constexpr int kSpanEndId = 1;

const std::vector<std::string>& vocabulary();
int word_id(const std::string& word);       // throws ConfigError on OOV
const std::string& word_of(int id);

struct SpeechSpan {
    size_t begin = 0;  // char offset of span text (after the "<S>" marker)
    size_t end = 0;    // char offset one past the span text
    std::string text;
    std::optional<int> speaker;  // bound by a preceding "speaker:N" directive
};

// A prompt over the toy grammar. "speaker:N" directives are control syntax:
// they bind the following span to a speaker and are not content words.
struct PromptRecord {
    std::string text;
    std::vector<SpeechSpan> spans;
};

PromptRecord parse_prompt(const std::string& text);

// Word ids for the prompt content, markers included, directives excluded.
std::vector<int> encode_text(const PromptRecord& record);
std::string decode_text(const std::vector<int>& ids);

enum class Role : uint8_t {
    Text,
    SpanStart,
    Timbre,
    SpanEnd,
    NullText,
    NullTimbre,
};

const char* role_name(Role r);

// Condition tokens fed to the model through cross-attention. Each row of
// `tokens` carries a learned absolute-position embedding so that span
// structure survives the order-invariant attention interface.
struct ContextSequence {
    Tensor tokens;  // [L x d_c]
    std::vector<Role> roles;

    int64_t length() const { return static_cast<int64_t>(roles.size()); }
    int span_count() const;
};

struct TimbreEmbedding {
    Tensor vector;  // [1 x d_c]
};

// Mean-pool over time then a 2-layer projection into context space; trains
// jointly with the model.
TimbreEmbedding encode_timbre(const Tensor& reference,
                              const ModelParams& params);

// Emits, per span: SPAN_START, one timbre (or null-timbre) token, the span
// words, SPAN_END; non-span words become TEXT tokens in order. timbre_by_span
// maps span index -> embedding; missing spans get the null-timbre token.
ContextSequence augment_context(
    const PromptRecord& record,
    const std::map<int, TimbreEmbedding>& timbre_by_span,
    const ModelParams& params);

// Independently replaces each TIMBRE token with the learned null-timbre
// token with probability drop_timbre_prob; drop_text replaces the whole
// sequence with the single learned null-context token.
ContextSequence drop_conditions(const ContextSequence& seq,
                                double drop_timbre_prob, bool drop_text,
                                Rng& rng, const ModelParams& params);

// Deterministic variants used by the guidance passes.
ContextSequence null_text_context(const ModelParams& params);
ContextSequence replace_all_timbre(const ContextSequence& seq,
                                   const ModelParams& params);

}  // namespace nava
