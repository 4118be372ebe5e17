#include "nava/context.hpp"

#include <algorithm>
#include <map>
#include <sstream>

#include "nava/errors.hpp"
#include "nava/model.hpp"

namespace nava {

namespace {

const char* kMarkerStart = "<S>";
const char* kMarkerEnd = "<E>";

std::vector<std::string> make_vocabulary() {
    std::vector<std::string> v = {
        "<S>",      "<E>",       "zero",    "one",     "two",     "three",
        "four",     "five",      "six",     "seven",   "eight",   "nine",
        "ten",      "eleven",    "twelve",  "thirteen", "fourteen", "fifteen",
        "pattern",  "speaker",   "says",    "then",    "plays",   "band",
        "rises",    "falls",     "holds",   "moves",   "steady",  "slow",
        "fast",     "clip",      "audio",   "video",   "sound",   "voice",
        "tone",     "quiet",     "loud",    "scene",   "shows",   "speaks",
        "silent",   "a",         "the",     "with",    "and",     "of",
        "in",       "part",      "first",   "second",  "turn",    "low",
        "high",     "soft",      "sharp",   "long",    "short",   "early",
        "late",     "begins",    "ends",    "repeats"};
    return v;
}

const std::map<std::string, int>& vocab_index() {
    static const std::map<std::string, int> idx = [] {
        std::map<std::string, int> m;
        const auto& v = vocabulary();
        for (size_t i = 0; i < v.size(); ++i) m[v[i]] = static_cast<int>(i);
        return m;
    }();
    return idx;
}

bool is_directive(const std::string& word, int* speaker_out) {
    if (word.rfind("speaker:", 0) != 0) return false;
    const std::string num = word.substr(8);
    if (num.empty()) throw ConfigError("malformed speaker directive: " + word);
    for (char c : num)
        if (c < '0' || c > '9')
            throw ConfigError("malformed speaker directive: " + word);
    if (speaker_out) *speaker_out = std::stoi(num);
    return true;
}

std::vector<std::string> split_words(const std::string& text) {
    std::vector<std::string> words;
    std::istringstream is(text);
    std::string w;
    while (is >> w) words.push_back(w);
    return words;
}

// Marker boundaries are cut before segments reach this point, so plain
// whitespace splitting is enough.
std::vector<std::string> tokenize_segment(const std::string& segment) {
    return split_words(segment);
}

}  // namespace

const std::vector<std::string>& vocabulary() {
    static const std::vector<std::string> v = make_vocabulary();
    return v;
}

int word_id(const std::string& word) {
    const auto& idx = vocab_index();
    auto it = idx.find(word);
    if (it == idx.end())
        throw ConfigError("word not in vocabulary: '" + word + "'");
    return it->second;
}

const std::string& word_of(int id) {
    const auto& v = vocabulary();
    if (id < 0 || id >= static_cast<int>(v.size()))
        throw ConfigError("word id out of range: " + std::to_string(id));
    return v[static_cast<size_t>(id)];
}

const char* role_name(Role r) {
    switch (r) {
        case Role::Text: return "TEXT";
        case Role::SpanStart: return "SPAN_START";
        case Role::Timbre: return "TIMBRE";
        case Role::SpanEnd: return "SPAN_END";
        case Role::NullText: return "NULL_TEXT";
        case Role::NullTimbre: return "NULL_TIMBRE";
    }
    return "?";
}

PromptRecord parse_prompt(const std::string& text) {
    PromptRecord rec;
    rec.text = text;

    // Locate marker pairs at character level.
    size_t pos = 0;
    std::optional<int> pending_speaker;
    size_t segment_begin = 0;
    auto consume_segment_directives = [&](const std::string& segment) {
        for (const std::string& w : tokenize_segment(segment)) {
            int spk = 0;
            if (is_directive(w, &spk)) pending_speaker = spk;
        }
    };
    while (true) {
        const size_t s = text.find(kMarkerStart, pos);
        const size_t e = text.find(kMarkerEnd, pos);
        if (s == std::string::npos && e == std::string::npos) break;
        if (e != std::string::npos && (s == std::string::npos || e < s))
            throw ConfigError("unbalanced span markers: '<E>' before '<S>'");
        const size_t close = text.find(kMarkerEnd, s + 3);
        const size_t nested = text.find(kMarkerStart, s + 3);
        if (close == std::string::npos)
            throw ConfigError("unbalanced span markers: '<S>' without '<E>'");
        if (nested != std::string::npos && nested < close)
            throw ConfigError("nested speech spans are not allowed");

        consume_segment_directives(text.substr(segment_begin, s - segment_begin));
        SpeechSpan span;
        span.begin = s + 3;
        span.end = close;
        span.text = text.substr(span.begin, span.end - span.begin);
        span.speaker = pending_speaker;
        pending_speaker.reset();
        rec.spans.push_back(std::move(span));
        pos = close + 3;
        segment_begin = pos;
    }
    consume_segment_directives(text.substr(segment_begin));
    return rec;
}

namespace {

// Pieces of the encoded prompt in order: words outside spans and the span
// blocks themselves.
struct PromptPiece {
    bool is_span = false;
    int span_index = -1;
    std::vector<int> word_ids;  // segment words, or span-text words
};

std::vector<PromptPiece> prompt_pieces(const PromptRecord& record) {
    std::vector<PromptPiece> pieces;
    size_t cursor = 0;
    auto emit_segment = [&](const std::string& segment) {
        PromptPiece piece;
        for (const std::string& w : tokenize_segment(segment)) {
            if (is_directive(w, nullptr)) continue;
            piece.word_ids.push_back(word_id(w));
        }
        if (!piece.word_ids.empty()) pieces.push_back(std::move(piece));
    };
    for (size_t i = 0; i < record.spans.size(); ++i) {
        const SpeechSpan& span = record.spans[i];
        emit_segment(record.text.substr(cursor, (span.begin - 3) - cursor));
        PromptPiece piece;
        piece.is_span = true;
        piece.span_index = static_cast<int>(i);
        for (const std::string& w : tokenize_segment(span.text))
            piece.word_ids.push_back(word_id(w));
        pieces.push_back(std::move(piece));
        cursor = span.end + 3;
    }
    emit_segment(record.text.substr(cursor));
    return pieces;
}

}  // namespace

std::vector<int> encode_text(const PromptRecord& record) {
    std::vector<int> ids;
    for (const PromptPiece& piece : prompt_pieces(record)) {
        if (piece.is_span) ids.push_back(kSpanStartId);
        ids.insert(ids.end(), piece.word_ids.begin(), piece.word_ids.end());
        if (piece.is_span) ids.push_back(kSpanEndId);
    }
    return ids;
}

std::string decode_text(const std::vector<int>& ids) {
    std::string out;
    for (size_t i = 0; i < ids.size(); ++i) {
        if (i) out += ' ';
        out += word_of(ids[i]);
    }
    return out;
}

int ContextSequence::span_count() const {
    int n = 0;
    for (Role r : roles)
        if (r == Role::SpanStart) ++n;
    return n;
}

TimbreEmbedding encode_timbre(const Tensor& reference,
                              const ModelParams& params) {
    if (!reference.valid() || reference.rank() != 2 || reference.dim(0) < 1)
        throw ShapeError("encode_timbre: reference must be [T x d_audio], T >= 1");
    Tensor pooled = mean_rows(reference);
    Tensor h = gelu(add_rowvec(matmul(pooled, params.at("etim.w1")),
                               params.at("etim.b1")));
    Tensor out = add_rowvec(matmul(h, params.at("etim.w2")),
                            params.at("etim.b2"));
    return TimbreEmbedding{out};
}

namespace {

Tensor ctx_position_row(const ModelParams& params, int64_t index) {
    const Tensor& table = params.at("ctx_pos_emb");
    if (index >= table.dim(0))
        throw ConfigError("context length " + std::to_string(index + 1) +
                          " exceeds max_ctx " + std::to_string(table.dim(0)));
    return embedding(table, {static_cast<int>(index)});
}

Tensor with_position(const Tensor& row, const ModelParams& params,
                     int64_t index) {
    return add(row, ctx_position_row(params, index));
}

}  // namespace

ContextSequence augment_context(
    const PromptRecord& record,
    const std::map<int, TimbreEmbedding>& timbre_by_span,
    const ModelParams& params) {
    for (const auto& [span_idx, emb] : timbre_by_span) {
        if (span_idx < 0 || span_idx >= static_cast<int>(record.spans.size()))
            throw ConfigError("timbre map refers to span " +
                              std::to_string(span_idx) + " but prompt has " +
                              std::to_string(record.spans.size()) + " spans");
        (void)emb;
    }

    ContextSequence seq;
    std::vector<Tensor> rows;
    int64_t index = 0;
    auto push = [&](Tensor row, Role role) {
        rows.push_back(with_position(row, params, index));
        seq.roles.push_back(role);
        ++index;
    };

    for (const PromptPiece& piece : prompt_pieces(record)) {
        if (!piece.is_span) {
            for (int id : piece.word_ids)
                push(embedding(params.at("text_emb"), {id}), Role::Text);
            continue;
        }
        push(params.at("span_start_emb"), Role::SpanStart);
        auto it = timbre_by_span.find(piece.span_index);
        if (it != timbre_by_span.end()) {
            push(it->second.vector, Role::Timbre);
        } else {
            push(params.at("null_timbre"), Role::NullTimbre);
        }
        for (int id : piece.word_ids)
            push(embedding(params.at("text_emb"), {id}), Role::Text);
        push(params.at("span_end_emb"), Role::SpanEnd);
    }

    if (rows.empty()) {
        // A prompt with no content conditions nothing; expose it as the
        // learned null context so cross-attention always has a key.
        return null_text_context(params);
    }
    seq.tokens = concat(rows, 0);
    return seq;
}

ContextSequence drop_conditions(const ContextSequence& seq,
                                double drop_timbre_prob, bool drop_text,
                                Rng& rng, const ModelParams& params) {
    if (drop_timbre_prob < 0.0 || drop_timbre_prob > 1.0)
        throw ConfigError("drop_timbre_prob must be in [0,1]");
    if (drop_text) return null_text_context(params);
    if (drop_timbre_prob == 0.0) return seq;

    std::vector<int64_t> ones(static_cast<size_t>(seq.length()), 1);
    std::vector<Tensor> rows = split(seq.tokens, ones, 0);
    ContextSequence out;
    out.roles = seq.roles;
    for (int64_t i = 0; i < seq.length(); ++i) {
        if (seq.roles[static_cast<size_t>(i)] == Role::Timbre &&
            rng.bernoulli(drop_timbre_prob)) {
            rows[static_cast<size_t>(i)] =
                add(params.at("null_timbre"), ctx_position_row(params, i));
            out.roles[static_cast<size_t>(i)] = Role::NullTimbre;
        }
    }
    out.tokens = concat(rows, 0);
    return out;
}

ContextSequence null_text_context(const ModelParams& params) {
    ContextSequence seq;
    // Identity op rather than a clone so the null token still trains.
    seq.tokens = scale(params.at("null_ctx"), 1.0);
    seq.roles = {Role::NullText};
    return seq;
}

ContextSequence replace_all_timbre(const ContextSequence& seq,
                                   const ModelParams& params) {
    bool any = false;
    for (Role r : seq.roles)
        if (r == Role::Timbre) any = true;
    if (!any) return seq;
    std::vector<int64_t> ones(static_cast<size_t>(seq.length()), 1);
    std::vector<Tensor> rows = split(seq.tokens, ones, 0);
    ContextSequence out;
    out.roles = seq.roles;
    for (int64_t i = 0; i < seq.length(); ++i) {
        if (seq.roles[static_cast<size_t>(i)] == Role::Timbre) {
            rows[static_cast<size_t>(i)] =
                add(params.at("null_timbre"), ctx_position_row(params, i));
            out.roles[static_cast<size_t>(i)] = Role::NullTimbre;
        }
    }
    out.tokens = concat(rows, 0);
    return out;
}

}  // namespace nava
