#include "nava/model.hpp"

#include <cmath>
#include <set>
#include <sstream>

#include "nava/errors.hpp"
#include "nava/io.hpp"
#include "nava/rng.hpp"

namespace nava {

void ModelConfig::validate() const {
    if (n_hal < 0 || n_ufl < 0 || n_hal + n_ufl < 1)
        throw ConfigError("need n_hal >= 0, n_ufl >= 0, n_hal + n_ufl >= 1");
    if (d_model <= 0 || n_heads <= 0 || d_model % n_heads != 0)
        throw ConfigError("d_model must be a positive multiple of n_heads");
    if (head_dim() % 2 != 0)
        throw ConfigError("head dimension must be even for RoPE pairs, got " +
                          std::to_string(head_dim()));
    if (d_c <= 0 || d_a_in <= 0 || d_v_in <= 0 || d_ff <= 0 || d_etim <= 0)
        throw ConfigError("model dimensions must be positive");
    if (max_ctx < 1) throw ConfigError("max_ctx must be >= 1");
    if (rope_base <= 0.0) throw ConfigError("rope_base must be positive");
}

std::string ModelConfig::to_kv() const {
    std::ostringstream os;
    os << "n_hal=" << n_hal << "\nn_ufl=" << n_ufl << "\nd_model=" << d_model
       << "\nn_heads=" << n_heads << "\nd_c=" << d_c << "\nd_a_in=" << d_a_in
       << "\nd_v_in=" << d_v_in << "\nd_ff=" << d_ff << "\nd_etim=" << d_etim
       << "\nmax_ctx=" << max_ctx << "\ntopology="
       << (topology == Topology::Nava ? "nava" : "fully_unified")
       << "\nrope_base=" << rope_base << "\nmask_ufl=" << (mask_ufl ? 1 : 0)
       << "\n";
    return os.str();
}

ModelConfig ModelConfig::from_kv(const std::string& text) {
    ModelConfig cfg;
    std::istringstream is(text);
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        const size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("bad config line: " + line);
        const std::string key = line.substr(0, eq);
        const std::string val = line.substr(eq + 1);
        if (key == "n_hal") cfg.n_hal = std::stoi(val);
        else if (key == "n_ufl") cfg.n_ufl = std::stoi(val);
        else if (key == "d_model") cfg.d_model = std::stoi(val);
        else if (key == "n_heads") cfg.n_heads = std::stoi(val);
        else if (key == "d_c") cfg.d_c = std::stoi(val);
        else if (key == "d_a_in") cfg.d_a_in = std::stoi(val);
        else if (key == "d_v_in") cfg.d_v_in = std::stoi(val);
        else if (key == "d_ff") cfg.d_ff = std::stoi(val);
        else if (key == "d_etim") cfg.d_etim = std::stoi(val);
        else if (key == "max_ctx") cfg.max_ctx = std::stoi(val);
        else if (key == "rope_base") cfg.rope_base = std::stod(val);
        else if (key == "mask_ufl") cfg.mask_ufl = val != "0";
        else if (key == "topology") {
            if (val == "nava") cfg.topology = Topology::Nava;
            else if (val == "fully_unified") cfg.topology = Topology::FullyUnified;
            else throw ConfigError("unknown topology: " + val);
        } else {
            throw ConfigError("unknown model config key: " + key);
        }
    }
    cfg.validate();
    return cfg;
}

Tensor& ModelParams::at(const std::string& name) {
    auto it = tensors.find(name);
    if (it == tensors.end())
        throw ConfigError("missing parameter tensor: " + name);
    return it->second;
}

const Tensor& ModelParams::at(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end())
        throw ConfigError("missing parameter tensor: " + name);
    return it->second;
}

int64_t ModelParams::total_elements() const {
    int64_t n = 0;
    for (const auto& [name, t] : tensors) n += t.numel();
    return n;
}

int64_t ModelParams::elements_with_prefix(const std::string& prefix) const {
    int64_t n = 0;
    for (const auto& [name, t] : tensors)
        if (name.rfind(prefix, 0) == 0) n += t.numel();
    return n;
}

namespace {

void add_stream_block_schema(std::vector<std::pair<std::string, Shape>>& out,
                             const std::string& prefix, const ModelConfig& cfg,
                             bool with_cross) {
    const int64_t d = cfg.d_model;
    const int64_t ff = cfg.d_ff;
    const int64_t nmod = with_cross ? 9 : 6;
    for (const char* w : {"attn.wq", "attn.wk", "attn.wv", "attn.wo"})
        out.push_back({prefix + w, {d, d}});
    for (const char* b : {"attn.bq", "attn.bk", "attn.bv", "attn.bo"})
        out.push_back({prefix + b, {1, d}});
    if (with_cross) {
        out.push_back({prefix + "xattn.wq", {d, d}});
        out.push_back({prefix + "xattn.bq", {1, d}});
        out.push_back({prefix + "xattn.wo", {d, d}});
        out.push_back({prefix + "xattn.bo", {1, d}});
    }
    out.push_back({prefix + "ffn.w1", {d, ff}});
    out.push_back({prefix + "ffn.b1", {1, ff}});
    out.push_back({prefix + "ffn.w2", {ff, d}});
    out.push_back({prefix + "ffn.b2", {1, d}});
    out.push_back({prefix + "mod.w", {d, nmod * d}});
    out.push_back({prefix + "mod.b", {1, nmod * d}});
}

void add_ctx_kv_schema(std::vector<std::pair<std::string, Shape>>& out,
                       const std::string& prefix, const ModelConfig& cfg) {
    const int64_t d = cfg.d_model;
    const int64_t dc = cfg.d_c;
    out.push_back({prefix + "ctx.wk", {dc, d}});
    out.push_back({prefix + "ctx.bk", {1, d}});
    out.push_back({prefix + "ctx.wv", {dc, d}});
    out.push_back({prefix + "ctx.bv", {1, d}});
}

}  // namespace

std::vector<std::pair<std::string, Shape>> param_schema(const ModelConfig& cfg) {
    cfg.validate();
    const int64_t d = cfg.d_model;
    const int64_t dc = cfg.d_c;
    const bool nava = cfg.topology == Topology::Nava;
    std::vector<std::pair<std::string, Shape>> s;

    s.push_back({"text_emb", {kVocabSize, dc}});
    s.push_back({"ctx_pos_emb", {cfg.max_ctx, dc}});
    s.push_back({"span_start_emb", {1, dc}});
    s.push_back({"span_end_emb", {1, dc}});
    s.push_back({"null_ctx", {1, dc}});
    s.push_back({"null_timbre", {1, dc}});

    s.push_back({"etim.w1", {cfg.d_a_in, cfg.d_etim}});
    s.push_back({"etim.b1", {1, cfg.d_etim}});
    s.push_back({"etim.w2", {cfg.d_etim, dc}});
    s.push_back({"etim.b2", {1, dc}});

    s.push_back({"in.audio.w", {cfg.d_a_in, d}});
    s.push_back({"in.audio.b", {1, d}});
    s.push_back({"in.video.w", {cfg.d_v_in, d}});
    s.push_back({"in.video.b", {1, d}});
    if (!nava) {
        s.push_back({"in.ctx.w", {dc, d}});
        s.push_back({"in.ctx.b", {1, d}});
    }

    s.push_back({"time.w1", {d, d}});
    s.push_back({"time.b1", {1, d}});
    s.push_back({"time.w2", {d, d}});
    s.push_back({"time.b2", {1, d}});

    for (int i = 0; i < cfg.n_hal; ++i) {
        const std::string p = "hal" + std::to_string(i) + ".";
        add_stream_block_schema(s, p + "audio.", cfg, nava);
        add_stream_block_schema(s, p + "video.", cfg, nava);
        if (nava) {
            add_ctx_kv_schema(s, p, cfg);
        } else {
            add_stream_block_schema(s, p + "ctxtok.", cfg, false);
        }
    }
    for (int i = 0; i < cfg.n_ufl; ++i) {
        const std::string p = "ufl" + std::to_string(i) + ".";
        add_stream_block_schema(s, p, cfg, nava);
        if (nava) add_ctx_kv_schema(s, p, cfg);
    }

    for (const char* m : {"audio", "video"}) {
        const std::string p = std::string("head.") + m + ".";
        s.push_back({p + "mod.w", {d, 2 * d}});
        s.push_back({p + "mod.b", {1, 2 * d}});
        const int64_t d_out = std::string(m) == "audio" ? cfg.d_a_in : cfg.d_v_in;
        s.push_back({p + "w", {d, d_out}});
        s.push_back({p + "b", {1, d_out}});
    }
    return s;
}

namespace {

bool is_zero_init(const std::string& name) {
    if (name.find("mod.") != std::string::npos) return true;
    // biases
    const size_t dot = name.rfind('.');
    if (dot != std::string::npos && dot + 1 < name.size() &&
        name[dot + 1] == 'b')
        return true;
    return false;
}

bool is_embedding_init(const std::string& name) {
    return name == "text_emb" || name == "ctx_pos_emb" ||
           name == "span_start_emb" || name == "span_end_emb" ||
           name == "null_ctx" || name == "null_timbre";
}

}  // namespace

ModelParams init_params(const ModelConfig& cfg, uint64_t seed) {
    ModelParams params;
    Rng rng(derive_seed(seed, 0x696e6974u));
    for (const auto& [name, shape] : param_schema(cfg)) {
        Tensor t(shape);
        if (is_zero_init(name)) {
            // stays zero: gates/shifts/scales give identity blocks at init
        } else if (is_embedding_init(name)) {
            for (double& v : t.values()) v = rng.normal();
        } else {
            const double stddev = 1.0 / std::sqrt(static_cast<double>(shape[0]));
            for (double& v : t.values()) v = rng.normal() * stddev;
        }
        t.set_requires_grad(true);
        params.tensors.emplace(name, std::move(t));
    }
    return params;
}

int64_t AvMask::true_count() const {
    int64_t n = 0;
    for (uint8_t b : allowed) n += b ? 1 : 0;
    return n;
}

AvMask build_av_mask(int64_t t_audio, int64_t t_video, bool drop_cross) {
    if (t_audio < 0 || t_video < 0 || t_audio + t_video < 1)
        throw ConfigError("build_av_mask: need at least one token");
    AvMask m;
    m.t_audio = t_audio;
    m.t_video = t_video;
    m.drop_cross = drop_cross;
    const int64_t n = t_audio + t_video;
    m.allowed.assign(static_cast<size_t>(n * n), 1);
    if (drop_cross) {
        for (int64_t i = 0; i < n; ++i) {
            const bool i_audio = i < t_audio;
            for (int64_t j = 0; j < n; ++j) {
                const bool j_audio = j < t_audio;
                if (i_audio != j_audio)
                    m.allowed[static_cast<size_t>(i * n + j)] = 0;
            }
        }
    }
    return m;
}

std::pair<std::vector<double>, std::vector<double>> scaled_positions(
    int64_t t_audio, int64_t t_video, double tr_audio, double tr_video) {
    if (tr_audio <= 0.0 || tr_video <= 0.0)
        throw ConfigError("token rates must be positive");
    const double theta_rope = tr_video / tr_audio;
    std::vector<double> audio(static_cast<size_t>(t_audio));
    std::vector<double> video(static_cast<size_t>(t_video));
    for (int64_t i = 0; i < t_audio; ++i)
        audio[static_cast<size_t>(i)] = static_cast<double>(i) * theta_rope;
    for (int64_t i = 0; i < t_video; ++i)
        video[static_cast<size_t>(i)] = static_cast<double>(i);
    return {std::move(audio), std::move(video)};
}

namespace {

Tensor sinusoidal_time(double t, int d) {
    // t in [0,1] is stretched so low-frequency channels still move.
    const double scaled = t * 1000.0;
    const int half = d / 2;
    Tensor out({1, static_cast<int64_t>(d)});
    double* p = out.data();
    for (int k = 0; k < half; ++k) {
        const double freq =
            std::exp(-std::log(10000.0) * static_cast<double>(k) /
                     static_cast<double>(half));
        p[k] = std::sin(scaled * freq);
        p[half + k] = std::cos(scaled * freq);
    }
    if (d % 2 == 1) p[d - 1] = 0.0;
    return out;
}

Tensor linear(const Tensor& x, const ModelParams& p, const std::string& w,
              const std::string& b) {
    return add_rowvec(matmul(x, p.at(w)), p.at(b));
}

// x_norm * (1 + scale) + shift, all row-vector broadcasts.
Tensor modulate(const Tensor& x_norm, const Tensor& shift,
                const Tensor& scale_vec) {
    Tensor one({1, scale_vec.dim(1)}, 1.0);
    return add_rowvec(mul_rowvec(x_norm, add(scale_vec, one)), shift);
}

struct ModVectors {
    Tensor shift, scale_vec, gate;
};

// Computes the block's modulation vectors from the time embedding.
std::vector<ModVectors> modulation(const Tensor& t_vec, const ModelParams& p,
                                   const std::string& prefix, int groups) {
    Tensor out = linear(t_vec, p, prefix + "mod.w", prefix + "mod.b");
    const int64_t d = out.dim(1) / (3 * groups);
    std::vector<int64_t> sizes(static_cast<size_t>(3 * groups), d);
    std::vector<Tensor> parts = split(out, sizes, 1);
    std::vector<ModVectors> mods;
    mods.reserve(static_cast<size_t>(groups));
    for (int g = 0; g < groups; ++g)
        mods.push_back({parts[static_cast<size_t>(3 * g)],
                        parts[static_cast<size_t>(3 * g + 1)],
                        parts[static_cast<size_t>(3 * g + 2)]});
    return mods;
}

Tensor mask_bias(const AvMask& mask) {
    const int64_t n = mask.size();
    Tensor bias({n, n});
    double* p = bias.data();
    for (int64_t i = 0; i < n * n; ++i)
        p[i] = mask.allowed[static_cast<size_t>(i)] ? 0.0 : kAttnMaskValue;
    return bias;
}

Tensor ctx_key_bias(int64_t t_q, const std::vector<bool>& key_mask) {
    const int64_t l = static_cast<int64_t>(key_mask.size());
    Tensor bias({t_q, l});
    double* p = bias.data();
    for (int64_t i = 0; i < t_q; ++i)
        for (int64_t j = 0; j < l; ++j)
            p[i * l + j] = key_mask[static_cast<size_t>(j)] ? 0.0
                                                            : kAttnMaskValue;
    return bias;
}

// Multi-head scaled dot-product attention; positions rotate q/k per head.
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v,
                 const Tensor* bias, int n_heads,
                 const std::vector<double>* pos_q,
                 const std::vector<double>* pos_k, double rope_base) {
    const int64_t d = q.dim(1);
    const int64_t dh = d / n_heads;
    std::vector<int64_t> sizes(static_cast<size_t>(n_heads), dh);
    std::vector<Tensor> qh = split(q, sizes, 1);
    std::vector<Tensor> kh = split(k, sizes, 1);
    std::vector<Tensor> vh = split(v, sizes, 1);
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
    std::vector<Tensor> outs;
    outs.reserve(static_cast<size_t>(n_heads));
    for (int h = 0; h < n_heads; ++h) {
        Tensor qq = pos_q ? rope_apply(qh[static_cast<size_t>(h)], *pos_q,
                                       rope_base)
                          : qh[static_cast<size_t>(h)];
        Tensor kk = pos_k ? rope_apply(kh[static_cast<size_t>(h)], *pos_k,
                                       rope_base)
                          : kh[static_cast<size_t>(h)];
        Tensor scores = scale(matmul(qq, transpose(kk)), inv_sqrt);
        if (bias) scores = add(scores, *bias);
        Tensor probs = softmax_rows(scores);
        outs.push_back(matmul(probs, vh[static_cast<size_t>(h)]));
    }
    return concat(outs, 1);
}

struct StreamRef {
    Tensor h;                           // [T x d] or empty
    std::string prefix;                 // parameter prefix for this stream
    const std::vector<double>* pos;     // RoPE positions or null
};

// Shared sub-step driver: joint self-attention over the present streams,
// optional context cross-attention, FFN; each modulated and gated.
void run_block(std::vector<StreamRef>& streams, const Tensor* ctx_tokens,
               const std::string& ctx_prefix, const Tensor& t_vec,
               const Tensor* self_bias, const ModelConfig& cfg,
               const ModelParams& p, bool with_cross,
               const std::vector<bool>* ctx_key_mask) {
    std::vector<std::vector<ModVectors>> mods;
    for (StreamRef& s : streams)
        mods.push_back(modulation(t_vec, p, s.prefix, with_cross ? 3 : 2));

    // Joint self-attention.
    std::vector<Tensor> qs, ks, vs;
    std::vector<double> joint_pos;
    for (size_t i = 0; i < streams.size(); ++i) {
        StreamRef& s = streams[i];
        Tensor n = modulate(layer_norm(s.h), mods[i][0].shift,
                            mods[i][0].scale_vec);
        qs.push_back(linear(n, p, s.prefix + "attn.wq", s.prefix + "attn.bq"));
        ks.push_back(linear(n, p, s.prefix + "attn.wk", s.prefix + "attn.bk"));
        vs.push_back(linear(n, p, s.prefix + "attn.wv", s.prefix + "attn.bv"));
        if (s.pos)
            joint_pos.insert(joint_pos.end(), s.pos->begin(), s.pos->end());
        else
            joint_pos.insert(joint_pos.end(), static_cast<size_t>(s.h.dim(0)),
                             0.0);
    }
    Tensor q = qs.size() == 1 ? qs[0] : concat(qs, 0);
    Tensor k = ks.size() == 1 ? ks[0] : concat(ks, 0);
    Tensor v = vs.size() == 1 ? vs[0] : concat(vs, 0);
    Tensor joint = attention(q, k, v, self_bias, cfg.n_heads, &joint_pos,
                             &joint_pos, cfg.rope_base);
    std::vector<int64_t> sizes;
    for (StreamRef& s : streams) sizes.push_back(s.h.dim(0));
    std::vector<Tensor> parts =
        sizes.size() == 1 ? std::vector<Tensor>{joint} : split(joint, sizes, 0);
    for (size_t i = 0; i < streams.size(); ++i) {
        Tensor o = linear(parts[i], p, streams[i].prefix + "attn.wo",
                          streams[i].prefix + "attn.bo");
        streams[i].h = add(streams[i].h, mul_rowvec(o, mods[i][0].gate));
    }

    // Context cross-attention (absent in the fully-unified topology).
    if (with_cross) {
        Tensor k_ctx = linear(*ctx_tokens, p, ctx_prefix + "ctx.wk",
                              ctx_prefix + "ctx.bk");
        Tensor v_ctx = linear(*ctx_tokens, p, ctx_prefix + "ctx.wv",
                              ctx_prefix + "ctx.bv");
        for (size_t i = 0; i < streams.size(); ++i) {
            StreamRef& s = streams[i];
            Tensor n = modulate(layer_norm(s.h), mods[i][1].shift,
                                mods[i][1].scale_vec);
            Tensor qx =
                linear(n, p, s.prefix + "xattn.wq", s.prefix + "xattn.bq");
            Tensor bias;
            const Tensor* bias_ptr = nullptr;
            if (ctx_key_mask) {
                bias = ctx_key_bias(s.h.dim(0), *ctx_key_mask);
                bias_ptr = &bias;
            }
            Tensor o = attention(qx, k_ctx, v_ctx, bias_ptr, cfg.n_heads,
                                 nullptr, nullptr, cfg.rope_base);
            o = linear(o, p, s.prefix + "xattn.wo", s.prefix + "xattn.bo");
            s.h = add(s.h, mul_rowvec(o, mods[i][1].gate));
        }
    }

    // FFN.
    const size_t f = with_cross ? 2 : 1;
    for (size_t i = 0; i < streams.size(); ++i) {
        StreamRef& s = streams[i];
        Tensor n = modulate(layer_norm(s.h), mods[i][f].shift,
                            mods[i][f].scale_vec);
        Tensor hidden = gelu(linear(n, p, s.prefix + "ffn.w1",
                                    s.prefix + "ffn.b1"));
        Tensor o = linear(hidden, p, s.prefix + "ffn.w2", s.prefix + "ffn.b2");
        s.h = add(s.h, mul_rowvec(o, mods[i][f].gate));
    }
}

}  // namespace

Tensor time_embedding(double t, const ModelConfig& cfg,
                      const ModelParams& params) {
    Tensor raw = sinusoidal_time(t, cfg.d_model);
    Tensor h = gelu(linear(raw, params, "time.w1", "time.b1"));
    return linear(h, params, "time.w2", "time.b2");
}

std::pair<Tensor, Tensor> hal_block(
    const Tensor& h_audio, const Tensor& h_video, const Tensor& ctx_tokens,
    const Tensor& t_vec, const AvMask& mask, const ModelConfig& cfg,
    const ModelParams& params, int block_idx,
    const std::vector<double>& pos_audio, const std::vector<double>& pos_video,
    const std::vector<bool>* ctx_key_mask) {
    const std::string p = "hal" + std::to_string(block_idx) + ".";
    std::vector<StreamRef> streams;
    if (h_audio.valid())
        streams.push_back({h_audio, p + "audio.", &pos_audio});
    if (h_video.valid())
        streams.push_back({h_video, p + "video.", &pos_video});
    if (streams.empty())
        throw ShapeError("hal_block: both modality streams are empty");
    const int64_t total = (h_audio.valid() ? h_audio.dim(0) : 0) +
                          (h_video.valid() ? h_video.dim(0) : 0);
    if (mask.size() != total)
        throw ShapeError("hal_block: mask size " + std::to_string(mask.size()) +
                         " does not match " + std::to_string(total) +
                         " tokens");
    Tensor bias = mask_bias(mask);
    run_block(streams, &ctx_tokens, p, t_vec, &bias, cfg, params,
              /*with_cross=*/true, ctx_key_mask);
    Tensor out_a = h_audio.valid() ? streams[0].h : Tensor();
    Tensor out_v;
    if (h_video.valid()) out_v = streams[h_audio.valid() ? 1 : 0].h;
    return {out_a, out_v};
}

Tensor ufl_block(const Tensor& h_av, const Tensor& ctx_tokens,
                 const Tensor& t_vec, const AvMask& mask,
                 const ModelConfig& cfg, const ModelParams& params,
                 int block_idx, const std::vector<double>& positions,
                 const std::vector<bool>* ctx_key_mask) {
    if (!h_av.valid() || h_av.dim(0) != mask.size())
        throw ShapeError("ufl_block: fused sequence does not match mask size");
    if (static_cast<int64_t>(positions.size()) != h_av.dim(0))
        throw ShapeError("ufl_block: positions do not match sequence length");
    const std::string p = "ufl" + std::to_string(block_idx) + ".";
    std::vector<StreamRef> streams{{h_av, p, &positions}};
    Tensor bias = mask_bias(mask);
    run_block(streams, &ctx_tokens, p, t_vec, &bias, cfg, params,
              /*with_cross=*/true, ctx_key_mask);
    return streams[0].h;
}

namespace {

// Extended self-attention bias for the fully-unified topology: the
// audio/video block obeys the AvMask while context rows/columns stay open.
Tensor unified_bias(const AvMask& mask, int64_t l,
                    const std::vector<bool>* ctx_key_mask) {
    const int64_t av = mask.size();
    const int64_t n = av + l;
    Tensor bias({n, n}, 0.0);
    double* p = bias.data();
    for (int64_t i = 0; i < av; ++i)
        for (int64_t j = 0; j < av; ++j)
            if (!mask.at(i, j)) p[i * n + j] = kAttnMaskValue;
    if (ctx_key_mask) {
        for (int64_t j = 0; j < l; ++j) {
            if (!(*ctx_key_mask)[static_cast<size_t>(j)]) {
                for (int64_t i = 0; i < n; ++i)
                    p[i * n + (av + j)] = kAttnMaskValue;
            }
        }
    }
    return bias;
}

}  // namespace

ModelOutput model_forward(const Tensor& z_audio, const Tensor& z_video,
                          const ContextSequence& ctx, double t,
                          bool drop_cross, const ModelConfig& cfg,
                          const ModelParams& params, double tr_audio,
                          double tr_video,
                          const std::vector<bool>* ctx_key_mask) {
    cfg.validate();
    if (t < 0.0 || t > 1.0)
        throw ConfigError("model_forward: t must lie in [0,1], got " +
                          std::to_string(t));
    if (!z_audio.valid() && !z_video.valid())
        throw ShapeError("model_forward: at least one modality is required");
    if (z_audio.valid() &&
        (z_audio.rank() != 2 || z_audio.dim(1) != cfg.d_a_in))
        throw ShapeError("model_forward: audio latents " +
                         shape_str(z_audio.shape()) + " do not match d_a_in=" +
                         std::to_string(cfg.d_a_in));
    if (z_video.valid() &&
        (z_video.rank() != 2 || z_video.dim(1) != cfg.d_v_in))
        throw ShapeError("model_forward: video latents " +
                         shape_str(z_video.shape()) + " do not match d_v_in=" +
                         std::to_string(cfg.d_v_in));
    if (!ctx.tokens.valid() || ctx.tokens.dim(1) != cfg.d_c)
        throw ShapeError("model_forward: context tokens must be [L x d_c]");
    if (ctx_key_mask &&
        static_cast<int64_t>(ctx_key_mask->size()) != ctx.tokens.dim(0))
        throw ShapeError("model_forward: context key mask length mismatch");

    const int64_t t_a = z_audio.valid() ? z_audio.dim(0) : 0;
    const int64_t t_v = z_video.valid() ? z_video.dim(0) : 0;
    auto [pos_audio, pos_video] =
        scaled_positions(t_a, t_v, tr_audio, tr_video);

    const AvMask full_mask = build_av_mask(t_a, t_v, drop_cross);
    const AvMask open_mask = build_av_mask(t_a, t_v, false);
    Tensor t_vec = time_embedding(t, cfg, params);

    Tensor h_a, h_v;
    if (z_audio.valid())
        h_a = linear(z_audio, params, "in.audio.w", "in.audio.b");
    if (z_video.valid())
        h_v = linear(z_video, params, "in.video.w", "in.video.b");

    if (cfg.topology == Topology::Nava) {
        for (int i = 0; i < cfg.n_hal; ++i) {
            auto [na, nv] = hal_block(h_a, h_v, ctx.tokens, t_vec, full_mask,
                                      cfg, params, i, pos_audio, pos_video,
                                      ctx_key_mask);
            h_a = na;
            h_v = nv;
        }
        Tensor fused;
        if (h_a.valid() && h_v.valid())
            fused = concat({h_a, h_v}, 0);
        else
            fused = h_a.valid() ? h_a : h_v;
        std::vector<double> joint_pos = pos_audio;
        joint_pos.insert(joint_pos.end(), pos_video.begin(), pos_video.end());
        const AvMask& ufl_mask = cfg.mask_ufl ? full_mask : open_mask;
        for (int i = 0; i < cfg.n_ufl; ++i)
            fused = ufl_block(fused, ctx.tokens, t_vec, ufl_mask, cfg, params,
                              i, joint_pos, ctx_key_mask);
        if (h_a.valid() && h_v.valid()) {
            std::vector<Tensor> parts = split(fused, {t_a, t_v}, 0);
            h_a = parts[0];
            h_v = parts[1];
        } else if (h_a.valid()) {
            h_a = fused;
        } else {
            h_v = fused;
        }
    } else {
        // Fully-unified comparison topology: context tokens join the
        // self-attention sequence; no cross-attention anywhere.
        Tensor h_c = linear(ctx.tokens, params, "in.ctx.w", "in.ctx.b");
        const int64_t l = h_c.dim(0);
        for (int i = 0; i < cfg.n_hal; ++i) {
            const std::string p = "hal" + std::to_string(i) + ".";
            std::vector<StreamRef> streams;
            if (h_a.valid()) streams.push_back({h_a, p + "audio.", &pos_audio});
            if (h_v.valid()) streams.push_back({h_v, p + "video.", &pos_video});
            streams.push_back({h_c, p + "ctxtok.", nullptr});
            Tensor bias = unified_bias(full_mask, l, ctx_key_mask);
            run_block(streams, nullptr, "", t_vec, &bias, cfg, params,
                      /*with_cross=*/false, nullptr);
            size_t idx = 0;
            if (h_a.valid()) h_a = streams[idx++].h;
            if (h_v.valid()) h_v = streams[idx++].h;
            h_c = streams[idx].h;
        }
        Tensor fused;
        std::vector<Tensor> pieces;
        if (h_a.valid()) pieces.push_back(h_a);
        if (h_v.valid()) pieces.push_back(h_v);
        pieces.push_back(h_c);
        fused = pieces.size() == 1 ? pieces[0] : concat(pieces, 0);
        std::vector<double> joint_pos = pos_audio;
        joint_pos.insert(joint_pos.end(), pos_video.begin(), pos_video.end());
        joint_pos.insert(joint_pos.end(), static_cast<size_t>(l), 0.0);
        const AvMask& av_mask = cfg.mask_ufl ? full_mask : open_mask;
        for (int i = 0; i < cfg.n_ufl; ++i) {
            const std::string p = "ufl" + std::to_string(i) + ".";
            std::vector<StreamRef> streams{{fused, p, &joint_pos}};
            Tensor bias = unified_bias(av_mask, l, ctx_key_mask);
            run_block(streams, nullptr, "", t_vec, &bias, cfg, params,
                      /*with_cross=*/false, nullptr);
            fused = streams[0].h;
        }
        std::vector<int64_t> sizes;
        if (t_a > 0) sizes.push_back(t_a);
        if (t_v > 0) sizes.push_back(t_v);
        sizes.push_back(l);
        std::vector<Tensor> parts = split(fused, sizes, 0);
        size_t idx = 0;
        if (t_a > 0) h_a = parts[idx++];
        if (t_v > 0) h_v = parts[idx++];
        // context-token outputs are discarded
    }

    ModelOutput out;
    auto head = [&](const Tensor& h, const char* m) {
        const std::string p = std::string("head.") + m + ".";
        Tensor mod = linear(t_vec, params, p + "mod.w", p + "mod.b");
        std::vector<Tensor> sv = split(mod, {cfg.d_model, cfg.d_model}, 1);
        Tensor n = modulate(layer_norm(h), sv[0], sv[1]);
        return linear(n, params, p + "w", p + "b");
    };
    if (h_a.valid()) out.v_audio = head(h_a, "audio");
    if (h_v.valid()) out.v_video = head(h_v, "video");
    return out;
}

void save_checkpoint(const std::string& path, const ModelConfig& cfg,
                     const ModelParams& params) {
    TensorContainer c;
    c.version = 1;
    c.config_text = cfg.to_kv();
    c.tensors = params.tensors;
    write_tensor_container(path, kCheckpointMagic, c);
}

std::pair<ModelConfig, ModelParams> load_checkpoint(const std::string& path) {
    TensorContainer c = read_tensor_container(path, kCheckpointMagic, 1);
    ModelConfig cfg = ModelConfig::from_kv(c.config_text);
    const auto schema = param_schema(cfg);
    std::set<std::string> expected;
    for (const auto& [name, shape] : schema) {
        expected.insert(name);
        auto it = c.tensors.find(name);
        if (it == c.tensors.end())
            throw IoError("checkpoint " + path + ": missing tensor '" + name +
                          "'");
        if (it->second.shape() != shape)
            throw IoError("checkpoint " + path + ": tensor '" + name +
                          "' has shape " + shape_str(it->second.shape()) +
                          ", expected " + shape_str(shape));
    }
    for (const auto& [name, t] : c.tensors) {
        if (!expected.count(name))
            throw IoError("checkpoint " + path + ": unexpected tensor '" +
                          name + "'");
    }
    ModelParams params;
    params.tensors = std::move(c.tensors);
    for (auto& [name, t] : params.tensors) t.set_requires_grad(true);
    return {cfg, params};
}

}  // namespace nava
