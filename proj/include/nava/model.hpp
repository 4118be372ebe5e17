#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "nava/context.hpp"
#include "nava/tensor.hpp"

namespace nava {

enum class Topology { Nava, FullyUnified };

struct ModelConfig {
    int n_hal = 2;
    int n_ufl = 4;
    int d_model = 64;
    int n_heads = 4;
    int d_c = 32;
    int d_a_in = 12;
    int d_v_in = 16;
    int d_ff = 256;
    int d_etim = 32;
    int max_ctx = 32;
    Topology topology = Topology::Nava;
    double rope_base = 10000.0;
    // When false, cross-modality attention masking is restricted to HAL
    // blocks; the default masks every joint self-attention uniformly.
    bool mask_ufl = true;

    int head_dim() const { return d_model / n_heads; }
    void validate() const;

    std::string to_kv() const;
    static ModelConfig from_kv(const std::string& text);
    bool operator==(const ModelConfig&) const = default;
};

// Named weight map. The set of names is a pure function of the config;
// loading a checkpoint verifies the name schema exactly.
struct ModelParams {
    std::map<std::string, Tensor> tensors;

    Tensor& at(const std::string& name);
    const Tensor& at(const std::string& name) const;
    bool has(const std::string& name) const {
        return tensors.count(name) != 0;
    }
    int64_t total_elements() const;
    int64_t elements_with_prefix(const std::string& prefix) const;
};

std::vector<std::pair<std::string, Shape>> param_schema(const ModelConfig& cfg);
ModelParams init_params(const ModelConfig& cfg, uint64_t seed);

// Block-structured audio/video attention mask, audio tokens first.
// Intra-modal blocks are always attendable; drop_cross clears both
// cross-modal blocks.
struct AvMask {
    int64_t t_audio = 0;
    int64_t t_video = 0;
    bool drop_cross = false;
    std::vector<uint8_t> allowed;  // (t_audio+t_video)^2, row-major

    int64_t size() const { return t_audio + t_video; }
    bool at(int64_t i, int64_t j) const {
        return allowed[static_cast<size_t>(i * size() + j)] != 0;
    }
    int64_t true_count() const;
};

AvMask build_av_mask(int64_t t_audio, int64_t t_video, bool drop_cross);

// theta_rope = tr_video / tr_audio; audio token i sits at position
// i * theta_rope, video token i at position i, so tokens at equal physical
// time share equal rotation angles.
std::pair<std::vector<double>, std::vector<double>> scaled_positions(
    int64_t t_audio, int64_t t_video, double tr_audio, double tr_video);

// Timestep conditioning: sinusoidal features through a 2-layer MLP.
Tensor time_embedding(double t, const ModelConfig& cfg,
                      const ModelParams& params);

// One Hierarchical Alignment Layer: modality-decoupled projections, joint
// masked self-attention with RoPE, context cross-attention, FFN; adaptive
// norm modulation around each sub-step with zero-initialized gates.
std::pair<Tensor, Tensor> hal_block(
    const Tensor& h_audio, const Tensor& h_video, const Tensor& ctx_tokens,
    const Tensor& t_vec, const AvMask& mask, const ModelConfig& cfg,
    const ModelParams& params, int block_idx,
    const std::vector<double>& pos_audio, const std::vector<double>& pos_video,
    const std::vector<bool>* ctx_key_mask = nullptr);

// One Unified Fusion Layer: same sub-step structure over the fused
// sequence with one shared parameter set.
Tensor ufl_block(const Tensor& h_av, const Tensor& ctx_tokens,
                 const Tensor& t_vec, const AvMask& mask,
                 const ModelConfig& cfg, const ModelParams& params,
                 int block_idx, const std::vector<double>& positions,
                 const std::vector<bool>* ctx_key_mask = nullptr);

struct ModelOutput {
    Tensor v_audio;  // empty handle when the audio branch is absent
    Tensor v_video;
};

// Full velocity prediction. Either latent may be an empty handle for the
// single-modality tasks. In the FULLY_UNIFIED topology, context tokens are
// projected into model space and join the self-attention sequence instead
// of being cross-attended.
ModelOutput model_forward(const Tensor& z_audio, const Tensor& z_video,
                          const ContextSequence& ctx, double t,
                          bool drop_cross, const ModelConfig& cfg,
                          const ModelParams& params, double tr_audio = 8,
                          double tr_video = 4,
                          const std::vector<bool>* ctx_key_mask = nullptr);

inline constexpr char kCheckpointMagic[] = "NAVACKPT";

void save_checkpoint(const std::string& path, const ModelConfig& cfg,
                     const ModelParams& params);
std::pair<ModelConfig, ModelParams> load_checkpoint(const std::string& path);

}  // namespace nava
