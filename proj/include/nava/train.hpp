#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "nava/data.hpp"
#include "nava/model.hpp"
#include "nava/rng.hpp"
#include "nava/task.hpp"
#include "nava/tensor.hpp"

namespace nava {

struct StageSpec {
    int64_t begin = 0;
    int64_t end = 0;  // exclusive
    std::map<Task, double> ratios;
};

struct TrainConfig {
    int64_t steps = 5000;
    int batch_size = 8;
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    double weight_decay = 0.0;
    double drop_cross_prob = 0.2;
    double drop_timbre_prob = 0.2;
    double drop_text_prob = 0.1;
    double image_cond_prob = 0.5;
    std::vector<StageSpec> stages;
    uint64_t seed = 42;

    void validate() const;  // stage ranges must partition [0, steps)
};

// "0-2500:t2a=3,t2av=1;2500-5000:t2a=1,t2av=2"
std::vector<StageSpec> parse_stages(const std::string& text, int64_t steps);
std::string stages_to_string(const std::vector<StageSpec>& stages);

const StageSpec& stage_for_step(const TrainConfig& cfg, int64_t step);
int stage_index_for_step(const TrainConfig& cfg, int64_t step);

// Constant-velocity rectified path: z_t = (1-t)*eps + t*x, target = x - eps.
std::pair<Tensor, Tensor> flow_interpolate(const Tensor& x, const Tensor& eps,
                                           double t);

Task sample_task(const std::map<Task, double>& ratios, Rng& rng);

struct TrainState {
    ModelConfig model_config;
    ModelParams params;
    std::map<std::string, Tensor> moment1;
    std::map<std::string, Tensor> moment2;
    int64_t step = 0;
    Rng rng;
};

TrainState init_train_state(const ModelConfig& cfg, uint64_t param_seed,
                            uint64_t train_seed);

// Realized condition-dropout counters (not part of the persisted state).
struct TrainCounters {
    int64_t cross_draws = 0;
    int64_t cross_drops = 0;
    int64_t timbre_tokens = 0;
    int64_t timbre_drops = 0;
    int64_t text_draws = 0;
    int64_t text_drops = 0;
};

struct BatchDraw {
    Task task;
    std::vector<int> indices;
};

// Draws the step's task from the current stage ratios (a T2AV draw becomes
// TI2AV with probability image_cond_prob) and then the sample indices.
BatchDraw draw_batch(TrainState& state, const TrainConfig& cfg,
                     int64_t dataset_size);

struct StepResult {
    double loss = 0.0;
    double grad_norm = 0.0;
    Task task = Task::T2AV;
};

// One optimizer step over a single-task micro-batch: flow interpolation,
// structured condition dropout, forward, masked-MSE loss, backward, AdamW.
StepResult train_step(TrainState& state,
                      const std::vector<const DatasetEntry*>& batch, Task task,
                      const TrainConfig& cfg,
                      TrainCounters* counters = nullptr);

inline constexpr char kStateMagic[] = "NAVASTAT";

void save_state(const TrainState& state, const std::string& path);
TrainState load_state(const std::string& path);

}  // namespace nava
