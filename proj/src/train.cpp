#include "nava/train.hpp"

#include <cmath>
#include <cstring>
#include <sstream>

#include "nava/context.hpp"
#include "nava/io.hpp"

namespace nava {

void TrainConfig::validate() const {
    if (steps < 1) throw ConfigError("train steps must be >= 1");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (lr <= 0.0) throw ConfigError("learning rate must be positive");
    for (double p : {drop_cross_prob, drop_timbre_prob, drop_text_prob,
                     image_cond_prob}) {
        if (p < 0.0 || p > 1.0)
            throw ConfigError("dropout probabilities must lie in [0,1]");
    }
    if (stages.empty()) throw ConfigError("at least one training stage required");
    int64_t expect = 0;
    for (const StageSpec& s : stages) {
        if (s.begin != expect || s.end <= s.begin)
            throw ConfigError(
                "stage ranges must partition [0, steps) without gaps");
        expect = s.end;
        if (s.ratios.empty())
            throw ConfigError("stage has an empty task-ratio map");
        double total = 0.0;
        for (const auto& [task, w] : s.ratios) {
            if (w < 0.0) throw ConfigError("task ratio weights must be >= 0");
            total += w;
        }
        if (total <= 0.0)
            throw ConfigError("task ratio weights must not all be zero");
    }
    if (expect != steps)
        throw ConfigError("stage ranges cover [0, " + std::to_string(expect) +
                          ") but steps=" + std::to_string(steps));
}

std::vector<StageSpec> parse_stages(const std::string& text, int64_t steps) {
    std::vector<StageSpec> stages;
    std::istringstream is(text);
    std::string part;
    while (std::getline(is, part, ';')) {
        if (part.empty()) continue;
        StageSpec stage;
        const size_t colon = part.find(':');
        if (colon == std::string::npos)
            throw ConfigError("bad stage spec: " + part);
        const std::string range = part.substr(0, colon);
        const size_t dash = range.find('-');
        if (dash == std::string::npos)
            throw ConfigError("bad stage range: " + range);
        stage.begin = std::stoll(range.substr(0, dash));
        stage.end = std::stoll(range.substr(dash + 1));
        std::istringstream rs(part.substr(colon + 1));
        std::string kv;
        while (std::getline(rs, kv, ',')) {
            const size_t eq = kv.find('=');
            if (eq == std::string::npos)
                throw ConfigError("bad task ratio: " + kv);
            stage.ratios[task_from_name(kv.substr(0, eq))] =
                std::stod(kv.substr(eq + 1));
        }
        stages.push_back(std::move(stage));
    }
    (void)steps;
    return stages;
}

std::string stages_to_string(const std::vector<StageSpec>& stages) {
    std::ostringstream os;
    for (size_t i = 0; i < stages.size(); ++i) {
        if (i) os << ';';
        os << stages[i].begin << '-' << stages[i].end << ':';
        bool first = true;
        for (const auto& [task, w] : stages[i].ratios) {
            if (!first) os << ',';
            first = false;
            os << task_name(task) << '=' << w;
        }
    }
    return os.str();
}

const StageSpec& stage_for_step(const TrainConfig& cfg, int64_t step) {
    for (const StageSpec& s : cfg.stages)
        if (step >= s.begin && step < s.end) return s;
    throw ConfigError("step " + std::to_string(step) +
                      " outside every stage range");
}

int stage_index_for_step(const TrainConfig& cfg, int64_t step) {
    for (size_t i = 0; i < cfg.stages.size(); ++i)
        if (step >= cfg.stages[i].begin && step < cfg.stages[i].end)
            return static_cast<int>(i);
    throw ConfigError("step " + std::to_string(step) +
                      " outside every stage range");
}

std::pair<Tensor, Tensor> flow_interpolate(const Tensor& x, const Tensor& eps,
                                           double t) {
    if (!x.valid() || !eps.valid() || x.shape() != eps.shape())
        throw ShapeError("flow_interpolate: clean/noise shapes differ");
    if (t < 0.0 || t > 1.0)
        throw ConfigError("flow_interpolate: t must lie in [0,1]");
    Tensor z(x.shape());
    Tensor target(x.shape());
    const double* px = x.data();
    const double* pe = eps.data();
    double* pz = z.data();
    double* pt = target.data();
    const int64_t n = x.numel();
    for (int64_t i = 0; i < n; ++i) {
        pz[i] = (1.0 - t) * pe[i] + t * px[i];
        pt[i] = px[i] - pe[i];
    }
    return {std::move(z), std::move(target)};
}

Task sample_task(const std::map<Task, double>& ratios, Rng& rng) {
    double total = 0.0;
    for (const auto& [task, w] : ratios) total += w;
    if (total <= 0.0) throw ConfigError("sample_task: weights sum to zero");
    double u = rng.uniform() * total;
    for (const auto& [task, w] : ratios) {
        if (u < w) return task;
        u -= w;
    }
    return ratios.rbegin()->first;
}

TrainState init_train_state(const ModelConfig& cfg, uint64_t param_seed,
                            uint64_t train_seed) {
    TrainState state;
    state.model_config = cfg;
    state.params = init_params(cfg, param_seed);
    for (const auto& [name, t] : state.params.tensors) {
        state.moment1.emplace(name, Tensor::zeros(t.shape()));
        state.moment2.emplace(name, Tensor::zeros(t.shape()));
    }
    state.step = 0;
    state.rng = Rng(derive_seed(train_seed, 0x747261696eu));
    return state;
}

BatchDraw draw_batch(TrainState& state, const TrainConfig& cfg,
                     int64_t dataset_size) {
    if (dataset_size < 1) throw ConfigError("cannot train on an empty dataset");
    const StageSpec& stage = stage_for_step(cfg, state.step);
    BatchDraw draw;
    draw.task = sample_task(stage.ratios, state.rng);
    if (draw.task == Task::T2AV && state.rng.bernoulli(cfg.image_cond_prob))
        draw.task = Task::TI2AV;
    draw.indices.reserve(static_cast<size_t>(cfg.batch_size));
    for (int i = 0; i < cfg.batch_size; ++i)
        draw.indices.push_back(static_cast<int>(
            state.rng.uniform_int(static_cast<uint64_t>(dataset_size))));
    return draw;
}

namespace {

Tensor randn_like(const Tensor& x, Rng& rng) {
    Tensor t(x.shape());
    for (double& v : t.values()) v = rng.normal();
    return t;
}

int count_role(const ContextSequence& seq, Role role) {
    int n = 0;
    for (Role r : seq.roles)
        if (r == role) ++n;
    return n;
}

}  // namespace

StepResult train_step(TrainState& state,
                      const std::vector<const DatasetEntry*>& batch, Task task,
                      const TrainConfig& cfg, TrainCounters* counters) {
    if (batch.empty()) throw ConfigError("train_step: empty batch");
    const ModelConfig& mc = state.model_config;
    ModelParams& params = state.params;

    Tape tape;
    TapeScope scope(tape);

    Tensor loss_sum;
    int64_t active_elements = 0;
    std::vector<double> sampled_ts;

    for (const DatasetEntry* entry : batch) {
        const double t = state.rng.uniform();
        sampled_ts.push_back(t);

        const bool use_audio = task_has_audio(task);
        const bool use_video = task_has_video(task);

        Tensor z_a, target_a, z_v, target_v;
        if (use_audio) {
            Tensor eps = randn_like(entry->clip.audio_tokens, state.rng);
            std::tie(z_a, target_a) =
                flow_interpolate(entry->clip.audio_tokens, eps, t);
        }
        if (use_video) {
            Tensor eps = randn_like(entry->clip.video_tokens, state.rng);
            std::tie(z_v, target_v) =
                flow_interpolate(entry->clip.video_tokens, eps, t);
        }

        const bool drop_cross = state.rng.bernoulli(cfg.drop_cross_prob);
        const bool drop_text = state.rng.bernoulli(cfg.drop_text_prob);
        if (counters) {
            counters->cross_draws += 1;
            counters->cross_drops += drop_cross ? 1 : 0;
            counters->text_draws += 1;
            counters->text_drops += drop_text ? 1 : 0;
        }

        std::map<int, TimbreEmbedding> timbre_map;
        for (size_t si = 0; si < entry->prompt.spans.size(); ++si) {
            const auto& span = entry->prompt.spans[si];
            if (!span.speaker) continue;
            Tensor ref = generate_reference_utterance(*span.speaker,
                                                      state.rng.next_u64());
            timbre_map[static_cast<int>(si)] = encode_timbre(ref, params);
        }
        ContextSequence ctx = augment_context(entry->prompt, timbre_map, params);
        const int timbre_before = count_role(ctx, Role::Timbre);
        ctx = drop_conditions(ctx, cfg.drop_timbre_prob, drop_text, state.rng,
                              params);
        if (counters && !drop_text) {
            counters->timbre_tokens += timbre_before;
            counters->timbre_drops +=
                timbre_before - count_role(ctx, Role::Timbre);
        }

        // TI2AV keeps the first time unit of video clean at every t and
        // excludes those tokens from the loss.
        Tensor video_weight;
        if (task == Task::TI2AV) {
            const int clean_rows = entry->clip.tr_video;
            const double* clean = entry->clip.video_tokens.data();
            double* zp = z_v.data();
            std::memcpy(zp, clean,
                        static_cast<size_t>(clean_rows * z_v.dim(1)) *
                            sizeof(double));
            video_weight = Tensor(z_v.shape(), 1.0);
            for (int64_t i = 0; i < clean_rows * z_v.dim(1); ++i)
                video_weight.data()[i] = 0.0;
        }

        ModelOutput out = model_forward(
            z_a, z_v, ctx, t, drop_cross, mc, params,
            static_cast<double>(entry->clip.tr_audio),
            static_cast<double>(entry->clip.tr_video));

        auto accumulate = [&](const Tensor& pred, const Tensor& target,
                              const Tensor* weight) {
            Tensor diff = sub(pred, target);
            Tensor sq = mul(diff, diff);
            if (weight) sq = mul(sq, *weight);
            Tensor s = sum(sq);
            loss_sum = loss_sum.valid() ? add(loss_sum, s) : s;
            active_elements += weight
                                   ? static_cast<int64_t>(
                                         [&] {
                                             double c = 0;
                                             for (double w : weight->values())
                                                 c += w;
                                             return c;
                                         }())
                                   : target.numel();
        };
        if (use_audio) accumulate(out.v_audio, target_a, nullptr);
        if (use_video)
            accumulate(out.v_video, target_v,
                       video_weight.valid() ? &video_weight : nullptr);
    }

    Tensor loss = scale(loss_sum, 1.0 / static_cast<double>(active_elements));
    const double loss_value = loss.item();
    if (!std::isfinite(loss_value)) {
        std::ostringstream os;
        os << "non-finite loss at step " << state.step << " task "
           << task_name(task) << " t values:";
        for (double t : sampled_ts) os << ' ' << t;
        throw NumericError(os.str());
    }

    backward(loss, tape);

    double grad_sq = 0.0;
    for (auto& [name, t] : params.tensors) {
        if (!t.has_grad()) continue;
        for (double g : t.grad()) grad_sq += g * g;
    }
    const double grad_norm = std::sqrt(grad_sq);

    // AdamW with decoupled weight decay; parameters untouched this step
    // (no gradient) are skipped entirely.
    const int64_t step_t = state.step + 1;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step_t));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step_t));
    for (auto& [name, t] : params.tensors) {
        if (!t.has_grad()) continue;
        const std::vector<double>& g = t.grad();
        std::vector<double>& m = state.moment1.at(name).values();
        std::vector<double>& v = state.moment2.at(name).values();
        std::vector<double>& w = t.values();
        for (size_t i = 0; i < w.size(); ++i) {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            w[i] -= cfg.lr * (mhat / (std::sqrt(vhat) + cfg.adam_eps) +
                              cfg.weight_decay * w[i]);
        }
        if (!std::isfinite(w[0]))
            throw NumericError("non-finite parameter '" + name +
                               "' after update at step " +
                               std::to_string(state.step));
    }
    for (auto& [name, t] : params.tensors) t.zero_grad();

    state.step += 1;
    return {loss_value, grad_norm, task};
}

void save_state(const TrainState& state, const std::string& path) {
    TensorContainer c;
    c.version = 1;
    std::ostringstream meta;
    meta << state.model_config.to_kv() << "---\n"
         << "step=" << state.step << "\nrng=" << state.rng.serialize() << "\n";
    c.config_text = meta.str();
    c.tensors = state.params.tensors;
    for (const auto& [name, t] : state.moment1)
        c.tensors.emplace("opt.m." + name, t);
    for (const auto& [name, t] : state.moment2)
        c.tensors.emplace("opt.v." + name, t);
    write_tensor_container(path, kStateMagic, c);
}

TrainState load_state(const std::string& path) {
    TensorContainer c = read_tensor_container(path, kStateMagic, 1);
    const size_t sep = c.config_text.find("---\n");
    if (sep == std::string::npos)
        throw IoError("state file " + path + ": missing metadata separator");
    TrainState state;
    state.model_config = ModelConfig::from_kv(c.config_text.substr(0, sep));
    std::istringstream meta(c.config_text.substr(sep + 4));
    std::string line;
    bool have_step = false, have_rng = false;
    while (std::getline(meta, line)) {
        if (line.rfind("step=", 0) == 0) {
            state.step = std::stoll(line.substr(5));
            have_step = true;
        } else if (line.rfind("rng=", 0) == 0) {
            state.rng.deserialize(line.substr(4));
            have_rng = true;
        }
    }
    if (!have_step || !have_rng)
        throw IoError("state file " + path + ": incomplete metadata");

    for (const auto& [name, shape] : param_schema(state.model_config)) {
        auto it = c.tensors.find(name);
        if (it == c.tensors.end())
            throw IoError("state file " + path + ": missing tensor '" + name +
                          "'");
        if (it->second.shape() != shape)
            throw IoError("state file " + path + ": tensor '" + name +
                          "' has shape " + shape_str(it->second.shape()) +
                          ", expected " + shape_str(shape));
        it->second.set_requires_grad(true);
        state.params.tensors.emplace(name, it->second);
        auto mit = c.tensors.find("opt.m." + name);
        auto vit = c.tensors.find("opt.v." + name);
        if (mit == c.tensors.end() || vit == c.tensors.end())
            throw IoError("state file " + path +
                          ": missing optimizer moments for '" + name + "'");
        state.moment1.emplace(name, mit->second);
        state.moment2.emplace(name, vit->second);
    }
    const size_t expected = state.params.tensors.size() * 3;
    if (c.tensors.size() != expected) {
        for (const auto& [name, t] : c.tensors) {
            const bool known =
                state.params.tensors.count(name) ||
                (name.rfind("opt.m.", 0) == 0 &&
                 state.params.tensors.count(name.substr(6))) ||
                (name.rfind("opt.v.", 0) == 0 &&
                 state.params.tensors.count(name.substr(6)));
            if (!known)
                throw IoError("state file " + path + ": unexpected tensor '" +
                              name + "'");
        }
    }
    return state;
}

}  // namespace nava
