#include "nava/commands.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "nava/data.hpp"
#include "nava/evalrun.hpp"
#include "nava/io.hpp"
#include "nava/metrics.hpp"
#include "nava/train.hpp"

namespace fs = std::filesystem;

namespace nava {

namespace {

void prepare_out_dir(const RunConfig& rc) {
    if (rc.out_dir.empty())
        throw ConfigError("an output directory is required (--out DIR)");
    fs::create_directories(rc.out_dir);
    write_text_file(rc.out_dir + "/config_resolved.txt", rc.resolved_text());
}

std::vector<DatasetEntry> build_split(uint64_t seed_start, int64_t count,
                                      const RunConfig& rc) {
    std::vector<DatasetEntry> entries;
    entries.reserve(static_cast<size_t>(count));
    for (int64_t i = 0; i < count; ++i) {
        DatasetEntry e;
        e.spec = spec_from_seed(seed_start + static_cast<uint64_t>(i),
                                rc.speech_frac, rc.dur_min, rc.dur_max);
        auto [clip, prompt] = generate_clip(e.spec);
        e.clip = std::move(clip);
        e.prompt = std::move(prompt);
        entries.push_back(std::move(e));
    }
    return entries;
}

bool ranges_overlap(uint64_t a_begin, uint64_t a_count, uint64_t b_begin,
                    uint64_t b_count) {
    if (a_count == 0 || b_count == 0) return false;
    return a_begin < b_begin + b_count && b_begin < a_begin + a_count;
}

EvalOptions eval_options(const RunConfig& rc) {
    EvalOptions opts;
    opts.n_clips = rc.eval_n_clips;
    opts.steps = rc.eval_steps;
    opts.scales = rc.scales;
    opts.eval_seed_start = rc.eval_seed_start;
    opts.speech_frac = rc.speech_frac;
    opts.dur_min = rc.dur_min;
    opts.dur_max = rc.dur_max;
    return opts;
}

void require_calibration() {
    const CalibrationResult cal = run_calibration(7);
    if (!cal.passed) {
        std::ostringstream os;
        os << "generator calibration failed; refusing to score models"
           << " (matched_sync_min=" << cal.matched_sync_min
           << " mismatch_abs_mean=" << cal.mismatch_abs_mean
           << " matched_pattern_acc=" << cal.matched_pattern_acc
           << " noise_pattern_acc=" << cal.noise_pattern_acc
           << " matched_timbre_min=" << cal.matched_timbre_min << ")";
        throw ConfigError(os.str());
    }
}

struct TrainOutputs {
    std::string final_checkpoint;
};

// Shared by cmd_train and the ablation sweep.
TrainOutputs run_training(const RunConfig& rc, const ModelConfig& model_cfg,
                          const std::string& out_dir) {
    if (rc.train_data.empty())
        throw ConfigError("train.data must point to a dataset file");
    const std::vector<DatasetEntry> data = read_dataset(rc.train_data);
    if (data.empty()) throw ConfigError("training dataset is empty");

    TrainState state;
    if (!rc.resume_path.empty()) {
        state = load_state(rc.resume_path);
        if (!(state.model_config == model_cfg))
            throw ConfigError(
                "resume state model config does not match the run config");
    } else {
        state = init_train_state(model_cfg, rc.seed, rc.seed);
    }

    std::ofstream metrics(out_dir + "/metrics.jsonl",
                          rc.resume_path.empty() ? std::ios::trunc
                                                 : std::ios::app);
    if (!metrics) throw IoError("cannot open metrics file in " + out_dir);
    metrics.precision(17);

    std::vector<const DatasetEntry*> batch;
    const auto t0 = std::chrono::steady_clock::now();
    while (state.step < rc.train.steps) {
        const int stage = stage_index_for_step(rc.train, state.step);
        const BatchDraw draw = draw_batch(state, rc.train,
                                          static_cast<int64_t>(data.size()));
        batch.clear();
        for (int idx : draw.indices)
            batch.push_back(&data[static_cast<size_t>(idx)]);
        const auto s0 = std::chrono::steady_clock::now();
        const StepResult res = train_step(state, batch, draw.task, rc.train);
        const double wall_ms =
            std::chrono::duration<double, std::milli>(
                std::chrono::steady_clock::now() - s0)
                .count();
        metrics << "{\"step\":" << state.step - 1 << ",\"stage\":" << stage
                << ",\"task\":\"" << task_name(res.task) << "\",\"loss\":"
                << res.loss << ",\"grad_norm\":" << res.grad_norm
                << ",\"wall_ms\":" << wall_ms << "}\n";
        if (rc.checkpoint_every > 0 && state.step % rc.checkpoint_every == 0 &&
            state.step < rc.train.steps) {
            const std::string tag = std::to_string(state.step);
            save_checkpoint(out_dir + "/ckpt_step" + tag + ".nckpt",
                            model_cfg, state.params);
            save_state(state, out_dir + "/state_step" + tag + ".nstate");
        }
    }
    metrics.flush();
    const double total_s = std::chrono::duration<double>(
                               std::chrono::steady_clock::now() - t0)
                               .count();
    TrainOutputs outs;
    outs.final_checkpoint = out_dir + "/ckpt_final.nckpt";
    save_checkpoint(outs.final_checkpoint, model_cfg, state.params);
    save_state(state, out_dir + "/state_final.nstate");
    std::cout << "trained " << rc.train.steps << " steps in " << std::fixed
              << std::setprecision(1) << total_s << "s -> "
              << outs.final_checkpoint << "\n";
    return outs;
}

}  // namespace

int cmd_gen_data(const RunConfig& rc) {
    prepare_out_dir(rc);
    if (ranges_overlap(rc.train_seed_start,
                       static_cast<uint64_t>(rc.train_clips),
                       rc.val_seed_start, static_cast<uint64_t>(rc.val_clips)))
        throw ConfigError("train and val seed ranges overlap; refusing");
    for (const char* which : {"train", "val"}) {
        const bool is_train = std::string(which) == "train";
        const uint64_t start = is_train ? rc.train_seed_start : rc.val_seed_start;
        const int64_t count = is_train ? rc.train_clips : rc.val_clips;
        if (ranges_overlap(start, static_cast<uint64_t>(count),
                           rc.eval_seed_start, 1))
            throw ConfigError(
                "reserved eval seed range intersects a data split; refusing");
        const auto entries = build_split(start, count, rc);
        const std::string path = rc.out_dir + "/" + which + ".nvt";
        write_dataset(entries, path);
        std::cout << which << ": " << entries.size() << " clips -> " << path
                  << "\n";
    }
    return 0;
}

int cmd_train(const RunConfig& rc) {
    prepare_out_dir(rc);
    run_training(rc, rc.model, rc.out_dir);
    return 0;
}

int cmd_sample(const RunConfig& rc) {
    prepare_out_dir(rc);
    if (rc.checkpoint_path.empty())
        throw ConfigError("sample needs --ckpt PATH");
    auto [cfg, params] = load_checkpoint(rc.checkpoint_path);

    SampleRequest req;
    req.prompt = rc.prompt;
    req.task = task_from_name(rc.task);
    req.steps = rc.sample_steps;
    req.seed = rc.seed;
    req.scales = rc.scales;
    req.duration_units = rc.sample_duration;
    const PromptRecord record = parse_prompt(req.prompt);
    for (size_t si = 0; si < record.spans.size(); ++si) {
        if (!record.spans[si].speaker) continue;
        req.span_references[static_cast<int>(si)] =
            generate_reference_utterance(*record.spans[si].speaker,
                                         derive_seed(rc.seed, 0x726566u + si));
    }
    if (req.task == Task::TI2AV) {
        // The conditioning frame comes from a held-out generator clip so the
        // command stays self-contained.
        ClipSpec spec = spec_from_seed(derive_seed(rc.seed, 0x66726d65u),
                                       rc.speech_frac, rc.dur_min, rc.dur_max);
        auto [clip, prompt] = generate_clip(spec);
        std::vector<double> rows;
        const int64_t n = static_cast<int64_t>(clip.tr_video) * cfg.d_v_in;
        rows.assign(clip.video_tokens.data(), clip.video_tokens.data() + n);
        req.first_frame = Tensor({clip.tr_video, cfg.d_v_in}, std::move(rows));
    }

    const SampleResult result = sample(req, cfg, params);
    const std::string path =
        rc.out_dir + "/sample_seed" + std::to_string(rc.seed) + ".nsmp";
    write_sample_file(path, req, result);
    std::cout << "sample -> " << path << "\n";
    return 0;
}

int cmd_eval(const RunConfig& rc) {
    prepare_out_dir(rc);
    if (rc.checkpoint_path.empty()) throw ConfigError("eval needs --ckpt PATH");
    require_calibration();
    auto [cfg, params] = load_checkpoint(rc.checkpoint_path);
    const EvalReport report = evaluate_model(cfg, params, eval_options(rc));
    write_text_file(rc.out_dir + "/eval_report.jsonl",
                    report_to_jsonl(report));
    std::cout << "eval: clips=" << report.clips.size() << " sync_mean="
              << report.sync_mean << " timbre_mean=" << report.timbre_mean
              << " pattern_mean=" << report.pattern_mean << "\n";
    return 0;
}

namespace {

struct AblateRow {
    std::string label;
    ModelConfig cfg;
    int64_t params = 0;
    EvalReport report;
};

std::string rows_to_jsonl(const std::vector<AblateRow>& rows) {
    std::ostringstream os;
    os.precision(17);
    for (const AblateRow& r : rows) {
        os << "{\"variant\":\"" << r.label << "\",\"n_hal\":" << r.cfg.n_hal
           << ",\"n_ufl\":" << r.cfg.n_ufl << ",\"params\":" << r.params
           << ",\"sync_mean\":" << r.report.sync_mean << ",\"timbre_mean\":"
           << r.report.timbre_mean << ",\"pattern_mean\":"
           << r.report.pattern_mean << "}\n";
    }
    return os.str();
}

std::string rows_to_table(const std::vector<AblateRow>& rows) {
    std::ostringstream os;
    os << std::left << std::setw(12) << "variant" << std::setw(7) << "hal"
       << std::setw(7) << "ufl" << std::setw(12) << "params" << std::setw(12)
       << "sync" << std::setw(12) << "timbre" << std::setw(12) << "pattern"
       << "\n";
    os << std::fixed << std::setprecision(4);
    for (const AblateRow& r : rows) {
        os << std::left << std::setw(12) << r.label << std::setw(7)
           << r.cfg.n_hal << std::setw(7) << r.cfg.n_ufl << std::setw(12)
           << r.params << std::setw(12) << r.report.sync_mean << std::setw(12)
           << r.report.timbre_mean << std::setw(12) << r.report.pattern_mean
           << "\n";
    }
    return os.str();
}

}  // namespace

int cmd_ablate(const RunConfig& rc) {
    prepare_out_dir(rc);
    if (rc.ablate_mode == "layers") {
        require_calibration();
        // HAL blocks carry roughly twice the parameters of UFL blocks, so
        // variants pick block counts that hold the parameter budget even.
        const int units = 2 * rc.model.n_hal + rc.model.n_ufl;
        std::vector<std::pair<std::string, std::pair<int, int>>> variants = {
            {"hal_only", {(units + 1) / 2, 0}},
            {"ufl_only", {0, units}},
            {"both", {rc.model.n_hal, rc.model.n_ufl}},
        };
        std::vector<AblateRow> rows;
        for (const auto& [label, blocks] : variants) {
            RunConfig sub = rc;
            sub.model.n_hal = blocks.first;
            sub.model.n_ufl = blocks.second;
            sub.resume_path.clear();
            const std::string sub_dir = rc.out_dir + "/" + label;
            fs::create_directories(sub_dir);
            const TrainOutputs outs = run_training(sub, sub.model, sub_dir);
            auto [cfg, params] = load_checkpoint(outs.final_checkpoint);
            AblateRow row;
            row.label = label;
            row.cfg = cfg;
            row.params = params.total_elements();
            row.report = evaluate_model(cfg, params, eval_options(rc));
            rows.push_back(std::move(row));
        }
        write_text_file(rc.out_dir + "/ablation_layers.jsonl",
                        rows_to_jsonl(rows));
        const std::string table = rows_to_table(rows);
        write_text_file(rc.out_dir + "/ablation_layers.txt", table);
        std::cout << table;
        return 0;
    }
    if (rc.ablate_mode == "cfg") {
        require_calibration();
        if (rc.checkpoint_path.empty())
            throw ConfigError("ablate --mode cfg needs --ckpt PATH");
        auto [cfg, params] = load_checkpoint(rc.checkpoint_path);
        std::vector<double> grid;
        {
            std::istringstream is(rc.ablate_grid);
            std::string part;
            while (std::getline(is, part, ','))
                grid.push_back(std::stod(part));
        }
        if (grid.empty()) throw ConfigError("ablate.grid is empty");
        std::vector<AblateRow> rows;
        for (double value : grid) {
            EvalOptions opts = eval_options(rc);
            if (rc.ablate_sweep == "align")
                opts.scales.align = value;
            else
                opts.scales.timbre = value;
            AblateRow row;
            row.label = rc.ablate_sweep + "=" +
                        ([&] {
                            std::ostringstream os;
                            os << value;
                            return os.str();
                        })();
            row.cfg = cfg;
            row.params = params.total_elements();
            row.report = evaluate_model(cfg, params, opts);
            rows.push_back(std::move(row));
        }
        write_text_file(rc.out_dir + "/ablation_cfg.jsonl",
                        rows_to_jsonl(rows));
        const std::string table = rows_to_table(rows);
        write_text_file(rc.out_dir + "/ablation_cfg.txt", table);
        std::cout << table;
        return 0;
    }
    throw ConfigError("ablate mode must be 'layers' or 'cfg', got '" +
                      rc.ablate_mode + "'");
}

}  // namespace nava
