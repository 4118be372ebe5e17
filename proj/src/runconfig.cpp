#include "nava/runconfig.hpp"

#include <filesystem>
#include <fstream>
#include <sstream>

#include "nava/errors.hpp"

namespace nava {

namespace {

int64_t to_i64(const std::string& key, const std::string& v) {
    try {
        size_t pos = 0;
        const int64_t x = std::stoll(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return x;
    } catch (const std::exception&) {
        throw ConfigError("config key " + key + ": bad integer '" + v + "'");
    }
}

uint64_t to_u64(const std::string& key, const std::string& v) {
    try {
        size_t pos = 0;
        const uint64_t x = std::stoull(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return x;
    } catch (const std::exception&) {
        throw ConfigError("config key " + key + ": bad integer '" + v + "'");
    }
}

double to_f64(const std::string& key, const std::string& v) {
    try {
        size_t pos = 0;
        const double x = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return x;
    } catch (const std::exception&) {
        throw ConfigError("config key " + key + ": bad number '" + v + "'");
    }
}

bool to_bool(const std::string& key, const std::string& v) {
    if (v == "1" || v == "true") return true;
    if (v == "0" || v == "false") return false;
    throw ConfigError("config key " + key + ": bad boolean '" + v + "'");
}

}  // namespace

GuidanceScales parse_scales(const std::string& text) {
    GuidanceScales s;
    std::istringstream is(text);
    std::string part;
    std::vector<double> vals;
    while (std::getline(is, part, ','))
        vals.push_back(to_f64("scales", part));
    if (vals.size() != 3)
        throw ConfigError("scales must be three comma-separated values "
                          "(text,align,timbre), got '" + text + "'");
    s.text = vals[0];
    s.align = vals[1];
    s.timbre = vals[2];
    s.validate();
    return s;
}

void RunConfig::set(const std::string& key, const std::string& value) {
    if (key == "model.n_hal") model.n_hal = static_cast<int>(to_i64(key, value));
    else if (key == "model.n_ufl") model.n_ufl = static_cast<int>(to_i64(key, value));
    else if (key == "model.d_model") model.d_model = static_cast<int>(to_i64(key, value));
    else if (key == "model.n_heads") model.n_heads = static_cast<int>(to_i64(key, value));
    else if (key == "model.d_c") model.d_c = static_cast<int>(to_i64(key, value));
    else if (key == "model.d_ff") model.d_ff = static_cast<int>(to_i64(key, value));
    else if (key == "model.d_etim") model.d_etim = static_cast<int>(to_i64(key, value));
    else if (key == "model.max_ctx") model.max_ctx = static_cast<int>(to_i64(key, value));
    else if (key == "model.rope_base") model.rope_base = to_f64(key, value);
    else if (key == "model.mask_ufl") model.mask_ufl = to_bool(key, value);
    else if (key == "model.topology") {
        if (value == "nava") model.topology = Topology::Nava;
        else if (value == "fully_unified") model.topology = Topology::FullyUnified;
        else throw ConfigError("config key model.topology: unknown value '" + value + "'");
    }
    else if (key == "data.train_clips") train_clips = to_i64(key, value);
    else if (key == "data.val_clips") val_clips = to_i64(key, value);
    else if (key == "data.train_seed_start") train_seed_start = to_u64(key, value);
    else if (key == "data.val_seed_start") val_seed_start = to_u64(key, value);
    else if (key == "data.eval_seed_start") eval_seed_start = to_u64(key, value);
    else if (key == "data.speech_frac") speech_frac = to_f64(key, value);
    else if (key == "data.dur_min") dur_min = static_cast<int>(to_i64(key, value));
    else if (key == "data.dur_max") dur_max = static_cast<int>(to_i64(key, value));
    else if (key == "train.steps") train.steps = to_i64(key, value);
    else if (key == "train.batch_size") train.batch_size = static_cast<int>(to_i64(key, value));
    else if (key == "train.lr") train.lr = to_f64(key, value);
    else if (key == "train.beta1") train.beta1 = to_f64(key, value);
    else if (key == "train.beta2") train.beta2 = to_f64(key, value);
    else if (key == "train.adam_eps") train.adam_eps = to_f64(key, value);
    else if (key == "train.weight_decay") train.weight_decay = to_f64(key, value);
    else if (key == "train.drop_cross_prob") train.drop_cross_prob = to_f64(key, value);
    else if (key == "train.drop_timbre_prob") train.drop_timbre_prob = to_f64(key, value);
    else if (key == "train.drop_text_prob") train.drop_text_prob = to_f64(key, value);
    else if (key == "train.image_cond_prob") train.image_cond_prob = to_f64(key, value);
    else if (key == "train.stages") stages_text = value;
    else if (key == "train.checkpoint_every") checkpoint_every = to_i64(key, value);
    else if (key == "train.data") train_data = value;
    else if (key == "sample.steps") sample_steps = static_cast<int>(to_i64(key, value));
    else if (key == "sample.duration") sample_duration = static_cast<int>(to_i64(key, value));
    else if (key == "eval.n_clips") eval_n_clips = static_cast<int>(to_i64(key, value));
    else if (key == "eval.steps") eval_steps = static_cast<int>(to_i64(key, value));
    else if (key == "ablate.sweep") ablate_sweep = value;
    else if (key == "ablate.grid") ablate_grid = value;
    else if (key == "seed") seed = to_u64(key, value);
    else throw ConfigError("unknown config key: " + key);
}

void RunConfig::finalize() {
    if (cli_seed) seed = *cli_seed;
    if (cli_steps) train.steps = *cli_steps;
    if (cli_n_clips) eval_n_clips = *cli_n_clips;
    train.seed = seed;
    train.stages = parse_stages(stages_text, train.steps);
    model.validate();
    train.validate();
    if (speech_frac < 0.0 || speech_frac > 1.0)
        throw ConfigError("data.speech_frac must lie in [0,1]");
    if (dur_min < 1 || dur_max < dur_min)
        throw ConfigError("bad data duration range");
    if (train_clips < 0 || val_clips < 0)
        throw ConfigError("clip counts must be >= 0");
    if (sample_steps < 1 || eval_steps < 1)
        throw ConfigError("sampling step counts must be >= 1");
    if (ablate_sweep != "align" && ablate_sweep != "timbre")
        throw ConfigError("ablate.sweep must be 'align' or 'timbre'");
}

std::string RunConfig::resolved_text() const {
    std::ostringstream os;
    os.precision(17);
    os << "ablate.grid=" << ablate_grid << "\n"
       << "ablate.sweep=" << ablate_sweep << "\n"
       << "data.dur_max=" << dur_max << "\n"
       << "data.dur_min=" << dur_min << "\n"
       << "data.eval_seed_start=" << eval_seed_start << "\n"
       << "data.speech_frac=" << speech_frac << "\n"
       << "data.train_clips=" << train_clips << "\n"
       << "data.train_seed_start=" << train_seed_start << "\n"
       << "data.val_clips=" << val_clips << "\n"
       << "data.val_seed_start=" << val_seed_start << "\n"
       << "eval.n_clips=" << eval_n_clips << "\n"
       << "eval.steps=" << eval_steps << "\n"
       << "model.d_c=" << model.d_c << "\n"
       << "model.d_etim=" << model.d_etim << "\n"
       << "model.d_ff=" << model.d_ff << "\n"
       << "model.d_model=" << model.d_model << "\n"
       << "model.mask_ufl=" << (model.mask_ufl ? 1 : 0) << "\n"
       << "model.max_ctx=" << model.max_ctx << "\n"
       << "model.n_hal=" << model.n_hal << "\n"
       << "model.n_heads=" << model.n_heads << "\n"
       << "model.n_ufl=" << model.n_ufl << "\n"
       << "model.rope_base=" << model.rope_base << "\n"
       << "model.topology="
       << (model.topology == Topology::Nava ? "nava" : "fully_unified") << "\n"
       << "sample.duration=" << sample_duration << "\n"
       << "sample.steps=" << sample_steps << "\n"
       << "seed=" << seed << "\n"
       << "train.adam_eps=" << train.adam_eps << "\n"
       << "train.batch_size=" << train.batch_size << "\n"
       << "train.beta1=" << train.beta1 << "\n"
       << "train.beta2=" << train.beta2 << "\n"
       << "train.checkpoint_every=" << checkpoint_every << "\n"
       << "train.data=" << train_data << "\n"
       << "train.drop_cross_prob=" << train.drop_cross_prob << "\n"
       << "train.drop_text_prob=" << train.drop_text_prob << "\n"
       << "train.drop_timbre_prob=" << train.drop_timbre_prob << "\n"
       << "train.image_cond_prob=" << train.image_cond_prob << "\n"
       << "train.lr=" << train.lr << "\n"
       << "train.stages=" << stages_text << "\n"
       << "train.steps=" << train.steps << "\n"
       << "train.weight_decay=" << train.weight_decay << "\n";
    return os.str();
}

RunConfig load_run_config(const std::string& path_or_empty,
                          const std::vector<std::string>& overrides) {
    RunConfig rc;
    if (!path_or_empty.empty()) {
        std::ifstream f(path_or_empty);
        if (!f) throw IoError("cannot open config file: " + path_or_empty);
        std::string line;
        int lineno = 0;
        while (std::getline(f, line)) {
            ++lineno;
            const size_t hash = line.find('#');
            if (hash != std::string::npos) line = line.substr(0, hash);
            // trim
            const size_t b = line.find_first_not_of(" \t\r");
            if (b == std::string::npos) continue;
            const size_t e = line.find_last_not_of(" \t\r");
            line = line.substr(b, e - b + 1);
            const size_t eq = line.find('=');
            if (eq == std::string::npos)
                throw ConfigError(path_or_empty + ":" + std::to_string(lineno) +
                                  ": expected key=value, got '" + line + "'");
            rc.set(line.substr(0, eq), line.substr(eq + 1));
        }
    }
    for (const std::string& ov : overrides) {
        const size_t eq = ov.find('=');
        if (eq == std::string::npos)
            throw ConfigError("override must be key=value, got '" + ov + "'");
        rc.set(ov.substr(0, eq), ov.substr(eq + 1));
    }
    return rc;
}

void write_text_file(const std::string& path, const std::string& text) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw IoError("cannot open for writing: " + path);
    f << text;
    if (!f) throw IoError("write failed: " + path);
}

std::string read_text_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open: " + path);
    std::ostringstream os;
    os << f.rdbuf();
    return os.str();
}

}  // namespace nava
