#pragma once

// Run configuration: one flat key = value namespace merging the model,
// training, schedule and distillation settings with artifact paths. A single
// set(key, value) path serves both the config-file parser and command-line
// overrides, so precedence is purely "last write wins" and every key is
// echoed back (defaults included) for reproducible run summaries.

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "nute/common.hpp"
#include "nute/distill.hpp"
#include "nute/model_config.hpp"
#include "nute/scheduler.hpp"
#include "nute/trainer.hpp"

namespace nute {

struct RunConfig {
    ModelConfig model;
    TrainConfig train;
    ScheduleConfig schedule;
    DistillConfig distill;

    // Artifact locations. `corpus` has no default: every verb that trains or
    // evaluates needs real input bytes.
    std::string corpus_path;
    std::string base_path = "base.nute";
    std::string module_path = "module.nute";
    std::string store_dir = "snapshots";
    std::string csv_path = "runlog.csv";
    std::string sliced_path = "sliced.nute";
    std::string summary_path = "run_summary.json";
    std::string structure_csv_path = "structure.csv";

    real split = real(0.9);          // train fraction of the corpus
    int64_t pretrain_steps = 2000;   // steps for the pretrain verb

    void set(const std::string& key, const std::string& value);
    std::string get(const std::string& key) const;
    std::vector<std::pair<std::string, std::string>> items() const;
    void validate() const;
};

namespace detail_config {

inline std::string format_int(int64_t v) { return std::to_string(v); }

inline std::string format_real(real v) {
    // Shortest representation that parses back to the same value.
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof(buf), double(v));
    return std::string(buf, res.ptr);
}

inline int64_t parse_int(const std::string& key, const std::string& v) {
    int64_t out = 0;
    auto res = std::from_chars(v.data(), v.data() + v.size(), out);
    if (res.ec != std::errc{} || res.ptr != v.data() + v.size())
        throw config_error("config key '" + key + "': expected an integer, got '" + v + "'");
    return out;
}

inline uint64_t parse_uint(const std::string& key, const std::string& v) {
    uint64_t out = 0;
    auto res = std::from_chars(v.data(), v.data() + v.size(), out);
    if (res.ec != std::errc{} || res.ptr != v.data() + v.size())
        throw config_error("config key '" + key + "': expected a nonnegative integer, got '" +
                           v + "'");
    return out;
}

inline real parse_real(const std::string& key, const std::string& v) {
    try {
        size_t pos = 0;
        double out = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return real(out);
    } catch (const std::exception&) {
        throw config_error("config key '" + key + "': expected a number, got '" + v + "'");
    }
}

inline bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1" || v == "on") return true;
    if (v == "false" || v == "0" || v == "off") return false;
    throw config_error("config key '" + key + "': expected true/false, got '" + v + "'");
}

struct Key {
    const char* name;
    std::function<std::string(const RunConfig&)> get;
    std::function<void(RunConfig&, const std::string&)> set;
};

inline const std::vector<Key>& key_table() {
    static const std::vector<Key> table = [] {
        std::vector<Key> t;
        auto add_int = [&t](const char* n, auto get_ref) {
            t.push_back({n,
                         [get_ref](const RunConfig& rc) {
                             return format_int(get_ref(const_cast<RunConfig&>(rc)));
                         },
                         [n, get_ref](RunConfig& rc, const std::string& v) {
                             get_ref(rc) = parse_int(n, v);
                         }});
        };
        auto add_real = [&t](const char* n, auto get_ref) {
            t.push_back({n,
                         [get_ref](const RunConfig& rc) {
                             return format_real(get_ref(const_cast<RunConfig&>(rc)));
                         },
                         [n, get_ref](RunConfig& rc, const std::string& v) {
                             get_ref(rc) = parse_real(n, v);
                         }});
        };
        auto add_bool = [&t](const char* n, auto get_ref) {
            t.push_back({n,
                         [get_ref](const RunConfig& rc) {
                             return get_ref(const_cast<RunConfig&>(rc)) ? std::string("true")
                                                                        : std::string("false");
                         },
                         [n, get_ref](RunConfig& rc, const std::string& v) {
                             get_ref(rc) = parse_bool(n, v);
                         }});
        };
        auto add_str = [&t](const char* n, auto get_ref) {
            t.push_back({n,
                         [get_ref](const RunConfig& rc) {
                             return get_ref(const_cast<RunConfig&>(rc));
                         },
                         [get_ref](RunConfig& rc, const std::string& v) { get_ref(rc) = v; }});
        };

        // Model structure.
        add_int("L", [](RunConfig& rc) -> int64_t& { return rc.model.L; });
        add_int("d", [](RunConfig& rc) -> int64_t& { return rc.model.d; });
        add_int("n_head", [](RunConfig& rc) -> int64_t& { return rc.model.n_head; });
        add_int("d_h", [](RunConfig& rc) -> int64_t& { return rc.model.d_h; });
        add_int("d_int", [](RunConfig& rc) -> int64_t& { return rc.model.d_int; });
        add_int("V", [](RunConfig& rc) -> int64_t& { return rc.model.V; });
        add_int("context_len", [](RunConfig& rc) -> int64_t& { return rc.model.context_len; });

        // Schedule.
        add_real("t", [](RunConfig& rc) -> real& { return rc.schedule.t; });
        add_real("g", [](RunConfig& rc) -> real& { return rc.schedule.g; });
        add_real("i", [](RunConfig& rc) -> real& { return rc.schedule.i; });
        add_int("warmup_steps", [](RunConfig& rc) -> int64_t& { return rc.schedule.warmup_steps; });
        add_int("stage2_steps", [](RunConfig& rc) -> int64_t& { return rc.schedule.stage2_steps; });
        add_real("final_period_fraction",
                 [](RunConfig& rc) -> real& { return rc.schedule.final_period_fraction; });

        // Training.
        add_real("lr_mask", [](RunConfig& rc) -> real& { return rc.train.lr_mask; });
        add_real("lr_lora", [](RunConfig& rc) -> real& { return rc.train.lr_lora; });
        add_int("batch_size", [](RunConfig& rc) -> int64_t& { return rc.train.batch_size; });
        add_int("seq_len", [](RunConfig& rc) -> int64_t& { return rc.train.seq_len; });
        add_int("prune_steps", [](RunConfig& rc) -> int64_t& { return rc.train.prune_steps; });
        add_int("ft_steps", [](RunConfig& rc) -> int64_t& { return rc.train.ft_steps; });
        add_real("beta1", [](RunConfig& rc) -> real& { return rc.train.beta1; });
        add_real("beta2", [](RunConfig& rc) -> real& { return rc.train.beta2; });
        add_real("eps", [](RunConfig& rc) -> real& { return rc.train.eps; });
        add_real("weight_decay", [](RunConfig& rc) -> real& { return rc.train.weight_decay; });
        add_real("clip_norm", [](RunConfig& rc) -> real& { return rc.train.clip_norm; });
        t.push_back({"seed",
                     [](const RunConfig& rc) { return std::to_string(rc.train.seed); },
                     [](RunConfig& rc, const std::string& v) {
                         rc.train.seed = parse_uint("seed", v);
                     }});
        add_int("eval_every", [](RunConfig& rc) -> int64_t& { return rc.train.eval_every; });
        add_int("lora_rank", [](RunConfig& rc) -> int64_t& { return rc.train.lora_rank; });
        add_real("logalpha0", [](RunConfig& rc) -> real& { return rc.train.logalpha0; });

        // Ablation switches.
        add_bool("no_kd", [](RunConfig& rc) -> bool& { return rc.train.no_kd; });
        add_bool("no_progressive",
                 [](RunConfig& rc) -> bool& { return rc.train.no_progressive; });
        add_bool("no_layer_loss",
                 [](RunConfig& rc) -> bool& { return rc.train.no_layer_loss; });
        add_bool("masks_only", [](RunConfig& rc) -> bool& { return rc.train.masks_only; });

        // Distillation.
        add_real("alpha1", [](RunConfig& rc) -> real& { return rc.distill.alpha1; });
        add_real("alpha2", [](RunConfig& rc) -> real& { return rc.distill.alpha2; });
        t.push_back({"kl_direction",
                     [](const RunConfig& rc) {
                         return rc.distill.direction == KlDirection::kStudentFirst
                                    ? std::string("student_first")
                                    : std::string("teacher_first");
                     },
                     [](RunConfig& rc, const std::string& v) {
                         if (v == "student_first")
                             rc.distill.direction = KlDirection::kStudentFirst;
                         else if (v == "teacher_first")
                             rc.distill.direction = KlDirection::kTeacherFirst;
                         else
                             throw config_error(
                                 "config key 'kl_direction': expected student_first or "
                                 "teacher_first, got '" +
                                 v + "'");
                     }});

        // Artifacts and corpus handling.
        add_str("corpus", [](RunConfig& rc) -> std::string& { return rc.corpus_path; });
        add_str("base", [](RunConfig& rc) -> std::string& { return rc.base_path; });
        add_str("module", [](RunConfig& rc) -> std::string& { return rc.module_path; });
        add_str("store", [](RunConfig& rc) -> std::string& { return rc.store_dir; });
        add_str("csv", [](RunConfig& rc) -> std::string& { return rc.csv_path; });
        add_str("sliced", [](RunConfig& rc) -> std::string& { return rc.sliced_path; });
        add_str("summary", [](RunConfig& rc) -> std::string& { return rc.summary_path; });
        add_str("structure_csv",
                [](RunConfig& rc) -> std::string& { return rc.structure_csv_path; });
        add_real("split", [](RunConfig& rc) -> real& { return rc.split; });
        add_int("pretrain_steps", [](RunConfig& rc) -> int64_t& { return rc.pretrain_steps; });
        return t;
    }();
    return table;
}

inline std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

}  // namespace detail_config

inline void RunConfig::set(const std::string& key, const std::string& value) {
    for (const auto& k : detail_config::key_table())
        if (key == k.name) {
            k.set(*this, value);
            return;
        }
    throw config_error("unknown config key '" + key + "'");
}

inline std::string RunConfig::get(const std::string& key) const {
    for (const auto& k : detail_config::key_table())
        if (key == k.name) return k.get(*this);
    throw config_error("unknown config key '" + key + "'");
}

inline std::vector<std::pair<std::string, std::string>> RunConfig::items() const {
    std::vector<std::pair<std::string, std::string>> out;
    for (const auto& k : detail_config::key_table()) out.emplace_back(k.name, k.get(*this));
    return out;
}

inline void RunConfig::validate() const {
    model.validate();
    train.validate();
    schedule.validate();
    distill.validate();
    if (train.prune_steps != schedule.warmup_steps + schedule.stage2_steps)
        throw config_error("config: prune_steps (" + std::to_string(train.prune_steps) +
                           ") must equal warmup_steps + stage2_steps (" +
                           std::to_string(schedule.warmup_steps + schedule.stage2_steps) + ")");
    if (!(split > 0 && split <= 1))
        throw config_error("config key 'split': train fraction must be in (0,1], got " +
                           detail_config::format_real(split));
    if (pretrain_steps < 0) throw config_error("config key 'pretrain_steps': must be nonnegative");
}

// Key = value lines, '#' starts a comment, blank lines ignored. Later lines
// override earlier ones; `overrides` (already split into key/value pairs, the
// command-line flags) are applied after the file and win. The result is fully
// validated.
inline RunConfig parse_config(const std::filesystem::path& file,
                              const std::vector<std::pair<std::string, std::string>>& overrides =
                                  {}) {
    RunConfig rc;
    if (!file.empty()) {
        std::ifstream in(file);
        if (!in) throw config_error("config file not readable: " + file.string());
        std::string line;
        int lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            const size_t hash = line.find('#');
            if (hash != std::string::npos) line.erase(hash);
            line = detail_config::trim(line);
            if (line.empty()) continue;
            const size_t eq = line.find('=');
            if (eq == std::string::npos)
                throw config_error(file.string() + ":" + std::to_string(lineno) +
                                   ": expected 'key = value'");
            const std::string key = detail_config::trim(line.substr(0, eq));
            const std::string value = detail_config::trim(line.substr(eq + 1));
            if (key.empty())
                throw config_error(file.string() + ":" + std::to_string(lineno) +
                                   ": empty key before '='");
            rc.set(key, value);
        }
    }
    for (const auto& [k, v] : overrides) rc.set(k, v);
    rc.validate();
    return rc;
}

// Splits command-line tokens of the form --key value into override pairs.
inline std::vector<std::pair<std::string, std::string>> flag_pairs(
    const std::vector<std::string>& args) {
    std::vector<std::pair<std::string, std::string>> out;
    for (size_t i = 0; i < args.size(); ++i) {
        const std::string& a = args[i];
        if (a.rfind("--", 0) != 0 || a.size() <= 2)
            throw config_error("expected a --key flag, got '" + a + "'");
        if (i + 1 >= args.size()) throw config_error("flag '" + a + "' is missing its value");
        out.emplace_back(a.substr(2), args[++i]);
    }
    return out;
}

}  // namespace nute
