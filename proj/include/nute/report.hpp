#pragma once

// Reporting artifacts: the surviving-structure report (counts, parameter
// totals, achieved sparsity), the per-step metrics CSV, and the JSON run
// summary that echoes every configuration key (defaults included).

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "nute/config.hpp"
#include "nute/masks.hpp"
#include "nute/model_config.hpp"
#include "nute/trainer.hpp"

namespace nute {

namespace detail_report {

inline std::string fmt(double v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

inline int width_of(int64_t v) { return int(std::to_string(v).size()); }

}  // namespace detail_report

// Surviving structure of a binary-gated module. All counts are integers and
// the parameter totals follow the same arithmetic as the sparsity ratio, so
// achieved_sparsity is exact.
struct StructureReport {
    int64_t hidden_total = 0;
    int64_t hidden_kept = 0;
    std::vector<int64_t> heads_total;  // per layer
    std::vector<int64_t> heads_kept;
    std::vector<int64_t> int_total;
    std::vector<int64_t> int_kept;
    int64_t params_before = 0;  // maskable weights
    int64_t params_after = 0;

    real achieved_sparsity() const {
        return real(1) - real(double(params_after) / double(params_before));
    }
};

// Builds the report from the module's noise-free gates. Requires every gate
// to be exactly 0 or 1 (run binarize() first, or use freshly saturated
// gates); fractional gates have no defensible "count".
inline StructureReport structure_report(const MaskSet& masks, const ModelConfig& cfg) {
    NoGrad ng;
    MaskValues z = deterministic_masks(masks);
    auto bin = [](real v, const char* what) -> int64_t {
        if (v == real(0)) return 0;
        if (v == real(1)) return 1;
        throw train_error(std::string("structure_report: ") + what +
                          " gate is fractional; binarize the masks first");
    };

    StructureReport r;
    r.hidden_total = cfg.d;
    for (real v : z.hidden.val()) r.hidden_kept += bin(v, "hidden");

    r.heads_total.assign(size_t(cfg.L), cfg.n_head);
    r.int_total.assign(size_t(cfg.L), cfg.d_int);
    r.heads_kept.assign(size_t(cfg.L), 0);
    r.int_kept.assign(size_t(cfg.L), 0);
    const auto& zh = z.head.val();
    for (int64_t l = 0; l < cfg.L; ++l)
        for (int64_t h = 0; h < cfg.n_head; ++h)
            r.heads_kept[size_t(l)] += bin(zh[size_t(l * cfg.n_head + h)], "head");
    const auto& zi = z.intermediate.val();
    for (int64_t l = 0; l < cfg.L; ++l)
        for (int64_t k = 0; k < cfg.d_int; ++k)
            r.int_kept[size_t(l)] += bin(zi[size_t(l * cfg.d_int + k)], "intermediate");

    int64_t heads_sum = 0, int_sum = 0;
    for (int64_t v : r.heads_kept) heads_sum += v;
    for (int64_t v : r.int_kept) int_sum += v;
    r.params_before = maskable_param_count(cfg);
    r.params_after = (4 * cfg.d_h * heads_sum + 3 * int_sum) * r.hidden_kept;
    return r;
}

// Aligned text table.
inline std::string format_structure_report(const StructureReport& r) {
    const int wl = std::max(detail_report::width_of(int64_t(r.heads_kept.size()) - 1), 5);
    int wh = 1, wi = 1;
    for (size_t l = 0; l < r.heads_kept.size(); ++l) {
        wh = std::max(wh, detail_report::width_of(r.heads_total[l]));
        wi = std::max(wi, detail_report::width_of(r.int_total[l]));
    }
    char buf[192];
    std::string out;
    std::snprintf(buf, sizeof(buf), "hidden channels kept  %lld / %lld\n",
                  static_cast<long long>(r.hidden_kept), static_cast<long long>(r.hidden_total));
    out += buf;
    std::snprintf(buf, sizeof(buf), "%*s  %*s  %s\n", wl, "layer", 2 * wh + 3, "heads",
                  "intermediate");
    out += buf;
    for (size_t l = 0; l < r.heads_kept.size(); ++l) {
        std::snprintf(buf, sizeof(buf), "%*lld  %*lld / %*lld  %*lld / %*lld\n", wl,
                      static_cast<long long>(l), wh, static_cast<long long>(r.heads_kept[l]), wh,
                      static_cast<long long>(r.heads_total[l]), wi,
                      static_cast<long long>(r.int_kept[l]), wi,
                      static_cast<long long>(r.int_total[l]));
        out += buf;
    }
    std::snprintf(buf, sizeof(buf), "maskable parameters   %lld / %lld\n",
                  static_cast<long long>(r.params_after),
                  static_cast<long long>(r.params_before));
    out += buf;
    std::snprintf(buf, sizeof(buf), "achieved sparsity     %s\n",
                  detail_report::fmt(double(r.achieved_sparsity())).c_str());
    out += buf;
    return out;
}

// One row per layer; the whole-model columns repeat on every row so the file
// stays a single rectangular table.
inline void write_structure_csv(const StructureReport& r, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw io_error("cannot write structure csv: " + path.string());
    out << "layer,heads_kept,heads_total,int_kept,int_total,hidden_kept,hidden_total,"
           "params_before,params_after,achieved_sparsity\n";
    for (size_t l = 0; l < r.heads_kept.size(); ++l)
        out << l << ',' << r.heads_kept[l] << ',' << r.heads_total[l] << ',' << r.int_kept[l]
            << ',' << r.int_total[l] << ',' << r.hidden_kept << ',' << r.hidden_total << ','
            << r.params_before << ',' << r.params_after << ','
            << detail_report::fmt(double(r.achieved_sparsity())) << '\n';
    if (!out) throw io_error("failed writing structure csv: " + path.string());
}

// Fixed column order:
//   step, t_current, s_hat, teacher_key, kl, layer, l0, total, lambda1,
//   lambda2, eval_ppl (the last only when the run evaluated periodically).
// Numbers are written in shortest round-trip form, so re-parsing reproduces
// the logged values exactly.
inline void emit_metrics(const RunLog& log, const std::filesystem::path& path) {
    bool any_eval = false;
    for (const auto& row : log.rows) any_eval = any_eval || row.has_eval;
    std::ofstream out(path);
    if (!out) throw io_error("cannot write metrics csv: " + path.string());
    out << "step,t_current,s_hat,teacher_key,kl,layer,l0,total,lambda1,lambda2";
    if (any_eval) out << ",eval_ppl";
    out << '\n';
    for (const auto& row : log.rows) {
        out << row.step << ',' << detail_report::fmt(double(row.t_current)) << ','
            << detail_report::fmt(double(row.s_hat)) << ',' << row.teacher.str() << ','
            << detail_report::fmt(double(row.kl)) << ',' << detail_report::fmt(double(row.layer))
            << ',' << detail_report::fmt(double(row.l0)) << ','
            << detail_report::fmt(double(row.total)) << ','
            << detail_report::fmt(double(row.lambda1)) << ','
            << detail_report::fmt(double(row.lambda2));
        if (any_eval) {
            out << ',';
            if (row.has_eval) out << detail_report::fmt(row.eval_ppl);
        }
        out << '\n';
    }
    if (!out) throw io_error("failed writing metrics csv: " + path.string());
}

// Run summary: every configuration key (defaults included) plus the final
// state of the log, written as JSON.
inline void write_run_summary(const RunConfig& rc, const RunLog& log,
                              const std::filesystem::path& path) {
    nlohmann::json j;
    j["real"] = kRealName;
    nlohmann::json cfg = nlohmann::json::object();
    for (const auto& [k, v] : rc.items()) cfg[k] = v;
    j["config"] = cfg;
    j["steps"] = log.rows.size();
    j["incidents"] = log.incidents;
    if (!log.rows.empty()) {
        const auto& last = log.rows.back();
        j["final"] = {{"step", last.step},
                      {"t_current", double(last.t_current)},
                      {"s_hat", double(last.s_hat)},
                      {"teacher", last.teacher.str()},
                      {"kl", double(last.kl)},
                      {"layer", double(last.layer)},
                      {"l0", double(last.l0)},
                      {"total", double(last.total)},
                      {"lambda1", double(last.lambda1)},
                      {"lambda2", double(last.lambda2)}};
    }
    std::ofstream out(path);
    if (!out) throw io_error("cannot write run summary: " + path.string());
    out << j.dump(2) << '\n';
    if (!out) throw io_error("failed writing run summary: " + path.string());
}

}  // namespace nute
