#pragma once

// Progressive pruning schedule: linear sparsity warmup, gap-based teacher
// selection against the snapshot shelf, snapshot triggering at fixed sparsity
// intervals, and the stage-2 weak-to-strong teacher playlist.
//
// Sparsity levels are keyed in basis points (round(level * 10000)) so that
// key equality is integer equality; all schedule math happens on the integer
// grid k * interval.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <string>
#include <utility>
#include <vector>

#include "nute/common.hpp"

namespace nute {

inline int64_t to_basis_points(real level) {
    return int64_t(std::llround(double(level) * 10000.0));
}

struct TeacherRef {
    bool intact = true;
    int64_t key_bp = 0;  // sparsity level in basis points when !intact

    static TeacherRef Intact() { return TeacherRef{}; }
    static TeacherRef Snapshot(int64_t bp) { return TeacherRef{false, bp}; }

    real level() const { return intact ? real(0) : real(double(key_bp) / 10000.0); }

    std::string str() const {
        if (intact) return "INTACT";
        char buf[16];
        std::snprintf(buf, sizeof(buf), "%.4f", double(key_bp) / 10000.0);
        return buf;
    }

    bool operator==(const TeacherRef& o) const {
        return intact == o.intact && (intact || key_bp == o.key_bp);
    }
    bool operator!=(const TeacherRef& o) const { return !(*this == o); }
};

struct ScheduleConfig {
    real t = real(0.5);    // target sparsity
    real g = real(0.10);   // teacher-student sparsity gap
    real i = real(0.01);   // snapshot interval
    int64_t warmup_steps = 3000;
    int64_t stage2_steps = 2000;
    real final_period_fraction = real(0.25);

    int64_t interval_bp() const { return to_basis_points(i); }
    int64_t cap_bp() const { return to_basis_points(t - g); }  // strongest useful teacher

    void validate() const {
        if (!(t > 0 && t < 1)) throw config_error("schedule: target sparsity must be in (0,1)");
        if (!(i > 0 && i <= g && g < t))
            throw config_error("schedule: need 0 < i <= g < t, got i=" + std::to_string(double(i)) +
                               ", g=" + std::to_string(double(g)) + ", t=" + std::to_string(double(t)));
        if (warmup_steps < 0 || stage2_steps < 0)
            throw config_error("schedule: step counts must be nonnegative");
        if (final_period_fraction < 0 || final_period_fraction > 1)
            throw config_error("schedule: final period fraction must be in [0,1]");
        const int64_t bp = interval_bp();
        if (bp < 1 || std::abs(double(i) * 10000.0 - double(bp)) > 1e-6)
            throw config_error("schedule: interval must be a positive multiple of 0.0001");
    }
};

// Linear warmup of the sparsity target.
inline real target_at(int64_t step, const ScheduleConfig& cfg) {
    if (step < 0) throw config_error("target_at: negative step");
    if (step >= cfg.warmup_steps) return cfg.t;
    return cfg.t * real(step) / real(cfg.warmup_steps);
}

// Stage-1 teacher for a student at sparsity s_hat. The teacher at level k*i
// is responsible for students in [k*i + g, k*i + g + i); students below g + i
// belong to the intact model. When the wanted snapshot is missing, falls back
// to the nearest lower-sparsity snapshot (else the intact model) and reports
// the substitution through `warning`.
inline TeacherRef select_teacher_stage1(real s_hat, const ScheduleConfig& cfg,
                                        const std::vector<int64_t>& keys_bp,
                                        std::string* warning = nullptr) {
    if (s_hat < cfg.g + cfg.i) return TeacherRef::Intact();
    int64_t k = int64_t(std::floor(double(s_hat - cfg.g) / double(cfg.i) + 1e-9));
    if (k < 1) return TeacherRef::Intact();
    const int64_t want = k * cfg.interval_bp();
    int64_t best = -1;
    for (int64_t key : keys_bp)
        if (key <= want && key > best) best = key;
    if (best == want) return TeacherRef::Snapshot(want);
    if (warning != nullptr) {
        *warning = "teacher snapshot " + TeacherRef::Snapshot(want).str() +
                   " missing; using " +
                   (best > 0 ? TeacherRef::Snapshot(best).str() : std::string("INTACT"));
    }
    return best > 0 ? TeacherRef::Snapshot(best) : TeacherRef::Intact();
}

// Snapshot keys that become due when the student's sparsity moves from
// prev_s_hat to s_hat: every multiple of the interval that was reached or
// crossed, is not yet stored, and does not exceed the strongest useful
// teacher level (target - gap). Returned in increasing order.
inline std::vector<int64_t> snapshot_keys_due(real prev_s_hat, real s_hat,
                                              const ScheduleConfig& cfg,
                                              const std::vector<int64_t>& existing_bp) {
    std::vector<int64_t> due;
    if (!(s_hat > prev_s_hat)) return due;
    const int64_t ibp = cfg.interval_bp();
    int64_t k_lo = int64_t(std::floor(double(prev_s_hat) / double(cfg.i) + 1e-9)) + 1;
    int64_t k_hi = int64_t(std::floor(double(s_hat) / double(cfg.i) + 1e-9));
    k_lo = std::max<int64_t>(k_lo, 1);
    k_hi = std::min<int64_t>(k_hi, cfg.cap_bp() / ibp);
    for (int64_t k = k_lo; k <= k_hi; ++k) {
        const int64_t bp = k * ibp;
        if (std::find(existing_bp.begin(), existing_bp.end(), bp) == existing_bp.end())
            due.push_back(bp);
    }
    return due;
}

// Stage-2 replay: all stored teachers from weakest (highest sparsity) to
// strongest, equal shares of the non-final steps with the remainder going to
// the earliest entries, ending with the intact model for the final period.
inline std::vector<std::pair<TeacherRef, int64_t>> stage2_playlist(
    const std::vector<int64_t>& keys_bp, const ScheduleConfig& cfg) {
    cfg.validate();
    std::vector<std::pair<TeacherRef, int64_t>> out;
    std::vector<int64_t> keys = keys_bp;
    std::sort(keys.begin(), keys.end(), std::greater<int64_t>());
    if (keys.empty()) {
        out.emplace_back(TeacherRef::Intact(), cfg.stage2_steps);
        return out;
    }
    const int64_t final_steps =
        int64_t(std::llround(double(cfg.final_period_fraction) * double(cfg.stage2_steps)));
    const int64_t replay = cfg.stage2_steps - final_steps;
    const int64_t n = int64_t(keys.size());
    const int64_t share = replay / n;
    const int64_t rem = replay % n;
    for (int64_t j = 0; j < n; ++j)
        out.emplace_back(TeacherRef::Snapshot(keys[size_t(j)]), share + (j < rem ? 1 : 0));
    out.emplace_back(TeacherRef::Intact(), final_steps);
    return out;
}

}  // namespace nute
