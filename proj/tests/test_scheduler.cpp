#include <catch2/catch_amalgamated.hpp>
#include <cmath>
#include <set>
#include <string>
#include <vector>

#include "nute/scheduler.hpp"

using namespace nute;

namespace {

ScheduleConfig default_schedule() {
    ScheduleConfig cfg;
    cfg.t = real(0.5);
    cfg.g = real(0.10);
    cfg.i = real(0.01);
    cfg.warmup_steps = 4000;
    cfg.stage2_steps = 1000;
    cfg.final_period_fraction = real(0.25);
    return cfg;
}

// Every snapshot key the schedule could ever want.
std::vector<int64_t> full_shelf(const ScheduleConfig& cfg) {
    std::vector<int64_t> keys;
    for (int64_t bp = cfg.interval_bp(); bp <= cfg.cap_bp(); bp += cfg.interval_bp())
        keys.push_back(bp);
    return keys;
}

// Brute-force range membership: scan every teacher's half-open interval
// [k*i+g, k*i+g+i) plus the intact rule s < g+i, and count matches.
struct ScanResult {
    int matches = 0;
    TeacherRef ref;
};
ScanResult range_scan(double s, const ScheduleConfig& cfg) {
    ScanResult r;
    if (s < double(cfg.g) + double(cfg.i)) {
        r.matches++;
        r.ref = TeacherRef::Intact();
    }
    for (int64_t k = 1; k * cfg.interval_bp() <= 10000; ++k) {
        const double lo = double(k) * double(cfg.i) + double(cfg.g);
        if (s >= lo && s < lo + double(cfg.i)) {
            r.matches++;
            r.ref = TeacherRef::Snapshot(k * cfg.interval_bp());
        }
    }
    return r;
}

}  // namespace

TEST_CASE("sparsity target warms up linearly") {
    ScheduleConfig cfg = default_schedule();
    CHECK(target_at(0, cfg) == real(0));
    CHECK(target_at(1000, cfg) == real(0.125));
    CHECK(target_at(4000, cfg) == cfg.t);
    CHECK(target_at(9000, cfg) == cfg.t);
    cfg.warmup_steps = 0;
    CHECK(target_at(0, cfg) == cfg.t);
    CHECK_THROWS_AS(target_at(-1, cfg), config_error);
}

TEST_CASE("stage-1 selection follows the gap rule") {
    ScheduleConfig cfg = default_schedule();
    auto shelf = full_shelf(cfg);

    CHECK(select_teacher_stage1(real(0.05), cfg, shelf) == TeacherRef::Intact());
    CHECK(select_teacher_stage1(real(0.235), cfg, shelf) == TeacherRef::Snapshot(1300));

    // Boundary convention: exactly g+i belongs to the first snapshot teacher,
    // just below it to the intact model.
    CHECK(select_teacher_stage1(real(0.11), cfg, shelf) == TeacherRef::Snapshot(100));
    CHECK(select_teacher_stage1(real(0.109999), cfg, shelf) == TeacherRef::Intact());
}

TEST_CASE("stage-1 selection matches a brute-force range scan") {
    for (ScheduleConfig cfg : {default_schedule(), [] {
             ScheduleConfig c = default_schedule();
             c.g = real(0.20);
             c.i = real(0.10);
             c.t = real(0.7);
             return c;
         }()}) {
        auto shelf = full_shelf(cfg);
        Rng rng(99);
        for (int inst = 0; inst < 1000; ++inst) {
            const double s = uniform01(rng) * (double(cfg.t) - 1e-9);
            ScanResult scan = range_scan(s, cfg);
            REQUIRE(scan.matches == 1);  // the ranges partition (0, t)
            TeacherRef got = select_teacher_stage1(real(s), cfg, shelf);
            REQUIRE(got == scan.ref);
            if (!got.intact) {
                const double margin = s - double(got.level());
                REQUIRE(margin >= double(cfg.g) - 1e-9);
                REQUIRE(margin < double(cfg.g) + double(cfg.i) + 1e-9);
            }
        }
    }
}

TEST_CASE("missing snapshots fall back to the nearest lower level") {
    ScheduleConfig cfg = default_schedule();
    std::vector<int64_t> holey{100, 200, 400, 500};  // 0.03 missing... and above
    std::string warning;

    // Wants 0.13, has nothing above 0.05: nearest lower existing is 0.05.
    TeacherRef got = select_teacher_stage1(real(0.235), cfg, holey, &warning);
    CHECK(got == TeacherRef::Snapshot(500));
    CHECK(warning.find("0.1300") != std::string::npos);
    CHECK(warning.find("0.0500") != std::string::npos);

    warning.clear();
    TeacherRef none = select_teacher_stage1(real(0.235), cfg, {}, &warning);
    CHECK(none == TeacherRef::Intact());
    CHECK(warning.find("INTACT") != std::string::npos);

    // Exact hit produces no warning.
    warning.clear();
    CHECK(select_teacher_stage1(real(0.155), cfg, holey, &warning) ==
          TeacherRef::Snapshot(500));
    CHECK(warning.empty());
}

TEST_CASE("snapshot triggering fires once per crossed multiple") {
    ScheduleConfig cfg = default_schedule();
    std::vector<int64_t> store;

    auto due = snapshot_keys_due(real(0.009), real(0.011), cfg, store);
    CHECK(due == std::vector<int64_t>{100});
    store.insert(store.end(), due.begin(), due.end());

    CHECK(snapshot_keys_due(real(0.011), real(0.012), cfg, store).empty());

    due = snapshot_keys_due(real(0.019), real(0.032), cfg, store);
    CHECK(due == std::vector<int64_t>{200, 300});

    // Already-stored keys are not re-emitted, even when re-crossed.
    store = {100, 200, 300};
    CHECK(snapshot_keys_due(real(0.019), real(0.032), cfg, store).empty());

    // Nothing fires above target - gap: those teachers would never be asked for.
    CHECK(snapshot_keys_due(real(0.395), real(0.55), cfg, {}) ==
          std::vector<int64_t>{4000});

    // Flat or decreasing sparsity never fires.
    CHECK(snapshot_keys_due(real(0.25), real(0.25), cfg, {}).empty());
    CHECK(snapshot_keys_due(real(0.25), real(0.21), cfg, {}).empty());
}

TEST_CASE("coarse sparsity jumps collect the same keys as fine steps") {
    ScheduleConfig cfg = default_schedule();
    Rng rng(123);
    for (int inst = 0; inst < 20; ++inst) {
        // One rising trajectory, walked twice: in a few large jumps and in
        // many small ones. Both walks must bank the same snapshot keys.
        std::vector<double> waypoints{0.0};
        double s = 0;
        while (s < double(cfg.t)) {
            s += uniform01(rng) * 0.08;
            waypoints.push_back(std::min(s, double(cfg.t)));
        }

        std::vector<int64_t> coarse;
        for (size_t j = 1; j < waypoints.size(); ++j) {
            auto due = snapshot_keys_due(real(waypoints[j - 1]), real(waypoints[j]), cfg, coarse);
            coarse.insert(coarse.end(), due.begin(), due.end());
        }

        std::vector<int64_t> fine;
        for (size_t j = 1; j < waypoints.size(); ++j) {
            const double a = waypoints[j - 1], b = waypoints[j];
            for (int piece = 0; piece < 64; ++piece) {
                const double lo = a + (b - a) * piece / 64.0;
                const double hi = a + (b - a) * (piece + 1) / 64.0;
                auto due = snapshot_keys_due(real(lo), real(hi), cfg, fine);
                fine.insert(fine.end(), due.begin(), due.end());
            }
        }
        REQUIRE(coarse == fine);
        for (size_t j = 1; j < coarse.size(); ++j) REQUIRE(coarse[j - 1] < coarse[j]);
    }
}

TEST_CASE("stage-2 playlist replays teachers from weak to strong") {
    ScheduleConfig cfg = default_schedule();
    cfg.g = real(0.10);
    cfg.i = real(0.10);
    cfg.stage2_steps = 1000;
    cfg.final_period_fraction = real(0.2);

    auto playlist = stage2_playlist({1000, 2000, 3000, 4000}, cfg);
    REQUIRE(playlist.size() == 5);
    CHECK(playlist[0] == std::make_pair(TeacherRef::Snapshot(4000), int64_t(200)));
    CHECK(playlist[1] == std::make_pair(TeacherRef::Snapshot(3000), int64_t(200)));
    CHECK(playlist[2] == std::make_pair(TeacherRef::Snapshot(2000), int64_t(200)));
    CHECK(playlist[3] == std::make_pair(TeacherRef::Snapshot(1000), int64_t(200)));
    CHECK(playlist[4] == std::make_pair(TeacherRef::Intact(), int64_t(200)));

    cfg.stage2_steps = 100;
    cfg.final_period_fraction = real(0.5);
    auto single = stage2_playlist({1000}, cfg);
    REQUIRE(single.size() == 2);
    CHECK(single[0] == std::make_pair(TeacherRef::Snapshot(1000), int64_t(50)));
    CHECK(single[1] == std::make_pair(TeacherRef::Intact(), int64_t(50)));

    auto empty = stage2_playlist({}, cfg);
    REQUIRE(empty.size() == 1);
    CHECK(empty[0] == std::make_pair(TeacherRef::Intact(), int64_t(100)));
}

TEST_CASE("playlist step counts always sum to the stage-2 budget") {
    Rng rng(321);
    for (int inst = 0; inst < 200; ++inst) {
        ScheduleConfig cfg = default_schedule();
        cfg.i = real(0.01) * real(1 + int(uniform01(rng) * 5));
        cfg.g = cfg.i * real(1 + int(uniform01(rng) * 3));
        cfg.t = cfg.g + real(0.05) + real(uniform01(rng) * 0.3);
        if (cfg.t >= 1) cfg.t = real(0.95);
        cfg.stage2_steps = int64_t(uniform01(rng) * 2000);
        cfg.final_period_fraction = real(uniform01(rng));
        cfg.validate();

        std::vector<int64_t> keys;
        for (int64_t bp = cfg.interval_bp(); bp <= cfg.cap_bp(); bp += cfg.interval_bp())
            if (uniform01(rng) < 0.8) keys.push_back(bp);

        auto playlist = stage2_playlist(keys, cfg);
        int64_t total = 0;
        for (const auto& [ref, steps] : playlist) {
            REQUIRE(steps >= 0);
            total += steps;
        }
        REQUIRE(total == cfg.stage2_steps);
        REQUIRE(playlist.back().first == TeacherRef::Intact());
        for (size_t j = 1; j + 1 < playlist.size(); ++j)
            REQUIRE(playlist[j - 1].first.key_bp > playlist[j].first.key_bp);
    }
}

TEST_CASE("schedule configuration is validated") {
    ScheduleConfig cfg = default_schedule();
    cfg.validate();

    ScheduleConfig bad = cfg;
    bad.i = real(0.2);  // interval > gap
    CHECK_THROWS_AS(bad.validate(), config_error);

    bad = cfg;
    bad.g = real(0.6);  // gap >= target
    CHECK_THROWS_AS(bad.validate(), config_error);

    bad = cfg;
    bad.t = real(1.2);
    CHECK_THROWS_AS(bad.validate(), config_error);

    bad = cfg;
    bad.final_period_fraction = real(1.5);
    CHECK_THROWS_AS(bad.validate(), config_error);

    bad = cfg;
    bad.i = real(0.000037);  // off the basis-point grid
    CHECK_THROWS_AS(bad.validate(), config_error);

    CHECK(TeacherRef::Snapshot(1300).str() == "0.1300");
    CHECK(TeacherRef::Intact().str() == "INTACT");
}
