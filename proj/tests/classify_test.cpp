#include <doctest.h>

#include <cmath>
#include <fstream>

#include "cribwatch/bench.hpp"
#include "cribwatch/classify.hpp"
#include "cribwatch/detect.hpp"
#include "test_support.hpp"

using namespace cribwatch;
using namespace cribwatch::classify;

namespace {

detect::RoiTensor roi_with_gt(const std::string& gt) {
    detect::RoiTensor roi;
    roi.data.assign(std::size_t(detect::kRoiSize) * detect::kRoiSize * 3, 0.5f);
    roi.frame_index = 0;
    roi.source_box = {10, 10, 32, 32, 1.0};
    if (!gt.empty()) roi.ground_truth = gt;
    return roi;
}

// Exhaustive grid oracle over (a, b); platt_fit must do at least this well.
double grid_best_nll(std::span<const std::pair<double, int>> pairs) {
    double best = std::numeric_limits<double>::infinity();
    for (double a = -10.0; a <= 10.0; a += 0.5) {
        for (double b = -10.0; b <= 10.0; b += 0.5) {
            best = std::min(best, platt_nll(pairs, {a, b}));
        }
    }
    return best;
}

} // namespace

TEST_CASE("platt_apply fixed points") {
    CHECK(platt_apply(0.0, {1.0, 0.0}) == 0.5); // exact: 1/(1+exp(0))
    CHECK(platt_apply(50.0, {1.0, 0.0}) > 0.999999);
    CHECK(platt_apply(-50.0, {1.0, 0.0}) < 1e-6);
    // sigma(2*1 - 1) = sigma(1)
    CHECK(platt_apply(1.0, {2.0, -1.0}) == doctest::Approx(0.7310585786300049).epsilon(1e-12));
}

TEST_CASE("platt_apply is strictly monotone for positive slope") {
    SplitMix64 rng(321);
    for (int i = 0; i < 500; ++i) {
        double a = 0.01 + rng.next_unit() * 5.0;
        double b = (rng.next_unit() - 0.5) * 8.0;
        double z1 = (rng.next_unit() - 0.5) * 20.0;
        double z2 = z1 + 1e-6 + rng.next_unit() * 10.0;
        CHECK(platt_apply(z1, {a, b}) < platt_apply(z2, {a, b}));
    }
}

TEST_CASE("platt_fit on separable data: steep positive slope, beats the grid oracle") {
    std::vector<std::pair<double, int>> pairs;
    for (int i = 0; i < 50; ++i) {
        pairs.emplace_back(-1.0, 0);
        pairs.emplace_back(+1.0, 1);
    }
    auto p = platt_fit(pairs);
    CHECK(p.a > 0.0);
    CHECK(platt_apply(1.0, p) > 0.9);
    CHECK(platt_nll(pairs, p) <= grid_best_nll(pairs) + 1e-3);
}

TEST_CASE("platt_fit on label noise: slope near zero") {
    SplitMix64 rng(1234);
    std::vector<std::pair<double, int>> pairs;
    for (int i = 0; i < 800; ++i) {
        double z = (rng.next_unit() - 0.5) * 6.0;
        int y = rng.next() & 1; // independent of z
        pairs.emplace_back(z, y);
    }
    auto p = platt_fit(pairs);
    CHECK(std::abs(p.a) <= 0.2);
    CHECK(platt_nll(pairs, p) <= grid_best_nll(pairs) + 1e-3);
}

TEST_CASE("platt_fit on noisy separable data matches the grid oracle") {
    SplitMix64 rng(99);
    std::vector<std::pair<double, int>> pairs;
    for (int i = 0; i < 400; ++i) {
        double z = (rng.next_unit() - 0.5) * 4.0;
        double p_true = 1.0 / (1.0 + std::exp(-(1.7 * z - 0.4)));
        pairs.emplace_back(z, rng.next_unit() < p_true ? 1 : 0);
    }
    auto p = platt_fit(pairs);
    CHECK(platt_nll(pairs, p) <= grid_best_nll(pairs) + 1e-3);
    CHECK(p.a == doctest::Approx(1.7).epsilon(0.35)); // loose: finite-sample recovery
}

TEST_CASE("platt_fit error paths") {
    std::vector<std::pair<double, int>> one_class = {{0.5, 1}, {1.0, 1}, {-2.0, 1}};
    try {
        platt_fit(one_class);
        FAIL("expected degenerate_data");
    } catch (const Error& e) {
        CHECK(e.code() == errc::degenerate_data);
    }

    std::vector<std::pair<double, int>> non_finite = {
        {std::numeric_limits<double>::infinity(), 1}, {0.0, 0}};
    try {
        platt_fit(non_finite);
        FAIL("expected non_finite");
    } catch (const Error& e) {
        CHECK(e.code() == errc::non_finite);
    }

    std::vector<std::pair<double, int>> too_few = {{0.0, 1}};
    CHECK_THROWS_AS(platt_fit(too_few), Error);
}

TEST_CASE("calibrated vector sums to one and argmax is the label") {
    auto task = task_by_name("cry_normal");
    SplitMix64 rng(4);
    auto oracle = make_oracle_backend({0.35, 11});
    for (int i = 0; i < 200; ++i) {
        auto roi = roi_with_gt(rng.next() & 1 ? "crying" : "normal");
        roi.frame_index = i;
        auto pred = classify::classify(*oracle, roi, task);
        double sum = pred.calibrated[0] + pred.calibrated[1];
        CHECK(std::abs(sum - 1.0) <= 1e-6);
        std::size_t best = pred.calibrated[0] >= pred.calibrated[1] ? 0 : 1;
        CHECK(pred.label == task.labels[best]);
        CHECK(pred.confidence == std::max(pred.calibrated[0], pred.calibrated[1]));
    }
}

TEST_CASE("identity Platt parameters reproduce raw probabilities") {
    auto task = task_by_name("cry_normal");
    RawScores raw{{0.3, 0.7}, true};
    auto cal = calibrate_scores(raw, task, {1.0, 0.0});
    CHECK(cal[1] == doctest::Approx(0.7).epsilon(1e-9));
    CHECK(cal[0] == doctest::Approx(0.3).epsilon(1e-9));

    RawScores logits{{2.0, -1.0}, false};
    auto cal2 = calibrate_scores(logits, task, {1.0, 0.0});
    CHECK(cal2[1] == doctest::Approx(1.0 / (1.0 + std::exp(3.0))).epsilon(1e-9));
}

TEST_CASE("oracle backend with zero noise always agrees with ground truth") {
    auto task = task_by_name("sleep_awake");
    auto backend = make_oracle_backend({0.0, 0});
    for (int i = 0; i < 100; ++i) {
        auto roi = roi_with_gt(i % 2 ? "sleep" : "awake");
        roi.frame_index = i;
        auto pred = classify::classify(*backend, roi, task);
        CHECK(pred.label == *roi.ground_truth);
        CHECK(pred.confidence >= 0.99);
    }
}

TEST_CASE("oracle backend noise is reproducible for a fixed seed") {
    auto task = task_by_name("cry_normal");
    auto run_once = [&task]() {
        auto backend = make_oracle_backend({0.5, 777});
        std::vector<std::string> labels;
        for (int i = 0; i < 60; ++i) {
            auto roi = roi_with_gt("crying");
            roi.frame_index = i;
            labels.push_back(classify::classify(*backend, roi, task).label);
        }
        return labels;
    };
    auto a = run_once();
    auto b = run_once();
    CHECK(a == b);
    int flips = 0;
    for (const auto& l : a) flips += l == "normal";
    CHECK(flips > 10); // noise 0.5 flips roughly half
    CHECK(flips < 50);
}

TEST_CASE("oracle backend without provenance fails loudly") {
    auto task = task_by_name("cry_normal");
    auto backend = make_oracle_backend({0.0, 0});
    auto roi = roi_with_gt("");
    try {
        classify::classify(*backend, roi, task);
        FAIL("expected backend_failure");
    } catch (const Error& e) {
        CHECK(e.code() == errc::backend_failure);
        CHECK(std::string(e.what()).find("oracle") != std::string::npos);
    }
}

TEST_CASE("uniform scores break the argmax tie toward the first task label") {
    auto task = task_by_name("cry_normal");
    BackendProfile p{"tiny", 0.01, 0.0, 0.01, 0.01, 1.0, 1.0, "", "", "", "", "", ""};
    auto backend = make_latency_model_backend({p, LabelStrategy::uniform, WaitMode::sleep, 1});
    auto pred = classify::classify(*backend, roi_with_gt("normal"), task);
    CHECK(pred.label == "crying"); // first label in task order
    CHECK(pred.confidence == 0.5);
}

TEST_CASE("latency sampler respects profile bounds and mean (MobileNet)") {
    LatencySampler sampler(7.57, 0.05, 7.47, 7.65, 1);
    StatsAccumulator acc;
    for (int i = 0; i < 1000; ++i) {
        double x = sampler.draw();
        CHECK(x >= 7.47);
        CHECK(x <= 7.65);
        acc.add(x);
    }
    // Convergence bound from the profile std over 1000 draws.
    CHECK(std::abs(acc.mean() - 7.57) < 3.0 * 0.05 / std::sqrt(1000.0) + 0.01);
}

TEST_CASE("latency sampler reproduces the spiky EfficientB0 profile") {
    LatencySampler sampler(61.08, 1.86, 60.59, 71.07, 2);
    StatsAccumulator acc;
    for (int i = 0; i < 20000; ++i) {
        double x = sampler.draw();
        CHECK(x >= 60.59);
        CHECK(x <= 71.07);
        acc.add(x);
    }
    CHECK(std::abs(acc.mean() - 61.08) < 0.1);
    CHECK(acc.std() >= 1.0); // the paper-reported variability survives modeling
    CHECK(acc.max() > 70.0); // pronounced max
}

TEST_CASE("latency sampler reproduces every bundled profile mean") {
    auto profiles = load_profiles(std::string(CRIBWATCH_DATA_DIR) + "/profiles_table4.json");
    REQUIRE(profiles.size() == 5);
    for (const auto& p : profiles) {
        LatencySampler sampler(p.mean_ms, p.std_ms, p.min_ms, p.max_ms, 3);
        StatsAccumulator acc;
        for (int i = 0; i < 20000; ++i) acc.add(sampler.draw());
        CHECK(std::abs(acc.mean() - p.mean_ms) <
              3.0 * std::max(p.std_ms, 0.01) / std::sqrt(20000.0) + 0.05);
        CHECK(acc.min() >= p.min_ms);
        CHECK(acc.max() <= p.max_ms);
    }
}

TEST_CASE("latency model backend waits the drawn time (MobileNet profile)") {
    auto task = task_by_name("cry_normal");
    auto profiles = load_profiles(std::string(CRIBWATCH_DATA_DIR) + "/profiles_table4.json");
    auto backend = make_latency_model_backend({profiles[0], LabelStrategy::ground_truth,
                                               WaitMode::sleep, 5});
    auto roi = roi_with_gt("crying");
    for (int i = 0; i < 40; ++i) {
        auto pred = classify::classify(*backend, roi, task);
        CHECK(pred.latency_ms >= 7.47 - 0.05);
        CHECK(pred.latency_ms <= 7.65 + 1.5); // drawn window plus scheduler slack
        CHECK(pred.label == "crying");
    }
}

TEST_CASE("latency model backend reproduces the InceptionV3 mean over 200 calls") {
    auto task = task_by_name("cry_normal");
    auto profiles = load_profiles(std::string(CRIBWATCH_DATA_DIR) + "/profiles_table4.json");
    auto backend = make_latency_model_backend({profiles[4], LabelStrategy::first_label,
                                               WaitMode::sleep, 6});
    REQUIRE(profiles[4].name == "InceptionV3");
    auto roi = roi_with_gt("");
    StatsAccumulator acc;
    for (int i = 0; i < 200; ++i) {
        auto pred = classify::classify(*backend, roi, task);
        acc.add(pred.latency_ms);
    }
    CHECK(std::abs(acc.mean() - 66.19) < 1.0);
}

TEST_CASE("profile validation catches inconsistent rows") {
    BackendProfile p{"bad", 5.0, 0.1, 6.0, 7.0, 10.0, 1.0, "", "", "", "", "", ""};
    CHECK_THROWS_AS(p.validate(), Error); // mean below min
    p = {"bad2", 5.0, -0.1, 4.0, 7.0, 10.0, 1.0, "", "", "", "", "", ""};
    CHECK_THROWS_AS(p.validate(), Error); // negative std
    p = {"bad3", 5.0, 0.1, 4.0, 7.0, 0.0, 1.0, "", "", "", "", "", ""};
    CHECK_THROWS_AS(p.validate(), Error); // zero working set
}

TEST_CASE("bundled Table 4 profiles keep their printed forms verbatim") {
    auto profiles = load_profiles(std::string(CRIBWATCH_DATA_DIR) + "/profiles_table4.json");
    REQUIRE(profiles.size() == 5);
    CHECK(profiles[0].name == "MobileNet");
    CHECK(profiles[0].memory_txt == "29.63");
    CHECK(profiles[0].mean_txt == "7.57");
    CHECK(profiles[0].size_txt == "2.59");
    CHECK(profiles[1].max_txt == "10.10"); // trailing zero preserved
    CHECK(profiles[2].memory_txt == "60.5");
    CHECK(profiles[3].std_txt == "1.86");
    CHECK(profiles[4].mean_ms == 66.19);
}

TEST_CASE("make_backend validates configs") {
    CHECK_THROWS_AS(make_backend({{"noise", 0.1}}), Error); // no kind
    CHECK_THROWS_AS(make_backend({{"kind", "quantum"}}), Error);
    CHECK_THROWS_AS(make_backend({{"kind", "oracle"}, {"noise", 1.5}}), Error);
    CHECK_THROWS_AS(make_backend({{"kind", "latency_model"}}), Error);

    auto b = make_backend({{"kind", "latency_model"},
                           {"profile_file", std::string(CRIBWATCH_DATA_DIR) + "/profiles_table4.json"},
                           {"profile_name", "MobileNet"},
                           {"seed", 9}});
    CHECK(b->name() == "latency_model:MobileNet");
    CHECK(b->concurrent_safe());
}

TEST_CASE("external backend round-trips scores through a child process") {
    testsup::TempDir tmp;
    // A model runner stand-in: reads request lines, loads the named tensor
    // file, answers with a fixed probability vector whose first component
    // encodes the tensor byte count parity (so we know the file was read).
    std::string script = tmp.file("runner.py");
    {
        std::ofstream out(script);
        out << "import json, sys\n"
               "for line in sys.stdin:\n"
               "    req = json.loads(line)\n"
               "    data = open(req['roi_file'], 'rb').read()\n"
               "    assert len(data) == 256 * 256 * 3 * 4, len(data)\n"
               "    assert req['task'] == 'cry_normal'\n"
               "    assert len(req['roi_digest']) == 16\n"
               "    print(json.dumps([0.25, 0.75]))\n"
               "    sys.stdout.flush()\n";
    }
    auto task = task_by_name("cry_normal");
    auto backend = make_external_backend({"python3", {script}});
    CHECK_FALSE(backend->concurrent_safe());
    auto pred = classify::classify(*backend, roi_with_gt("crying"), task);
    CHECK(pred.raw.is_probabilities);
    CHECK(pred.label == "normal"); // p(normal) = 0.75 from the child
    CHECK(pred.confidence == doctest::Approx(0.75).epsilon(1e-9));

    // Logit-shaped responses are detected as logits.
    std::string logit_script = tmp.file("logits.py");
    {
        std::ofstream out(logit_script);
        out << "import json, sys\n"
               "for line in sys.stdin:\n"
               "    json.loads(line)\n"
               "    print(json.dumps([2.0, -1.0]))\n"
               "    sys.stdout.flush()\n";
    }
    auto backend2 = make_external_backend({"python3", {logit_script}});
    auto pred2 = classify::classify(*backend2, roi_with_gt("crying"), task);
    CHECK_FALSE(pred2.raw.is_probabilities);
    CHECK(pred2.label == "crying"); // z = -3 pushes probability to the first label
}

TEST_CASE("external backend failure surfaces as backend_failure") {
    auto task = task_by_name("cry_normal");
    auto backend = make_external_backend({"/bin/false", {}});
    try {
        classify::classify(*backend, roi_with_gt("crying"), task);
        FAIL("expected backend_failure");
    } catch (const Error& e) {
        CHECK(e.code() == errc::backend_failure);
    }
}
