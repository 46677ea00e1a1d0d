#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include <timegci/data.hpp>

using namespace timegci;

namespace {

std::filesystem::path temp_file(const std::string& name) {
    auto dir = std::filesystem::temp_directory_path() / "timegci_data_tests";
    std::filesystem::create_directories(dir);
    return dir / name;
}

}  // namespace

TEST_CASE("sines reproduces the reference summary statistics") {
    Dataset ds = generate_sines(10000, 24, 5, 7);
    DatasetStats st = dataset_stats(ds);
    CHECK(st.dim == 5);
    CHECK(st.length == 24);
    CHECK(st.lag1 == Catch::Approx(0.875).margin(0.05));
    CHECK(st.lag3 == Catch::Approx(0.623).margin(0.05));
    CHECK(st.lag5 == Catch::Approx(0.377).margin(0.05));
}

TEST_CASE("sines degenerate parameters give the constant 0.5 trajectory") {
    Dataset ds = generate_sines(3, 10, 2, 1, 0.0, 0.0);
    for (const auto& tr : ds.trajectories)
        for (std::size_t t = 0; t < tr.length(); ++t)
            for (std::size_t i = 0; i < tr.dim(); ++i) CHECK(tr.values(t, i) == 0.5);
}

TEST_CASE("sines are deterministic under seed and land in [0,1]") {
    Dataset a = generate_sines(50, 24, 3, 42);
    Dataset b = generate_sines(50, 24, 3, 42);
    Dataset c = generate_sines(50, 24, 3, 43);
    bool equal = true, all_in_range = true;
    for (std::size_t k = 0; k < a.size(); ++k)
        for (std::size_t t = 0; t < 24; ++t)
            for (std::size_t i = 0; i < 3; ++i) {
                equal = equal && a.trajectories[k].values(t, i) == b.trajectories[k].values(t, i);
                const double v = a.trajectories[k].values(t, i);
                all_in_range = all_in_range && v >= 0.0 && v <= 1.0;
            }
    CHECK(equal);
    CHECK(all_in_range);
    CHECK(a.trajectories[0].values(0, 0) != c.trajectories[0].values(0, 0));
}

TEST_CASE("csv windowing and round trip") {
    auto path = temp_file("roundtrip.csv");
    {
        std::ofstream out(path);
        out << "series_id,t,a,b\n";
        for (int t = 1; t <= 48; ++t)
            out << "s0," << t << ',' << 0.25 * t << ',' << (100.0 - t) << '\n';
    }
    Dataset ds = load_csv(path.string(), 24);
    CHECK(ds.size() == 2);  // floor(48 / 24)
    CHECK(ds.dim() == 2);
    CHECK(ds.trajectories[1].values(0, 0) == Catch::Approx(0.25 * 25));

    auto path2 = temp_file("roundtrip2.csv");
    save_csv(ds, path2.string());
    Dataset ds2 = load_csv(path2.string(), 24);
    REQUIRE(ds2.size() == ds.size());
    for (std::size_t k = 0; k < ds.size(); ++k)
        for (std::size_t t = 0; t < 24; ++t)
            for (std::size_t i = 0; i < 2; ++i)
                CHECK(ds2.trajectories[k].values(t, i) == ds.trajectories[k].values(t, i));
}

TEST_CASE("csv windowing count over several series") {
    auto path = temp_file("multi.csv");
    {
        std::ofstream out(path);
        out << "series_id,t,x\n";
        for (int t = 1; t <= 25; ++t) out << "a," << t << ',' << t << '\n';
        for (int t = 1; t <= 10; ++t) out << "b," << t << ',' << t << '\n';
        for (int t = 1; t <= 21; ++t) out << "c," << t << ',' << t << '\n';
    }
    Dataset ds = load_csv(path.string(), 10);
    CHECK(ds.size() == 2 + 1 + 2);  // floor(25/10) + floor(10/10) + floor(21/10)
}

TEST_CASE("csv errors name the offending cell") {
    auto path = temp_file("bad.csv");
    {
        std::ofstream out(path);
        out << "series_id,t,a\n";
        out << "s0,1,0.5\n";
        out << "s0,2,oops\n";
    }
    try {
        load_csv(path.string(), 1);
        FAIL("expected an exception");
    } catch (const std::exception& e) {
        const std::string msg = e.what();
        CHECK(msg.find("row 3") != std::string::npos);
        CHECK(msg.find("column a") != std::string::npos);
    }
}

TEST_CASE("csv rejects short series, bad header, missing file") {
    auto path = temp_file("short.csv");
    {
        std::ofstream out(path);
        out << "series_id,t,a\n";
        out << "s0,1,0.5\n";
    }
    CHECK_THROWS(load_csv(path.string(), 24));

    auto path2 = temp_file("badheader.csv");
    {
        std::ofstream out(path2);
        out << "id,time,a\ns0,1,0.5\n";
    }
    CHECK_THROWS(load_csv(path2.string(), 1));
    CHECK_THROWS(load_csv("/nonexistent/nope.csv", 1));
}

TEST_CASE("normalizer maps example values and round-trips") {
    Dataset ds;
    ds.trajectories.emplace_back(2, 2);
    ds.trajectories.back().values(0, 0) = 2.0;
    ds.trajectories.back().values(1, 0) = 6.0;
    ds.trajectories.back().values(0, 1) = 3.0;  // constant feature
    ds.trajectories.back().values(1, 1) = 3.0;
    Normalizer norm = fit_normalizer(ds);

    Trajectory probe(1, 2);
    probe.values(0, 0) = 4.0;
    probe.values(0, 1) = 3.0;
    Trajectory scaled = norm.apply(probe);
    CHECK(scaled.values(0, 0) == Catch::Approx(0.5));
    CHECK(scaled.values(0, 1) == 0.5);  // constant feature maps to 0.5
    Trajectory back = norm.invert(scaled);
    CHECK(back.values(0, 0) == Catch::Approx(4.0).margin(1e-12));
    CHECK(back.values(0, 1) == 3.0);  // invert returns the constant
}

TEST_CASE("normalizer invert(apply(x)) = x on random data") {
    nd::Rng rng(5);
    Dataset ds;
    for (int k = 0; k < 20; ++k) {
        Trajectory tr(12, 4);
        for (std::size_t t = 0; t < 12; ++t)
            for (std::size_t i = 0; i < 4; ++i) tr.values(t, i) = rng.uniform(-40.0, 90.0);
        ds.trajectories.push_back(std::move(tr));
    }
    Normalizer norm = fit_normalizer(ds);
    double max_err = 0.0, max_norm_dev = 0.0;
    Dataset scaled = norm.apply(ds);
    Normalizer refit = fit_normalizer(scaled);
    Dataset rescaled = refit.apply(scaled);
    for (std::size_t k = 0; k < ds.size(); ++k) {
        Trajectory back = norm.invert(scaled.trajectories[k]);
        max_err = std::max(max_err, nd::max_abs_diff(back.values, ds.trajectories[k].values));
        max_norm_dev = std::max(max_norm_dev, nd::max_abs_diff(rescaled.trajectories[k].values,
                                                               scaled.trajectories[k].values));
        for (std::size_t t = 0; t < scaled.trajectories[k].length(); ++t)
            for (std::size_t i = 0; i < 4; ++i) {
                CHECK(scaled.trajectories[k].values(t, i) >= 0.0);
                CHECK(scaled.trajectories[k].values(t, i) <= 1.0);
            }
    }
    CHECK(max_err <= 1e-12 * 130.0);  // relative to the feature scale
    CHECK(max_norm_dev <= 1e-12);     // re-applying a refit normalizer is a no-op
}

TEST_CASE("normalizer guards") {
    Normalizer unfitted;
    Trajectory tr(1, 1);
    CHECK_THROWS(unfitted.invert(tr));
    CHECK_THROWS(unfitted.apply(tr));
    Dataset empty;
    CHECK_THROWS(fit_normalizer(empty));
}

TEST_CASE("dataset stats on iid noise match the Monte-Carlo reference") {
    // For white noise of length 24 the mean |acf| is about 0.160/0.152/0.146
    // at lags 1/3/5 (Monte-Carlo, 2e4 series).
    nd::Rng rng(11);
    Dataset ds;
    for (int k = 0; k < 10000; ++k) {
        Trajectory tr(24, 1);
        for (std::size_t t = 0; t < 24; ++t) tr.values(t, 0) = rng.uniform();
        ds.trajectories.push_back(std::move(tr));
    }
    DatasetStats st = dataset_stats(ds);
    CHECK(st.lag1 == Catch::Approx(0.1605).margin(0.02));
    CHECK(st.lag3 == Catch::Approx(0.1524).margin(0.02));
    CHECK(st.lag5 == Catch::Approx(0.1459).margin(0.02));
}

TEST_CASE("dataset stats on a linear ramp match the closed form") {
    // acf_k of a length-24 ramp: 0.875, 0.628478..., 0.392391...
    Dataset ds;
    for (int k = 1; k <= 3; ++k) {
        Trajectory tr(24, 2);
        for (std::size_t t = 0; t < 24; ++t) {
            tr.values(t, 0) = k * static_cast<double>(t);
            tr.values(t, 1) = 5.0 - 0.1 * k * static_cast<double>(t);
        }
        ds.trajectories.push_back(std::move(tr));
    }
    DatasetStats st = dataset_stats(ds);
    CHECK(st.lag1 == Catch::Approx(0.875).epsilon(1e-9));
    CHECK(st.lag3 == Catch::Approx(0.6284782608695653).epsilon(1e-9));
    CHECK(st.lag5 == Catch::Approx(0.3923913043478261).epsilon(1e-9));
    CHECK(st.zero_variance_slices == 0);
}

TEST_CASE("dataset stats count zero-variance slices and enforce T > 5") {
    Dataset ds;
    for (int k = 0; k < 4; ++k) {
        Trajectory tr(8, 2);
        for (std::size_t t = 0; t < 8; ++t) {
            tr.values(t, 0) = static_cast<double>(t);
            tr.values(t, 1) = 1.0;  // constant
        }
        ds.trajectories.push_back(std::move(tr));
    }
    DatasetStats st = dataset_stats(ds);
    CHECK(st.zero_variance_slices == 4);
    CHECK(st.lag1 == Catch::Approx(26.25 / 42.0).epsilon(1e-9));  // ramp of length 8

    Dataset tiny = generate_sines(3, 5, 1, 1);
    CHECK_THROWS(dataset_stats(tiny));
}
