#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include <timegci/data.hpp>
#include <timegci/eval.hpp>
#include <timegci/theory.hpp>
#include <timegci/trainer.hpp>

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace timegci;

namespace {

constexpr const char* kVersion = "timegci 0.1.0 (checkpoint format v1)";

// exit codes: 0 success, 1 runtime failure (NaN, divergence), 2 usage/config
struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

std::string iso_timestamp() {
    const auto now = std::chrono::system_clock::now();
    const std::time_t t = std::chrono::system_clock::to_time_t(now);
    char buf[32];
    std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
    return buf;
}

// Chunked deterministic parallel map: f(i) must only touch index i's state.
void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& f) {
    threads = std::max<std::size_t>(1, std::min(threads, n));
    if (threads == 1) {
        for (std::size_t i = 0; i < n; ++i) f(i);
        return;
    }
    std::vector<std::thread> pool;
    std::size_t chunk = (n + threads - 1) / threads;
    for (std::size_t w = 0; w < threads; ++w) {
        const std::size_t lo = w * chunk, hi = std::min(n, lo + chunk);
        if (lo >= hi) break;
        pool.emplace_back([lo, hi, &f] {
            for (std::size_t i = lo; i < hi; ++i) f(i);
        });
    }
    for (auto& th : pool) th.join();
}

void write_manifest(const fs::path& dir, const std::string& command, const json& extra,
                    std::uint64_t seed, const std::string& started,
                    const std::vector<std::string>& artifacts) {
    json m;
    m["command"] = command;
    m["version"] = kVersion;
    m["seed"] = seed;
    m["started"] = started;
    m["finished"] = iso_timestamp();
    m["artifacts"] = artifacts;
    for (auto& [k, v] : extra.items()) m[k] = v;
    std::ofstream out(dir / "manifest.json");
    out << m.dump(2) << '\n';
    if (!out) throw std::runtime_error("cannot write manifest in " + dir.string());
}

void save_normalizer(const Normalizer& norm, const fs::path& path) {
    json j;
    j["min"] = norm.min;
    j["max"] = norm.max;
    std::ofstream out(path);
    out << j.dump(2) << '\n';
    if (!out) throw std::runtime_error("cannot write " + path.string());
}

Normalizer load_normalizer(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw UsageError("cannot open normalizer: " + path.string());
    json j = json::parse(in);
    Normalizer norm;
    norm.min = j.at("min").get<std::vector<double>>();
    norm.max = j.at("max").get<std::vector<double>>();
    norm.fitted = true;
    return norm;
}

struct DatasetDir {
    Dataset data;  // normalized
    Normalizer norm;
    std::size_t T = 0, D = 0;
};

DatasetDir load_dataset_dir(const fs::path& dir) {
    std::ifstream meta_in(dir / "dataset.json");
    if (!meta_in) throw UsageError("not a prepared dataset directory (missing dataset.json): " +
                                   dir.string());
    json meta = json::parse(meta_in);
    DatasetDir out;
    out.T = meta.at("T").get<std::size_t>();
    out.D = meta.at("D").get<std::size_t>();
    out.data = load_csv((dir / "data.csv").string(), out.T);
    out.data.name = meta.value("name", out.data.name);
    out.norm = load_normalizer(dir / "normalizer.json");
    if (out.data.dim() != out.D)
        throw UsageError("dataset dimension mismatch in " + dir.string());
    return out;
}

void write_stats(const DatasetStats& st, const fs::path& dir) {
    {
        std::ofstream out(dir / "stats.txt");
        out << "dimension " << st.dim << '\n'
            << "length " << st.length << '\n'
            << "count " << st.count << '\n'
            << "lag1_autocorr " << st.lag1 << '\n'
            << "lag3_autocorr " << st.lag3 << '\n'
            << "lag5_autocorr " << st.lag5 << '\n'
            << "zero_variance_slices " << st.zero_variance_slices << '\n';
    }
    json j;
    j["dimension"] = st.dim;
    j["length"] = st.length;
    j["count"] = st.count;
    j["lag1_autocorr"] = st.lag1;
    j["lag3_autocorr"] = st.lag3;
    j["lag5_autocorr"] = st.lag5;
    j["zero_variance_slices"] = st.zero_variance_slices;
    std::ofstream out(dir / "stats.json");
    out << j.dump(2) << '\n';
}

// ---- prepare ------------------------------------------------------------------

int cmd_prepare(const std::string& dataset, const std::string& csv_path, const std::string& out_dir,
                std::size_t n, std::size_t T, std::size_t D, std::uint64_t seed, double f_max,
                double phase_max, std::size_t stride) {
    const std::string started = iso_timestamp();
    fs::create_directories(out_dir);
    Dataset raw;
    if (dataset == "sines") {
        raw = generate_sines(n, T, D, seed, f_max, phase_max);
    } else if (dataset == "csv") {
        if (csv_path.empty()) throw UsageError("--csv is required with --dataset csv");
        raw = load_csv(csv_path, T, stride);
    } else {
        throw UsageError("--dataset must be 'sines' or 'csv'");
    }
    Normalizer norm = fit_normalizer(raw);
    Dataset scaled = norm.apply(raw);

    const fs::path dir(out_dir);
    save_csv(scaled, (dir / "data.csv").string());
    save_normalizer(norm, dir / "normalizer.json");
    DatasetStats st = dataset_stats(scaled);
    write_stats(st, dir);
    json meta;
    meta["name"] = dataset == "sines" ? "sines" : csv_path;
    meta["T"] = scaled.length();
    meta["D"] = scaled.dim();
    meta["n"] = scaled.size();
    meta["feature_names"] = scaled.feature_names;
    {
        std::ofstream out(dir / "dataset.json");
        out << meta.dump(2) << '\n';
    }
    write_manifest(dir, "prepare", {{"dataset", meta}}, seed, started,
                   {"data.csv", "normalizer.json", "dataset.json", "stats.txt", "stats.json"});
    std::cout << "prepared " << scaled.size() << " trajectories (T=" << scaled.length()
              << ", D=" << scaled.dim() << ") in " << out_dir << "\n"
              << "lag autocorrelations: " << st.lag1 << " / " << st.lag3 << " / " << st.lag5
              << "\n";
    return 0;
}

// ---- train --------------------------------------------------------------------

int cmd_train(const std::string& data_dir, const std::string& out_dir,
              const std::string& config_path, const std::string& method_name_str,
              const std::vector<std::string>& overrides, bool print_config,
              const std::string& resume_path) {
    TrainConfig cfg;
    if (!config_path.empty()) {
        try {
            cfg = TrainConfig::parse_file(config_path);
        } catch (const std::exception& e) {
            throw UsageError(e.what());
        }
    }
    for (const auto& kv : overrides) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) throw UsageError("--set expects key=value, got '" + kv + "'");
        try {
            cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
        } catch (const std::exception& e) {
            throw UsageError(e.what());
        }
    }
    if (print_config) {
        std::cout << cfg.dump();
        return 0;
    }
    if (data_dir.empty()) throw UsageError("--data is required");
    if (out_dir.empty()) throw UsageError("--out is required");
    const std::string started = iso_timestamp();
    const Method method = method_from_name(method_name_str);
    DatasetDir ds = load_dataset_dir(data_dir);
    fs::create_directories(out_dir);
    const fs::path dir(out_dir);

    std::unique_ptr<Trainer> trainer;
    double resume_best_val = std::numeric_limits<double>::infinity();
    if (!resume_path.empty()) {
        Checkpoint ck = load_checkpoint(resume_path);
        for (const auto& kv : overrides) {
            const auto eq = kv.find('=');
            ck.config.set(kv.substr(0, eq), kv.substr(eq + 1));
        }
        resume_best_val = ck.best_val;
        trainer = std::make_unique<Trainer>(ck, ds.data);
    } else {
        trainer = std::make_unique<Trainer>(cfg, ds.data, ds.norm, method);
    }

    TrainOutcome outcome = trainer->train();

    if (outcome.best.best_val < resume_best_val || resume_path.empty())
        save_checkpoint(outcome.best, (dir / "checkpoint_best.bin").string());
    save_checkpoint(outcome.last, (dir / "checkpoint_last.bin").string());
    write_metrics_csv(outcome.metrics, (dir / "metrics.csv").string());
    {
        std::ofstream out(dir / "config.txt");
        out << outcome.last.config.dump();
    }

    json extra;
    extra["method"] = method_name_str;
    extra["constructed_components"] =
        method == Method::timegci
            ? std::vector<std::string>{"policy", "energy", "critic", "target_critic"}
            : std::vector<std::string>{"policy"};
    extra["joint_steps"] = outcome.last.joint_step;
    extra["best_step"] = outcome.best.best_step;
    extra["best_val_predictive_score"] = outcome.best.best_val;
    extra["stopped_early"] = outcome.stopped_early;
    extra["config"] = outcome.last.config.dump();
    write_manifest(dir, "train", extra, outcome.last.config.seed, started,
                   {"checkpoint_best.bin", "checkpoint_last.bin", "metrics.csv", "config.txt"});
    std::cout << "trained " << method_name_str << " for " << outcome.last.joint_step
              << " steps; best validation predictive score " << outcome.best.best_val
              << " at step " << outcome.best.best_step << "\n";
    return 0;
}

// ---- generate -----------------------------------------------------------------

int cmd_generate(const std::string& ckpt_path, std::size_t n, std::uint64_t seed,
                 const std::string& out_csv, std::size_t threads) {
    const std::string started = iso_timestamp();
    Checkpoint ck = load_checkpoint(ckpt_path);
    Dataset synth;
    synth.name = "synthetic";
    synth.feature_names = Dataset::default_feature_names(ck.feature_dim);
    synth.trajectories.resize(n);
    parallel_for(n, threads, [&](std::size_t i) {
        nd::Rng rng(nd::derive_seed(seed, i));
        synth.trajectories[i] = ck.policy.rollout(ck.horizon, rng).first;
    });
    Dataset raw = ck.normalizer.invert(synth);
    save_csv(raw, out_csv);
    const fs::path dir = fs::path(out_csv).parent_path();
    if (!dir.empty()) {
        json extra;
        extra["checkpoint"] = ckpt_path;
        extra["n"] = n;
        write_manifest(dir, "generate", extra, seed, started,
                       {fs::path(out_csv).filename().string()});
    }
    std::cout << "generated " << n << " trajectories into " << out_csv << "\n";
    return 0;
}

// ---- evaluate -----------------------------------------------------------------

int cmd_evaluate(const std::string& real_dir, const std::string& synthetic_csv,
                 const std::string& ckpt_path, const std::string& out_dir, bool energy_scores,
                 bool synthetic_normalized, std::uint64_t seed, std::size_t predictor_steps,
                 std::size_t threads) {
    const std::string started = iso_timestamp();
    if (energy_scores && ckpt_path.empty())
        throw UsageError("--energy-scores requires --checkpoint");
    DatasetDir real = load_dataset_dir(real_dir);
    Dataset synth = load_csv(synthetic_csv, real.T);
    if (!synthetic_normalized) synth = real.norm.apply(synth);
    if (synth.dim() != real.D)
        throw UsageError("synthetic feature dimension does not match the real dataset");

    fs::create_directories(out_dir);
    const fs::path dir(out_dir);

    PredictorOptions opts;
    opts.steps = predictor_steps;
    EvalReport report = evaluate_synthetic(synth, real.data, seed, opts);

    {
        std::ofstream out(dir / "report.txt");
        out << "metric                value\n"
            << "predictive_score      " << report.predictive_score_1 << '\n'
            << "+3_steps_ahead        " << report.predictive_score_3 << '\n'
            << "+5_steps_ahead        " << report.predictive_score_5 << '\n'
            << "x_corr_score          " << report.xcorr << '\n'
            << "x_corr_zeroed_entries " << report.xcorr_zero_variance << '\n';
    }
    {
        std::ofstream out(dir / "report.csv");
        out << "metric,value\n"
            << "predictive_score," << csv_detail::format_double(report.predictive_score_1) << '\n'
            << "predictive_score_3," << csv_detail::format_double(report.predictive_score_3) << '\n'
            << "predictive_score_5," << csv_detail::format_double(report.predictive_score_5) << '\n'
            << "xcorr_score," << csv_detail::format_double(report.xcorr) << '\n'
            << "xcorr_zero_variance," << report.xcorr_zero_variance << '\n';
    }
    std::vector<std::string> artifacts{"report.txt", "report.csv"};

    if (energy_scores) {
        Checkpoint ck = load_checkpoint(ckpt_path);
        if (ck.method != Method::timegci)
            throw UsageError("--energy-scores requires a checkpoint with an energy model");
        std::vector<double> scores(synth.size());
        parallel_for(synth.size(), threads, [&](std::size_t i) {
            scores[i] = ck.energy.trajectory_energy(clip_interior(synth.trajectories[i])) -
                        ck.energy.log_z[0];
        });
        std::ofstream out(dir / "energy_scores.csv");
        out << "trajectory,score\n";
        for (std::size_t i = 0; i < scores.size(); ++i)
            out << i << ',' << csv_detail::format_double(scores[i]) << '\n';
        artifacts.push_back("energy_scores.csv");
    }

    json extra;
    extra["real"] = real_dir;
    extra["synthetic"] = synthetic_csv;
    extra["predictive_score"] = report.predictive_score_1;
    extra["predictive_score_3"] = report.predictive_score_3;
    extra["predictive_score_5"] = report.predictive_score_5;
    extra["xcorr_score"] = report.xcorr;
    write_manifest(dir, "evaluate", extra, seed, started, artifacts);
    std::cout << "predictive 1/3/5: " << report.predictive_score_1 << " / "
              << report.predictive_score_3 << " / " << report.predictive_score_5
              << "  xcorr: " << report.xcorr << "\n";
    return 0;
}

// ---- theorycheck ----------------------------------------------------------------

int cmd_theorycheck(const std::string& suite, std::uint64_t seed, std::size_t episodes,
                    std::size_t joint_steps, const std::string& out_path) {
    std::ostringstream report;
    bool pass = false;
    if (suite == "nce") {
        NceCheckResult r = nce_optimality_check(seed);
        report << "suite nce\nr2 " << r.r2 << "\nslope " << r.slope << "\nfinal_loss "
               << r.final_loss << "\npass " << (r.pass ? "true" : "false") << '\n';
        pass = r.pass;
    } else if (suite == "gradeq") {
        GradEqCheckResult r = gradient_equality_check(seed);
        report << "suite gradeq\n";
        for (const auto& c : r.coords)
            report << c.name << " contrastive " << c.contrastive << " moment " << c.moment
                   << " se " << c.se << " z " << c.z << '\n';
        report << "pass " << (r.pass ? "true" : "false") << '\n';
        pass = r.pass;
    } else if (suite == "eqd") {
        EqdCheckResult r = eqd_check(seed);
        report << "suite eqd\nidentity " << r.identity.estimate << " se " << r.identity.std_error
               << "\ncorrupted " << r.corrupted.estimate << " se " << r.corrupted.std_error
               << "\npass " << (r.pass ? "true" : "false") << '\n';
        pass = r.pass;
    } else if (suite == "perturb") {
        // self-contained: train both models on simulator data at a small budget
        SineSimulator sim;
        Dataset ds = sim.dataset(2000, seed);
        Normalizer norm = fit_normalizer(ds);
        TrainConfig cfg;
        cfg.seed = seed;
        cfg.pretrain_policy_steps = 800;
        cfg.pretrain_energy_steps = 1000;
        cfg.pretrain_critic_steps = 3000;
        cfg.max_joint_steps = joint_steps;
        cfg.early_stop_interval = std::max<std::size_t>(1, joint_steps / 4);
        cfg.val_rollouts = 200;
        cfg.val_predictor_steps = 400;
        Trainer gci(cfg, ds, norm, Method::timegci);
        TrainOutcome gci_out = gci.train();
        TrainConfig tf_cfg = cfg;
        tf_cfg.max_joint_steps = cfg.pretrain_policy_steps + cfg.max_joint_steps;
        Trainer tf(tf_cfg, ds, norm, Method::tforcing);
        TrainOutcome tf_out = tf.train();

        PerturbCheckResult r = perturbation_check(gci_out.best.policy, tf_out.best.policy, sim,
                                                  0.1, episodes, seed);
        report << "suite perturb\n";
        for (int c = 0; c < 5; ++c) {
            report << "noise_x" << (c + 1) << " trajectory_model";
            for (int t = 0; t < 5; ++t) report << ' ' << r.model_a.mse[c][t];
            report << " | mle_model";
            for (int t = 0; t < 5; ++t) report << ' ' << r.model_b.mse[c][t];
            report << '\n';
        }
        report << "single_step_parity " << (r.single_step_parity ? "true" : "false") << '\n'
               << "advantage_grows " << (r.advantage_grows ? "true" : "false") << '\n'
               << "monotone_in_noise " << (r.monotone_in_noise ? "true" : "false") << '\n'
               << "pass " << (r.pass ? "true" : "false") << '\n';
        pass = r.pass;
    } else {
        throw UsageError("--suite must be one of nce, gradeq, eqd, perturb");
    }
    std::cout << report.str();
    if (!out_path.empty()) {
        std::ofstream out(out_path);
        out << report.str();
    }
    return pass ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Time-series generation by contrastive imitation"};
    app.require_subcommand(1);
    app.set_version_flag("--version", kVersion);

    // prepare
    auto* prepare = app.add_subcommand("prepare", "Generate or ingest a dataset and normalize it");
    std::string p_dataset = "sines", p_csv, p_out;
    std::size_t p_n = 10000, p_T = 24, p_D = 5, p_stride = 0;
    std::uint64_t p_seed = 7;
    double p_fmax = 0.1, p_phase = 0.1;
    prepare->add_option("--dataset", p_dataset, "sines or csv");
    prepare->add_option("--csv", p_csv, "input CSV path (for --dataset csv)");
    prepare->add_option("--out", p_out, "output directory")->required();
    prepare->add_option("--n", p_n, "number of sine trajectories");
    prepare->add_option("--T", p_T, "trajectory length");
    prepare->add_option("--D", p_D, "feature dimension (sines)");
    prepare->add_option("--seed", p_seed, "rng seed");
    prepare->add_option("--f-max", p_fmax, "sine frequency upper bound");
    prepare->add_option("--phase-max", p_phase, "sine phase upper bound");
    prepare->add_option("--stride", p_stride, "window stride for csv (0 = non-overlapping)");

    // train
    auto* train = app.add_subcommand("train", "Train a generator on a prepared dataset");
    std::string t_data, t_out, t_config, t_method = "timegci", t_resume;
    std::vector<std::string> t_set;
    bool t_print = false;
    train->add_option("--data", t_data, "prepared dataset directory");
    train->add_option("--out", t_out, "run output directory");
    train->add_option("--config", t_config, "config file (flat key = value)");
    train->add_option("--method", t_method)->check(CLI::IsMember({"timegci", "tforcing"}));
    train->add_option("--set", t_set, "config override key=value (repeatable)");
    train->add_option("--resume", t_resume, "checkpoint to resume from");
    train->add_flag("--print-config", t_print, "print the effective config and exit");

    // generate
    auto* generate = app.add_subcommand("generate", "Sample trajectories from a checkpoint");
    std::string g_ckpt, g_out;
    std::size_t g_n = 10000, g_threads = 1;
    std::uint64_t g_seed = 0;
    generate->add_option("--checkpoint", g_ckpt)->required();
    generate->add_option("--n", g_n, "number of trajectories");
    generate->add_option("--seed", g_seed);
    generate->add_option("--out", g_out, "output CSV path")->required();
    generate->add_option("--threads", g_threads);

    // evaluate
    auto* evaluate = app.add_subcommand("evaluate", "Score a synthetic dataset against real data");
    std::string e_real, e_synth, e_ckpt, e_out;
    bool e_energy = false, e_norm = false;
    std::uint64_t e_seed = 0;
    std::size_t e_pred_steps = 5000, e_threads = 1;
    evaluate->add_option("--real", e_real, "prepared real dataset directory")->required();
    evaluate->add_option("--synthetic", e_synth, "synthetic CSV (original scale)")->required();
    evaluate->add_option("--checkpoint", e_ckpt, "checkpoint for energy scores");
    evaluate->add_option("--out", e_out, "output directory")->required();
    evaluate->add_flag("--energy-scores", e_energy, "emit per-trajectory energy scores");
    evaluate->add_flag("--synthetic-normalized", e_norm,
                       "synthetic CSV is already in normalized units");
    evaluate->add_option("--seed", e_seed);
    evaluate->add_option("--predictor-steps", e_pred_steps);
    evaluate->add_option("--threads", e_threads);

    // theorycheck
    auto* theory = app.add_subcommand("theorycheck", "Run a property suite on toy constructions");
    std::string th_suite, th_out;
    std::uint64_t th_seed = 7;
    std::size_t th_episodes = 1000, th_joint = 2000;
    theory->add_option("--suite", th_suite)->required();
    theory->add_option("--seed", th_seed);
    theory->add_option("--episodes", th_episodes, "episodes for the perturb grid");
    theory->add_option("--joint-steps", th_joint, "joint training budget for the perturb suite");
    theory->add_option("--out", th_out, "also write the report to this file");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);
        app.exit(e);
        return 2;
    }

    try {
        if (prepare->parsed())
            return cmd_prepare(p_dataset, p_csv, p_out, p_n, p_T, p_D, p_seed, p_fmax, p_phase,
                               p_stride);
        if (train->parsed())
            return cmd_train(t_data, t_out, t_config, t_method, t_set, t_print, t_resume);
        if (generate->parsed()) return cmd_generate(g_ckpt, g_n, g_seed, g_out, g_threads);
        if (evaluate->parsed())
            return cmd_evaluate(e_real, e_synth, e_ckpt, e_out, e_energy, e_norm, e_seed,
                                e_pred_steps, e_threads);
        if (theory->parsed()) return cmd_theorycheck(th_suite, th_seed, th_episodes, th_joint, th_out);
    } catch (const UsageError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "runtime failure: " << e.what() << "\n";
        return 1;
    }
    return 2;
}
