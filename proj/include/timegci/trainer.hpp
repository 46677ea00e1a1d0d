#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "critic.hpp"
#include "data.hpp"
#include "energy.hpp"
#include "eval.hpp"
#include "policy.hpp"
#include "replay.hpp"
#include "serialize.hpp"

namespace timegci {

// ---- configuration ---------------------------------------------------------------

struct TrainConfig {
    std::size_t M = 64;
    double lr_energy = 1e-4;
    double lr_policy = 1e-4;
    double lr_critic = 1e-3;
    double lr_discrim = 1e-3;  // unused here; kept for baseline parity
    double alpha = 0.2;
    double polyak_rate = 0.005;
    std::size_t buffer_capacity = 10000;
    std::size_t pretrain_policy_steps = 2000;
    std::size_t pretrain_energy_steps = 4000;
    std::size_t pretrain_critic_steps = 20000;
    std::size_t max_joint_steps = 50000;
    std::size_t early_stop_interval = 1000;
    std::size_t early_stop_patience = 5;
    double kappa = 0.1;
    std::size_t rollouts_per_iter = 16;
    std::size_t gradient_steps_per_iter = 1;
    std::size_t critic_updates_per_actor_update = 4;
    std::uint64_t seed = 0;
    std::size_t hidden_size = 32;
    double val_fraction = 0.2;
    std::size_t val_rollouts = 1000;
    std::size_t val_predictor_steps = 1000;
    std::size_t eval_rollouts = 10000;
    std::size_t pretrain_buffer_rollouts = 1000;
    std::size_t actor_samples = 1;
    bool twin_q = false;
    bool energy_fresh_rollouts = false;
    bool debug_checks = false;

    void validate() const {
        if (M < 1) throw std::invalid_argument("config: M must be >= 1");
        if (lr_energy <= 0 || lr_policy <= 0 || lr_critic <= 0 || lr_discrim <= 0)
            throw std::invalid_argument("config: learning rates must be positive");
        if (alpha < 0) throw std::invalid_argument("config: alpha must be non-negative");
        if (polyak_rate <= 0 || polyak_rate > 1)
            throw std::invalid_argument("config: polyak_rate must be in (0,1]");
        if (buffer_capacity < M) throw std::invalid_argument("config: buffer smaller than a batch");
        if (val_fraction <= 0 || val_fraction >= 1)
            throw std::invalid_argument("config: val_fraction must be in (0,1)");
        if (gradient_steps_per_iter < 1 || rollouts_per_iter < 1 || actor_samples < 1)
            throw std::invalid_argument("config: per-iteration counts must be >= 1");
        if (early_stop_interval < 1) throw std::invalid_argument("config: early_stop_interval >= 1");
    }

    std::string dump() const;
    static TrainConfig parse(std::istream& in);
    static TrainConfig parse_file(const std::string& path);
    void set(const std::string& key, const std::string& value);
};

namespace config_detail {

inline std::string fmt(double v) { return csv_detail::format_double(v); }
inline std::string fmt(std::uint64_t v) { return std::to_string(v); }
inline std::string fmt(bool v) { return v ? "true" : "false"; }

inline double parse_f64(const std::string& s) {
    double v = 0.0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size())
        throw std::runtime_error("config: invalid number '" + s + "'");
    return v;
}
inline std::uint64_t parse_u64(const std::string& s) {
    std::uint64_t v = 0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size())
        throw std::runtime_error("config: invalid integer '" + s + "'");
    return v;
}
inline bool parse_bool(const std::string& s) {
    if (s == "true" || s == "1") return true;
    if (s == "false" || s == "0") return false;
    throw std::runtime_error("config: invalid bool '" + s + "'");
}

}  // namespace config_detail

#define TIMEGCI_CONFIG_FIELDS(X)                      \
    X(M, u64)                                         \
    X(lr_energy, f64)                                 \
    X(lr_policy, f64)                                 \
    X(lr_critic, f64)                                 \
    X(lr_discrim, f64)                                \
    X(alpha, f64)                                     \
    X(polyak_rate, f64)                               \
    X(buffer_capacity, u64)                           \
    X(pretrain_policy_steps, u64)                     \
    X(pretrain_energy_steps, u64)                     \
    X(pretrain_critic_steps, u64)                     \
    X(max_joint_steps, u64)                           \
    X(early_stop_interval, u64)                       \
    X(early_stop_patience, u64)                       \
    X(kappa, f64)                                     \
    X(rollouts_per_iter, u64)                         \
    X(gradient_steps_per_iter, u64)                   \
    X(critic_updates_per_actor_update, u64)           \
    X(seed, u64)                                      \
    X(hidden_size, u64)                               \
    X(val_fraction, f64)                              \
    X(val_rollouts, u64)                              \
    X(val_predictor_steps, u64)                       \
    X(eval_rollouts, u64)                             \
    X(pretrain_buffer_rollouts, u64)                  \
    X(actor_samples, u64)                             \
    X(twin_q, bool_)                                  \
    X(energy_fresh_rollouts, bool_)                   \
    X(debug_checks, bool_)

inline std::string TrainConfig::dump() const {
    std::ostringstream out;
#define X_F(field, kind) out << #field << " = " << config_detail::fmt(field) << '\n';
    TIMEGCI_CONFIG_FIELDS(X_F)
#undef X_F
    return out.str();
}

inline void TrainConfig::set(const std::string& key, const std::string& value) {
    using namespace config_detail;
#define X_U64(field) field = static_cast<std::size_t>(parse_u64(value))
#define X_SET(field, kind) \
    if (key == #field) {   \
        X_##kind(field);   \
        return;            \
    }
#define X_f64(field) field = parse_f64(value)
#define X_bool_(field) field = parse_bool(value)
#define X_u64(field) X_U64(field)
    TIMEGCI_CONFIG_FIELDS(X_SET)
#undef X_SET
#undef X_f64
#undef X_bool_
#undef X_u64
#undef X_U64
    throw std::runtime_error("config: unknown key '" + key + "'");
}

inline TrainConfig TrainConfig::parse(std::istream& in) {
    TrainConfig cfg;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        std::size_t begin = line.find_first_not_of(" \t\r");
        if (begin == std::string::npos) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw std::runtime_error("config: line " + std::to_string(line_no) + " lacks '='");
        auto trim = [](std::string s) {
            const auto a = s.find_first_not_of(" \t\r");
            const auto b = s.find_last_not_of(" \t\r");
            return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
        };
        cfg.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
    return cfg;
}

inline TrainConfig TrainConfig::parse_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("config: cannot open " + path);
    return parse(in);
}

// ---- checkpoint --------------------------------------------------------------------

inline constexpr std::uint8_t kCheckpointVersion = 1;
inline constexpr char kCheckpointMagic[4] = {'T', 'G', 'C', 'I'};

enum class Method { timegci, tforcing };

inline std::string method_name(Method m) { return m == Method::timegci ? "timegci" : "tforcing"; }

inline Method method_from_name(const std::string& s) {
    if (s == "timegci") return Method::timegci;
    if (s == "tforcing") return Method::tforcing;
    throw std::runtime_error("unknown method '" + s + "'");
}

// Complete training state: everything needed to generate from the policy and
// to continue training bit-exactly (including the replay buffer contents).
struct Checkpoint {
    Method method = Method::timegci;
    TrainConfig config;
    std::size_t feature_dim = 0;
    std::size_t horizon = 0;
    Normalizer normalizer;

    PolicyNet policy;
    EnergyNet energy;
    CriticNet critic, critic2;
    TargetCritic target, target2;
    nd::AdamState adam_policy, adam_energy, adam_critic, adam_critic2;

    std::vector<Trajectory> buffer_contents;
    std::string rng_state;
    std::uint64_t joint_step = 0;
    double best_val = std::numeric_limits<double>::infinity();
    std::uint64_t best_step = 0;
    std::uint64_t patience_counter = 0;
    double run_actor = 0.0, run_energy = 0.0, run_critic = 0.0, run_mle = 0.0;
    std::uint64_t run_count = 0;
};

namespace ckpt_detail {

inline void write_adam(io::Writer& w, const nd::AdamState& a) {
    w.u64(static_cast<std::uint64_t>(a.step));
    w.f64(a.beta1);
    w.f64(a.beta2);
    w.f64(a.eps);
    w.u64(a.m.size());
    for (const auto& t : a.m) w.tensor(t);
    for (const auto& t : a.v) w.tensor(t);
}

inline nd::AdamState read_adam(io::Reader& r) {
    nd::AdamState a;
    a.step = static_cast<std::int64_t>(r.u64());
    a.beta1 = r.f64();
    a.beta2 = r.f64();
    a.eps = r.f64();
    const std::uint64_t n = r.u64();
    a.m.reserve(n);
    a.v.reserve(n);
    for (std::uint64_t i = 0; i < n; ++i) a.m.push_back(r.tensor());
    for (std::uint64_t i = 0; i < n; ++i) a.v.push_back(r.tensor());
    return a;
}

}  // namespace ckpt_detail

inline void save_checkpoint(const Checkpoint& ck, std::ostream& out) {
    io::Writer w(out);
    out.write(kCheckpointMagic, 4);
    w.u8(kCheckpointVersion);
    w.str(method_name(ck.method));
    w.str(ck.config.dump());
    w.u64(ck.feature_dim);
    w.u64(ck.horizon);

    w.u8(ck.normalizer.fitted ? 1 : 0);
    w.u64(ck.normalizer.min.size());
    for (double v : ck.normalizer.min) w.f64(v);
    for (double v : ck.normalizer.max) w.f64(v);

    w.str(ck.rng_state);
    w.u64(ck.joint_step);
    w.f64(ck.best_val);
    w.u64(ck.best_step);
    w.u64(ck.patience_counter);
    w.f64(ck.run_actor);
    w.f64(ck.run_energy);
    w.f64(ck.run_critic);
    w.f64(ck.run_mle);
    w.u64(ck.run_count);

    auto policy = const_cast<Checkpoint&>(ck).policy.parameters();
    w.tensors(policy);
    ckpt_detail::write_adam(w, ck.adam_policy);

    if (ck.method == Method::timegci) {
        auto energy = const_cast<Checkpoint&>(ck).energy.parameters();
        w.tensors(energy);
        ckpt_detail::write_adam(w, ck.adam_energy);
        auto critic = const_cast<Checkpoint&>(ck).critic.parameters();
        w.tensors(critic);
        auto target = const_cast<Checkpoint&>(ck).target.net.parameters();
        w.tensors(target);
        ckpt_detail::write_adam(w, ck.adam_critic);
        w.u8(ck.config.twin_q ? 1 : 0);
        if (ck.config.twin_q) {
            auto critic2 = const_cast<Checkpoint&>(ck).critic2.parameters();
            w.tensors(critic2);
            auto target2 = const_cast<Checkpoint&>(ck).target2.net.parameters();
            w.tensors(target2);
            ckpt_detail::write_adam(w, ck.adam_critic2);
        }
    }

    w.u64(ck.buffer_contents.size());
    for (const Trajectory& tr : ck.buffer_contents) {
        for (std::size_t t = 0; t < tr.length(); ++t)
            for (std::size_t i = 0; i < tr.dim(); ++i) w.f64(tr.values(t, i));
    }
    if (!w.ok()) throw std::runtime_error("checkpoint write failed");
}

inline void save_checkpoint(const Checkpoint& ck, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open checkpoint for writing: " + path);
    save_checkpoint(ck, out);
    if (!out) throw std::runtime_error("checkpoint write failed: " + path);
}

inline Checkpoint load_checkpoint(std::istream& in) {
    char magic[4];
    in.read(magic, 4);
    if (!in || std::string(magic, 4) != std::string(kCheckpointMagic, 4))
        throw std::runtime_error("checkpoint: bad magic");
    io::Reader r(in);
    const std::uint8_t version = r.u8();
    if (version != kCheckpointVersion)
        throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));

    Checkpoint ck;
    ck.method = method_from_name(r.str());
    std::istringstream cfg_in(r.str());
    ck.config = TrainConfig::parse(cfg_in);
    ck.feature_dim = r.u64();
    ck.horizon = r.u64();

    ck.normalizer.fitted = r.u8() != 0;
    const std::uint64_t D = r.u64();
    ck.normalizer.min.resize(D);
    ck.normalizer.max.resize(D);
    for (auto& v : ck.normalizer.min) v = r.f64();
    for (auto& v : ck.normalizer.max) v = r.f64();

    ck.rng_state = r.str();
    ck.joint_step = r.u64();
    ck.best_val = r.f64();
    ck.best_step = r.u64();
    ck.patience_counter = r.u64();
    ck.run_actor = r.f64();
    ck.run_energy = r.f64();
    ck.run_critic = r.f64();
    ck.run_mle = r.f64();
    ck.run_count = r.u64();

    nd::Rng scratch(0);
    ck.policy = PolicyNet::init(ck.feature_dim, ck.config.hidden_size, scratch);
    auto policy = ck.policy.parameters();
    r.tensors(policy);
    ck.adam_policy = ckpt_detail::read_adam(r);

    if (ck.method == Method::timegci) {
        ck.energy = EnergyNet::init(ck.feature_dim, ck.config.hidden_size, scratch);
        auto energy = ck.energy.parameters();
        r.tensors(energy);
        ck.adam_energy = ckpt_detail::read_adam(r);
        ck.critic = CriticNet::init(ck.feature_dim, ck.config.hidden_size, scratch);
        auto critic = ck.critic.parameters();
        r.tensors(critic);
        ck.target = TargetCritic::copy_of(ck.critic);
        auto target = ck.target.net.parameters();
        r.tensors(target);
        ck.adam_critic = ckpt_detail::read_adam(r);
        const bool twin = r.u8() != 0;
        if (twin != ck.config.twin_q) throw std::runtime_error("checkpoint: twin_q flag mismatch");
        if (twin) {
            ck.critic2 = CriticNet::init(ck.feature_dim, ck.config.hidden_size, scratch);
            auto critic2 = ck.critic2.parameters();
            r.tensors(critic2);
            ck.target2 = TargetCritic::copy_of(ck.critic2);
            auto target2 = ck.target2.net.parameters();
            r.tensors(target2);
            ck.adam_critic2 = ckpt_detail::read_adam(r);
        }
    }

    const std::uint64_t count = r.u64();
    ck.buffer_contents.reserve(count);
    for (std::uint64_t k = 0; k < count; ++k) {
        Trajectory tr(ck.horizon, ck.feature_dim);
        for (std::size_t t = 0; t < ck.horizon; ++t)
            for (std::size_t i = 0; i < ck.feature_dim; ++i) tr.values(t, i) = r.f64();
        ck.buffer_contents.push_back(std::move(tr));
    }
    return ck;
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open checkpoint: " + path);
    return load_checkpoint(in);
}

inline std::string checkpoint_bytes(const Checkpoint& ck) {
    std::ostringstream out(std::ios::binary);
    save_checkpoint(ck, out);
    return out.str();
}

// ---- metrics -------------------------------------------------------------------------

struct MetricsRow {
    std::uint64_t step = 0;
    double loss_actor = std::numeric_limits<double>::quiet_NaN();
    double loss_energy = std::numeric_limits<double>::quiet_NaN();
    double loss_critic = std::numeric_limits<double>::quiet_NaN();
    double loss_mle = std::numeric_limits<double>::quiet_NaN();
    double val_predictive_score = std::numeric_limits<double>::quiet_NaN();
};

inline void write_metrics_csv(const std::vector<MetricsRow>& rows, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open metrics file: " + path);
    out << "step,loss_actor,loss_energy,loss_critic,loss_mle,val_predictive_score\n";
    auto cell = [](double v) { return std::isnan(v) ? std::string() : csv_detail::format_double(v); };
    for (const auto& r : rows)
        out << r.step << ',' << cell(r.loss_actor) << ',' << cell(r.loss_energy) << ','
            << cell(r.loss_critic) << ',' << cell(r.loss_mle) << ','
            << cell(r.val_predictive_score) << '\n';
}

// ---- trainer ----------------------------------------------------------------------------

struct TrainOutcome {
    Checkpoint best;
    Checkpoint last;
    std::vector<MetricsRow> metrics;
    bool stopped_early = false;
};

// Orchestrates the four training stages: MLE pretraining of the policy,
// contrastive pretraining of the energy, Bellman pretraining of the critic,
// and the interleaved joint loop with the kappa-weighted MLE regularizer.
// Also trains the pure-MLE baseline when constructed with Method::tforcing.
class Trainer {
public:
    Trainer(TrainConfig cfg, const Dataset& normalized, Normalizer norm, Method method)
        : cfg_(cfg),
          method_(method),
          norm_(std::move(norm)),
          rng_(nd::derive_seed(cfg.seed, 0x7261)),
          buffer_(cfg.buffer_capacity, normalized.length(), normalized.dim()) {
        cfg_.validate();
        normalized.check_uniform();
        if (normalized.size() < 5) throw std::invalid_argument("Trainer: dataset too small");
        split_dataset(normalized);
        feature_dim_ = normalized.dim();
        horizon_ = normalized.length();

        nd::Rng init_rng(nd::derive_seed(cfg_.seed, 0x1247));
        policy_ = PolicyNet::init(feature_dim_, cfg_.hidden_size, init_rng);
        if (method_ == Method::timegci) {
            energy_ = EnergyNet::init(feature_dim_, cfg_.hidden_size, init_rng);
            critic_ = CriticNet::init(feature_dim_, cfg_.hidden_size, init_rng);
            target_ = TargetCritic::copy_of(critic_);
            if (cfg_.twin_q) {
                critic2_ = CriticNet::init(feature_dim_, cfg_.hidden_size, init_rng);
                target2_ = TargetCritic::copy_of(critic2_);
            }
        }
        auto pp = policy_.parameters();
        adam_policy_ = nd::AdamState::init(pp);
        if (method_ == Method::timegci) {
            auto ep = energy_.parameters();
            adam_energy_ = nd::AdamState::init(ep);
            auto cp = critic_.parameters();
            adam_critic_ = nd::AdamState::init(cp);
            if (cfg_.twin_q) {
                auto cp2 = critic2_.parameters();
                adam_critic2_ = nd::AdamState::init(cp2);
            }
        }
    }

    // Rebuilds a trainer mid-run from a checkpoint; the dataset must be the
    // same one the original run saw (the train/validation split is re-derived
    // from the seed).
    Trainer(const Checkpoint& ck, const Dataset& normalized)
        : Trainer(ck.config, normalized, ck.normalizer, ck.method) {
        policy_ = ck.policy;
        adam_policy_ = ck.adam_policy;
        if (method_ == Method::timegci) {
            energy_ = ck.energy;
            critic_ = ck.critic;
            target_ = ck.target;
            adam_energy_ = ck.adam_energy;
            adam_critic_ = ck.adam_critic;
            if (cfg_.twin_q) {
                critic2_ = ck.critic2;
                target2_ = ck.target2;
                adam_critic2_ = ck.adam_critic2;
            }
            buffer_.restore(ck.buffer_contents);
        }
        rng_.deserialize(ck.rng_state);
        joint_step_ = ck.joint_step;
        best_val_ = ck.best_val;
        best_step_ = ck.best_step;
        patience_counter_ = ck.patience_counter;
        run_actor_ = ck.run_actor;
        run_energy_ = ck.run_energy;
        run_critic_ = ck.run_critic;
        run_mle_ = ck.run_mle;
        run_count_ = ck.run_count;
        pretrained_ = true;
        resumed_ = true;
        // the historical best state lives in its own file; fall back to the
        // resume state unless this run improves on best_val
        best_checkpoint_ = checkpoint();
        have_best_ = true;
    }

    const Dataset& train_split() const { return train_; }
    const Dataset& validation_split() const { return val_; }
    const PolicyNet& policy() const { return policy_; }
    const EnergyNet& energy() const { return energy_; }
    const CriticNet& critic() const { return critic_; }
    const TargetCritic& target() const { return target_; }
    const ReplayBuffer& buffer() const { return buffer_; }
    std::uint64_t joint_step() const { return joint_step_; }

    // Stage 1: maximum-likelihood pretraining of the policy.
    void pretrain_policy() {
        nd::Tape tape;
        auto params = policy_.parameters();
        for (std::size_t step = 0; step < cfg_.pretrain_policy_steps; ++step) {
            auto batch = sample_train_batch(cfg_.M);
            tape.reset();
            PolicyRefs r = put(tape, policy_);
            nd::NodeId loss = mle_loss_node(tape, r, batch);
            backward_named(tape, loss, "L_mle(pretrain)");
            auto leaves = leaf_list(r);
            nd::apply_adam(tape, leaves, params, adam_policy_, cfg_.lr_policy);
        }
    }

    // Stage 2: contrastive pretraining of the energy against the frozen
    // policy, negatives drawn fresh from it.
    void pretrain_energy() {
        require_timegci("pretrain_energy");
        nd::Tape tape;
        auto params = energy_.parameters();
        for (std::size_t step = 0; step < cfg_.pretrain_energy_steps; ++step) {
            auto real = sample_train_batch(cfg_.M);
            std::vector<Trajectory> fake;
            fake.reserve(cfg_.M);
            for (std::size_t k = 0; k < cfg_.M; ++k) fake.push_back(rollout_once());
            tape.reset();
            EnergyRefs r = put(tape, energy_);
            nd::NodeId loss = energy_loss_node(tape, r, policy_, real, fake);
            backward_named(tape, loss, "L_energy(pretrain)");
            auto leaves = leaf_list(r);
            nd::apply_adam(tape, leaves, params, adam_energy_, cfg_.lr_energy);
        }
    }

    // Stage 3: Bellman pretraining of the critic with policy and energy
    // frozen; seeds the replay buffer with frozen-policy rollouts.
    void pretrain_critic() {
        require_timegci("pretrain_critic");
        const std::size_t seed_count =
            std::max(cfg_.M, std::min(cfg_.buffer_capacity, cfg_.pretrain_buffer_rollouts));
        while (buffer_.size() < seed_count) buffer_.push(rollout_once());
        for (std::size_t step = 0; step < cfg_.pretrain_critic_steps; ++step) {
            const double loss = critic_update("L_critic(pretrain)");
            if (loss > 1e6)
                throw std::runtime_error("pretrain_critic: loss diverged beyond 1e6 at step " +
                                         std::to_string(step));
        }
    }

    void run_pretraining() {
        if (pretrained_) return;
        pretrain_policy();
        if (method_ == Method::timegci) {
            pretrain_energy();
            pretrain_critic();
        }
        pretrained_ = true;
    }

    // Stage 4 (or the whole run for the MLE baseline). Returns the best
    // checkpoint by validation predictive score, the final state, and the
    // per-interval metrics.
    TrainOutcome train() {
        if (!pretrained_) run_pretraining();
        TrainOutcome outcome;
        bool stop = false;
        while (joint_step_ < cfg_.max_joint_steps && !stop) {
            if (method_ == Method::timegci) {
                for (std::size_t k = 0; k < cfg_.rollouts_per_iter; ++k)
                    buffer_.push(rollout_once());
            }
            for (std::size_t g = 0;
                 g < cfg_.gradient_steps_per_iter && joint_step_ < cfg_.max_joint_steps && !stop;
                 ++g) {
                if (cfg_.debug_checks && joint_step_ % 100 == 0 && method_ == Method::timegci) {
                    run_isolated_triplet();
                } else if (method_ == Method::timegci) {
                    run_triplet();
                } else {
                    run_mle_step();
                }
                ++joint_step_;
                if (joint_step_ % cfg_.early_stop_interval == 0 ||
                    joint_step_ == cfg_.max_joint_steps) {
                    stop = evaluate_and_record(outcome);
                }
            }
        }
        outcome.stopped_early = stop;
        if (!have_best_) {
            evaluate_and_record(outcome);
        }
        outcome.best = best_checkpoint_;
        outcome.last = checkpoint();
        return outcome;
    }

    Checkpoint checkpoint() const {
        Checkpoint ck;
        ck.method = method_;
        ck.config = cfg_;
        ck.feature_dim = feature_dim_;
        ck.horizon = horizon_;
        ck.normalizer = norm_;
        ck.policy = policy_;
        ck.adam_policy = adam_policy_;
        if (method_ == Method::timegci) {
            ck.energy = energy_;
            ck.critic = critic_;
            ck.target = target_;
            ck.adam_energy = adam_energy_;
            ck.adam_critic = adam_critic_;
            if (cfg_.twin_q) {
                ck.critic2 = critic2_;
                ck.target2 = target2_;
                ck.adam_critic2 = adam_critic2_;
            }
            ck.buffer_contents = buffer_.snapshot();
        }
        ck.rng_state = rng_.serialize();
        ck.joint_step = joint_step_;
        ck.best_val = best_val_;
        ck.best_step = best_step_;
        ck.patience_counter = patience_counter_;
        ck.run_actor = run_actor_;
        ck.run_energy = run_energy_;
        ck.run_critic = run_critic_;
        ck.run_mle = run_mle_;
        ck.run_count = run_count_;
        return ck;
    }

    // Validation predictive score of the current policy (TSTR on the held-out
    // split with the cheap predictor budget); uses rng streams isolated from
    // the training stream.
    double validation_score() const {
        Dataset synth = generate_rollouts(cfg_.val_rollouts,
                                          nd::derive_seed(cfg_.seed, 0xEA11, joint_step_));
        PredictorOptions opts;
        opts.steps = cfg_.val_predictor_steps;
        return predictive_score(synth, val_, 1, nd::derive_seed(cfg_.seed, 0x5C03, joint_step_),
                                opts);
    }

    Dataset generate_rollouts(std::size_t n, std::uint64_t seed) const {
        Dataset out;
        out.name = "rollouts";
        out.feature_names = train_.feature_names;
        out.trajectories.reserve(n);
        for (std::size_t k = 0; k < n; ++k) {
            nd::Rng rng(nd::derive_seed(seed, k));
            out.trajectories.push_back(policy_.rollout(horizon_, rng).first);
        }
        return out;
    }

private:
    void split_dataset(const Dataset& ds) {
        std::vector<std::size_t> idx(ds.size());
        for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
        nd::Rng split_rng(nd::derive_seed(cfg_.seed, 0x5917));
        for (std::size_t i = idx.size(); i > 1; --i)
            std::swap(idx[i - 1], idx[split_rng.uniform_index(i)]);
        const std::size_t n_val =
            std::max<std::size_t>(1, static_cast<std::size_t>(cfg_.val_fraction * ds.size()));
        train_.name = ds.name;
        val_.name = ds.name + "(val)";
        train_.feature_names = val_.feature_names = ds.feature_names;
        for (std::size_t i = 0; i < idx.size(); ++i) {
            (i < n_val ? val_ : train_).trajectories.push_back(ds.trajectories[idx[i]]);
        }
    }

    void require_timegci(const char* what) const {
        if (method_ != Method::timegci)
            throw std::logic_error(std::string(what) + ": only applies to the timegci method");
    }

    std::vector<Trajectory> sample_train_batch(std::size_t m) {
        std::vector<Trajectory> batch;
        batch.reserve(m);
        for (std::size_t k = 0; k < m; ++k)
            batch.push_back(train_.trajectories[rng_.uniform_index(train_.size())]);
        return batch;
    }

    Trajectory rollout_once() {
        nd::Rng roll(rng_.next_u64());
        return policy_.rollout(horizon_, roll).first;
    }

    void backward_named(nd::Tape& tape, nd::NodeId loss, const char* name) {
        try {
            tape.backward(loss);
        } catch (const std::exception& e) {
            throw std::runtime_error(std::string(name) + " aborted at joint step " +
                                     std::to_string(joint_step_) + ": " + e.what());
        }
    }

    // One (actor+MLE, energy, critic x k) triplet, the Algorithm-1 ordering.
    void run_triplet() {
        run_actor_mle_step();
        run_energy_step();
        for (std::size_t k = 0; k < cfg_.critic_updates_per_actor_update; ++k)
            run_critic_substep();
        ++run_count_;
    }

    void run_actor_mle_step() {
        auto histories = buffer_.sample_histories(cfg_.M, rng_);
        if (cfg_.actor_samples > 1) {
            std::vector<HistorySample> expanded;
            expanded.reserve(histories.size() * cfg_.actor_samples);
            for (const auto& h : histories)
                for (std::size_t k = 0; k < cfg_.actor_samples; ++k) expanded.push_back(h);
            histories = std::move(expanded);
        }
        auto noise = draw_actor_noise(histories.size(), feature_dim_, rng_);
        auto mle_batch = sample_train_batch(cfg_.M);

        tape_.reset();
        PolicyRefs pr = put(tape_, policy_);
        nd::MlpHeadRef ch = put(tape_, critic_.head);
        nd::NodeId actor = actor_loss_node(tape_, pr, critic_, ch, histories, cfg_.alpha, noise);
        nd::NodeId mle = mle_loss_node(tape_, pr, mle_batch);
        nd::NodeId loss = tape_.add(actor, tape_.scale(mle, cfg_.kappa));
        backward_named(tape_, loss, "L_actor");
        auto params = policy_.parameters();
        auto leaves = leaf_list(pr);
        nd::apply_adam(tape_, leaves, params, adam_policy_, cfg_.lr_policy);
        run_actor_ += tape_.value_scalar(actor);
        run_mle_ += tape_.value_scalar(mle);
    }

    void run_energy_step() {
        auto real = sample_train_batch(cfg_.M);
        std::vector<Trajectory> fake;
        if (cfg_.energy_fresh_rollouts) {
            fake.reserve(cfg_.M);
            for (std::size_t k = 0; k < cfg_.M; ++k) fake.push_back(rollout_once());
        } else {
            fake = buffer_.sample_trajectories(std::min(cfg_.M, buffer_.size()), rng_);
        }
        tape_.reset();
        EnergyRefs er = put(tape_, energy_);
        nd::NodeId loss = energy_loss_node(tape_, er, policy_, real, fake);
        backward_named(tape_, loss, "L_energy");
        auto params = energy_.parameters();
        auto leaves = leaf_list(er);
        nd::apply_adam(tape_, leaves, params, adam_energy_, cfg_.lr_energy);
        run_energy_ += tape_.value_scalar(loss);
    }

    double critic_update(const char* name) {
        auto transitions = buffer_.sample_transitions(cfg_.M, rng_);
        // Bootstrap targets once (twin-aware), then fit each online critic.
        std::vector<double> targets(transitions.size());
        for (std::size_t k = 0; k < transitions.size(); ++k) {
            const TransitionSample& ts = transitions[k];
            HistoryState he = energy_.init_history(horizon_);
            for (std::size_t t = 0; t + 1 < ts.cutoff; ++t) energy_.advance(he, ts.trajectory.step(t));
            const double f = energy_.transition_energy(he, ts.action());
            targets[k] = f + bootstrap_value(ts);
        }
        const double loss1 = fit_critic(critic_, adam_critic_, transitions, targets, name);
        target_.track(critic_, cfg_.polyak_rate);
        if (cfg_.twin_q) {
            fit_critic(critic2_, adam_critic2_, transitions, targets, name);
            target2_.track(critic2_, cfg_.polyak_rate);
        }
        run_critic_ += loss1;
        return loss1;
    }

    void run_critic_substep() { (void)critic_update("L_critic"); }

    double bootstrap_value(const TransitionSample& ts) {
        if (ts.terminal()) return 0.0;
        const std::size_t len = ts.cutoff;
        HistoryState hp = policy_.init_history(horizon_);
        HistoryState h1 = target_.net.init_history(horizon_);
        HistoryState h2 = cfg_.twin_q ? target2_.net.init_history(horizon_) : HistoryState{};
        for (std::size_t t = 0; t < len; ++t) {
            policy_.advance(hp, ts.trajectory.step(t));
            target_.net.advance(h1, ts.trajectory.step(t));
            if (cfg_.twin_q) target2_.net.advance(h2, ts.trajectory.step(t));
        }
        auto [x, log_p] = policy_.sample_action(hp, rng_);
        double q = target_.net.q_value(h1, x);
        if (cfg_.twin_q) q = std::min(q, target2_.net.q_value(h2, x));
        return q - cfg_.alpha * log_p;
    }

    double fit_critic(CriticNet& critic, nd::AdamState& adam,
                      std::span<const TransitionSample> transitions,
                      std::span<const double> targets, const char* name) {
        tape_.reset();
        CriticRefs cr = put(tape_, critic);
        nd::NodeId total = tape_.scalar(0.0);
        for (std::size_t k = 0; k < transitions.size(); ++k) {
            const TransitionSample& ts = transitions[k];
            nd::NodeId hid = lstm_encode(tape_, cr.enc, ts.trajectory.values, ts.cutoff - 1);
            nd::NodeId q = apply(tape_, cr.head, tape_.concat(hid, tape_.leaf(ts.action())));
            total = tape_.add(total, tape_.square(tape_.add_const(q, -targets[k])));
        }
        nd::NodeId loss = tape_.scale(total, 1.0 / static_cast<double>(transitions.size()));
        backward_named(tape_, loss, name);
        auto params = critic.parameters();
        auto leaves = leaf_list(cr);
        nd::apply_adam(tape_, leaves, params, adam, cfg_.lr_critic);
        return tape_.value_scalar(loss);
    }

    void run_mle_step() {
        auto batch = sample_train_batch(cfg_.M);
        tape_.reset();
        PolicyRefs r = put(tape_, policy_);
        nd::NodeId loss = mle_loss_node(tape_, r, batch);
        backward_named(tape_, loss, "L_mle");
        auto params = policy_.parameters();
        auto leaves = leaf_list(r);
        nd::apply_adam(tape_, leaves, params, adam_policy_, cfg_.lr_policy);
        run_mle_ += tape_.value_scalar(loss);
        ++run_count_;
    }

    // Update isolation: an actor step must change only policy parameters, an
    // energy step only the energy, a critic step only the online critic plus
    // its polyak target.
    void run_isolated_triplet() {
        auto snapshot = [](std::vector<nd::Tensor*> params) {
            std::vector<nd::Tensor> copy;
            copy.reserve(params.size());
            for (auto* p : params) copy.push_back(*p);
            return copy;
        };
        auto unchanged = [](std::vector<nd::Tensor*> params, const std::vector<nd::Tensor>& snap) {
            for (std::size_t i = 0; i < params.size(); ++i)
                if (nd::max_abs_diff(*params[i], snap[i]) != 0.0) return false;
            return true;
        };
        auto pp = policy_.parameters();
        auto ep = energy_.parameters();
        auto cp = critic_.parameters();
        auto tp = target_.net.parameters();

        auto e0 = snapshot(ep);
        auto c0 = snapshot(cp);
        auto t0 = snapshot(tp);
        run_actor_mle_step();
        if (!unchanged(ep, e0) || !unchanged(cp, c0) || !unchanged(tp, t0))
            throw std::logic_error("update isolation: actor step touched non-policy parameters");

        auto p1 = snapshot(pp);
        auto c1 = snapshot(cp);
        auto t1 = snapshot(tp);
        run_energy_step();
        if (!unchanged(pp, p1) || !unchanged(cp, c1) || !unchanged(tp, t1))
            throw std::logic_error("update isolation: energy step touched non-energy parameters");

        auto p2 = snapshot(pp);
        auto e2 = snapshot(ep);
        for (std::size_t k = 0; k < cfg_.critic_updates_per_actor_update; ++k)
            run_critic_substep();
        if (!unchanged(pp, p2) || !unchanged(ep, e2))
            throw std::logic_error("update isolation: critic step touched non-critic parameters");
        ++run_count_;
    }

    bool evaluate_and_record(TrainOutcome& outcome) {
        const double val = validation_score();
        MetricsRow row;
        row.step = joint_step_;
        row.val_predictive_score = val;
        if (run_count_ > 0) {
            const double n = static_cast<double>(run_count_);
            if (method_ == Method::timegci) {
                row.loss_actor = run_actor_ / n;
                row.loss_energy = run_energy_ / n;
                row.loss_critic = run_critic_ /
                                  (n * static_cast<double>(cfg_.critic_updates_per_actor_update));
                row.loss_mle = run_mle_ / n;
            } else {
                row.loss_mle = run_mle_ / n;
            }
        }
        run_actor_ = run_energy_ = run_critic_ = run_mle_ = 0.0;
        run_count_ = 0;
        outcome.metrics.push_back(row);

        if (val < best_val_) {
            best_val_ = val;
            best_step_ = joint_step_;
            patience_counter_ = 0;
            best_checkpoint_ = checkpoint();
            have_best_ = true;
        } else {
            ++patience_counter_;
        }
        return patience_counter_ >= cfg_.early_stop_patience;
    }

    TrainConfig cfg_;
    Method method_;
    Dataset train_, val_;
    Normalizer norm_;
    nd::Rng rng_;
    std::size_t feature_dim_ = 0;
    std::size_t horizon_ = 0;

    PolicyNet policy_;
    EnergyNet energy_;
    CriticNet critic_, critic2_;
    TargetCritic target_, target2_;
    nd::AdamState adam_policy_, adam_energy_, adam_critic_, adam_critic2_;
    ReplayBuffer buffer_;
    nd::Tape tape_;

    std::uint64_t joint_step_ = 0;
    double best_val_ = std::numeric_limits<double>::infinity();
    std::uint64_t best_step_ = 0;
    std::uint64_t patience_counter_ = 0;
    double run_actor_ = 0.0, run_energy_ = 0.0, run_critic_ = 0.0, run_mle_ = 0.0;
    std::uint64_t run_count_ = 0;
    Checkpoint best_checkpoint_;
    bool have_best_ = false;
    bool pretrained_ = false;
    bool resumed_ = false;
};

}  // namespace timegci
