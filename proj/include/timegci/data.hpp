#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <limits>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "nd/random.hpp"
#include "nd/tensor.hpp"

namespace timegci {

// A length-T sequence of D-dimensional feature vectors; the atomic sample
// unit for training, generation and scoring.
struct Trajectory {
    nd::Tensor values;  // T x D

    Trajectory() = default;
    Trajectory(std::size_t T, std::size_t D) : values({T, D}) {}
    explicit Trajectory(nd::Tensor v) : values(std::move(v)) {
        if (values.rank() != 2) throw std::invalid_argument("Trajectory: values must be T x D");
    }

    std::size_t length() const { return values.dim(0); }
    std::size_t dim() const { return values.dim(1); }
    std::span<const double> step(std::size_t t) const { return values.row(t); }
    std::span<double> step(std::size_t t) { return values.row(t); }
};

struct Dataset {
    std::vector<Trajectory> trajectories;
    std::string name;
    std::vector<std::string> feature_names;

    std::size_t size() const { return trajectories.size(); }
    std::size_t length() const { return trajectories.empty() ? 0 : trajectories.front().length(); }
    std::size_t dim() const { return trajectories.empty() ? 0 : trajectories.front().dim(); }

    void check_uniform() const {
        for (const auto& tr : trajectories)
            if (tr.length() != length() || tr.dim() != dim())
                throw std::invalid_argument("Dataset: trajectories must share T and D");
    }

    static std::vector<std::string> default_feature_names(std::size_t D) {
        std::vector<std::string> names;
        for (std::size_t i = 1; i <= D; ++i) names.push_back("f" + std::to_string(i));
        return names;
    }
};

// ---- synthetic sines -------------------------------------------------------

// Per trajectory and feature: frequency ~ U(0, f_max), phase ~ U(0, phase_max),
// x_t = (sin(f t + phase) + 1) / 2 for t = 0..T-1. Values land in [0, 1].
inline Dataset generate_sines(std::size_t n, std::size_t T, std::size_t D, std::uint64_t seed,
                              double f_max = 0.1, double phase_max = 0.1) {
    if (n < 1 || T < 1 || D < 1) throw std::invalid_argument("generate_sines: n, T, D must be >= 1");
    nd::Rng rng(seed);
    Dataset ds;
    ds.name = "sines";
    ds.feature_names = Dataset::default_feature_names(D);
    ds.trajectories.reserve(n);
    for (std::size_t k = 0; k < n; ++k) {
        Trajectory tr(T, D);
        for (std::size_t i = 0; i < D; ++i) {
            const double f = rng.uniform(0.0, f_max);
            const double phase = rng.uniform(0.0, phase_max);
            for (std::size_t t = 0; t < T; ++t)
                tr.values(t, i) = (std::sin(f * static_cast<double>(t) + phase) + 1.0) / 2.0;
        }
        ds.trajectories.push_back(std::move(tr));
    }
    return ds;
}

// ---- CSV ingestion ---------------------------------------------------------
//
// Format: UTF-8, comma-separated, header `series_id,t,<f1>,...,<fD>`, rows
// grouped by series with t increasing within each series.

namespace csv_detail {

inline std::vector<std::string> split_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    for (char ch : line) {
        if (ch == ',') {
            out.push_back(cur);
            cur.clear();
        } else if (ch != '\r') {
            cur += ch;
        }
    }
    out.push_back(cur);
    return out;
}

inline double parse_cell(const std::string& cell, std::size_t row, const std::string& column) {
    double v = 0.0;
    const char* begin = cell.data();
    const char* end = begin + cell.size();
    auto [ptr, ec] = std::from_chars(begin, end, v);
    if (ec != std::errc() || ptr != end)
        throw std::runtime_error("load_csv: non-numeric cell at row " + std::to_string(row) +
                                 ", column " + column + " ('" + cell + "')");
    return v;
}

inline std::string format_double(double v) {
    char buf[40];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    if (ec != std::errc()) throw std::runtime_error("format_double failed");
    return std::string(buf, ptr);
}

}  // namespace csv_detail

// Slices each series into consecutive windows of length T (stride 0 means
// non-overlapping, i.e. stride == T). Series shorter than T are an error.
inline Dataset load_csv(const std::string& path, std::size_t T, std::size_t stride = 0) {
    if (T < 1) throw std::invalid_argument("load_csv: T must be >= 1");
    if (stride == 0) stride = T;
    std::ifstream in(path);
    if (!in) throw std::runtime_error("load_csv: cannot open " + path);

    std::string line;
    if (!std::getline(in, line)) throw std::runtime_error("load_csv: empty file " + path);
    auto header = csv_detail::split_line(line);
    if (header.size() < 3 || header[0] != "series_id" || header[1] != "t")
        throw std::runtime_error("load_csv: header must be series_id,t,<features> in " + path);
    const std::size_t D = header.size() - 2;

    Dataset ds;
    ds.name = path;
    ds.feature_names.assign(header.begin() + 2, header.end());

    std::vector<std::vector<double>> series_rows;  // rows of current series
    std::string current_id;
    bool have_series = false;
    std::size_t row_number = 1;

    auto flush_series = [&]() {
        if (!have_series) return;
        if (series_rows.size() < T)
            throw std::runtime_error("load_csv: series '" + current_id + "' has " +
                                     std::to_string(series_rows.size()) + " rows, fewer than T=" +
                                     std::to_string(T));
        for (std::size_t start = 0; start + T <= series_rows.size(); start += stride) {
            Trajectory tr(T, D);
            for (std::size_t t = 0; t < T; ++t)
                for (std::size_t i = 0; i < D; ++i) tr.values(t, i) = series_rows[start + t][i];
            ds.trajectories.push_back(std::move(tr));
        }
        series_rows.clear();
    };

    while (std::getline(in, line)) {
        ++row_number;
        if (line.empty()) continue;
        auto cells = csv_detail::split_line(line);
        if (cells.size() != header.size())
            throw std::runtime_error("load_csv: row " + std::to_string(row_number) + " has " +
                                     std::to_string(cells.size()) + " cells, expected " +
                                     std::to_string(header.size()));
        if (!have_series || cells[0] != current_id) {
            flush_series();
            current_id = cells[0];
            have_series = true;
        }
        std::vector<double> row(D);
        (void)csv_detail::parse_cell(cells[1], row_number, header[1]);
        for (std::size_t i = 0; i < D; ++i)
            row[i] = csv_detail::parse_cell(cells[2 + i], row_number, header[2 + i]);
        series_rows.push_back(std::move(row));
    }
    flush_series();
    if (ds.trajectories.empty()) throw std::runtime_error("load_csv: no data rows in " + path);
    ds.check_uniform();
    return ds;
}

// One series per trajectory, t = 1..T, doubles printed with shortest
// round-trip formatting so save/load is exact.
inline void save_csv(const Dataset& ds, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("save_csv: cannot open " + path);
    const std::size_t D = ds.dim();
    auto names = ds.feature_names.size() == D ? ds.feature_names : Dataset::default_feature_names(D);
    out << "series_id,t";
    for (const auto& n : names) out << ',' << n;
    out << '\n';
    for (std::size_t s = 0; s < ds.trajectories.size(); ++s) {
        const Trajectory& tr = ds.trajectories[s];
        for (std::size_t t = 0; t < tr.length(); ++t) {
            out << s << ',' << (t + 1);
            for (std::size_t i = 0; i < D; ++i)
                out << ',' << csv_detail::format_double(tr.values(t, i));
            out << '\n';
        }
    }
    if (!out) throw std::runtime_error("save_csv: write failed for " + path);
}

// ---- normalization ---------------------------------------------------------

// Per-feature min-max scaling onto [0, 1]; constant features map to 0.5.
struct Normalizer {
    std::vector<double> min, max;
    bool fitted = false;

    std::size_t dim() const { return min.size(); }

    Trajectory apply(const Trajectory& tr) const {
        require_fitted("apply");
        check_dim(tr);
        Trajectory out(tr.length(), tr.dim());
        for (std::size_t t = 0; t < tr.length(); ++t)
            for (std::size_t i = 0; i < tr.dim(); ++i) {
                const double range = max[i] - min[i];
                out.values(t, i) = range == 0.0 ? 0.5 : (tr.values(t, i) - min[i]) / range;
            }
        return out;
    }

    Trajectory invert(const Trajectory& tr) const {
        require_fitted("invert");
        check_dim(tr);
        Trajectory out(tr.length(), tr.dim());
        for (std::size_t t = 0; t < tr.length(); ++t)
            for (std::size_t i = 0; i < tr.dim(); ++i) {
                const double range = max[i] - min[i];
                out.values(t, i) = range == 0.0 ? min[i] : tr.values(t, i) * range + min[i];
            }
        return out;
    }

    Dataset apply(const Dataset& ds) const {
        Dataset out;
        out.name = ds.name;
        out.feature_names = ds.feature_names;
        out.trajectories.reserve(ds.size());
        for (const auto& tr : ds.trajectories) out.trajectories.push_back(apply(tr));
        return out;
    }

    Dataset invert(const Dataset& ds) const {
        Dataset out;
        out.name = ds.name;
        out.feature_names = ds.feature_names;
        out.trajectories.reserve(ds.size());
        for (const auto& tr : ds.trajectories) out.trajectories.push_back(invert(tr));
        return out;
    }

private:
    void require_fitted(const char* what) const {
        if (!fitted) throw std::logic_error(std::string("Normalizer::") + what + " before fit");
    }
    void check_dim(const Trajectory& tr) const {
        if (tr.dim() != dim()) throw std::invalid_argument("Normalizer: feature dimension mismatch");
    }
};

inline Normalizer fit_normalizer(const Dataset& ds) {
    if (ds.size() == 0) throw std::invalid_argument("fit_normalizer: empty dataset");
    ds.check_uniform();
    Normalizer norm;
    norm.min.assign(ds.dim(), std::numeric_limits<double>::infinity());
    norm.max.assign(ds.dim(), -std::numeric_limits<double>::infinity());
    for (const auto& tr : ds.trajectories)
        for (std::size_t t = 0; t < tr.length(); ++t)
            for (std::size_t i = 0; i < tr.dim(); ++i) {
                norm.min[i] = std::min(norm.min[i], tr.values(t, i));
                norm.max[i] = std::max(norm.max[i], tr.values(t, i));
            }
    norm.fitted = true;
    return norm;
}

// ---- summary statistics ------------------------------------------------------

struct DatasetStats {
    std::size_t dim = 0;
    std::size_t length = 0;
    std::size_t count = 0;
    double lag1 = 0.0, lag3 = 0.0, lag5 = 0.0;
    std::size_t zero_variance_slices = 0;  // (series, feature) slices skipped

    double lag(std::size_t k) const {
        if (k == 1) return lag1;
        if (k == 3) return lag3;
        if (k == 5) return lag5;
        throw std::invalid_argument("DatasetStats::lag: only lags 1, 3, 5 are tracked");
    }
};

// Mean absolute within-series autocorrelation at lags 1/3/5: for each series
// and feature, acf_k = sum_t (x_t - xbar)(x_{t+k} - xbar) / sum_t (x_t - xbar)^2,
// then |acf_k| is averaged over all (series, feature) slices. Zero-variance
// slices are skipped and counted.
inline DatasetStats dataset_stats(const Dataset& ds) {
    ds.check_uniform();
    const std::size_t T = ds.length();
    if (T <= 5) throw std::invalid_argument("dataset_stats: requires T > 5");
    DatasetStats st;
    st.dim = ds.dim();
    st.length = T;
    st.count = ds.size();

    const std::size_t lags[3] = {1, 3, 5};
    double sums[3] = {0.0, 0.0, 0.0};
    std::size_t used = 0;

    std::vector<double> centered(T);
    for (const auto& tr : ds.trajectories) {
        for (std::size_t i = 0; i < ds.dim(); ++i) {
            double mean = 0.0;
            for (std::size_t t = 0; t < T; ++t) mean += tr.values(t, i);
            mean /= static_cast<double>(T);
            double den = 0.0;
            for (std::size_t t = 0; t < T; ++t) {
                centered[t] = tr.values(t, i) - mean;
                den += centered[t] * centered[t];
            }
            if (den < 1e-12) {
                ++st.zero_variance_slices;
                continue;
            }
            ++used;
            for (int kidx = 0; kidx < 3; ++kidx) {
                const std::size_t k = lags[kidx];
                double num = 0.0;
                for (std::size_t t = 0; t + k < T; ++t) num += centered[t] * centered[t + k];
                sums[kidx] += std::abs(num / den);
            }
        }
    }
    if (used == 0) throw std::runtime_error("dataset_stats: all slices have zero variance");
    st.lag1 = sums[0] / static_cast<double>(used);
    st.lag3 = sums[1] / static_cast<double>(used);
    st.lag5 = sums[2] / static_cast<double>(used);
    return st;
}

}  // namespace timegci
