#pragma once

#include <cstddef>
#include <span>
#include <stdexcept>
#include <vector>

#include "data.hpp"
#include "nd/random.hpp"

namespace timegci {

// A trajectory with a cutoff time t in {1..T}; the history prefix is rows
// [0, t-1), which is empty for t = 1.
struct HistorySample {
    Trajectory trajectory;
    std::size_t cutoff = 1;

    std::size_t prefix_length() const { return cutoff - 1; }
};

// A (history, action) pair with its successor implicit in the trajectory;
// cutoff == T marks the terminal transition.
struct TransitionSample {
    Trajectory trajectory;
    std::size_t cutoff = 1;

    std::size_t prefix_length() const { return cutoff - 1; }
    bool terminal() const { return cutoff == trajectory.length(); }
    std::span<const double> action() const { return trajectory.step(cutoff - 1); }
};

// Fixed-capacity FIFO ring of policy-generated trajectories. Once full, each
// push evicts exactly the oldest element.
class ReplayBuffer {
public:
    ReplayBuffer(std::size_t capacity, std::size_t T, std::size_t D)
        : capacity_(capacity), length_(T), dim_(D) {
        if (capacity < 1 || T < 1 || D < 1)
            throw std::invalid_argument("ReplayBuffer: capacity, T, D must be >= 1");
        storage_.reserve(capacity);
    }

    std::size_t capacity() const { return capacity_; }
    std::size_t size() const { return storage_.size(); }
    std::size_t length() const { return length_; }
    std::size_t dim() const { return dim_; }
    bool full() const { return storage_.size() == capacity_; }

    void push(Trajectory tr) {
        if (tr.length() != length_ || tr.dim() != dim_)
            throw std::invalid_argument("ReplayBuffer::push: trajectory shape mismatch");
        if (storage_.size() < capacity_) {
            storage_.push_back(std::move(tr));
        } else {
            storage_[cursor_] = std::move(tr);
            cursor_ = (cursor_ + 1) % capacity_;
        }
    }

    // Oldest-first logical indexing.
    const Trajectory& at(std::size_t i) const {
        if (i >= storage_.size()) throw std::out_of_range("ReplayBuffer::at");
        return full() ? storage_[(cursor_ + i) % capacity_] : storage_[i];
    }

    // Uniform sample of m distinct stored trajectories.
    std::vector<Trajectory> sample_trajectories(std::size_t m, nd::Rng& rng) const {
        if (m > size()) throw std::invalid_argument("sample_trajectories: m exceeds buffer size");
        std::vector<std::size_t> idx(size());
        for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
        std::vector<Trajectory> out;
        out.reserve(m);
        for (std::size_t k = 0; k < m; ++k) {
            const std::size_t j = k + rng.uniform_index(idx.size() - k);
            std::swap(idx[k], idx[j]);
            out.push_back(at(idx[k]));
        }
        return out;
    }

    // m independent draws of (trajectory, cutoff t ~ U{1..T}); trajectories
    // are drawn with replacement across draws.
    std::vector<HistorySample> sample_histories(std::size_t m, nd::Rng& rng) const {
        require_nonempty("sample_histories");
        std::vector<HistorySample> out;
        out.reserve(m);
        for (std::size_t k = 0; k < m; ++k) {
            HistorySample hs;
            hs.trajectory = at(rng.uniform_index(size()));
            hs.cutoff = 1 + rng.uniform_index(length_);
            out.push_back(std::move(hs));
        }
        return out;
    }

    std::vector<TransitionSample> sample_transitions(std::size_t m, nd::Rng& rng) const {
        require_nonempty("sample_transitions");
        std::vector<TransitionSample> out;
        out.reserve(m);
        for (std::size_t k = 0; k < m; ++k) {
            TransitionSample ts;
            ts.trajectory = at(rng.uniform_index(size()));
            ts.cutoff = 1 + rng.uniform_index(length_);
            out.push_back(std::move(ts));
        }
        return out;
    }

    // Whole contents oldest-first (checkpointing).
    std::vector<Trajectory> snapshot() const {
        std::vector<Trajectory> out;
        out.reserve(size());
        for (std::size_t i = 0; i < size(); ++i) out.push_back(at(i));
        return out;
    }

    void restore(std::vector<Trajectory> contents) {
        if (contents.size() > capacity_)
            throw std::invalid_argument("ReplayBuffer::restore: contents exceed capacity");
        storage_.clear();
        cursor_ = 0;
        for (auto& tr : contents) push(std::move(tr));
    }

private:
    void require_nonempty(const char* what) const {
        if (storage_.empty()) throw std::logic_error(std::string(what) + ": buffer is empty");
    }

    std::size_t capacity_;
    std::size_t length_;
    std::size_t dim_;
    std::vector<Trajectory> storage_;
    std::size_t cursor_ = 0;
};

}  // namespace timegci
