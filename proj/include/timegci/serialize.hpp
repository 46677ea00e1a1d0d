#pragma once

#include <bit>
#include <cstdint>
#include <fstream>
#include <istream>
#include <ostream>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "nd/tensor.hpp"

// Little-endian binary (de)serialization for checkpoints. Doubles are written
// bit-exactly so a round trip restores state to the last ulp.

namespace timegci::io {

class Writer {
public:
    explicit Writer(std::ostream& out) : out_(out) {}

    void u8(std::uint8_t v) { out_.put(static_cast<char>(v)); }

    void u64(std::uint64_t v) {
        char buf[8];
        for (int i = 0; i < 8; ++i) buf[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
        out_.write(buf, 8);
    }

    void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }

    void str(const std::string& s) {
        u64(s.size());
        out_.write(s.data(), static_cast<std::streamsize>(s.size()));
    }

    void tensor(const nd::Tensor& t) {
        u64(t.rank());
        for (std::size_t i = 0; i < t.rank(); ++i) u64(t.dim(i));
        for (double v : t.data()) f64(v);
    }

    void tensors(std::span<nd::Tensor* const> list) {
        u64(list.size());
        for (const nd::Tensor* t : list) tensor(*t);
    }

    bool ok() const { return static_cast<bool>(out_); }

private:
    std::ostream& out_;
};

class Reader {
public:
    explicit Reader(std::istream& in) : in_(in) {}

    std::uint8_t u8() {
        int c = in_.get();
        if (c == EOF) fail("unexpected end of stream");
        return static_cast<std::uint8_t>(c);
    }

    std::uint64_t u64() {
        char buf[8];
        in_.read(buf, 8);
        if (!in_) fail("unexpected end of stream");
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i)
            v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[i])) << (8 * i);
        return v;
    }

    double f64() { return std::bit_cast<double>(u64()); }

    std::string str() {
        const std::uint64_t n = u64();
        std::string s(n, '\0');
        in_.read(s.data(), static_cast<std::streamsize>(n));
        if (!in_) fail("unexpected end of stream");
        return s;
    }

    nd::Tensor tensor() {
        const std::uint64_t rank = u64();
        std::vector<std::size_t> shape(rank);
        for (auto& d : shape) d = u64();
        nd::Tensor t(shape);
        for (std::size_t i = 0; i < t.size(); ++i) t[i] = f64();
        return t;
    }

    void tensors(std::span<nd::Tensor* const> into) {
        const std::uint64_t n = u64();
        if (n != into.size()) fail("tensor list size mismatch");
        for (nd::Tensor* t : into) {
            nd::Tensor loaded = tensor();
            if (!loaded.same_shape(*t)) fail("tensor shape mismatch");
            *t = std::move(loaded);
        }
    }

    [[noreturn]] void fail(const std::string& what) {
        throw std::runtime_error("checkpoint read: " + what);
    }

private:
    std::istream& in_;
};

}  // namespace timegci::io
