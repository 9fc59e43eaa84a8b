#pragma once

#include "hfsplat/common.hpp"

#include <cstring>
#include <fstream>
#include <iostream>
#include <string_view>

namespace hfsplat {

/// Raised when a binary record cannot be parsed (bad magic, truncation).
class FormatError : public ValidationError {
public:
    using ValidationError::ValidationError;
};

/// Raised when a record was written by an incompatible format version.
class VersionMismatch : public FormatError {
public:
    using FormatError::FormatError;
};

// Little-endian host byte order is assumed for all binary records.
class BinaryWriter {
public:
    explicit BinaryWriter(std::ostream& os) : os_(os) {}

    void magic(std::string_view tag, std::uint32_t version) {
        os_.write(tag.data(), static_cast<std::streamsize>(tag.size()));
        u32(version);
    }
    void u32(std::uint32_t v) { raw(&v, sizeof v); }
    void u64(std::uint64_t v) { raw(&v, sizeof v); }
    void i32(std::int32_t v) { raw(&v, sizeof v); }
    void f64(double v) { raw(&v, sizeof v); }
    void f64s(std::span<const double> v) {
        u64(v.size());
        raw(v.data(), v.size_bytes());
    }
    void str(std::string_view s) {
        u64(s.size());
        raw(s.data(), s.size());
    }
    void raw(const void* p, std::size_t n) {
        os_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
    }
    [[nodiscard]] bool ok() const { return static_cast<bool>(os_); }

private:
    std::ostream& os_;
};

class BinaryReader {
public:
    BinaryReader(std::istream& is, std::string context) : is_(is), context_(std::move(context)) {}

    /// Checks the tag and returns nothing; throws VersionMismatch on a different version.
    void expect_magic(std::string_view tag, std::uint32_t version) {
        std::string got(tag.size(), '\0');
        raw(got.data(), got.size());
        if (got != tag) fail("bad magic header");
        const std::uint32_t v = u32();
        if (v != version)
            throw VersionMismatch(context_ + ": format version " + std::to_string(v) +
                                  " is incompatible (expected " + std::to_string(version) + ")");
    }
    std::uint32_t u32() { return pod<std::uint32_t>(); }
    std::uint64_t u64() { return pod<std::uint64_t>(); }
    std::int32_t i32() { return pod<std::int32_t>(); }
    double f64() { return pod<double>(); }
    std::vector<double> f64s(std::uint64_t max_len = (1ULL << 32)) {
        const std::uint64_t n = u64();
        if (n > max_len) fail("implausible array length");
        std::vector<double> v(n);
        raw(v.data(), n * sizeof(double));
        return v;
    }
    /// Reads a length-prefixed array whose length must equal `n`.
    void f64s_into(double* out, std::size_t n) {
        const std::uint64_t len = u64();
        if (len != n) fail("array length " + std::to_string(len) + " does not match expected " + std::to_string(n));
        raw(out, n * sizeof(double));
    }
    std::string str() {
        const std::uint64_t n = u64();
        if (n > (1ULL << 28)) fail("implausible string length");
        std::string s(n, '\0');
        raw(s.data(), n);
        return s;
    }
    void raw(void* p, std::size_t n) {
        is_.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
        if (static_cast<std::size_t>(is_.gcount()) != n) fail("truncated record");
    }
    [[noreturn]] void fail(const std::string& why) const { throw FormatError(context_ + ": " + why); }
    [[nodiscard]] const std::string& context() const { return context_; }

private:
    template <class T>
    T pod() {
        T v{};
        raw(&v, sizeof v);
        return v;
    }
    std::istream& is_;
    std::string context_;
};

}  // namespace hfsplat
