// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>

namespace ww {

// Error categories map onto CLI exit codes (usage 2, format 3, shape 4).
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
    virtual int exit_code() const { return 1; }
};

class UsageError : public Error {
public:
    using Error::Error;
    int exit_code() const override { return 2; }
};

class FormatError : public Error {
public:
    using Error::Error;
    int exit_code() const override { return 3; }
};

class IoError : public Error {
public:
    using Error::Error;
    int exit_code() const override { return 3; }
};

class ShapeError : public Error {
public:
    using Error::Error;
    int exit_code() const override { return 4; }
};

class NumericError : public Error {
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

enum class Site : uint8_t { attn_out = 0, mlp_down = 1, probe = 2 };
enum class Role : uint8_t { user = 0, assistant = 1, other = 2 };

inline constexpr int kRoleCount = 3;

std::string_view to_string(Site site);
Site site_from_string(std::string_view s);
std::string_view to_string(Role role);
Role role_from_string(std::string_view s);
Role role_from_byte(uint8_t b);

// Paper-style short names: O4_u11 (attn_out), D5_u12 (mlp_down), P3_u0 (probe).
struct DirectionKey {
    uint32_t layer = 0;
    Site site = Site::attn_out;
    uint32_t index = 0;

    auto operator<=>(const DirectionKey&) const = default;
    std::string render() const;
};

// 64-bit FNV-1a; used for bundle and input checksums in reports.
class Fnv1a {
public:
    void update(const void* data, size_t n);
    void update(std::string_view s) { update(s.data(), s.size()); }
    template <typename T>
    void update_pod(const T& v) { update(&v, sizeof(T)); }
    uint64_t digest() const { return h_; }
    std::string hex() const;

private:
    uint64_t h_ = 0xcbf29ce484222325ULL;
};

std::string file_checksum(const std::string& path);

std::string base64_encode(const void* data, size_t n);
std::string base64_decode(std::string_view text);

} // namespace ww
