// SPDX-License-Identifier: Apache-2.0
#include "ww/common.hpp"

#include <array>
#include <cstdio>
#include <fstream>
#include <vector>

namespace ww {

std::string_view to_string(Site site) {
    switch (site) {
    case Site::attn_out: return "attn_out";
    case Site::mlp_down: return "mlp_down";
    case Site::probe: return "probe";
    }
    return "?";
}

Site site_from_string(std::string_view s) {
    if (s == "attn_out") return Site::attn_out;
    if (s == "mlp_down") return Site::mlp_down;
    if (s == "probe") return Site::probe;
    throw FormatError("unknown site '" + std::string(s) + "'");
}

std::string_view to_string(Role role) {
    switch (role) {
    case Role::user: return "user";
    case Role::assistant: return "assistant";
    case Role::other: return "other";
    }
    return "?";
}

Role role_from_string(std::string_view s) {
    if (s == "user") return Role::user;
    if (s == "assistant") return Role::assistant;
    if (s == "other") return Role::other;
    throw FormatError("unknown role '" + std::string(s) + "'");
}

Role role_from_byte(uint8_t b) {
    if (b > 2) throw FormatError("invalid role byte " + std::to_string(b));
    return static_cast<Role>(b);
}

std::string DirectionKey::render() const {
    char prefix = 'O';
    if (site == Site::mlp_down) prefix = 'D';
    else if (site == Site::probe) prefix = 'P';
    return std::string(1, prefix) + std::to_string(layer) + "_u" + std::to_string(index);
}

void Fnv1a::update(const void* data, size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < n; ++i) {
        h_ ^= p[i];
        h_ *= 0x100000001b3ULL;
    }
}

std::string Fnv1a::hex() const {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h_));
    return buf;
}

std::string file_checksum(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    Fnv1a h;
    std::vector<char> buf(1 << 16);
    while (in) {
        in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
        h.update(buf.data(), static_cast<size_t>(in.gcount()));
    }
    return h.hex();
}

namespace {
constexpr char kB64[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";

std::array<int8_t, 256> make_b64_table() {
    std::array<int8_t, 256> t{};
    t.fill(-1);
    for (int i = 0; i < 64; ++i) t[static_cast<unsigned char>(kB64[i])] = static_cast<int8_t>(i);
    return t;
}
} // namespace

std::string base64_encode(const void* data, size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    std::string out;
    out.reserve((n + 2) / 3 * 4);
    size_t i = 0;
    for (; i + 2 < n; i += 3) {
        uint32_t v = (uint32_t(p[i]) << 16) | (uint32_t(p[i + 1]) << 8) | p[i + 2];
        out += kB64[(v >> 18) & 63];
        out += kB64[(v >> 12) & 63];
        out += kB64[(v >> 6) & 63];
        out += kB64[v & 63];
    }
    if (i < n) {
        uint32_t v = uint32_t(p[i]) << 16;
        if (i + 1 < n) v |= uint32_t(p[i + 1]) << 8;
        out += kB64[(v >> 18) & 63];
        out += kB64[(v >> 12) & 63];
        out += (i + 1 < n) ? kB64[(v >> 6) & 63] : '=';
        out += '=';
    }
    return out;
}

std::string base64_decode(std::string_view text) {
    static const auto table = make_b64_table();
    if (text.size() % 4 != 0) throw FormatError("base64 length not a multiple of 4");
    std::string out;
    out.reserve(text.size() / 4 * 3);
    for (size_t i = 0; i < text.size(); i += 4) {
        int vals[4];
        int pad = 0;
        for (int j = 0; j < 4; ++j) {
            char c = text[i + j];
            if (c == '=') {
                if (i + 4 != text.size() || j < 2) throw FormatError("misplaced base64 padding");
                vals[j] = 0;
                ++pad;
            } else {
                if (pad) throw FormatError("misplaced base64 padding");
                vals[j] = table[static_cast<unsigned char>(c)];
                if (vals[j] < 0) throw FormatError("invalid base64 character");
            }
        }
        uint32_t v = (uint32_t(vals[0]) << 18) | (uint32_t(vals[1]) << 12) | (uint32_t(vals[2]) << 6) | uint32_t(vals[3]);
        out += static_cast<char>((v >> 16) & 0xff);
        if (pad < 2) out += static_cast<char>((v >> 8) & 0xff);
        if (pad < 1) out += static_cast<char>(v & 0xff);
    }
    return out;
}

} // namespace ww
