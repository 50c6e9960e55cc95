#include "arpipe/util/digest.hpp"

#include <openssl/evp.h>

#include <cstring>
#include <stdexcept>

namespace arpipe::util {

std::array<std::uint8_t, 32> sha256(std::string_view data) {
    std::array<std::uint8_t, 32> out{};
    unsigned int len = 0;
    if (EVP_Digest(data.data(), data.size(), out.data(), &len, EVP_sha256(), nullptr) != 1 ||
        len != out.size()) {
        throw std::runtime_error("sha256 failed");
    }
    return out;
}

std::string to_hex(const std::uint8_t* data, std::size_t n) {
    static const char* digits = "0123456789abcdef";
    std::string s;
    s.reserve(n * 2);
    for (std::size_t i = 0; i < n; ++i) {
        s.push_back(digits[data[i] >> 4]);
        s.push_back(digits[data[i] & 0xf]);
    }
    return s;
}

std::string sha256_hex(std::string_view data) {
    auto d = sha256(data);
    return to_hex(d.data(), d.size());
}

std::string sha256_hex16(std::string_view data) {
    auto d = sha256(data);
    return to_hex(d.data(), 16);
}

std::uint64_t stable_hash64(std::string_view data) {
    auto d = sha256(data);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v = (v << 8) | d[static_cast<std::size_t>(i)];
    return v;
}

std::uint64_t derive_seed(std::uint64_t base, std::initializer_list<std::string_view> parts) {
    std::string buf;
    buf.reserve(64);
    buf.append("seed:");
    buf.append(std::to_string(base));
    for (auto p : parts) {
        buf.push_back('\0');
        buf.append(p.data(), p.size());
    }
    return stable_hash64(buf);
}

} // namespace arpipe::util
