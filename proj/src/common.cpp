#include "raddpo/common.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

namespace raddpo {

std::string hex64(uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
    return std::string(buf);
}

std::string read_text_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw MissingInputError("cannot open file: " + path);
    }
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::string hash_file_hex(const std::string& path) {
    const std::string bytes = read_text_file(path);
    return hex64(fnv1a64(bytes));
}

} // namespace raddpo
