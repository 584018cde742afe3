#include "neuroencode/container.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace neuroencode {

namespace {

constexpr char kMagic[4] = {'N', 'E', 'F', 'M'};
constexpr unsigned char kVersion = 1;

[[noreturn]] void fail(const std::string& path, const std::string& what) {
    throw std::runtime_error("container '" + path + "': " + what);
}

}  // namespace

const Matrix* Container::find(const std::string& name) const {
    for (const Section& s : sections)
        if (s.name == name) return &s.data;
    return nullptr;
}

const Matrix& Container::at(const std::string& name) const {
    const Matrix* m = find(name);
    if (!m) throw std::runtime_error("container section '" + name + "' not found");
    return *m;
}

void write_container(const std::string& path, const Container& c) {
    nlohmann::json header;
    header["meta"] = c.meta;
    header["sections"] = nlohmann::json::array();
    for (const Section& s : c.sections) {
        header["sections"].push_back({{"name", s.name},
                                      {"rows", s.data.rows()},
                                      {"cols", s.data.cols()},
                                      {"dtype", s.single_precision ? "f32" : "f64"}});
    }
    const std::string hs = header.dump();

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) fail(path, "cannot open for writing");
    out.write(kMagic, 4);
    out.put(static_cast<char>(kVersion));
    const std::uint32_t hlen = static_cast<std::uint32_t>(hs.size());
    out.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
    out.write(hs.data(), static_cast<std::streamsize>(hs.size()));
    for (const Section& s : c.sections) {
        if (s.single_precision) {
            MatrixF f = s.data.cast<float>();
            out.write(reinterpret_cast<const char*>(f.data()),
                      static_cast<std::streamsize>(sizeof(float) * f.size()));
        } else {
            out.write(reinterpret_cast<const char*>(s.data.data()),
                      static_cast<std::streamsize>(sizeof(double) * s.data.size()));
        }
    }
    if (!out) fail(path, "write failed");
}

Container read_container(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(path, "cannot open");
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, kMagic, 4) != 0) fail(path, "bad magic");
    const int version = in.get();
    if (version != kVersion) fail(path, "unsupported version " + std::to_string(version));
    std::uint32_t hlen = 0;
    in.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
    if (!in) fail(path, "truncated header length");
    std::string hs(hlen, '\0');
    in.read(hs.data(), static_cast<std::streamsize>(hlen));
    if (!in) fail(path, "truncated header");
    nlohmann::json header = nlohmann::json::parse(hs, nullptr, false);
    if (header.is_discarded()) fail(path, "header is not valid JSON");

    Container c;
    c.meta = header.value("meta", nlohmann::json::object());
    for (const auto& sec : header.at("sections")) {
        Section s;
        s.name = sec.at("name").get<std::string>();
        const Index rows = sec.at("rows").get<Index>();
        const Index cols = sec.at("cols").get<Index>();
        const std::string dtype = sec.at("dtype").get<std::string>();
        if (rows < 0 || cols < 0) fail(path, "negative shape in section " + s.name);
        if (dtype == "f32") {
            s.single_precision = true;
            MatrixF f(rows, cols);
            in.read(reinterpret_cast<char*>(f.data()),
                    static_cast<std::streamsize>(sizeof(float) * f.size()));
            s.data = f.cast<double>();
        } else if (dtype == "f64") {
            s.data.resize(rows, cols);
            in.read(reinterpret_cast<char*>(s.data.data()),
                    static_cast<std::streamsize>(sizeof(double) * s.data.size()));
        } else {
            fail(path, "unknown dtype " + dtype);
        }
        if (!in) fail(path, "truncated payload in section " + s.name);
        c.sections.push_back(std::move(s));
    }
    return c;
}

}  // namespace neuroencode
