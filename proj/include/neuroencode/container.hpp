#pragma once

#include <string>
#include <vector>

#include "json.hpp"
#include "neuroencode/types.hpp"

namespace neuroencode {

// On-disk matrix container used for features, responses, fits, and adapter
// checkpoints. Layout: magic "NEFM", one version byte, uint32 little-endian
// header length, a JSON header, then the section payloads back to back in
// header order (row-major, little-endian IEEE-754).
struct Section {
    std::string name;
    Matrix data;
    bool single_precision = false;
};

struct Container {
    nlohmann::json meta = nlohmann::json::object();
    std::vector<Section> sections;

    const Matrix* find(const std::string& name) const;
    const Matrix& at(const std::string& name) const;
};

void write_container(const std::string& path, const Container& c);
Container read_container(const std::string& path);

}  // namespace neuroencode
