#include "neuroencode/model_io.hpp"

#include <stdexcept>
#include <string>

#include "neuroencode/config_json.hpp"
#include "neuroencode/container.hpp"

namespace neuroencode {

namespace {

std::string layer_key(int layer, const char* field) {
    return "l" + std::to_string(layer) + "_" + field;
}

const char* kLayerFields[] = {"wq",    "wk",    "wv",    "wo",    "ff1",   "ff2",
                              "ff1_b", "ff2_b", "ln1_g", "ln1_b", "ln2_g", "ln2_b"};

Matrix* layer_slot(LayerWeights& lw, int field) {
    Matrix* slots[] = {&lw.wq,    &lw.wk,    &lw.wv,    &lw.wo,    &lw.ff1,   &lw.ff2,
                       &lw.ff1_b, &lw.ff2_b, &lw.ln1_g, &lw.ln1_b, &lw.ln2_g, &lw.ln2_b};
    return slots[field];
}

const Matrix& find_section(const Container& c, const std::string& name) {
    for (const auto& s : c.sections) {
        if (s.name == name) return s.data;
    }
    throw std::runtime_error("container missing section '" + name + "'");
}

}  // namespace

void save_encoder(const std::string& path, const EncoderWeights& w) {
    Container c;
    c.meta["kind"] = "encoder";
    c.meta["config"] = w.config;
    c.sections.push_back({"frame_proj", w.frame_proj, false});
    c.sections.push_back({"frame_bias", w.frame_bias, false});
    for (int l = 0; l < static_cast<int>(w.layers.size()); ++l) {
        LayerWeights lw = w.layers[l];
        for (int f = 0; f < 12; ++f) {
            c.sections.push_back({layer_key(l, kLayerFields[f]), *layer_slot(lw, f), false});
        }
    }
    write_container(path, c);
}

EncoderWeights load_encoder(const std::string& path) {
    const Container c = read_container(path);
    if (c.meta.value("kind", "") != "encoder") {
        throw std::runtime_error("'" + path + "' is not an encoder container");
    }
    EncoderWeights w;
    w.config = c.meta.at("config").get<EncoderConfig>();
    w.config.validate();
    w.frame_proj = find_section(c, "frame_proj");
    w.frame_bias = find_section(c, "frame_bias");
    w.layers.resize(w.config.n_layers);
    for (int l = 0; l < w.config.n_layers; ++l) {
        for (int f = 0; f < 12; ++f) {
            *layer_slot(w.layers[l], f) = find_section(c, layer_key(l, kLayerFields[f]));
        }
    }
    return w;
}

void save_adapters(const std::string& path, const LoraAdapterSet& ad) {
    Container c;
    c.meta["kind"] = "lora_adapters";
    c.meta["rank"] = ad.rank;
    c.meta["alpha"] = ad.alpha;
    c.meta["n_layers"] = static_cast<int>(ad.layers.size());
    static const char* proj[] = {"q", "k", "v"};
    for (int l = 0; l < static_cast<int>(ad.layers.size()); ++l) {
        for (int p = 0; p < 3; ++p) {
            c.sections.push_back({layer_key(l, proj[p]) + "_a", ad.layers[l][p].a, false});
            c.sections.push_back({layer_key(l, proj[p]) + "_b", ad.layers[l][p].b, false});
        }
    }
    write_container(path, c);
}

LoraAdapterSet load_adapters(const std::string& path) {
    const Container c = read_container(path);
    if (c.meta.value("kind", "") != "lora_adapters") {
        throw std::runtime_error("'" + path + "' is not an adapter container");
    }
    LoraAdapterSet ad;
    ad.rank = c.meta.at("rank").get<int>();
    ad.alpha = c.meta.at("alpha").get<double>();
    const int n_layers = c.meta.at("n_layers").get<int>();
    if (ad.rank < 1 || n_layers < 0) throw std::runtime_error("bad adapter metadata");
    ad.layers.resize(n_layers);
    static const char* proj[] = {"q", "k", "v"};
    for (int l = 0; l < n_layers; ++l) {
        for (int p = 0; p < 3; ++p) {
            ad.layers[l][p].a = find_section(c, layer_key(l, proj[p]) + "_a");
            ad.layers[l][p].b = find_section(c, layer_key(l, proj[p]) + "_b");
        }
    }
    return ad;
}

}  // namespace neuroencode
