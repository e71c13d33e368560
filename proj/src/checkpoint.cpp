#include <cstring>
#include <fstream>

#include "ssmlm/json_io.hpp"
#include "ssmlm/model.hpp"
#include "ssmlm/util.hpp"

namespace ssmlm {

using nlohmann::json;

void to_json(json& j, const BlockConfig& c) {
    j = json{{"d_model", c.d_model}, {"d_inner", c.d_inner}, {"d_state", c.d_state},
             {"d_conv", c.d_conv},   {"dt_rank", c.dt_rank}};
}
void from_json(const json& j, BlockConfig& c) {
    j.at("d_model").get_to(c.d_model);
    j.at("d_inner").get_to(c.d_inner);
    j.at("d_state").get_to(c.d_state);
    j.at("d_conv").get_to(c.d_conv);
    j.at("dt_rank").get_to(c.dt_rank);
}
void to_json(json& j, const ModelConfig& c) {
    j = json{{"num_layer", c.num_layer},     {"d_model", c.d_model},
             {"vocab_size", c.vocab_size},   {"context_len", c.context_len},
             {"block", c.block},             {"tie_embeddings", c.tie_embeddings},
             {"use_pos_emb", c.use_pos_emb}};
}
void from_json(const json& j, ModelConfig& c) {
    j.at("num_layer").get_to(c.num_layer);
    j.at("d_model").get_to(c.d_model);
    j.at("vocab_size").get_to(c.vocab_size);
    j.at("context_len").get_to(c.context_len);
    j.at("block").get_to(c.block);
    j.at("tie_embeddings").get_to(c.tie_embeddings);
    c.use_pos_emb = j.value("use_pos_emb", false);
}

static constexpr char kMagic[] = "SSMLM v1\n";

template <class T>
static const char* dtype_name() { return sizeof(T) == 4 ? "f32" : "f64"; }

template <class T>
void save_checkpoint(const LmModel<T>& model, const std::string& path) {
    auto& m = const_cast<LmModel<T>&>(model);
    json header;
    header["format"] = "ssmlm-checkpoint";
    header["version"] = 1;
    header["dtype"] = dtype_name<T>();
    header["config"] = model.cfg;
    json tensors = json::array();
    uint64_t offset = 0;
    for (auto* p : m.params()) {
        tensors.push_back({{"name", p->name}, {"shape", p->w.shape}, {"offset", offset}});
        offset += uint64_t(p->w.size()) * sizeof(T);
    }
    header["tensors"] = tensors;
    std::string hs = header.dump();

    std::ofstream f(path, std::ios::binary);
    check(f.good(), "save_checkpoint: cannot open ", path);
    f.write(kMagic, sizeof(kMagic) - 1);
    uint64_t hlen = hs.size();
    f.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
    f.write(hs.data(), std::streamsize(hs.size()));
    for (auto* p : m.params()) {
        f.write(reinterpret_cast<const char*>(p->w.data()),
                std::streamsize(size_t(p->w.size()) * sizeof(T)));
    }
    check(f.good(), "save_checkpoint: write failed for ", path);
}

static json read_header(std::ifstream& f, const std::string& path) {
    char magic[sizeof(kMagic) - 1];
    f.read(magic, sizeof(magic));
    check(f.good() && std::memcmp(magic, kMagic, sizeof(magic)) == 0,
          "load_checkpoint: ", path, " is not a checkpoint file");
    uint64_t hlen = 0;
    f.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
    std::string hs(hlen, '\0');
    f.read(hs.data(), std::streamsize(hlen));
    check(f.good(), "load_checkpoint: truncated header in ", path);
    json header = json::parse(hs);
    check(header.value("format", "") == "ssmlm-checkpoint", "load_checkpoint: bad format field");
    check(header.value("version", 0) == 1, "load_checkpoint: unsupported version");
    return header;
}

std::string checkpoint_dtype(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    check(f.good(), "load_checkpoint: cannot open ", path);
    return read_header(f, path).at("dtype").get<std::string>();
}

template <class T>
void load_checkpoint(LmModel<T>& model, const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    check(f.good(), "load_checkpoint: cannot open ", path);
    json header = read_header(f, path);
    check(header.at("dtype").get<std::string>() == dtype_name<T>(),
          "load_checkpoint: dtype mismatch, file has ", header.at("dtype").get<std::string>());
    ModelConfig cfg = header.at("config").get<ModelConfig>();
    model.init(cfg, 0);
    std::streampos payload = f.tellg();
    for (auto& te : header.at("tensors")) {
        std::string name = te.at("name").get<std::string>();
        Param<T>* target = nullptr;
        for (auto* p : model.params()) {
            if (p->name == name) { target = p; break; }
        }
        check(target != nullptr, "load_checkpoint: unknown tensor ", name);
        auto shape = te.at("shape").get<std::vector<int64_t>>();
        check(shape == target->w.shape, "load_checkpoint: shape mismatch for ", name);
        f.seekg(payload + std::streampos(te.at("offset").get<uint64_t>()));
        f.read(reinterpret_cast<char*>(target->w.data()),
               std::streamsize(size_t(target->w.size()) * sizeof(T)));
        check(f.good(), "load_checkpoint: truncated payload reading ", name);
    }
}

template void save_checkpoint<float>(const LmModel<float>&, const std::string&);
template void save_checkpoint<double>(const LmModel<double>&, const std::string&);
template void load_checkpoint<float>(LmModel<float>&, const std::string&);
template void load_checkpoint<double>(LmModel<double>&, const std::string&);

} // namespace ssmlm
