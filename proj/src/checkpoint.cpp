// SPDX-License-Identifier: Apache-2.0
#include "factortopy/checkpoint.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>

#include "factortopy/error.hpp"

namespace factortopy {

using nlohmann::json;

namespace {

constexpr char kMagic[8] = {'F', 'T', 'O', 'P', 'Y', 'C', 'K', 'P'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void put(std::string& out, T value) {
    out.append(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T take(const std::string& in, std::size_t& pos, const std::string& source) {
    if (pos + sizeof(T) > in.size()) throw FormatError("checkpoint " + source + " is truncated");
    T value;
    std::memcpy(&value, in.data() + pos, sizeof(T));
    pos += sizeof(T);
    return value;
}

}  // namespace

json config_to_json(const EncoderConfig& c) {
    return {{"variant", to_string(c.variant)},
            {"bottleneck_dim", c.bottleneck_dim},
            {"pe_frequencies", c.pe_frequencies},
            {"hidden_width", c.hidden_width},
            {"hidden_layers", c.hidden_layers},
            {"hidden_activation", to_string(c.hidden_activation)},
            {"grid_height", c.grid_height},
            {"grid_width", c.grid_width},
            {"multi_sample_heads", c.multi_sample_heads}};
}

EncoderConfig config_from_json(const json& doc) {
    EncoderConfig c;
    c.variant = variant_from_string(doc.value("variant", to_string(c.variant)));
    c.bottleneck_dim = doc.value("bottleneck_dim", c.bottleneck_dim);
    c.pe_frequencies = doc.value("pe_frequencies", c.pe_frequencies);
    c.hidden_width = doc.value("hidden_width", c.hidden_width);
    c.hidden_layers = doc.value("hidden_layers", c.hidden_layers);
    c.hidden_activation =
        activation_from_string(doc.value("hidden_activation", to_string(c.hidden_activation)));
    c.grid_height = doc.value("grid_height", c.grid_height);
    c.grid_width = doc.value("grid_width", c.grid_width);
    c.multi_sample_heads = doc.value("multi_sample_heads", c.multi_sample_heads);
    return c;
}

std::string serialize_model(const EncoderModel& model, const json& extra) {
    json header;
    header["config"] = config_to_json(model.config());
    header["voxels"] = model.voxel_count();
    header["layers"] = json::array();
    for (const auto& s : model.layers()) {
        header["layers"].push_back(
            {{"name", s.name}, {"channels", s.channels}, {"height", s.height}, {"width", s.width}});
    }
    header["groups"] = json::array();
    for (const auto& p : model.parameters()) {
        header["groups"].push_back({{"name", p.name}, {"shape", p.value->shape()}});
    }
    header["extra"] = extra;
    const std::string text = header.dump();

    std::string out(kMagic, sizeof(kMagic));
    put(out, kVersion);
    put(out, static_cast<std::uint64_t>(text.size()));
    out += text;
    for (const auto& p : model.parameters()) {
        out.append(reinterpret_cast<const char*>(p.value->data()), p.value->size() * sizeof(float));
    }
    return out;
}

EncoderModel deserialize_model(const std::string& bytes, const std::string& source, json* extra) {
    if (bytes.size() < sizeof(kMagic) || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
        throw FormatError("checkpoint " + source + " has a bad magic header");
    }
    std::size_t pos = sizeof(kMagic);
    const auto version = take<std::uint32_t>(bytes, pos, source);
    if (version != kVersion) {
        throw FormatError("checkpoint " + source + " has unsupported version " +
                          std::to_string(version));
    }
    const auto header_len = take<std::uint64_t>(bytes, pos, source);
    if (pos + header_len > bytes.size()) throw FormatError("checkpoint " + source + " is truncated");
    json header;
    try {
        header = json::parse(bytes.substr(pos, header_len));
    } catch (const json::exception& e) {
        throw FormatError("checkpoint " + source + " header is not valid JSON: " + e.what());
    }
    pos += header_len;

    EncoderModel model;
    try {
        std::vector<LayerSpec> layers;
        for (const auto& l : header.at("layers")) {
            layers.push_back({l.at("name").get<std::string>(), l.at("channels").get<std::size_t>(),
                              l.at("height").get<std::size_t>(), l.at("width").get<std::size_t>()});
        }
        model = init_model(config_from_json(header.at("config")),
                           header.at("voxels").get<std::size_t>(), layers, 0);
        auto params = model.parameters();
        const auto& groups = header.at("groups");
        if (groups.size() != params.size()) {
            throw FormatError("checkpoint " + source + " lists " + std::to_string(groups.size()) +
                              " parameter groups, the model has " + std::to_string(params.size()));
        }
        for (std::size_t g = 0; g < params.size(); ++g) {
            const auto name = groups[g].at("name").get<std::string>();
            const auto shape = groups[g].at("shape").get<std::vector<std::size_t>>();
            if (name != params[g].name || shape != params[g].value->shape()) {
                throw FormatError("checkpoint " + source + " group " + std::to_string(g) + " (" +
                                  name + " " + shape_string(shape) + ") does not match model (" +
                                  params[g].name + " " + shape_string(params[g].value->shape()) +
                                  ")");
            }
            const std::size_t nbytes = params[g].value->size() * sizeof(float);
            if (pos + nbytes > bytes.size()) {
                throw FormatError("checkpoint " + source + " payload is truncated in " + name);
            }
            std::memcpy(params[g].value->data(), bytes.data() + pos, nbytes);
            pos += nbytes;
        }
        if (extra) *extra = header.value("extra", json::object());
    } catch (const json::exception& e) {
        throw FormatError("checkpoint " + source + " header violates the schema: " + e.what());
    } catch (const InvalidArgument& e) {
        throw FormatError("checkpoint " + source + " describes an invalid model: " + e.what());
    }
    if (pos != bytes.size()) {
        throw FormatError("checkpoint " + source + " has trailing bytes after the payload");
    }
    return model;
}

void save_checkpoint(const EncoderModel& model, const std::filesystem::path& file,
                     const json& extra) {
    if (file.has_parent_path()) std::filesystem::create_directories(file.parent_path());
    std::ofstream out(file, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot write checkpoint " + file.string());
    const std::string bytes = serialize_model(model, extra);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

EncoderModel load_checkpoint(const std::filesystem::path& file, json* extra) {
    std::ifstream in(file, std::ios::binary);
    if (!in) throw FormatError("cannot open checkpoint " + file.string());
    std::ostringstream buf;
    buf << in.rdbuf();
    return deserialize_model(buf.str(), file.string(), extra);
}

}  // namespace factortopy
