// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cstring>
#include <fstream>
#include <sstream>

#include "factortopy/checkpoint.hpp"
#include "fixtures.hpp"

using namespace factortopy;
using nlohmann::json;

namespace {

std::string read_file(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

void write_file(const std::filesystem::path& p, const std::string& bytes) {
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

struct Parsed {
    std::uint32_t version = 0;
    json header;
    std::string payload;
};

// Reads the container layout by hand: 8-byte magic, u32 version, u64 header
// length, JSON header, raw payload.
Parsed parse(const std::string& bytes) {
    Parsed p;
    REQUIRE(bytes.substr(0, 8) == "FTOPYCKP");
    std::memcpy(&p.version, bytes.data() + 8, 4);
    std::uint64_t len = 0;
    std::memcpy(&len, bytes.data() + 12, 8);
    p.header = json::parse(bytes.substr(20, len));
    p.payload = bytes.substr(20 + len);
    return p;
}

std::string assemble(std::uint32_t version, const json& header, const std::string& payload) {
    const std::string text = header.dump();
    std::string out = "FTOPYCKP";
    out.append(reinterpret_cast<const char*>(&version), 4);
    const std::uint64_t len = text.size();
    out.append(reinterpret_cast<const char*>(&len), 8);
    return out + text + payload;
}

void expect_rejected(const std::filesystem::path& file, const std::string& bytes, const std::string& what) {
    write_file(file, bytes);
    try {
        load_checkpoint(file);
        FAIL("corrupted checkpoint was accepted: " << what);
    } catch (const FormatError& e) {
        const std::string msg = e.what();
        CHECK_MESSAGE(msg.find(file.string()) != std::string::npos, msg);
        CHECK_MESSAGE(msg.find(what) != std::string::npos, msg);
    }
}

}  // namespace

TEST_CASE("checkpoint round trip for every variant") {
    fixture::TempDir dir("ckpt");
    for (Variant v : {Variant::factortopy, Variant::class_token, Variant::patch_token, Variant::gnet_vit,
                      Variant::no_layer_sel, Variant::no_space_sel, Variant::no_scale_sel,
                      Variant::no_topology, Variant::multi_sample}) {
        fixture::TinySpec spec;
        spec.variant = v;
        spec.seed = 3;
        auto t = fixture::make_tiny(spec);
        const auto file = dir.path / (to_string(v) + ".ckpt");
        const json extra{{"epoch", 7}, {"note", "x"}};
        save_checkpoint(t.model, file, extra);

        json back_extra;
        const EncoderModel back = load_checkpoint(file, &back_extra);
        CHECK(back_extra == extra);
        CHECK(config_to_json(back.config()) == config_to_json(t.model.config()));
        CHECK(back.voxel_count() == t.model.voxel_count());

        const auto pa = t.model.parameters();
        const auto pb = back.parameters();
        REQUIRE(pa.size() == pb.size());
        for (std::size_t g = 0; g < pa.size(); ++g) {
            CHECK(pa[g].name == pb[g].name);
            CHECK(pa[g].value->shape() == pb[g].value->shape());
            CHECK(std::memcmp(pa[g].value->data(), pb[g].value->data(), pa[g].value->size() * sizeof(float)) == 0);
        }

        const Matrix enc_a = encode_coords(t.model, t.coords);
        const Matrix enc_b = encode_coords(back, t.coords);
        const Matrix ya = predict(t.model, t.batch, enc_a);
        const Matrix yb = predict(back, t.batch, enc_b);
        CHECK(ya.values() == yb.values());

        CHECK(serialize_model(back, extra) == read_file(file));
    }
}

TEST_CASE("corrupted checkpoints are rejected with the file name") {
    fixture::TempDir dir("ckpt-bad");
    auto t = fixture::make_tiny({});
    const auto good_file = dir.path / "good.ckpt";
    save_checkpoint(t.model, good_file);
    const std::string good = read_file(good_file);
    const Parsed p = parse(good);
    CHECK(p.version == 1);
    std::size_t floats = 0;
    for (const auto& g : p.header.at("groups")) {
        std::size_t n = 1;
        for (auto d : g.at("shape")) n *= d.get<std::size_t>();
        floats += n;
    }
    CHECK(p.payload.size() == floats * sizeof(float));

    const auto bad = dir.path / "bad.ckpt";
    std::string magic = good;
    magic[0] = 'X';
    expect_rejected(bad, magic, "bad magic");
    expect_rejected(bad, assemble(2, p.header, p.payload), "unsupported version 2");
    expect_rejected(bad, good.substr(0, 10), "truncated");
    expect_rejected(bad, good.substr(0, 30), "truncated");
    expect_rejected(bad, good.substr(0, good.size() - 4), "payload is truncated");
    expect_rejected(bad, good + "z", "trailing bytes");
    expect_rejected(bad, "", "bad magic");

    std::string broken = good;
    broken[20] = '#';
    expect_rejected(bad, broken, "not valid JSON");

    json h = p.header;
    h.erase("layers");
    expect_rejected(bad, assemble(1, h, p.payload), "violates the schema");

    h = p.header;
    h["groups"][0]["shape"] = json::array({1, 1});
    expect_rejected(bad, assemble(1, h, p.payload), "does not match model");

    h = p.header;
    h["groups"].erase(h["groups"].size() - 1);
    expect_rejected(bad, assemble(1, h, p.payload), "parameter groups");

    h = p.header;
    h["config"]["variant"] = "no_such_variant";
    write_file(bad, assemble(1, h, p.payload));
    CHECK_THROWS_AS(load_checkpoint(bad), FormatError);

    try {
        load_checkpoint(dir.path / "missing.ckpt");
        FAIL("missing checkpoint was accepted");
    } catch (const FormatError& e) {
        CHECK(std::string(e.what()).find("missing.ckpt") != std::string::npos);
    }
}
