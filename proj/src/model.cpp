// Copyright 2026 The kvsmooth Authors
// SPDX-License-Identifier: Apache-2.0

#include "kvsmooth/model.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>
#include <sstream>

#include "kvsmooth/error.hpp"

namespace kvsmooth {

static_assert(std::endian::native == std::endian::little, "weight files assume a little-endian host");

NLOHMANN_JSON_SERIALIZE_ENUM(NormKind, {
    {NormKind::PreNormRms, "pre-norm-rms"},
    {NormKind::PreNormLayer, "pre-norm-layer"},
})

void ModelConfig::validate() const {
    auto fail = [](const std::string& m) { throw Error(Errc::InvalidConfig, m); };
    if (num_layers < 1 || num_heads < 1 || head_dim < 1 || hidden_dim < 1 || ffn_dim < 1 ||
        vocab_size < 1) {
        fail("all model dimensions must be >= 1");
    }
    if (hidden_dim != num_heads * head_dim) {
        fail("hidden_dim (" + std::to_string(hidden_dim) + ") != num_heads * head_dim (" +
             std::to_string(num_heads * head_dim) + ")");
    }
    if (max_seq_len < 2) fail("max_seq_len must be >= 2");
    if (!(rope_base > 0.0) || !std::isfinite(rope_base)) fail("rope_base must be positive");
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
    j = nlohmann::json{{"num_layers", c.num_layers}, {"num_heads", c.num_heads},
                       {"head_dim", c.head_dim},     {"hidden_dim", c.hidden_dim},
                       {"ffn_dim", c.ffn_dim},       {"vocab_size", c.vocab_size},
                       {"max_seq_len", c.max_seq_len}, {"norm_kind", c.norm_kind},
                       {"rope_base", c.rope_base},   {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
    ModelConfig d;
    c.num_layers = j.value("num_layers", d.num_layers);
    c.num_heads = j.value("num_heads", d.num_heads);
    c.head_dim = j.value("head_dim", d.head_dim);
    c.hidden_dim = j.value("hidden_dim", c.num_heads * c.head_dim);
    c.ffn_dim = j.value("ffn_dim", 4 * c.hidden_dim);
    c.vocab_size = j.value("vocab_size", d.vocab_size);
    c.max_seq_len = j.value("max_seq_len", d.max_seq_len);
    c.norm_kind = j.value("norm_kind", d.norm_kind);
    c.rope_base = j.value("rope_base", d.rope_base);
    c.seed = j.value("seed", d.seed);
}

namespace {

// Calls fn(name, shape, tensor) for every tensor in canonical order.
template <class M, class F>
void visit_tensors(M& model, F&& fn) {
    const auto& c = model.config;
    auto& w = model.weights;
    fn(std::string("embedding"), std::vector<std::size_t>{c.vocab_size, c.hidden_dim}, w.embedding);
    for (std::size_t l = 0; l < w.layers.size(); ++l) {
        auto& lw = w.layers[l];
        const std::string p = "layers." + std::to_string(l) + ".";
        const std::vector<std::size_t> square{c.hidden_dim, c.hidden_dim};
        fn(p + "attn_norm", std::vector<std::size_t>{c.hidden_dim}, lw.attn_norm);
        fn(p + "wq", square, lw.wq);
        fn(p + "wk", square, lw.wk);
        fn(p + "wv", square, lw.wv);
        fn(p + "wo", square, lw.wo);
        fn(p + "ffn_norm", std::vector<std::size_t>{c.hidden_dim}, lw.ffn_norm);
        fn(p + "w_up", std::vector<std::size_t>{c.ffn_dim, c.hidden_dim}, lw.w_up);
        fn(p + "w_down", std::vector<std::size_t>{c.hidden_dim, c.ffn_dim}, lw.w_down);
    }
    fn(std::string("final_norm"), std::vector<std::size_t>{c.hidden_dim}, w.final_norm);
    fn(std::string("unembedding"), std::vector<std::size_t>{c.vocab_size, c.hidden_dim}, w.unembedding);
}

}  // namespace

std::vector<TensorRef> tensor_manifest(const Model& model) {
    std::vector<TensorRef> out;
    visit_tensors(model, [&](std::string name, std::vector<std::size_t> shape, const std::vector<float>& t) {
        out.push_back({std::move(name), std::move(shape), &t});
    });
    return out;
}

namespace {

std::size_t element_count(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (auto s : shape) n *= s;
    return n;
}

void allocate(Model& m) {
    const auto& c = m.config;
    auto& w = m.weights;
    w.embedding.assign(c.vocab_size * c.hidden_dim, 0.0f);
    w.layers.assign(c.num_layers, {});
    for (auto& lw : w.layers) {
        lw.attn_norm.assign(c.hidden_dim, 1.0f);
        lw.wq.assign(c.hidden_dim * c.hidden_dim, 0.0f);
        lw.wk = lw.wq;
        lw.wv = lw.wq;
        lw.wo = lw.wq;
        lw.ffn_norm.assign(c.hidden_dim, 1.0f);
        lw.w_up.assign(c.ffn_dim * c.hidden_dim, 0.0f);
        lw.w_down.assign(c.hidden_dim * c.ffn_dim, 0.0f);
    }
    w.final_norm.assign(c.hidden_dim, 1.0f);
    w.unembedding.assign(c.vocab_size * c.hidden_dim, 0.0f);
}

bool is_norm(const std::string& name) { return name.ends_with("norm"); }

}  // namespace

void validate(const Model& model) {
    model.config.validate();
    if (model.weights.layers.size() != model.config.num_layers) {
        throw Error(Errc::HeaderInconsistent, "layer count does not match config");
    }
    for (const auto& t : tensor_manifest(model)) {
        if (t.data->size() != element_count(t.shape)) {
            throw Error(Errc::HeaderInconsistent, "tensor " + t.name + " has the wrong size");
        }
        for (float v : *t.data) {
            if (!std::isfinite(v)) throw Error(Errc::NonFinite, "tensor " + t.name);
        }
    }
}

Model init_random(const ModelConfig& config) {
    config.validate();
    Model m{config, {}};
    allocate(m);
    std::mt19937_64 rng(config.seed);
    // 53-bit mantissa draw; std::uniform_real_distribution is not portable.
    auto uniform = [&rng](double a) {
        const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
        return static_cast<float>((2.0 * u - 1.0) * a);
    };
    visit_tensors(m, [&](const std::string& name, const std::vector<std::size_t>& shape,
                         std::vector<float>& data) {
        if (is_norm(name)) return;
        // Embeddings get unit variance; projections scale by their fan-in.
        const double fan_in = name == "embedding" ? 1.0 : static_cast<double>(shape.back());
        const double a = std::sqrt(3.0 / fan_in);
        for (float& v : data) v = uniform(a);
    });
    return m;
}

std::uint64_t checksum(const Model& model) {
    std::uint64_t h = 1469598103934665603ull;
    for (const auto& t : tensor_manifest(model)) {
        const auto* bytes = reinterpret_cast<const unsigned char*>(t.data->data());
        for (std::size_t i = 0; i < t.data->size() * sizeof(float); ++i) {
            h ^= bytes[i];
            h *= 1099511628211ull;
        }
    }
    return h;
}

std::string to_hex(std::uint64_t v) {
    std::ostringstream os;
    os << std::hex;
    os.width(16);
    os.fill('0');
    os << v;
    return os.str();
}

namespace {

void put_u32(std::ostream& os, std::uint32_t v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

std::uint32_t get_u32(std::istream& is, const char* what) {
    std::uint32_t v = 0;
    if (!is.read(reinterpret_cast<char*>(&v), sizeof v)) {
        throw Error(Errc::TruncatedPayload, std::string("file ends inside ") + what);
    }
    return v;
}

}  // namespace

void save_weights(const Model& model, const std::filesystem::path& path) {
    validate(model);
    nlohmann::json header;
    header["config"] = model.config;
    header["tensors"] = nlohmann::json::array();
    std::size_t offset = 0;
    const auto manifest = tensor_manifest(model);
    for (const auto& t : manifest) {
        header["tensors"].push_back({{"name", t.name}, {"shape", t.shape}, {"offset", offset}});
        offset += t.data->size() * sizeof(float);
    }
    const std::string text = header.dump();

    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw Error(Errc::Io, "cannot open " + path.string() + " for writing");
    os.write("KVSM", 4);
    put_u32(os, kWeightFormatVersion);
    put_u32(os, static_cast<std::uint32_t>(text.size()));
    os.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& t : manifest) {
        os.write(reinterpret_cast<const char*>(t.data->data()),
                 static_cast<std::streamsize>(t.data->size() * sizeof(float)));
    }
    if (!os) throw Error(Errc::Io, "write failed for " + path.string());
}

Model load_weights(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw Error(Errc::Io, "cannot open " + path.string());

    char magic[4] = {};
    if (!is.read(magic, 4) || std::memcmp(magic, "KVSM", 4) != 0) {
        throw Error(Errc::BadMagic, path.string() + " is not a KVSM weight file");
    }
    const std::uint32_t version = get_u32(is, "version");
    if (version != kWeightFormatVersion) {
        throw Error(Errc::VersionMismatch, "expected version " + std::to_string(kWeightFormatVersion) +
                                                ", found " + std::to_string(version));
    }
    const std::uint32_t header_len = get_u32(is, "header length");
    std::string text(header_len, '\0');
    if (!is.read(text.data(), header_len)) throw Error(Errc::TruncatedPayload, "file ends inside header");

    Model m;
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(text);
        m.config = header.at("config").get<ModelConfig>();
    } catch (const nlohmann::json::exception& e) {
        throw Error(Errc::HeaderInconsistent, std::string("unreadable header: ") + e.what());
    }
    try {
        m.config.validate();
    } catch (const Error& e) {
        throw Error(Errc::HeaderInconsistent, e.what());
    }
    allocate(m);

    const auto manifest = tensor_manifest(m);
    const auto& entries = header.value("tensors", nlohmann::json::array());
    if (entries.size() != manifest.size()) {
        throw Error(Errc::HeaderInconsistent, "manifest lists " + std::to_string(entries.size()) +
                                                  " tensors, config implies " +
                                                  std::to_string(manifest.size()));
    }
    std::size_t expected_offset = 0;
    for (std::size_t i = 0; i < manifest.size(); ++i) {
        const auto& t = manifest[i];
        const auto& e = entries[i];
        if (e.value("name", "") != t.name ||
            e.value("shape", std::vector<std::size_t>{}) != t.shape ||
            e.value("offset", std::size_t{0}) != expected_offset) {
            throw Error(Errc::HeaderInconsistent, "manifest entry " + std::to_string(i) +
                                                      " does not match " + t.name);
        }
        expected_offset += t.data->size() * sizeof(float);
    }
    visit_tensors(m, [&](const std::string& name, const std::vector<std::size_t>&,
                         std::vector<float>& data) {
        const auto bytes = static_cast<std::streamsize>(data.size() * sizeof(float));
        if (!is.read(reinterpret_cast<char*>(data.data()), bytes)) {
            throw Error(Errc::TruncatedPayload, "payload ends inside tensor " + name);
        }
    });
    if (is.peek() != std::char_traits<char>::eof()) {
        throw Error(Errc::HeaderInconsistent, "trailing bytes after payload");
    }
    validate(m);
    return m;
}

}  // namespace kvsmooth
