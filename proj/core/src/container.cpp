#include "lrq/container.hpp"

#include <json.hpp>

#include <cstring>
#include <fstream>
#include <map>
#include <vector>

namespace lrq {

namespace {

using nlohmann::json;

constexpr char kMagic[4] = {'L', 'R', 'Q', 'M'};
constexpr uint32_t kVersion = 1;
constexpr uint64_t kAlign = 64;

uint64_t align_up(uint64_t v) { return (v + kAlign - 1) / kAlign * kAlign; }

std::string blk_key(int64_t i, const char* name) { return "blk." + std::to_string(i) + "." + name; }

// Canonical tensor list for a model; extra tensors follow under their own keys.
std::vector<std::pair<std::string, const Tensor*>> named_tensors(const Model& m) {
    std::vector<std::pair<std::string, const Tensor*>> out;
    out.emplace_back("tok_embeddings.weight", &m.tok_emb);
    for (size_t i = 0; i < m.blocks.size(); ++i) {
        const TransformerBlock& b = m.blocks[i];
        const int64_t k = int64_t(i);
        out.emplace_back(blk_key(k, "attn_q.weight"), &b.wq);
        out.emplace_back(blk_key(k, "attn_k.weight"), &b.wk);
        out.emplace_back(blk_key(k, "attn_v.weight"), &b.wv);
        out.emplace_back(blk_key(k, "attn_o.weight"), &b.wo);
        out.emplace_back(blk_key(k, "ffn_gate.weight"), &b.w_gate);
        out.emplace_back(blk_key(k, "ffn_up.weight"), &b.w_up);
        out.emplace_back(blk_key(k, "ffn_down.weight"), &b.w_down);
        out.emplace_back(blk_key(k, "attn_norm.weight"), &b.attn_norm);
        out.emplace_back(blk_key(k, "ffn_norm.weight"), &b.ffn_norm);
    }
    out.emplace_back("output_norm.weight", &m.final_norm);
    out.emplace_back("output.weight", &m.lm_head);
    for (const auto& [name, t] : m.extra_tensors) out.emplace_back(name, &t);
    return out;
}

json quant_to_json(const InferenceQuant& q) {
    json j;
    j["kv_bits"] = q.kv_bits;
    j["act"] = json::array();
    for (const BlockActQuant& a : q.act) {
        json ja;
        ja["bits"] = a.bits;
        ja["per_token"] = a.per_token;
        json ranges = json::object();
        if (a.bits > 0 && !a.per_token) {
            for (int s = 0; s < kNumActSites; ++s) {
                const RangeStats& r = a.ranges[size_t(s)];
                ranges[act_site_name(ActSite(s))] = {double(r.min.empty() ? 0.0f : r.min[0]),
                                                     double(r.max.empty() ? 0.0f : r.max[0]), r.sample_count};
            }
        }
        ja["ranges"] = ranges;
        j["act"].push_back(ja);
    }
    return j;
}

InferenceQuant quant_from_json(const json& j) {
    InferenceQuant q;
    q.kv_bits = j.at("kv_bits").get<int>();
    for (const json& ja : j.at("act")) {
        BlockActQuant a;
        a.bits = ja.at("bits").get<int>();
        a.per_token = ja.at("per_token").get<bool>();
        if (a.bits > 0 && !a.per_token) {
            for (int s = 0; s < kNumActSites; ++s) {
                const json& r = ja.at("ranges").at(act_site_name(ActSite(s)));
                RangeStats& st = a.ranges[size_t(s)];
                st.min = {float(r[0].get<double>())};
                st.max = {float(r[1].get<double>())};
                st.sample_count = r[2].get<int64_t>();
            }
        }
        q.act.push_back(std::move(a));
    }
    return q;
}

Tensor take_tensor(std::map<std::string, Tensor>& pool, const std::string& name) {
    auto it = pool.find(name);
    if (it == pool.end()) throw io_error("container: missing tensor " + name);
    Tensor t = std::move(it->second);
    pool.erase(it);
    return t;
}

}  // namespace

void save_model(const Model& m, const std::string& path) {
    const auto tensors = named_tensors(m);

    json header;
    header["arch"] = {{"vocab_size", m.config.vocab_size}, {"d_model", m.config.d_model},
                      {"n_layers", m.config.n_layers},     {"n_heads", m.config.n_heads},
                      {"d_ff", m.config.d_ff},             {"rope_base", double(m.config.rope_base)},
                      {"norm_eps", double(m.config.norm_eps)}};
    header["quant"] = quant_to_json(m.quant);

    uint64_t offset = 0;
    json jt = json::object();
    for (const auto& [name, t] : tensors) {
        const uint64_t nbytes = uint64_t(t->numel()) * sizeof(float);
        jt[name] = {{"dtype", "f32"}, {"shape", t->shape()}, {"offset", offset}, {"nbytes", nbytes}};
        offset = align_up(offset + nbytes);
    }
    header["tensors"] = jt;

    const std::string htext = header.dump();
    const uint64_t header_len = htext.size();
    const uint64_t payload_base = align_up(16 + header_len);

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw io_error("container: cannot open " + path + " for writing");
    f.write(kMagic, 4);
    uint32_t ver = kVersion;
    f.write(reinterpret_cast<const char*>(&ver), 4);
    f.write(reinterpret_cast<const char*>(&header_len), 8);
    f.write(htext.data(), std::streamsize(htext.size()));
    const std::string pad(size_t(payload_base - 16 - header_len), '\0');
    f.write(pad.data(), std::streamsize(pad.size()));

    uint64_t pos = 0;
    for (const auto& [name, t] : tensors) {
        const uint64_t nbytes = uint64_t(t->numel()) * sizeof(float);
        f.write(reinterpret_cast<const char*>(t->data()), std::streamsize(nbytes));
        pos += nbytes;
        const uint64_t next = align_up(pos);
        const std::string tail(size_t(next - pos), '\0');
        f.write(tail.data(), std::streamsize(tail.size()));
        pos = next;
    }
    if (!f) throw io_error("container: write failed for " + path);
}

Model load_model(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw io_error("container: cannot open " + path);
    char magic[4];
    uint32_t ver = 0;
    uint64_t header_len = 0;
    f.read(magic, 4);
    f.read(reinterpret_cast<char*>(&ver), 4);
    f.read(reinterpret_cast<char*>(&header_len), 8);
    if (!f || std::memcmp(magic, kMagic, 4) != 0) throw io_error("container: bad magic in " + path);
    if (ver != kVersion) throw io_error("container: unsupported version " + std::to_string(ver));

    std::string htext(size_t(header_len), '\0');
    f.read(htext.data(), std::streamsize(header_len));
    if (!f) throw io_error("container: truncated header");

    json header;
    try {
        header = json::parse(htext);
    } catch (const json::exception& e) {
        throw io_error(std::string("container: malformed header JSON: ") + e.what());
    }

    const uint64_t payload_base = align_up(16 + header_len);
    f.seekg(0, std::ios::end);
    const uint64_t file_size = uint64_t(f.tellg());
    if (file_size < payload_base) throw io_error("container: truncated payload");
    const uint64_t payload_size = file_size - payload_base;

    Model m;
    try {
        const json& arch = header.at("arch");
        m.config.vocab_size = arch.at("vocab_size").get<int64_t>();
        m.config.d_model = arch.at("d_model").get<int64_t>();
        m.config.n_layers = arch.at("n_layers").get<int64_t>();
        m.config.n_heads = arch.at("n_heads").get<int64_t>();
        m.config.d_ff = arch.at("d_ff").get<int64_t>();
        m.config.rope_base = float(arch.at("rope_base").get<double>());
        m.config.norm_eps = float(arch.at("norm_eps").get<double>());
        if (header.contains("quant")) m.quant = quant_from_json(header.at("quant"));
    } catch (const json::exception& e) {
        throw io_error(std::string("container: bad arch field: ") + e.what());
    }
    m.config.validate();

    // Read every tensor, validating bounds and overlaps.
    std::map<std::string, Tensor> pool;
    std::vector<std::pair<uint64_t, uint64_t>> spans;  // offset, nbytes
    if (!header.contains("tensors") || !header["tensors"].is_object()) {
        throw io_error("container: missing tensors table");
    }
    for (const auto& [name, meta] : header["tensors"].items()) {
        uint64_t offset = 0, nbytes = 0;
        std::vector<int64_t> shape;
        std::string dtype;
        try {
            dtype = meta.at("dtype").get<std::string>();
            shape = meta.at("shape").get<std::vector<int64_t>>();
            offset = meta.at("offset").get<uint64_t>();
            nbytes = meta.at("nbytes").get<uint64_t>();
        } catch (const json::exception& e) {
            throw io_error("container: bad tensor entry " + name + ": " + e.what());
        }
        if (dtype != "f32") throw io_error("container: tensor " + name + " has unsupported dtype " + dtype);
        int64_t numel = 1;
        for (int64_t d : shape) numel *= d;
        if (uint64_t(numel) * sizeof(float) != nbytes) {
            throw io_error("container: tensor " + name + " nbytes disagrees with shape");
        }
        if (offset + nbytes > payload_size) {
            throw io_error("container: tensor " + name + " offset out of bounds");
        }
        spans.emplace_back(offset, nbytes);

        std::vector<float> data(static_cast<size_t>(numel));
        f.seekg(std::streamoff(payload_base + offset));
        f.read(reinterpret_cast<char*>(data.data()), std::streamsize(nbytes));
        if (!f) throw io_error("container: truncated payload reading " + name);
        pool.emplace(name, Tensor(shape, std::move(data)));
    }
    std::sort(spans.begin(), spans.end());
    for (size_t i = 1; i < spans.size(); ++i) {
        if (spans[i].first < spans[i - 1].first + spans[i - 1].second) {
            throw io_error("container: overlapping tensor offsets");
        }
    }

    m.tok_emb = take_tensor(pool, "tok_embeddings.weight");
    m.blocks.resize(size_t(m.config.n_layers));
    for (int64_t i = 0; i < m.config.n_layers; ++i) {
        TransformerBlock& b = m.blocks[size_t(i)];
        b.wq = take_tensor(pool, blk_key(i, "attn_q.weight"));
        b.wk = take_tensor(pool, blk_key(i, "attn_k.weight"));
        b.wv = take_tensor(pool, blk_key(i, "attn_v.weight"));
        b.wo = take_tensor(pool, blk_key(i, "attn_o.weight"));
        b.w_gate = take_tensor(pool, blk_key(i, "ffn_gate.weight"));
        b.w_up = take_tensor(pool, blk_key(i, "ffn_up.weight"));
        b.w_down = take_tensor(pool, blk_key(i, "ffn_down.weight"));
        b.attn_norm = take_tensor(pool, blk_key(i, "attn_norm.weight"));
        b.ffn_norm = take_tensor(pool, blk_key(i, "ffn_norm.weight"));
    }
    m.final_norm = take_tensor(pool, "output_norm.weight");
    m.lm_head = take_tensor(pool, "output.weight");
    m.extra_tensors = std::move(pool);
    return m;
}

}  // namespace lrq
