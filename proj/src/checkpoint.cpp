#include "ssmpeft/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>

#include "json.hpp"

namespace ssmpeft {

namespace {

constexpr char kMagic[8] = {'S', 'S', 'M', 'P', 'E', 'F', 'T', '1'};
constexpr size_t kAlign = 64;

void put_u64_le(std::string& out, uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

uint64_t get_u64_le(const unsigned char* p) {
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(p[i]) << (8 * i);
    return v;
}

void put_f64_le(std::string& out, double d) { put_u64_le(out, std::bit_cast<uint64_t>(d)); }

double get_f64_le(const unsigned char* p) { return std::bit_cast<double>(get_u64_le(p)); }

size_t align_up(size_t n) { return (n + kAlign - 1) / kAlign * kAlign; }

}  // namespace

const Tensor* Checkpoint::find(const std::string& name) const {
    for (const auto& [n, t] : tensors)
        if (n == name) return &t;
    return nullptr;
}

void save_checkpoint(const std::string& path,
                     const std::vector<std::pair<std::string, Tensor*>>& params) {
    std::vector<std::pair<std::string, Tensor*>> sorted = params;
    std::sort(sorted.begin(), sorted.end(),
              [](const auto& a, const auto& b) { return a.first < b.first; });
    for (size_t i = 1; i < sorted.size(); ++i)
        if (sorted[i].first == sorted[i - 1].first)
            throw std::invalid_argument("save_checkpoint: duplicate tensor name '" +
                                        sorted[i].first + "'");

    nlohmann::ordered_json manifest;
    manifest["tensors"] = nlohmann::ordered_json::array();
    size_t offset = 0;
    for (const auto& [name, t] : sorted) {
        offset = align_up(offset);
        nlohmann::ordered_json e;
        e["name"] = name;
        e["shape"] = t->shape;
        e["dtype"] = "f64";
        e["offset"] = offset;
        manifest["tensors"].push_back(e);
        offset += static_cast<size_t>(t->numel()) * 8;
    }
    std::string mbytes = manifest.dump();

    std::string out;
    out.append(kMagic, 8);
    put_u64_le(out, mbytes.size());
    out += mbytes;
    size_t payload_start = align_up(out.size());
    out.resize(payload_start, '\0');
    size_t payload_size = offset;
    out.reserve(payload_start + payload_size);
    size_t cur = 0;
    for (const auto& [name, t] : sorted) {
        size_t want = align_up(cur);
        out.resize(payload_start + want, '\0');
        cur = want;
        for (int64_t i = 0; i < t->numel(); ++i) put_f64_le(out, t->at(i));
        cur += static_cast<size_t>(t->numel()) * 8;
    }

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("save_checkpoint: cannot open '" + path + "' for writing");
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw std::runtime_error("save_checkpoint: short write to '" + path + "'");
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("load_checkpoint: cannot open '" + path + "'");
    std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());

    if (bytes.size() < 16 || std::memcmp(bytes.data(), kMagic, 8) != 0)
        throw format_error("load_checkpoint: bad magic in '" + path + "'");
    uint64_t mlen = get_u64_le(p + 8);
    if (16 + mlen > bytes.size())
        throw corruption_error("load_checkpoint: manifest extends past end of file");
    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(bytes.substr(16, mlen));
    } catch (const nlohmann::json::exception& e) {
        throw corruption_error(std::string("load_checkpoint: manifest is not valid JSON: ") +
                               e.what());
    }
    size_t payload_start = align_up(16 + static_cast<size_t>(mlen));
    size_t payload_size = bytes.size() >= payload_start ? bytes.size() - payload_start : 0;

    Checkpoint ck;
    std::vector<std::pair<uint64_t, uint64_t>> spans;
    for (const auto& e : manifest.at("tensors")) {
        std::string name = e.at("name").get<std::string>();
        Shape shape = e.at("shape").get<Shape>();
        if (e.at("dtype").get<std::string>() != "f64")
            throw format_error("load_checkpoint: tensor '" + name + "' is not f64");
        uint64_t off = e.at("offset").get<uint64_t>();
        uint64_t nbytes = static_cast<uint64_t>(shape_numel(shape)) * 8;
        if (off % kAlign != 0)
            throw corruption_error("load_checkpoint: tensor '" + name + "' is not 64-byte aligned");
        if (off + nbytes > payload_size)
            throw corruption_error("load_checkpoint: tensor '" + name +
                                   "' extends past end of file (truncated?)");
        spans.emplace_back(off, off + nbytes);
        Tensor t = Tensor::zeros(shape);
        for (int64_t i = 0; i < t.numel(); ++i)
            t.at(i) = get_f64_le(p + payload_start + off + static_cast<uint64_t>(i) * 8);
        ck.tensors.emplace_back(std::move(name), std::move(t));
    }
    std::sort(spans.begin(), spans.end());
    for (size_t i = 1; i < spans.size(); ++i)
        if (spans[i].first < spans[i - 1].second)
            throw corruption_error("load_checkpoint: overlapping tensor payloads");
    return ck;
}

void load_checkpoint_into(const std::string& path,
                          std::vector<std::pair<std::string, Tensor*>> params) {
    Checkpoint ck = load_checkpoint(path);
    for (auto& [name, dst] : params) {
        const Tensor* src = ck.find(name);
        if (!src) throw corruption_error("checkpoint is missing tensor '" + name + "'");
        if (src->shape != dst->shape)
            throw corruption_error("checkpoint tensor '" + name + "' has shape " +
                                   shape_str(src->shape) + ", expected " + shape_str(dst->shape));
        *dst->data = *src->data;
    }
}

}  // namespace ssmpeft
