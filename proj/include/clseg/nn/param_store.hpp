#pragma once

#include <cstring>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "clseg/core/io.hpp"
#include "clseg/core/tensor.hpp"

namespace clseg {

/// Component groups the freezing / targeted-regularisation scheme operates
/// on. Every parameter name maps to exactly one group by prefix.
inline const std::vector<std::string>& param_groups() {
    static const std::vector<std::string> groups = {"unet.encoder", "unet.decoder", "unet.other", "vit"};
    return groups;
}

inline std::string group_of(const std::string& name) {
    for (const auto& g : param_groups())
        if (name.size() > g.size() && name.compare(0, g.size(), g) == 0 && name[g.size()] == '.') return g;
    raise(ErrorCode::UnknownGroup, "parameter " + name + " belongs to no known group");
}

/// Named parameter tensors, ordered by name so that iteration, checkpoint
/// layout and update order are all deterministic.
template <typename T>
class ParamStore {
public:
    using Map = std::map<std::string, Tensor<T>>;

    void add(const std::string& name, Tensor<T> t) {
        CLSEG_CHECK(!entries_.count(name), ErrorCode::ConfigInvalid, "duplicate parameter " + name);
        group_of(name);  // validates the prefix
        entries_.emplace(name, std::move(t));
    }

    bool has(const std::string& name) const { return entries_.count(name) != 0; }

    Tensor<T>& at(const std::string& name) {
        auto it = entries_.find(name);
        CLSEG_CHECK(it != entries_.end(), ErrorCode::ConfigInvalid, "unknown parameter " + name);
        return it->second;
    }

    const Tensor<T>& at(const std::string& name) const {
        auto it = entries_.find(name);
        CLSEG_CHECK(it != entries_.end(), ErrorCode::ConfigInvalid, "unknown parameter " + name);
        return it->second;
    }

    Map& entries() { return entries_; }
    const Map& entries() const { return entries_; }

    size_t tensor_count() const { return entries_.size(); }

    size_t param_count() const {
        size_t n = 0;
        for (const auto& [k, v] : entries_) n += v.numel();
        return n;
    }

    size_t group_tensor_count(const std::string& group) const {
        size_t n = 0;
        for (const auto& [k, v] : entries_)
            if (group_of(k) == group) ++n;
        return n;
    }

    std::vector<std::string> names() const {
        std::vector<std::string> out;
        out.reserve(entries_.size());
        for (const auto& [k, v] : entries_) out.push_back(k);
        return out;
    }

    bool same_layout(const ParamStore& o) const {
        if (entries_.size() != o.entries_.size()) return false;
        auto a = entries_.begin();
        auto b = o.entries_.begin();
        for (; a != entries_.end(); ++a, ++b)
            if (a->first != b->first || a->second.shape() != b->second.shape()) return false;
        return true;
    }

private:
    Map entries_;
};

/// True when `name` falls under `selector`: a full group name, the "unet"
/// umbrella, or "all".
inline bool group_matches(const std::string& name, const std::string& selector) {
    if (selector == "all") return true;
    std::string g = group_of(name);
    if (selector == "unet") return g.rfind("unet.", 0) == 0;
    return g == selector;
}

// Checkpoint file: one line "clseg-ckpt-v1 <json-bytes>", the JSON manifest,
// then raw little-endian f32 payloads concatenated in manifest order. The
// same framing holds model checkpoints (all names carry a group tag) and
// strategy-state tensors (tagged "state").

template <typename T>
void save_tensor_file(const std::map<std::string, Tensor<T>>& tensors, const nlohmann::json& meta,
                      const std::filesystem::path& path) {
    nlohmann::json manifest;
    manifest["meta"] = meta;
    auto tj = nlohmann::json::array();
    size_t payload_size = 0;
    for (const auto& [name, t] : tensors) {
        std::string group = "state";
        for (const auto& g : param_groups())
            if (name.size() > g.size() && name.compare(0, g.size(), g) == 0 && name[g.size()] == '.') group = g;
        tj.push_back({{"name", name}, {"shape", t.shape()}, {"group", group}});
        payload_size += t.numel() * 4;
    }
    manifest["tensors"] = tj;
    std::string json_text = manifest.dump();

    std::string head = "clseg-ckpt-v1 " + std::to_string(json_text.size()) + "\n";
    std::vector<uint8_t> buf;
    buf.reserve(head.size() + json_text.size() + 1 + payload_size);
    buf.insert(buf.end(), head.begin(), head.end());
    buf.insert(buf.end(), json_text.begin(), json_text.end());
    buf.push_back('\n');
    for (const auto& [name, t] : tensors) {
        size_t off = buf.size();
        buf.resize(off + t.numel() * 4);
        for (size_t i = 0; i < t.numel(); ++i) {
            float f = static_cast<float>(t[i]);
            std::memcpy(buf.data() + off + i * 4, &f, 4);
        }
    }
    write_file_bytes(path, buf.data(), buf.size());
}

template <typename T>
std::pair<std::map<std::string, Tensor<T>>, nlohmann::json> load_tensor_file(const std::filesystem::path& path) {
    CLSEG_CHECK(std::filesystem::exists(path), ErrorCode::RunNotFound, "no checkpoint at " + path.string());
    auto buf = read_file_bytes(path);
    const std::string magic = "clseg-ckpt-v1 ";
    CLSEG_CHECK(buf.size() > magic.size() && std::equal(magic.begin(), magic.end(), buf.begin()),
                ErrorCode::MalformedHeader, path.string() + ": not a clseg checkpoint");
    size_t pos = magic.size();
    size_t json_size = 0;
    while (pos < buf.size() && buf[pos] != '\n') {
        CLSEG_CHECK(buf[pos] >= '0' && buf[pos] <= '9', ErrorCode::MalformedHeader, "bad checkpoint header");
        json_size = json_size * 10 + (buf[pos] - '0');
        ++pos;
    }
    ++pos;  // newline
    CLSEG_CHECK(pos + json_size + 1 <= buf.size(), ErrorCode::PayloadSizeMismatch, "truncated checkpoint manifest");
    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(buf.begin() + pos, buf.begin() + pos + json_size);
    } catch (const nlohmann::json::exception& e) {
        raise(ErrorCode::MalformedHeader, path.string() + ": " + e.what());
    }
    pos += json_size + 1;

    std::map<std::string, Tensor<T>> tensors;
    for (const auto& tj : manifest.at("tensors")) {
        auto name = tj.at("name").get<std::string>();
        auto shape = tj.at("shape").get<std::vector<int>>();
        size_t n = Tensor<T>::compute_numel(shape);
        CLSEG_CHECK(pos + n * 4 <= buf.size(), ErrorCode::PayloadSizeMismatch,
                    path.string() + ": payload too short for " + name);
        Tensor<T> t(shape);
        for (size_t i = 0; i < n; ++i) {
            float f;
            std::memcpy(&f, buf.data() + pos + i * 4, 4);
            t[i] = static_cast<T>(f);
        }
        pos += n * 4;
        tensors.emplace(std::move(name), std::move(t));
    }
    CLSEG_CHECK(pos == buf.size(), ErrorCode::PayloadSizeMismatch, path.string() + ": trailing bytes in checkpoint");
    return {std::move(tensors), manifest.at("meta")};
}

template <typename T>
void save_checkpoint(const ParamStore<T>& store, const nlohmann::json& meta, const std::filesystem::path& path) {
    save_tensor_file(store.entries(), meta, path);
}

template <typename T>
std::pair<ParamStore<T>, nlohmann::json> load_checkpoint(const std::filesystem::path& path) {
    auto [tensors, meta] = load_tensor_file<T>(path);
    ParamStore<T> store;
    for (auto& [name, t] : tensors) store.add(name, std::move(t));
    return {std::move(store), std::move(meta)};
}

}  // namespace clseg
