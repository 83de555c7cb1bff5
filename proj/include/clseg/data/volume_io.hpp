#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <utility>

#include <json.hpp>

#include "clseg/core/io.hpp"
#include "clseg/data/types.hpp"

namespace clseg {

// Volume file format: `<stem>.json` header + `<stem>.raw` payload.
// Header: {"shape":[D,H,W], "spacing":[sx,sy,sz], "dtype":"f32-le"|"u8",
// "kind":"image"|"mask"}. Payload is row-major, D-major, little-endian.
// A case's mask lives next to its image as `<stem>_mask.json/.raw`.

namespace detail {

inline std::filesystem::path strip_json_ext(const std::filesystem::path& path) {
    if (path.extension() == ".json") {
        auto p = path;
        p.replace_extension();
        return p;
    }
    return path;
}

struct VolumeHeader {
    std::vector<int> shape;
    std::array<double, 3> spacing;
    std::string dtype;
    std::string kind;
};

inline VolumeHeader parse_volume_header(const std::filesystem::path& json_path) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(read_text_file(json_path));
    } catch (const nlohmann::json::exception& e) {
        raise(ErrorCode::MalformedHeader, json_path.string() + ": " + e.what());
    }
    VolumeHeader h;
    try {
        h.shape = j.at("shape").get<std::vector<int>>();
        auto sp = j.at("spacing").get<std::vector<double>>();
        CLSEG_CHECK(h.shape.size() == 3 && sp.size() == 3, ErrorCode::MalformedHeader,
                    json_path.string() + ": shape and spacing must have 3 entries");
        h.spacing = {sp[0], sp[1], sp[2]};
        h.dtype = j.at("dtype").get<std::string>();
        h.kind = j.at("kind").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
        raise(ErrorCode::MalformedHeader, json_path.string() + ": " + e.what());
    }
    CLSEG_CHECK(h.dtype == "f32-le" || h.dtype == "u8", ErrorCode::MalformedHeader,
                json_path.string() + ": unknown dtype " + h.dtype);
    CLSEG_CHECK(h.kind == "image" || h.kind == "mask", ErrorCode::MalformedHeader,
                json_path.string() + ": unknown kind " + h.kind);
    CLSEG_CHECK((h.kind == "image") == (h.dtype == "f32-le"), ErrorCode::MalformedHeader,
                json_path.string() + ": kind/dtype mismatch");
    for (int d : h.shape)
        CLSEG_CHECK(d >= 1, ErrorCode::MalformedHeader, json_path.string() + ": dims must be >= 1");
    for (double s : h.spacing)
        CLSEG_CHECK(s > 0, ErrorCode::MalformedHeader, json_path.string() + ": spacing must be > 0");
    return h;
}

}  // namespace detail

inline Volume load_image_volume(const std::filesystem::path& path) {
    auto stem = detail::strip_json_ext(path);
    auto h = detail::parse_volume_header(stem.string() + ".json");
    CLSEG_CHECK(h.kind == "image", ErrorCode::MalformedHeader, path.string() + ": expected kind=image");
    auto payload = read_file_bytes(stem.string() + ".raw");
    size_t n = Tensor<float>::compute_numel(h.shape);
    CLSEG_CHECK(payload.size() == n * 4, ErrorCode::PayloadSizeMismatch,
                stem.string() + ".raw: expected " + std::to_string(n * 4) + " bytes, got " +
                    std::to_string(payload.size()));
    Volume v;
    v.shape = h.shape;
    v.spacing = h.spacing;
    v.voxels.resize(n);
    std::memcpy(v.voxels.data(), payload.data(), payload.size());
    v.validate();
    return v;
}

inline SegMask load_mask_volume(const std::filesystem::path& path) {
    auto stem = detail::strip_json_ext(path);
    auto h = detail::parse_volume_header(stem.string() + ".json");
    CLSEG_CHECK(h.kind == "mask", ErrorCode::MalformedHeader, path.string() + ": expected kind=mask");
    auto payload = read_file_bytes(stem.string() + ".raw");
    size_t n = Tensor<float>::compute_numel(h.shape);
    CLSEG_CHECK(payload.size() == n, ErrorCode::PayloadSizeMismatch,
                stem.string() + ".raw: expected " + std::to_string(n) + " bytes, got " +
                    std::to_string(payload.size()));
    SegMask m;
    m.shape = h.shape;
    m.labels.assign(payload.begin(), payload.end());
    m.validate();
    return m;
}

/// Loads an image volume, plus its mask when a `<stem>_mask.json` sibling is
/// present.
inline std::pair<Volume, std::optional<SegMask>> load_volume(const std::filesystem::path& path) {
    auto stem = detail::strip_json_ext(path);
    Volume v = load_image_volume(stem);
    std::optional<SegMask> mask;
    auto mask_header = std::filesystem::path(stem.string() + "_mask.json");
    if (std::filesystem::exists(mask_header)) {
        mask = load_mask_volume(mask_header);
        CLSEG_CHECK(mask->shape == v.shape, ErrorCode::ShapeMismatch,
                    stem.string() + ": mask shape differs from volume shape");
    }
    return {std::move(v), std::move(mask)};
}

inline void write_volume(const Volume& v, const std::filesystem::path& stem) {
    v.validate();
    nlohmann::json j;
    j["shape"] = v.shape;
    j["spacing"] = std::vector<double>{v.spacing[0], v.spacing[1], v.spacing[2]};
    j["dtype"] = "f32-le";
    j["kind"] = "image";
    write_text_file(stem.string() + ".json", j.dump(2) + "\n");
    write_file_bytes(stem.string() + ".raw", v.voxels.data(), v.voxels.size() * 4);
}

inline void write_mask(const SegMask& m, const std::array<double, 3>& spacing, const std::filesystem::path& stem) {
    m.validate();
    nlohmann::json j;
    j["shape"] = m.shape;
    j["spacing"] = std::vector<double>{spacing[0], spacing[1], spacing[2]};
    j["dtype"] = "u8";
    j["kind"] = "mask";
    write_text_file(stem.string() + ".json", j.dump(2) + "\n");
    write_file_bytes(stem.string() + ".raw", m.labels.data(), m.labels.size());
}

inline void write_case(const Case& c, const std::filesystem::path& dir) {
    write_volume(c.volume, dir / c.id);
    write_mask(c.mask, c.volume.spacing, dir / (c.id + "_mask"));
}

inline Case load_case(const std::string& id, const std::filesystem::path& stem) {
    auto [vol, mask] = load_volume(stem);
    CLSEG_CHECK(mask.has_value(), ErrorCode::MalformedHeader, stem.string() + ": case has no mask file");
    Case c{id, std::move(vol), std::move(*mask)};
    c.validate();
    return c;
}

// Task manifest: `task.json` with {"name": ..., "cases": [{"id","image"}...]},
// image paths relative to the manifest.

inline void write_task_manifest(const TaskDataset& ds, const std::filesystem::path& dir) {
    ds.validate();
    nlohmann::json j;
    j["name"] = ds.name;
    auto cases = nlohmann::json::array();
    for (const Case& c : ds.cases) {
        write_case(c, dir);
        cases.push_back({{"id", c.id}, {"image", c.id + ".json"}});
    }
    j["cases"] = cases;
    write_text_file(dir / "task.json", j.dump(2) + "\n");
}

inline TaskDataset load_task_manifest(const std::filesystem::path& manifest_path) {
    auto path = manifest_path;
    if (std::filesystem::is_directory(path)) path /= "task.json";
    CLSEG_CHECK(std::filesystem::exists(path), ErrorCode::IoError, "no task manifest at " + path.string());
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(read_text_file(path));
    } catch (const nlohmann::json::exception& e) {
        raise(ErrorCode::MalformedHeader, path.string() + ": " + e.what());
    }
    TaskDataset ds;
    try {
        ds.name = j.at("name").get<std::string>();
        for (const auto& cj : j.at("cases")) {
            auto id = cj.at("id").get<std::string>();
            auto image = cj.at("image").get<std::string>();
            ds.cases.push_back(load_case(id, path.parent_path() / detail::strip_json_ext(image)));
        }
    } catch (const nlohmann::json::exception& e) {
        raise(ErrorCode::MalformedHeader, path.string() + ": " + e.what());
    }
    ds.validate();
    return ds;
}

}  // namespace clseg
