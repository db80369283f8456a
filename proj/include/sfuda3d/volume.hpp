#pragma once

// Volume / LabelMap containers, the SVOL binary format, the dataset manifest,
// and the file-open audit hook that the source-free contract is checked
// against. Every file this project reads or writes goes through open_input /
// open_output so the audit log is complete.

#include <array>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <string>
#include <vector>

#include <json.hpp>

#include "common.hpp"

namespace sfuda3d {

// ---------------------------------------------------------------------------
// I/O audit. Records every opened path; cmd_adapt dumps this to prove no
// source image/label file was touched during adaptation.

namespace io_audit {

struct State {
    std::mutex mu;
    std::vector<std::string> entries;
    bool enabled = false;
};

inline State& state() {
    static State s;
    return s;
}

inline void begin() {
    auto& s = state();
    std::lock_guard lock(s.mu);
    s.entries.clear();
    s.enabled = true;
}

inline void end() {
    auto& s = state();
    std::lock_guard lock(s.mu);
    s.enabled = false;
}

inline void record(const std::string& mode, const std::string& path) {
    auto& s = state();
    std::lock_guard lock(s.mu);
    if (s.enabled) s.entries.push_back(mode + " " + path);
}

inline std::vector<std::string> entries() {
    auto& s = state();
    std::lock_guard lock(s.mu);
    return s.entries;
}

}  // namespace io_audit

inline std::ifstream open_input(const std::string& path) {
    io_audit::record("R", path);
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot open for reading: " + path);
    return f;
}

inline std::ofstream open_output(const std::string& path) {
    io_audit::record("W", path);
    std::filesystem::path p(path);
    if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
    std::ofstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot open for writing: " + path);
    return f;
}

// ---------------------------------------------------------------------------
// Containers. Row-major with x fastest: value(i,j,k) = values[(k*H + j)*W + i].

struct Volume {
    std::array<uint32_t, 3> dims{0, 0, 0};          // (W,H,D)
    std::array<float, 3> spacing{1.f, 1.f, 1.f};    // mm per voxel
    std::vector<float> values;

    int64_t numel() const { return int64_t(dims[0]) * dims[1] * dims[2]; }
    float& at(uint32_t i, uint32_t j, uint32_t k) {
        return values[(static_cast<size_t>(k) * dims[1] + j) * dims[0] + i];
    }
    float at(uint32_t i, uint32_t j, uint32_t k) const {
        return values[(static_cast<size_t>(k) * dims[1] + j) * dims[0] + i];
    }
};

struct LabelMap {
    std::array<uint32_t, 3> dims{0, 0, 0};
    std::array<float, 3> spacing{1.f, 1.f, 1.f};
    std::vector<uint8_t> values;

    int64_t numel() const { return int64_t(dims[0]) * dims[1] * dims[2]; }
    uint8_t& at(uint32_t i, uint32_t j, uint32_t k) {
        return values[(static_cast<size_t>(k) * dims[1] + j) * dims[0] + i];
    }
    uint8_t at(uint32_t i, uint32_t j, uint32_t k) const {
        return values[(static_cast<size_t>(k) * dims[1] + j) * dims[0] + i];
    }
};

// ---------------------------------------------------------------------------
// SVOL format: "SVOL" | version u8 | dtype u8 (0=f32, 1=u8) | dims 3*u32 LE |
// spacing 3*f32 LE | payload | fnv1a64(payload) u64 LE.

namespace detail_io {

template <class T>
void write_le(std::ostream& os, T v) {
    static_assert(std::is_trivially_copyable_v<T>);
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));  // little-endian hosts only
}

template <class T>
T read_le(std::istream& is) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw FormatError("unexpected end of file");
    return v;
}

inline void read_magic(std::istream& is, const char* magic) {
    char buf[4];
    is.read(buf, 4);
    if (!is || std::memcmp(buf, magic, 4) != 0)
        throw FormatError(std::string("bad magic, expected ") + magic);
}

}  // namespace detail_io

inline void write_volume(const std::string& path, const Volume& v) {
    auto f = open_output(path);
    f.write("SVOL", 4);
    detail_io::write_le<uint8_t>(f, 1);
    detail_io::write_le<uint8_t>(f, 0);
    for (uint32_t d : v.dims) detail_io::write_le<uint32_t>(f, d);
    for (float s : v.spacing) detail_io::write_le<float>(f, s);
    const char* payload = reinterpret_cast<const char*>(v.values.data());
    const size_t bytes = v.values.size() * sizeof(float);
    f.write(payload, std::streamsize(bytes));
    detail_io::write_le<uint64_t>(f, fnv1a64(payload, bytes));
    if (!f) throw DataError("write failed: " + path);
}

inline void write_volume(const std::string& path, const LabelMap& v) {
    auto f = open_output(path);
    f.write("SVOL", 4);
    detail_io::write_le<uint8_t>(f, 1);
    detail_io::write_le<uint8_t>(f, 1);
    for (uint32_t d : v.dims) detail_io::write_le<uint32_t>(f, d);
    for (float s : v.spacing) detail_io::write_le<float>(f, s);
    const char* payload = reinterpret_cast<const char*>(v.values.data());
    f.write(payload, std::streamsize(v.values.size()));
    detail_io::write_le<uint64_t>(f, fnv1a64(payload, v.values.size()));
    if (!f) throw DataError("write failed: " + path);
}

namespace detail_io {

struct SvolHeader {
    uint8_t dtype;
    std::array<uint32_t, 3> dims;
    std::array<float, 3> spacing;
};

inline SvolHeader read_svol_header(std::istream& f) {
    read_magic(f, "SVOL");
    const auto version = read_le<uint8_t>(f);
    if (version != 1) throw FormatError("unsupported SVOL version");
    SvolHeader h{};
    h.dtype = read_le<uint8_t>(f);
    if (h.dtype > 1) throw FormatError("unknown SVOL dtype code");
    for (auto& d : h.dims) d = read_le<uint32_t>(f);
    for (auto& s : h.spacing) s = read_le<float>(f);
    if (h.dims[0] == 0 || h.dims[1] == 0 || h.dims[2] == 0)
        throw FormatError("SVOL header has zero dimension");
    return h;
}

inline void read_payload_checked(std::istream& f, char* dst, size_t bytes) {
    f.read(dst, std::streamsize(bytes));
    if (static_cast<size_t>(f.gcount()) != bytes) throw FormatError("truncated SVOL payload");
    const uint64_t expect = read_le<uint64_t>(f);
    if (fnv1a64(dst, bytes) != expect) throw ChecksumError("SVOL checksum mismatch");
}

}  // namespace detail_io

inline Volume read_volume_f32(const std::string& path) {
    auto f = open_input(path);
    auto h = detail_io::read_svol_header(f);
    if (h.dtype != 0) throw FormatError("expected f32 SVOL: " + path);
    Volume v;
    v.dims = h.dims;
    v.spacing = h.spacing;
    v.values.resize(static_cast<size_t>(v.numel()));
    detail_io::read_payload_checked(f, reinterpret_cast<char*>(v.values.data()),
                                    v.values.size() * sizeof(float));
    return v;
}

inline LabelMap read_volume_u8(const std::string& path) {
    auto f = open_input(path);
    auto h = detail_io::read_svol_header(f);
    if (h.dtype != 1) throw FormatError("expected u8 SVOL: " + path);
    LabelMap v;
    v.dims = h.dims;
    v.spacing = h.spacing;
    v.values.resize(static_cast<size_t>(v.numel()));
    detail_io::read_payload_checked(f, reinterpret_cast<char*>(v.values.data()), v.values.size());
    return v;
}

// ---------------------------------------------------------------------------
// Dataset manifest: JSON list of volumes with modality and split tags. Paths
// are stored relative to the manifest file.

struct ManifestEntry {
    std::string id;
    std::string modality;  // "A" or "B"
    std::string split;     // "train" or "test"
    std::string image_path;  // resolved, absolute or cwd-relative
    std::string label_path;
};

struct Manifest {
    std::vector<ManifestEntry> entries;

    std::vector<ManifestEntry> select(const std::string& modality, const std::string& split) const {
        std::vector<ManifestEntry> out;
        for (const auto& e : entries)
            if (e.modality == modality && e.split == split) out.push_back(e);
        return out;
    }
};

inline void write_manifest(const std::string& path, const Manifest& m) {
    nlohmann::json j;
    j["volumes"] = nlohmann::json::array();
    const auto base = std::filesystem::path(path).parent_path();
    for (const auto& e : m.entries) {
        nlohmann::json v;
        v["id"] = e.id;
        v["modality"] = e.modality;
        v["split"] = e.split;
        v["image"] = std::filesystem::relative(e.image_path, base).string();
        v["label"] = std::filesystem::relative(e.label_path, base).string();
        j["volumes"].push_back(v);
    }
    auto f = open_output(path);
    f << j.dump(2) << "\n";
}

inline Manifest read_manifest(const std::string& path) {
    auto f = open_input(path);
    nlohmann::json j;
    try {
        f >> j;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("manifest parse error: " + std::string(e.what()));
    }
    if (!j.contains("volumes") || !j["volumes"].is_array())
        throw FormatError("manifest missing 'volumes' array");
    Manifest m;
    const auto base = std::filesystem::path(path).parent_path();
    for (const auto& v : j["volumes"]) {
        ManifestEntry e;
        e.id = v.at("id").get<std::string>();
        e.modality = v.at("modality").get<std::string>();
        e.split = v.at("split").get<std::string>();
        e.image_path = (base / v.at("image").get<std::string>()).string();
        e.label_path = (base / v.at("label").get<std::string>()).string();
        m.entries.push_back(std::move(e));
    }
    if (m.entries.empty()) throw DataError("manifest lists no volumes");
    return m;
}

}  // namespace sfuda3d
