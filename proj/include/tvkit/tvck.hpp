#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "tvkit/blocks.hpp"

namespace tvkit {

// TVCK container: magic "TVCK", u32 LE version, u64 LE header length, UTF-8
// JSON header, then a payload of f32 LE values. Offsets in the header are
// element counts from the payload start.

inline constexpr std::uint32_t kTvckVersion = 1;

struct TvckBlockEntry {
    std::string name;
    std::vector<std::size_t> shape;
    std::string kind;
    std::size_t offset_elems = 0;
    std::size_t len_elems = 0;
};

struct TvckFactorEntry {
    std::string name;
    std::size_t rank = 0;
    std::size_t a_offset = 0;
    std::size_t b_offset = 0;
};

struct TvckFile {
    std::string kind;  // "weights" | "taskvector" | "coeffs" | "dataset"
    std::string base_fingerprint;  // 16 hex chars, empty when not applicable
    std::vector<TvckBlockEntry> blocks;
    std::vector<TvckFactorEntry> factored;
    nlohmann::json meta = nlohmann::json::object();
    std::vector<float> payload;
};

void write_tvck(const std::filesystem::path& path, const TvckFile& file);
TvckFile read_tvck(const std::filesystem::path& path);

std::string fingerprint_hex(std::uint64_t fp);
std::uint64_t fingerprint_from_hex(const std::string& hex);

// Typed wrappers over the container.
void save_weights(const std::filesystem::path& path, const BlockedTensor& weights,
                  nlohmann::json meta = nlohmann::json::object());
BlockedTensor load_weights(const std::filesystem::path& path, nlohmann::json* meta_out = nullptr);

void save_taskvector(const std::filesystem::path& path, const TaskVector& tv,
                     nlohmann::json meta = nlohmann::json::object());
TaskVector load_taskvector(const std::filesystem::path& path,
                           nlohmann::json* meta_out = nullptr);

void save_coeffs(const std::filesystem::path& path, const CoefficientSet& coeffs,
                 nlohmann::json meta = nlohmann::json::object());
CoefficientSet load_coeffs(const std::filesystem::path& path,
                           nlohmann::json* meta_out = nullptr);

// Peek at the kind without materialising the payload semantics.
std::string tvck_kind(const std::filesystem::path& path);

}  // namespace tvkit
