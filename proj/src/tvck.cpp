#include "tvkit/tvck.hpp"

#include <cstring>
#include <fstream>

namespace tvkit {

namespace {

constexpr char kMagic[4] = {'T', 'V', 'C', 'K'};
constexpr std::size_t kHeaderStart = 16;

void put_u32le(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u64le(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint32_t get_u32le(const unsigned char* p) {
    std::uint32_t v = 0;
    for (int i = 3; i >= 0; --i) v = (v << 8) | p[i];
    return v;
}

std::uint64_t get_u64le(const unsigned char* p) {
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
    return v;
}

nlohmann::json header_json(const TvckFile& file) {
    nlohmann::json blocks = nlohmann::json::array();
    for (const TvckBlockEntry& b : file.blocks)
        blocks.push_back({{"name", b.name},
                          {"shape", b.shape},
                          {"kind", b.kind},
                          {"offset_elems", b.offset_elems},
                          {"len_elems", b.len_elems}});
    nlohmann::json header = {{"kind", file.kind},
                             {"base_fingerprint", file.base_fingerprint},
                             {"blocks", blocks},
                             {"meta", file.meta}};
    if (!file.factored.empty()) {
        nlohmann::json factored = nlohmann::json::array();
        for (const TvckFactorEntry& f : file.factored)
            factored.push_back({{"name", f.name},
                                {"rank", f.rank},
                                {"a_offset", f.a_offset},
                                {"b_offset", f.b_offset}});
        header["factored"] = factored;
    }
    return header;
}

}  // namespace

void write_tvck(const std::filesystem::path& path, const TvckFile& file) {
    const std::string header = header_json(file).dump();
    std::string bytes;
    bytes.reserve(kHeaderStart + header.size() + file.payload.size() * 4);
    bytes.append(kMagic, 4);
    put_u32le(bytes, kTvckVersion);
    put_u64le(bytes, header.size());
    bytes.append(header);
    for (float v : file.payload) {
        std::uint32_t u;
        static_assert(sizeof(u) == sizeof(v));
        std::memcpy(&u, &v, 4);
        put_u32le(bytes, u);
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw ConfigError("cannot open '" + path.string() + "' for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw ConfigError("write failed for '" + path.string() + "'");
}

TvckFile read_tvck(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot open '" + path.string() + "' for reading");
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());

    if (bytes.size() < kHeaderStart) throw FormatError("file too short for TVCK header", bytes.size());
    if (std::memcmp(bytes.data(), kMagic, 4) != 0) throw FormatError("bad magic", 0);
    const std::uint32_t version = get_u32le(p + 4);
    if (version != kTvckVersion)
        throw FormatError("unsupported version " + std::to_string(version), 4);
    const std::uint64_t header_len = get_u64le(p + 8);
    if (kHeaderStart + header_len > bytes.size())
        throw FormatError("header length exceeds file size", 8);

    nlohmann::json header;
    try {
        header = nlohmann::json::parse(bytes.begin() + kHeaderStart,
                                       bytes.begin() + kHeaderStart + header_len);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("malformed JSON header: ") + e.what(), kHeaderStart);
    }

    TvckFile file;
    try {
        file.kind = header.at("kind").get<std::string>();
        file.base_fingerprint = header.at("base_fingerprint").get<std::string>();
        for (const auto& b : header.at("blocks")) {
            TvckBlockEntry e;
            e.name = b.at("name").get<std::string>();
            e.shape = b.at("shape").get<std::vector<std::size_t>>();
            e.kind = b.at("kind").get<std::string>();
            e.offset_elems = b.at("offset_elems").get<std::size_t>();
            e.len_elems = b.at("len_elems").get<std::size_t>();
            file.blocks.push_back(std::move(e));
        }
        if (header.contains("factored")) {
            for (const auto& f : header.at("factored")) {
                TvckFactorEntry e;
                e.name = f.at("name").get<std::string>();
                e.rank = f.at("rank").get<std::size_t>();
                e.a_offset = f.at("a_offset").get<std::size_t>();
                e.b_offset = f.at("b_offset").get<std::size_t>();
                file.factored.push_back(std::move(e));
            }
        }
        if (header.contains("meta")) file.meta = header.at("meta");
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("invalid header field: ") + e.what(), kHeaderStart);
    }

    const std::size_t payload_start = kHeaderStart + header_len;
    const std::size_t payload_bytes = bytes.size() - payload_start;
    if (payload_bytes % 4 != 0)
        throw FormatError("payload size is not a multiple of 4", payload_start + payload_bytes);
    const std::size_t payload_elems = payload_bytes / 4;

    if (file.blocks.empty() && file.factored.empty() && payload_elems > 0)
        throw FormatError("header declares no blocks but payload is non-empty", payload_start);

    std::size_t expected = 0;
    for (const TvckBlockEntry& b : file.blocks) {
        std::size_t numel = 1;
        for (std::size_t d : b.shape) numel *= d;
        if (numel != b.len_elems)
            throw FormatError("block '" + b.name + "' shape does not match len_elems",
                              kHeaderStart);
        expected = std::max(expected, b.offset_elems + b.len_elems);
    }
    if (expected > payload_elems)
        throw FormatError("truncated payload: need " + std::to_string(expected) +
                              " elements, have " + std::to_string(payload_elems),
                          payload_start + payload_bytes);
    if (payload_elems > expected && !file.blocks.empty())
        throw FormatError("payload has " + std::to_string(payload_elems - expected) +
                              " trailing elements past the block table",
                          payload_start + expected * 4);

    file.payload.resize(payload_elems);
    for (std::size_t i = 0; i < payload_elems; ++i) {
        const std::uint32_t u = get_u32le(p + payload_start + 4 * i);
        std::memcpy(&file.payload[i], &u, 4);
    }
    return file;
}

std::string fingerprint_hex(std::uint64_t fp) {
    static const char* digits = "0123456789abcdef";
    std::string s(16, '0');
    for (int i = 15; i >= 0; --i) {
        s[i] = digits[fp & 0xf];
        fp >>= 4;
    }
    return s;
}

std::uint64_t fingerprint_from_hex(const std::string& hex) {
    if (hex.size() != 16) throw ConfigError("fingerprint hex must be 16 characters");
    std::uint64_t v = 0;
    for (char c : hex) {
        v <<= 4;
        if (c >= '0' && c <= '9') v |= static_cast<std::uint64_t>(c - '0');
        else if (c >= 'a' && c <= 'f') v |= static_cast<std::uint64_t>(c - 'a' + 10);
        else throw ConfigError("invalid fingerprint hex digit");
    }
    return v;
}

namespace {

std::vector<TvckBlockEntry> block_entries(const BlockedTensor& t, std::size_t* total) {
    std::vector<TvckBlockEntry> entries;
    std::size_t off = 0;
    for (std::size_t j = 0; j < t.num_blocks(); ++j) {
        const BlockSpec& s = t.specs()[j];
        entries.push_back({s.name, s.shape, to_string(s.kind), off, s.numel()});
        off += s.numel();
    }
    *total = off;
    return entries;
}

void append_blocks(const BlockedTensor& t, std::vector<float>& payload) {
    for (std::size_t j = 0; j < t.num_blocks(); ++j) {
        auto blk = t.block(j);
        payload.insert(payload.end(), blk.begin(), blk.end());
    }
}

BlockedTensor tensor_from_file(const TvckFile& file) {
    std::vector<BlockSpec> specs;
    std::vector<std::vector<float>> data;
    for (const TvckBlockEntry& b : file.blocks) {
        BlockSpec s{b.name, b.shape, block_kind_from_string(b.kind)};
        specs.push_back(s);
        data.emplace_back(file.payload.begin() + b.offset_elems,
                          file.payload.begin() + b.offset_elems + b.len_elems);
    }
    return BlockedTensor(std::move(specs), std::move(data));
}

void require_kind(const TvckFile& file, const std::string& kind,
                  const std::filesystem::path& path) {
    if (file.kind != kind)
        throw ConfigError("'" + path.string() + "' holds kind '" + file.kind + "', expected '" +
                          kind + "'");
}

}  // namespace

void save_weights(const std::filesystem::path& path, const BlockedTensor& weights,
                  nlohmann::json meta) {
    TvckFile file;
    file.kind = "weights";
    std::size_t total = 0;
    file.blocks = block_entries(weights, &total);
    file.meta = std::move(meta);
    file.payload.reserve(total);
    append_blocks(weights, file.payload);
    write_tvck(path, file);
}

BlockedTensor load_weights(const std::filesystem::path& path, nlohmann::json* meta_out) {
    TvckFile file = read_tvck(path);
    require_kind(file, "weights", path);
    if (meta_out) *meta_out = file.meta;
    return tensor_from_file(file);
}

void save_taskvector(const std::filesystem::path& path, const TaskVector& tv,
                     nlohmann::json meta) {
    TvckFile file;
    file.kind = "taskvector";
    file.base_fingerprint = fingerprint_hex(tv.base_fingerprint);
    meta["id"] = tv.id;
    if (tv.is_dense()) {
        std::size_t total = 0;
        file.blocks = block_entries(*tv.dense, &total);
        file.payload.reserve(total);
        append_blocks(*tv.dense, file.payload);
    } else {
        nlohmann::json dims = nlohmann::json::object();
        std::size_t off = 0;
        for (const LoraFactor& f : tv.factors) {
            TvckFactorEntry e;
            e.name = f.name;
            e.rank = f.rank;
            e.a_offset = off;
            off += f.a.size();
            e.b_offset = off;
            off += f.b.size();
            file.factored.push_back(e);
            file.payload.insert(file.payload.end(), f.a.begin(), f.a.end());
            file.payload.insert(file.payload.end(), f.b.begin(), f.b.end());
            dims[f.name] = {f.out_dim, f.in_dim};
        }
        meta["factor_dims"] = dims;
    }
    file.meta = std::move(meta);
    write_tvck(path, file);
}

TaskVector load_taskvector(const std::filesystem::path& path, nlohmann::json* meta_out) {
    TvckFile file = read_tvck(path);
    require_kind(file, "taskvector", path);
    TaskVector tv;
    tv.base_fingerprint = fingerprint_from_hex(file.base_fingerprint);
    tv.id = file.meta.value("id", "");
    if (file.factored.empty()) {
        tv.dense = tensor_from_file(file);
    } else {
        if (!file.meta.contains("factor_dims"))
            throw FormatError("factored task vector lacks factor_dims meta", kHeaderStart);
        for (const TvckFactorEntry& e : file.factored) {
            const auto& dims = file.meta.at("factor_dims").at(e.name);
            LoraFactor f;
            f.name = e.name;
            f.rank = e.rank;
            f.out_dim = dims.at(0).get<std::size_t>();
            f.in_dim = dims.at(1).get<std::size_t>();
            const std::size_t a_len = f.rank * f.in_dim;
            const std::size_t b_len = f.out_dim * f.rank;
            if (e.a_offset + a_len > file.payload.size() ||
                e.b_offset + b_len > file.payload.size())
                throw FormatError("factor '" + f.name + "' extends beyond payload",
                                  kHeaderStart);
            f.a.assign(file.payload.begin() + e.a_offset,
                       file.payload.begin() + e.a_offset + a_len);
            f.b.assign(file.payload.begin() + e.b_offset,
                       file.payload.begin() + e.b_offset + b_len);
            f.validate();
            tv.factors.push_back(std::move(f));
        }
    }
    if (meta_out) *meta_out = file.meta;
    return tv;
}

void save_coeffs(const std::filesystem::path& path, const CoefficientSet& coeffs,
                 nlohmann::json meta) {
    TvckFile file;
    file.kind = "coeffs";
    file.blocks.push_back({"values",
                           {coeffs.n(), coeffs.m(), coeffs.K},
                           "data",
                           0,
                           coeffs.values.size()});
    meta["tv_ids"] = coeffs.tv_ids;
    meta["block_names"] = coeffs.block_names;
    meta["K"] = coeffs.K;
    file.meta = std::move(meta);
    file.payload.reserve(coeffs.values.size());
    for (double v : coeffs.values) file.payload.push_back(static_cast<float>(v));
    write_tvck(path, file);
}

CoefficientSet load_coeffs(const std::filesystem::path& path, nlohmann::json* meta_out) {
    TvckFile file = read_tvck(path);
    require_kind(file, "coeffs", path);
    CoefficientSet c;
    c.tv_ids = file.meta.at("tv_ids").get<std::vector<std::string>>();
    c.block_names = file.meta.at("block_names").get<std::vector<std::string>>();
    c.K = file.meta.at("K").get<std::size_t>();
    c.values.assign(file.payload.begin(), file.payload.end());
    if (c.values.size() != c.n() * c.m() * c.K)
        throw FormatError("coefficient payload size does not match tv_ids x block_names x K",
                          kHeaderStart);
    if (meta_out) *meta_out = file.meta;
    return c;
}

std::string tvck_kind(const std::filesystem::path& path) {
    return read_tvck(path).kind;
}

}  // namespace tvkit
