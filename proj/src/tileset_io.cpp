#include "rarequery/tileset_io.hpp"

#include <openssl/evp.h>

#include <bit>
#include <charconv>
#include <cstring>
#include <fstream>
#include <memory>
#include <json.hpp>
#include <sstream>

namespace rarequery {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

std::uint32_t get_u32(const std::string& in, std::size_t offset) {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(in[offset + i])) << (8 * i);
    return v;
}

std::string format_double(double v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

template <typename T>
T parse_number(std::string_view s, const std::string& what) {
    T value{};
    auto res = std::from_chars(s.data(), s.data() + s.size(), value);
    if (res.ec != std::errc() || res.ptr != s.data() + s.size())
        throw TilesetIoError("malformed number '" + std::string(s) + "' in " + what);
    return value;
}

std::vector<std::string_view> split(std::string_view line, char sep) {
    std::vector<std::string_view> parts;
    std::size_t start = 0;
    while (true) {
        const auto pos = line.find(sep, start);
        parts.push_back(line.substr(start, pos - start));
        if (pos == std::string_view::npos) break;
        start = pos + 1;
    }
    return parts;
}

std::vector<std::string_view> lines_of(const std::string& text) {
    std::vector<std::string_view> lines;
    std::string_view rest(text);
    while (!rest.empty()) {
        const auto pos = rest.find('\n');
        if (pos == std::string_view::npos) {
            lines.push_back(rest);
            break;
        }
        lines.push_back(rest.substr(0, pos));
        rest.remove_prefix(pos + 1);
    }
    return lines;
}

std::string blob_file_name(const std::string& modality) { return modality + ".f32"; }

std::string encode_labels(const Tileset& ts) {
    std::string out = "id,label,source,center_x,center_y,thermal_shift,metric_value\n";
    for (const auto& t : ts.tiles) {
        out += std::to_string(t.id);
        out += ',';
        out += to_string(t.label);
        out += ',';
        out += to_string(t.label_source);
        out += ',' + format_double(t.center.x) + ',' + format_double(t.center.y) + ',';
        char buf[64];
        auto res = std::to_chars(buf, buf + sizeof buf, t.thermal_shift);
        out.append(buf, res.ptr);
        out += ',' + format_double(t.metric_value) + '\n';
    }
    return out;
}

json point_json(Point2 p) { return json::array({p.x, p.y}); }
Point2 point_from(const json& j) { return {j.at(0).get<double>(), j.at(1).get<double>()}; }

json read_json(const fs::path& path) {
    const std::string text = read_file(path);
    try {
        return json::parse(text);
    } catch (const json::parse_error& e) {
        throw TruncatedFile(path.string() + " is not valid JSON: " + e.what());
    }
}

}  // namespace

std::string read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw TilesetIoError("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_file(const fs::path& path, const std::string& bytes) {
    const fs::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw TilesetIoError("cannot write " + path.string());
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw TilesetIoError("short write to " + path.string());
    }
    fs::rename(tmp, path);
}

std::string encode_blob(const BlobHeader& header, std::span<const float> payload) {
    std::string out;
    out.reserve(8 + 4 * header.dims.size() + 4 * payload.size());
    out.append(header.magic, 4);
    put_u32(out, header.version);
    for (auto d : header.dims) put_u32(out, d);
    const std::size_t start = out.size();
    out.resize(start + payload.size() * sizeof(float));
    if constexpr (std::endian::native == std::endian::little) {
        std::memcpy(out.data() + start, payload.data(), payload.size() * sizeof(float));
    } else {
        for (std::size_t i = 0; i < payload.size(); ++i) {
            const auto bits = std::bit_cast<std::uint32_t>(payload[i]);
            for (int b = 0; b < 4; ++b) out[start + 4 * i + b] = static_cast<char>((bits >> (8 * b)) & 0xffu);
        }
    }
    return out;
}

std::vector<float> decode_blob(const std::string& bytes, const char (&magic)[5], std::size_t dim_count,
                               std::vector<std::uint32_t>& dims, const std::string& what) {
    const std::size_t header = 8 + 4 * dim_count;
    if (bytes.size() < 8) throw TruncatedFile(what + ": file shorter than its header");
    if (std::memcmp(bytes.data(), magic, 4) != 0) throw TilesetIoError(what + ": bad magic");
    const std::uint32_t version = get_u32(bytes, 4);
    if (version != kTilesetFormatVersion)
        throw VersionMismatch(what + ": format version " + std::to_string(version) + ", expected " +
                              std::to_string(kTilesetFormatVersion));
    if (bytes.size() < header) throw TruncatedFile(what + ": file shorter than its header");
    dims.clear();
    std::size_t count = 1;
    for (std::size_t i = 0; i < dim_count; ++i) {
        dims.push_back(get_u32(bytes, 8 + 4 * i));
        count *= dims.back();
    }
    const std::size_t expected = header + count * sizeof(float);
    if (bytes.size() < expected)
        throw TruncatedFile(what + ": expected " + std::to_string(expected) + " bytes, found " +
                            std::to_string(bytes.size()));
    if (bytes.size() > expected) throw TilesetIoError(what + ": trailing bytes after payload");
    std::vector<float> out(count);
    if constexpr (std::endian::native == std::endian::little) {
        std::memcpy(out.data(), bytes.data() + header, count * sizeof(float));
    } else {
        for (std::size_t i = 0; i < count; ++i) out[i] = std::bit_cast<float>(get_u32(bytes, header + 4 * i));
    }
    return out;
}

std::string sha256_hex(std::span<const std::string> chunks) {
    std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), &EVP_MD_CTX_free);
    if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1) throw Error("sha256 init failed");
    for (const auto& c : chunks) EVP_DigestUpdate(ctx.get(), c.data(), c.size());
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    EVP_DigestFinal_ex(ctx.get(), md, &len);
    static constexpr char hex[] = "0123456789abcdef";
    std::string out;
    for (unsigned int i = 0; i < len; ++i) {
        out.push_back(hex[md[i] >> 4]);
        out.push_back(hex[md[i] & 0xf]);
    }
    return out;
}

void save_tileset(const Tileset& ts, const fs::path& dir) {
    ts.validate();
    fs::create_directories(dir);
    std::vector<std::string> chunks;
    json mods = json::array();
    for (const auto& b : ts.modalities) {
        BlobHeader h;
        h.dims = {static_cast<std::uint32_t>(ts.size()), static_cast<std::uint32_t>(b.height),
                  static_cast<std::uint32_t>(b.width), static_cast<std::uint32_t>(b.channels)};
        chunks.push_back(encode_blob(h, b.data));
        write_file(dir / blob_file_name(b.name), chunks.back());
        mods.push_back({{"name", b.name},
                        {"resolution_m", b.resolution_m},
                        {"height", b.height},
                        {"width", b.width},
                        {"channels", b.channels},
                        {"file", blob_file_name(b.name)}});
    }
    chunks.push_back(encode_labels(ts));
    write_file(dir / "labels.csv", chunks.back());

    const LabelCounts c = ts.counts();
    json removed = json::array();
    for (const auto& r : ts.removal_log)
        removed.push_back({{"original_id", r.original_id}, {"center", point_json(r.center)}, {"reason", r.reason}});
    json manifest = {
        {"schema_version", kManifestSchemaVersion},
        {"format", "RQTS"},
        {"tile_count", ts.size()},
        {"modalities", mods},
        {"crop", {{"interval_m", ts.crop.interval_m}, {"stride_m", ts.crop.stride_m}}},
        {"counts", {{"positives", c.positives}, {"negatives", c.negatives}, {"unlabeled", c.unlabeled}}},
        {"provenance",
         {{"seed", ts.provenance.seed ? json(*ts.provenance.seed) : json(nullptr)},
          {"source_digest", ts.provenance.source_digest},
          {"registry_count", ts.provenance.registry_count}}},
        {"removal_log", removed},
        {"content_digest", sha256_hex(chunks)},
    };
    write_file(dir / "manifest.json", manifest.dump(2) + "\n");
}

Tileset load_tileset(const fs::path& dir) {
    if (!fs::exists(dir / "manifest.json")) throw TilesetIoError("no tileset manifest in " + dir.string());
    const json manifest = read_json(dir / "manifest.json");
    const int schema = manifest.value("schema_version", -1);
    if (schema != kManifestSchemaVersion)
        throw VersionMismatch("tileset manifest schema " + std::to_string(schema) + ", expected " +
                              std::to_string(kManifestSchemaVersion));

    Tileset ts;
    const auto n = manifest.at("tile_count").get<std::size_t>();
    std::vector<std::string> chunks;
    for (const auto& m : manifest.at("modalities")) {
        ModalityBlock b;
        b.name = m.at("name").get<std::string>();
        b.resolution_m = m.at("resolution_m").get<double>();
        const std::string file = m.at("file").get<std::string>();
        chunks.push_back(read_file(dir / file));
        std::vector<std::uint32_t> dims;
        b.data = decode_blob(chunks.back(), "RQTS", 4, dims, file);
        if (dims[0] != n) throw TruncatedFile(file + ": holds " + std::to_string(dims[0]) + " tiles, manifest says " +
                                              std::to_string(n));
        b.height = dims[1];
        b.width = dims[2];
        b.channels = dims[3];
        ts.modalities.push_back(std::move(b));
    }
    chunks.push_back(read_file(dir / "labels.csv"));
    const auto lines = lines_of(chunks.back());
    if (lines.size() < n + 1) throw TruncatedFile("labels.csv: " + std::to_string(lines.size()) + " lines for " +
                                                  std::to_string(n) + " tiles");
    if (sha256_hex(chunks) != manifest.at("content_digest").get<std::string>())
        throw DigestMismatch("tileset content digest does not match the manifest in " + dir.string());

    ts.tiles.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        const auto f = split(lines[i + 1], ',');
        if (f.size() != 7) throw TilesetIoError("labels.csv: malformed row " + std::to_string(i + 1));
        Tile& t = ts.tiles[i];
        t.id = parse_number<TileId>(f[0], "labels.csv");
        t.label = parse_label(f[1]);
        t.label_source = parse_label_source(f[2]);
        t.center = {parse_number<double>(f[3], "labels.csv"), parse_number<double>(f[4], "labels.csv")};
        t.thermal_shift = parse_number<float>(f[5], "labels.csv");
        t.metric_value = parse_number<double>(f[6], "labels.csv");
    }
    ts.crop = {manifest.at("crop").at("interval_m").get<double>(), manifest.at("crop").at("stride_m").get<double>()};
    const auto& prov = manifest.at("provenance");
    if (!prov.at("seed").is_null()) ts.provenance.seed = prov.at("seed").get<std::uint64_t>();
    ts.provenance.source_digest = prov.at("source_digest").get<std::string>();
    ts.provenance.registry_count = prov.at("registry_count").get<std::size_t>();
    for (const auto& r : manifest.at("removal_log"))
        ts.removal_log.push_back(
            {r.at("original_id").get<TileId>(), point_from(r.at("center")), r.at("reason").get<std::string>()});
    ts.validate();
    return ts;
}

void save_site(const Site& site, const fs::path& dir) {
    fs::create_directories(dir);
    std::vector<std::string> chunks;
    json mods = json::array();
    for (const auto& m : site.mosaics) {
        BlobHeader h;
        std::memcpy(h.magic, "RQOM", 4);
        h.dims = {static_cast<std::uint32_t>(m.height), static_cast<std::uint32_t>(m.width),
                  static_cast<std::uint32_t>(m.channels)};
        const std::string file = std::string(to_string(m.modality)) + ".raster";
        chunks.push_back(encode_blob(h, m.pixels));
        write_file(dir / file, chunks.back());
        mods.push_back({{"name", to_string(m.modality)},
                        {"resolution_m", m.resolution_m},
                        {"origin", point_json(m.origin)},
                        {"file", file}});
    }
    std::string csv = "x,y\n";
    for (const auto& p : site.registry.centers) csv += format_double(p.x) + ',' + format_double(p.y) + '\n';
    chunks.push_back(csv);
    write_file(dir / "middens.csv", csv);
    json meta = {{"schema_version", kManifestSchemaVersion},
                 {"seed", site.config.seed},
                 {"extent_m", site.config.extent_m},
                 {"positive_count", site.config.positive_count},
                 {"planned_crop",
                  {{"interval_m", site.config.planned_crop.interval_m},
                   {"stride_m", site.config.planned_crop.stride_m}}},
                 {"modalities", mods},
                 {"content_digest", sha256_hex(chunks)}};
    write_file(dir / "site.json", meta.dump(2) + "\n");
}

Site load_site(const fs::path& dir) {
    const json meta = read_json(dir / "site.json");
    if (meta.value("schema_version", -1) != kManifestSchemaVersion) throw VersionMismatch("unsupported site.json version");
    Site site;
    site.config.seed = meta.at("seed").get<std::uint64_t>();
    site.config.extent_m = meta.at("extent_m").get<double>();
    site.config.positive_count = meta.at("positive_count").get<std::size_t>();
    site.config.planned_crop = {meta.at("planned_crop").at("interval_m").get<double>(),
                                meta.at("planned_crop").at("stride_m").get<double>()};
    site.config.modalities.clear();
    std::vector<std::string> chunks;
    for (const auto& m : meta.at("modalities")) {
        Orthomosaic o;
        o.modality = parse_modality(m.at("name").get<std::string>());
        o.resolution_m = m.at("resolution_m").get<double>();
        o.origin = point_from(m.at("origin"));
        const std::string file = m.at("file").get<std::string>();
        chunks.push_back(read_file(dir / file));
        std::vector<std::uint32_t> dims;
        o.pixels = decode_blob(chunks.back(), "RQOM", 3, dims, file);
        o.height = dims[0];
        o.width = dims[1];
        o.channels = dims[2];
        o.validate();
        site.config.modalities.push_back(o.modality);
        site.mosaics.push_back(std::move(o));
    }
    chunks.push_back(read_file(dir / "middens.csv"));
    if (sha256_hex(chunks) != meta.at("content_digest").get<std::string>())
        throw DigestMismatch("site content digest does not match site.json in " + dir.string());
    const auto lines = lines_of(chunks.back());
    for (std::size_t i = 1; i < lines.size(); ++i) {
        if (lines[i].empty()) continue;
        const auto f = split(lines[i], ',');
        if (f.size() != 2) throw TilesetIoError("middens.csv: malformed row " + std::to_string(i));
        site.registry.centers.push_back({parse_number<double>(f[0], "middens.csv"), parse_number<double>(f[1], "middens.csv")});
    }
    return site;
}

}  // namespace rarequery
