#pragma once

#include <ame/core.hpp>

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <string>
#include <utility>
#include <vector>

namespace ame {

using json = nlohmann::json;

// Observation records are one JSON object per line:
//   {"mask_hex": "...", "p": 0.4, "y": 0.75, "query": "q0", "knockoff_mask_hex": "..."}
// The query and knockoff fields are optional. Doubles are printed in
// shortest round-trip form so parse(serialize(x)) == x bit-exactly.

inline json observation_to_json(const Observation& obs, const std::string& query = {})
{
    json j;
    j["mask_hex"] = obs.mask.to_hex();
    j["p"] = obs.p;
    j["y"] = obs.y;
    if (!query.empty()) j["query"] = query;
    if (obs.knockoff_mask) j["knockoff_mask_hex"] = obs.knockoff_mask->to_hex();
    return j;
}

inline std::string serialize_observation(const Observation& obs, const std::string& query = {})
{
    return observation_to_json(obs, query).dump();
}

namespace detail {

inline double number_field(const json& j, const char* key)
{
    auto it = j.find(key);
    if (it == j.end() || !it->is_number()) {
        throw Error(ErrorCode::MalformedRecord, std::string("missing numeric field '") + key + "'");
    }
    return it->get<double>();
}

inline std::string string_field(const json& j, const char* key)
{
    auto it = j.find(key);
    if (it == j.end() || !it->is_string()) {
        throw Error(ErrorCode::MalformedRecord, std::string("missing string field '") + key + "'");
    }
    return it->get<std::string>();
}

inline json parse_line(const std::string& line)
{
    try {
        auto j = json::parse(line);
        if (!j.is_object()) throw Error(ErrorCode::MalformedRecord, "record is not an object");
        return j;
    } catch (const json::exception& e) {
        throw Error(ErrorCode::MalformedRecord, e.what());
    }
}

} // namespace detail

struct ParsedObservation
{
    Observation obs;
    std::string query;
};

inline ParsedObservation observation_from_json(const json& j, std::size_t n_sources)
{
    ParsedObservation out;
    out.obs.mask = SubsetMask::from_hex(n_sources, detail::string_field(j, "mask_hex"));
    out.obs.p = detail::number_field(j, "p");
    out.obs.y = detail::number_field(j, "y");
    if (j.contains("knockoff_mask_hex")) {
        out.obs.knockoff_mask = SubsetMask::from_hex(n_sources, detail::string_field(j, "knockoff_mask_hex"));
    }
    if (j.contains("query")) out.query = detail::string_field(j, "query");
    auto issues = observation_issues(out.obs);
    if (!issues.empty()) throw Error(ErrorCode::MalformedRecord, issues.front().what());
    return out;
}

inline Observation parse_observation(const std::string& line, std::size_t n_sources)
{
    return observation_from_json(detail::parse_line(line), n_sources).obs;
}

// ---------------------------------------------------------------------------
// Observation store: header line followed by JSONL records.
// ---------------------------------------------------------------------------

struct StoreHeader
{
    std::size_t n_sources = 0;
    std::string p_spec;
    std::string featurization;
    std::uint64_t seed = 0;
    std::string oracle;

    json to_json() const
    {
        return json{{"n_sources", n_sources},
                    {"p_spec", p_spec},
                    {"featurization", featurization},
                    {"seed", seed},
                    {"oracle", oracle}};
    }

    static StoreHeader from_json(const json& j)
    {
        StoreHeader h;
        try {
            h.n_sources = j.at("n_sources").get<std::size_t>();
            h.p_spec = j.at("p_spec").get<std::string>();
            h.featurization = j.at("featurization").get<std::string>();
            h.seed = j.at("seed").get<std::uint64_t>();
            h.oracle = j.value("oracle", std::string{});
        } catch (const json::exception& e) {
            throw Error(ErrorCode::StoreCorrupt, std::string("bad header: ") + e.what());
        }
        return h;
    }

    friend bool operator==(const StoreHeader&, const StoreHeader&) = default;
};

/// Append-only cache of evaluated observations keyed by (mask, query).
/// The oracle fingerprint and seed live in the header, so a store opened with
/// a different header is rejected instead of silently mixing utilities.
class ObservationStore
{
public:
    /// Opens (or creates) a store file. An empty path gives an in-memory store.
    ObservationStore(std::filesystem::path path, StoreHeader header)
        : path_(std::move(path)), header_(std::move(header))
    {
        if (path_.empty()) return;
        if (std::filesystem::exists(path_) && std::filesystem::file_size(path_) > 0) {
            load();
        } else {
            std::ofstream out(path_, std::ios::trunc);
            if (!out) throw Error(ErrorCode::Io, "cannot create store " + path_.string());
            out << header_.to_json().dump() << '\n';
        }
    }

    const StoreHeader& header() const noexcept { return header_; }
    const std::vector<ParsedObservation>& records() const noexcept { return records_; }

    std::optional<double> lookup(const SubsetMask& mask, const std::string& query) const
    {
        std::lock_guard lock(mutex_);
        auto it = index_.find(key(mask, query));
        if (it == index_.end()) return std::nullopt;
        return records_[it->second].obs.y;
    }

    void append(const Observation& obs, const std::string& query)
    {
        std::lock_guard lock(mutex_);
        if (obs.mask.size() != header_.n_sources) {
            throw Error(ErrorCode::InconsistentN, "observation length differs from store N");
        }
        if (!path_.empty()) {
            std::ofstream out(path_, std::ios::app);
            if (!out) throw Error(ErrorCode::Io, "cannot append to " + path_.string());
            out << serialize_observation(obs, query) << '\n';
        }
        index_.emplace(key(obs.mask, query), records_.size());
        records_.push_back({obs, query});
    }

    /// Records for one query, in file order.
    std::vector<Observation> observations(const std::string& query) const
    {
        std::vector<Observation> out;
        for (const auto& r : records_) {
            if (r.query == query) out.push_back(r.obs);
        }
        return out;
    }

    static StoreHeader read_header(const std::filesystem::path& path)
    {
        std::ifstream in(path);
        std::string line;
        if (!in || !std::getline(in, line)) throw Error(ErrorCode::StoreCorrupt, "missing header in " + path.string());
        try {
            return StoreHeader::from_json(json::parse(line));
        } catch (const json::exception& e) {
            throw Error(ErrorCode::StoreCorrupt, e.what());
        }
    }

private:
    using Key = std::pair<std::uint64_t, std::string>;

    static Key key(const SubsetMask& mask, const std::string& query) { return {mask.hash(), query}; }

    void load()
    {
        const auto on_disk = read_header(path_);
        if (!(on_disk == header_)) {
            throw Error(ErrorCode::StoreCorrupt,
                        "store header " + on_disk.to_json().dump() + " does not match " + header_.to_json().dump());
        }
        std::ifstream in(path_);
        std::string line;
        std::getline(in, line);
        std::size_t lineno = 1;
        while (std::getline(in, line)) {
            ++lineno;
            if (line.empty()) continue;
            try {
                auto rec = observation_from_json(detail::parse_line(line), header_.n_sources);
                index_.emplace(key(rec.obs.mask, rec.query), records_.size());
                records_.push_back(std::move(rec));
            } catch (const Error& e) {
                throw Error(ErrorCode::StoreCorrupt, "line " + std::to_string(lineno) + ": " + e.what());
            }
        }
    }

    std::filesystem::path path_;
    StoreHeader header_;
    std::vector<ParsedObservation> records_;
    std::map<Key, std::size_t> index_;
    mutable std::mutex mutex_;
};

} // namespace ame
