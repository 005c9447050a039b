// SPDX-License-Identifier: Apache-2.0
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
// http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.
// ------------------------------------------------------------------------

#pragma once

#include "covtwin/error.hpp"
#include "covtwin/format.hpp"
#include "covtwin/geo.hpp"

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

namespace covtwin {

struct MeasurementRecord {
    std::int64_t bin_id = 0;
    double x_loc = 0.0;
    double y_loc = 0.0;
    int sector = 0;
    int month = 1;
    double rsrp_dbm = 0.0;

    friend bool operator==(const MeasurementRecord&, const MeasurementRecord&) = default;
};

struct BinDataset {
    std::vector<MeasurementRecord> records;
    std::string scenario_ref;
    std::string provenance;  // "synthetic:seed=<n>" or "file:<path>"

    friend bool operator==(const BinDataset&, const BinDataset&) = default;
};

inline void validate_record(const MeasurementRecord& r) {
    const std::string where = "record(bin " + std::to_string(r.bin_id) + ")";
    require(std::isfinite(r.rsrp_dbm), where + ": rsrp_dbm not finite");
    require(r.month >= 1 && r.month <= 12, where + ": month outside 1..12");
    require(r.sector >= 0 && r.sector <= 2, where + ": sector outside {0,1,2}");
}

inline void validate_dataset(const BinDataset& ds, const SiteMap& map) {
    for (const auto& r : ds.records) {
        validate_record(r);
        require(map.has_bin(r.bin_id),
                "record references bin " + std::to_string(r.bin_id) + " absent from scenario");
    }
}

inline constexpr const char* kDatasetHeader = "bin_id,x_loc,y_loc,sector,month,rsrp_dbm";

inline void write_dataset_csv(const BinDataset& ds, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << kDatasetHeader << '\n';
    for (const auto& r : ds.records)
        out << r.bin_id << ',' << fmt_double(r.x_loc) << ',' << fmt_double(r.y_loc) << ','
            << r.sector << ',' << r.month << ',' << fmt_double(r.rsrp_dbm) << '\n';
}

inline BinDataset read_dataset_csv(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw MissingArtifactError("dataset file not found: " + path.string());
    BinDataset ds;
    ds.provenance = "file:" + path.string();
    std::string line;
    if (!std::getline(in, line)) throw ParseError(path.string() + ": empty file");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line != kDatasetHeader)
        throw ParseError(path.string() + ": unexpected header '" + line + "'");
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        auto f = split_csv_line(line);
        if (f.size() != 6)
            throw ParseError(path.string() + ":" + std::to_string(lineno) + ": expected 6 fields");
        try {
            MeasurementRecord r{parse_int(f[0]), parse_double(f[1]), parse_double(f[2]),
                                static_cast<int>(parse_int(f[3])), static_cast<int>(parse_int(f[4])),
                                parse_double(f[5])};
            validate_record(r);
            ds.records.push_back(r);
        } catch (const std::exception& e) {
            throw ParseError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
    return ds;
}

}  // namespace covtwin
