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
#include "covtwin/nn/layers.hpp"

#include <json.hpp>

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>

namespace covtwin::nn {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

/// Writes `<stem>.json` (manifest: names, shapes, offsets, plus `meta`) and
/// `<stem>.bin` (raw little-endian float64 values in manifest order).
inline void save_checkpoint(const ParamList& params, const std::filesystem::path& stem,
                            const nlohmann::json& meta = nlohmann::json::object()) {
    nlohmann::json manifest;
    manifest["format"] = "float64-le";
    manifest["data_file"] = stem.filename().string() + ".bin";
    manifest["tensors"] = nlohmann::json::array();
    std::ofstream bin(stem.string() + ".bin", std::ios::binary);
    if (!bin) throw std::runtime_error("cannot write " + stem.string() + ".bin");
    std::uint64_t offset = 0;
    for (const auto* p : params) {
        manifest["tensors"].push_back({{"name", p->name}, {"shape", p->value.shape}, {"offset", offset}});
        bin.write(reinterpret_cast<const char*>(p->value.data.data()),
                  static_cast<std::streamsize>(p->value.size() * sizeof(double)));
        offset += p->value.size();
    }
    manifest["meta"] = meta;
    std::ofstream js(stem.string() + ".json", std::ios::binary);
    if (!js) throw std::runtime_error("cannot write " + stem.string() + ".json");
    js << manifest.dump(2) << '\n';
}

/// Loads values by parameter name; returns the manifest's `meta` object.
inline nlohmann::json load_checkpoint(const ParamList& params, const std::filesystem::path& stem) {
    std::ifstream js(stem.string() + ".json");
    if (!js) throw MissingArtifactError("checkpoint manifest not found: " + stem.string() + ".json");
    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(js);
    } catch (const nlohmann::json::parse_error& e) {
        throw ParseError("checkpoint " + stem.string() + ": " + e.what());
    }
    std::ifstream bin(stem.string() + ".bin", std::ios::binary);
    if (!bin) throw MissingArtifactError("checkpoint data not found: " + stem.string() + ".bin");
    std::map<std::string, nlohmann::json> entries;
    for (const auto& t : manifest.at("tensors")) entries[t.at("name").get<std::string>()] = t;
    for (auto* p : params) {
        auto it = entries.find(p->name);
        if (it == entries.end()) throw ParseError("checkpoint lacks tensor " + p->name);
        const auto shape = it->second.at("shape").get<Shape>();
        if (shape != p->value.shape)
            throw ShapeError("checkpoint tensor " + p->name + " has shape " + shape_str(shape) +
                             ", model expects " + shape_str(p->value.shape));
        const auto offset = it->second.at("offset").get<std::uint64_t>();
        bin.seekg(static_cast<std::streamoff>(offset * sizeof(double)));
        bin.read(reinterpret_cast<char*>(p->value.data.data()),
                 static_cast<std::streamsize>(p->value.size() * sizeof(double)));
        if (!bin) throw ParseError("checkpoint data truncated at " + p->name);
    }
    return manifest.value("meta", nlohmann::json::object());
}

}  // namespace covtwin::nn
