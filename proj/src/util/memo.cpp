#include "arpipe/util/memo.hpp"

#include "arpipe/util/text.hpp"

namespace arpipe::util {

DiskMemo::DiskMemo(std::filesystem::path file) : file_(std::move(file)) {
    if (file_.has_parent_path()) ensure_dir(file_.parent_path());
    for_each_line(file_, [&](std::size_t line_no, std::string_view line) {
        if (trim(line).empty()) return;
        try {
            json j = json::parse(line);
            map_[j.at("k").get<std::string>()] = j.at("v");
        } catch (const json::exception& e) {
            throw Error(file_.string() + ":" + std::to_string(line_no) + ": bad memo line: " +
                        e.what());
        }
    });
}

std::optional<json> DiskMemo::get(const std::string& key) const {
    const auto it = map_.find(key);
    if (it == map_.end()) return std::nullopt;
    return it->second;
}

void DiskMemo::put(const std::string& key, const json& value) {
    if (map_.contains(key)) return;
    map_[key] = value;
    ojson line;
    line["k"] = key;
    line["v"] = value;
    append_line(file_, line.dump());
}

} // namespace arpipe::util
