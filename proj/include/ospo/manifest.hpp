#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "ospo/errors.hpp"

namespace ospo {

inline const std::vector<std::string>& stage_order() {
  static const std::vector<std::string> v = {"prompts", "perturb", "densify", "images",
                                             "score",   "select",  "train",   "analyze"};
  return v;
}

inline int stage_rank(const std::string& stage) {
  const auto& order = stage_order();
  for (std::size_t i = 0; i < order.size(); ++i) {
    if (order[i] == stage) return static_cast<int>(i);
  }
  return -1;
}

/// Append-only JSONL manifest. Records are line-atomic: loading tolerates a
/// truncated final line (a killed writer) by cutting the file back to the
/// last complete record, so a resumed run continues to identical bytes.
class Manifest {
 public:
  explicit Manifest(std::filesystem::path path) : path_(std::move(path)) {}

  const std::filesystem::path& path() const { return path_; }
  bool exists() const { return std::filesystem::exists(path_); }

  /// Loads all records, repairing a partial trailing line in place.
  void load() {
    records_.clear();
    index_.clear();
    singleton_stages_.clear();
    if (!exists()) return;

    std::ifstream in(path_, std::ios::binary);
    if (!in) throw ConfigError("cannot open manifest: " + path_.string());
    std::string content((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    in.close();

    std::size_t valid_bytes = 0;
    std::size_t line_start = 0;
    while (line_start < content.size()) {
      std::size_t nl = content.find('\n', line_start);
      if (nl == std::string::npos) break;  // unterminated tail: dropped below
      std::string line = content.substr(line_start, nl - line_start);
      nlohmann::json record;
      try {
        record = nlohmann::json::parse(line);
      } catch (const nlohmann::json::exception&) {
        if (nl + 1 == content.size() || content.find('\n', nl + 1) == std::string::npos) {
          break;  // corrupt final record: treat like a torn write
        }
        throw ConfigError("manifest corrupt at byte " + std::to_string(line_start) + ": " +
                          path_.string());
      }
      add_to_index(record, records_.size());
      records_.push_back(std::move(record));
      valid_bytes = nl + 1;
      line_start = nl + 1;
    }
    if (valid_bytes != content.size()) {
      std::filesystem::resize_file(path_, valid_bytes);
    }
  }

  /// Opens for appending, writing or verifying the header record.
  void open(const std::string& config_hash) {
    std::filesystem::create_directories(path_.parent_path());
    load();
    if (records_.empty()) {
      nlohmann::json header = {{"stage", "header"}, {"config_hash", config_hash}, {"format", 1}};
      append(header);
    } else {
      const nlohmann::json& header = records_.front();
      if (header.value("stage", "") != "header") {
        throw ConfigError("manifest missing header record: " + path_.string());
      }
      if (header.value("config_hash", "") != config_hash) {
        throw ConfigMismatch("manifest was produced by a different configuration");
      }
    }
  }

  void append(const nlohmann::json& record) {
    std::ofstream out(path_, std::ios::binary | std::ios::app);
    if (!out) throw ConfigError("cannot append to manifest: " + path_.string());
    out << record.dump() << '\n';
    out.flush();
    if (!out) throw ConfigError("manifest write failed: " + path_.string());
    add_to_index(record, records_.size());
    records_.push_back(record);
  }

  bool has(const std::string& stage, std::uint64_t sample_id) const {
    return index_.count({stage, sample_id}) > 0;
  }

  bool has_stage(const std::string& stage) const { return singleton_stages_.count(stage) > 0; }

  const nlohmann::json* find(const std::string& stage, std::uint64_t sample_id) const {
    auto it = index_.find({stage, sample_id});
    if (it == index_.end()) return nullptr;
    return &records_[it->second];
  }

  const nlohmann::json* find_stage(const std::string& stage) const {
    auto it = singleton_stages_.find(stage);
    if (it == singleton_stages_.end()) return nullptr;
    return &records_[it->second];
  }

  std::vector<std::uint64_t> sample_ids(const std::string& stage) const {
    std::vector<std::uint64_t> out;
    for (const auto& [key, _] : index_) {
      if (key.first == stage) out.push_back(key.second);
    }
    return out;  // std::map keeps these sorted
  }

  const std::vector<nlohmann::json>& records() const { return records_; }

 private:
  void add_to_index(const nlohmann::json& record, std::size_t at) {
    std::string stage = record.value("stage", "");
    if (stage.empty() || stage == "header") return;
    if (record.contains("sample_id")) {
      index_[{stage, record.at("sample_id").get<std::uint64_t>()}] = at;
    } else {
      singleton_stages_[stage] = at;
    }
  }

  std::filesystem::path path_;
  std::vector<nlohmann::json> records_;
  std::map<std::pair<std::string, std::uint64_t>, std::size_t> index_;
  std::map<std::string, std::size_t> singleton_stages_;
};

/// One manifest-invariant violation; violations are data, not errors.
struct Violation {
  std::string rule;
  std::string message;
  std::optional<std::uint64_t> sample_id;
};

inline void to_json(nlohmann::json& j, const Violation& v) {
  j = {{"rule", v.rule}, {"message", v.message}};
  if (v.sample_id) j["sample_id"] = *v.sample_id;
}

}  // namespace ospo
