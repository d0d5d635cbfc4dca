#pragma once

#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "mbrec/data.hpp"
#include "mbrec/synth.hpp"

namespace fixtures {

inline mbrec::RawEvent ev(std::string u, std::string i, std::string b, std::int64_t t) {
  return {std::move(u), std::move(i), std::move(b), t};
}

inline const std::vector<std::string>& vcb() {
  static const std::vector<std::string> order{"view", "cart", "buy"};
  return order;
}

inline mbrec::EventLog funnel_log(std::size_t users, std::size_t items, std::uint64_t seed) {
  mbrec::FunnelSpec spec;
  spec.users = users;
  spec.items = items;
  return mbrec::build_event_log(mbrec::dedup_earliest(mbrec::generate_synthetic(spec, seed)), spec.behaviors);
}

// Unique scratch directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() / ("mbrec_" + tag + "_" + std::to_string(rd()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

}  // namespace fixtures
