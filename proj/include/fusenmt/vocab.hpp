#pragma once

// Token <-> id bijection with fixed reserved ids and a content hash that
// changes iff the token set or its ordering changes.

#include <algorithm>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "fusenmt/common.hpp"

namespace fusenmt {

inline constexpr int kPadId = 0;
inline constexpr int kBosId = 1;
inline constexpr int kEosId = 2;
inline constexpr int kUnkId = 3;

class Vocabulary {
 public:
  Vocabulary() {
    for (const char* t : {"<pad>", "<bos>", "<eos>", "<unk>"}) add_token(t);
  }

  // Most frequent tokens first, ties alphabetical, capped at `limit`
  // (including the four reserved ids).
  static Vocabulary build(const std::vector<std::string>& lines,
                          std::size_t limit) {
    if (limit < 4) throw ContractError("vocabulary limit must allow reserved ids");
    std::unordered_map<std::string, std::int64_t> counts;
    for (const auto& line : lines) {
      std::istringstream is(line);
      std::string tok;
      while (is >> tok) counts[tok]++;
    }
    std::vector<std::pair<std::string, std::int64_t>> order(counts.begin(), counts.end());
    std::sort(order.begin(), order.end(), [](const auto& a, const auto& b) {
      if (a.second != b.second) return a.second > b.second;
      return a.first < b.first;
    });
    Vocabulary v;
    for (const auto& [tok, c] : order) {
      if (v.size() >= limit) break;
      if (!v.token_to_id_.count(tok)) v.add_token(tok);
    }
    return v;
  }

  std::size_t size() const { return id_to_token_.size(); }

  int id_of(const std::string& tok) const {
    auto it = token_to_id_.find(tok);
    return it == token_to_id_.end() ? kUnkId : it->second;
  }

  bool contains(const std::string& tok) const { return token_to_id_.count(tok) > 0; }

  const std::string& token_of(int id) const {
    if (id < 0 || id >= static_cast<int>(id_to_token_.size())) {
      throw VocabError("id " + std::to_string(id) + " outside vocabulary of size " +
                       std::to_string(id_to_token_.size()));
    }
    return id_to_token_[static_cast<std::size_t>(id)];
  }

  std::vector<int> encode_line(const std::string& line) const {
    std::istringstream is(line);
    std::string tok;
    std::vector<int> ids;
    while (is >> tok) ids.push_back(id_of(tok));
    return ids;
  }

  std::string decode_ids(const std::vector<int>& ids) const {
    std::string out;
    for (int id : ids) {
      if (id == kBosId || id == kEosId || id == kPadId) continue;
      if (!out.empty()) out += ' ';
      out += token_of(id);
    }
    return out;
  }

  std::string hash() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& t : id_to_token_) {
      h = fnv1a(t, h);
      h = fnv1a("\n", h);
    }
    return to_hex(h);
  }

  void save(const std::string& path) const {
    std::ofstream os(path);
    if (!os) throw IoError("cannot write vocabulary to " + path);
    for (std::size_t i = 0; i < id_to_token_.size(); ++i) {
      os << id_to_token_[i] << '\t' << i << '\n';
    }
  }

  static Vocabulary load(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot read vocabulary from " + path);
    Vocabulary v;
    v.id_to_token_.clear();
    v.token_to_id_.clear();
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
      ++lineno;
      if (line.empty()) continue;
      const auto tab = line.find('\t');
      if (tab == std::string::npos) {
        throw IoError("vocabulary line " + std::to_string(lineno) + " has no tab");
      }
      const std::string tok = line.substr(0, tab);
      const int id = std::stoi(line.substr(tab + 1));
      if (id != static_cast<int>(v.id_to_token_.size())) {
        throw IoError("vocabulary ids must be dense and ordered; line " +
                      std::to_string(lineno));
      }
      if (v.token_to_id_.count(tok)) {
        throw IoError("duplicate vocabulary token '" + tok + "'");
      }
      v.token_to_id_[tok] = id;
      v.id_to_token_.push_back(tok);
    }
    if (v.size() < 4) throw IoError("vocabulary misses reserved ids");
    return v;
  }

 private:
  void add_token(const std::string& tok) {
    token_to_id_[tok] = static_cast<int>(id_to_token_.size());
    id_to_token_.push_back(tok);
  }

  std::unordered_map<std::string, int> token_to_id_;
  std::vector<std::string> id_to_token_;
};

}  // namespace fusenmt
