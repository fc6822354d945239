#pragma once

// Byte pair encoding over whitespace-tokenized text. Merges are learned
// greedily on an exact word-frequency table (counts recomputed from scratch
// after every merge) and applied by replaying them in learned order, so a
// training word always segments the way it did during learning.
//
// Text format: non-final subwords carry a trailing "@@"; the end-of-word
// marker "</w>" only exists internally on the last symbol.

#include <algorithm>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "fusenmt/common.hpp"

namespace fusenmt {

inline constexpr const char* kEndOfWord = "</w>";
inline constexpr const char* kBpeMarker = "@@";

struct MergeTable {
  std::vector<std::pair<std::string, std::string>> merges;

  std::size_t size() const { return merges.size(); }
};

namespace bpe_detail {

// Split UTF-8 text into codepoint strings; malformed bytes pass through as
// single symbols.
inline std::vector<std::string> utf8_split(const std::string& word) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < word.size()) {
    const unsigned char c = static_cast<unsigned char>(word[i]);
    std::size_t len = 1;
    if ((c & 0x80) == 0x00) len = 1;
    else if ((c & 0xE0) == 0xC0) len = 2;
    else if ((c & 0xF0) == 0xE0) len = 3;
    else if ((c & 0xF8) == 0xF0) len = 4;
    if (i + len > word.size()) len = 1;
    out.push_back(word.substr(i, len));
    i += len;
  }
  return out;
}

inline std::vector<std::string> word_symbols(const std::string& word) {
  auto syms = utf8_split(word);
  if (!syms.empty()) syms.back() += kEndOfWord;
  return syms;
}

// Replay one merge left to right over a symbol sequence.
inline void apply_merge(std::vector<std::string>& syms,
                        const std::pair<std::string, std::string>& m) {
  std::size_t w = 0;
  for (std::size_t r = 0; r < syms.size();) {
    if (r + 1 < syms.size() && syms[r] == m.first && syms[r + 1] == m.second) {
      syms[w++] = syms[r] + syms[r + 1];
      r += 2;
    } else {
      syms[w++] = std::move(syms[r]);
      r += 1;
    }
  }
  syms.resize(w);
}

}  // namespace bpe_detail

// Learns `num_merges` merges from raw text lines. Ties on pair frequency
// break toward the lexicographically smallest pair.
inline MergeTable bpe_learn(const std::vector<std::string>& lines,
                            std::size_t num_merges) {
  std::unordered_map<std::string, std::int64_t> word_freq;
  for (const auto& line : lines) {
    std::istringstream is(line);
    std::string w;
    while (is >> w) word_freq[w]++;
  }
  if (word_freq.empty()) throw ContractError("bpe_learn: empty corpus");

  std::vector<std::pair<std::vector<std::string>, std::int64_t>> words;
  words.reserve(word_freq.size());
  {
    // deterministic iteration order
    std::map<std::string, std::int64_t> sorted(word_freq.begin(), word_freq.end());
    for (auto& [w, f] : sorted) words.emplace_back(bpe_detail::word_symbols(w), f);
  }

  MergeTable table;
  for (std::size_t step = 0; step < num_merges; ++step) {
    std::map<std::pair<std::string, std::string>, std::int64_t> pair_count;
    for (const auto& [syms, freq] : words) {
      for (std::size_t i = 0; i + 1 < syms.size(); ++i) {
        pair_count[{syms[i], syms[i + 1]}] += freq;
      }
    }
    if (pair_count.empty()) break;
    auto best = pair_count.begin();
    for (auto it = pair_count.begin(); it != pair_count.end(); ++it) {
      if (it->second > best->second) best = it;  // map order is lexicographic
    }
    table.merges.push_back(best->first);
    for (auto& [syms, freq] : words) bpe_detail::apply_merge(syms, best->first);
  }
  return table;
}

// Core application on an internal symbol sequence (end-of-word marker form).
inline std::vector<std::string> bpe_apply_symbols(
    std::vector<std::string> syms, const MergeTable& table) {
  for (const auto& m : table.merges) bpe_detail::apply_merge(syms, m);
  return syms;
}

// Segments one word into marker-form subwords ("un@@", "fold").
inline std::vector<std::string> bpe_apply(const std::string& word,
                                          const MergeTable& table) {
  if (word.empty()) return {};
  auto syms = bpe_apply_symbols(bpe_detail::word_symbols(word), table);
  for (std::size_t i = 0; i < syms.size(); ++i) {
    if (i + 1 == syms.size()) {
      const std::size_t n = syms[i].size();
      syms[i] = syms[i].substr(0, n - std::string(kEndOfWord).size());
    } else {
      syms[i] += kBpeMarker;
    }
  }
  return syms;
}

// Whitespace-normalized segmentation of a full line.
inline std::string bpe_segment_line(const std::string& line,
                                    const MergeTable& table) {
  std::istringstream is(line);
  std::string w, out;
  while (is >> w) {
    for (const auto& s : bpe_apply(w, table)) {
      if (!out.empty()) out += ' ';
      out += s;
    }
  }
  return out;
}

// Inverse of segmentation: joins "x@@ y" back into "xy". This together with
// one-time whitespace normalization makes tokenize/detokenize a round trip.
inline std::string bpe_join_line(const std::string& line) {
  std::istringstream is(line);
  std::string tok, out;
  bool glue = false;
  while (is >> tok) {
    const std::size_t mlen = std::string(kBpeMarker).size();
    bool marked = tok.size() >= mlen &&
                  tok.compare(tok.size() - mlen, mlen, kBpeMarker) == 0;
    if (marked) tok = tok.substr(0, tok.size() - mlen);
    if (!glue && !out.empty()) out += ' ';
    out += tok;
    glue = marked;
  }
  return out;
}

inline void save_merges(const MergeTable& table, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write merge table to " + path);
  for (const auto& [a, b] : table.merges) os << a << ' ' << b << '\n';
}

inline MergeTable load_merges(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot read merge table from " + path);
  MergeTable table;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto sp = line.find(' ');
    if (sp == std::string::npos || sp + 1 >= line.size()) {
      throw IoError("malformed merge line: '" + line + "'");
    }
    table.merges.emplace_back(line.substr(0, sp), line.substr(sp + 1));
  }
  return table;
}

}  // namespace fusenmt
