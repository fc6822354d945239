#pragma once

// Tokenized corpora and token-budget batching. Sentences are id sequences
// under an attached vocabulary; batching partitions a corpus into
// length-bucketed batches whose padded token count stays under a budget.

#include <algorithm>
#include <fstream>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "fusenmt/common.hpp"
#include "fusenmt/vocab.hpp"

namespace fusenmt {

inline std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open " + path);
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(is, line)) lines.push_back(line);
  return lines;
}

struct MonoCorpus {
  std::vector<std::vector<int>> sentences;
  std::vector<std::size_t> line_numbers;

  static MonoCorpus from_lines(const std::vector<std::string>& lines,
                               const Vocabulary& vocab) {
    MonoCorpus c;
    for (std::size_t i = 0; i < lines.size(); ++i) {
      auto ids = vocab.encode_line(lines[i]);
      if (ids.empty()) {
        throw ContractError("empty sentence at line " + std::to_string(i + 1));
      }
      c.sentences.push_back(std::move(ids));
      c.line_numbers.push_back(i + 1);
    }
    if (c.sentences.empty()) throw ContractError("corpus has no sentences");
    return c;
  }
};

struct ParallelCorpus {
  std::vector<std::vector<int>> source;
  std::vector<std::vector<int>> target;
  std::vector<std::size_t> line_numbers;

  std::size_t size() const { return source.size(); }

  static ParallelCorpus from_lines(const std::vector<std::string>& src_lines,
                                   const std::vector<std::string>& tgt_lines,
                                   const Vocabulary& src_vocab,
                                   const Vocabulary& tgt_vocab) {
    if (src_lines.size() != tgt_lines.size()) {
      throw ContractError("parallel corpus sides differ: " +
                          std::to_string(src_lines.size()) + " vs " +
                          std::to_string(tgt_lines.size()) + " lines");
    }
    ParallelCorpus c;
    for (std::size_t i = 0; i < src_lines.size(); ++i) {
      auto s = src_vocab.encode_line(src_lines[i]);
      auto t = tgt_vocab.encode_line(tgt_lines[i]);
      if (s.empty() || t.empty()) {
        throw ContractError("empty sentence at line " + std::to_string(i + 1));
      }
      c.source.push_back(std::move(s));
      c.target.push_back(std::move(t));
      c.line_numbers.push_back(i + 1);
    }
    if (c.size() == 0) throw ContractError("corpus has no sentences");
    return c;
  }
};

// One batch is a set of sentence indices into the corpus.
struct Batch {
  std::vector<std::size_t> indices;
};

namespace batching_detail {

// Greedy fill over length-sorted sentences. `len` maps sentence index to the
// per-side lengths that must each fit under the budget once padded.
inline std::vector<Batch> bucket(
    std::size_t count, std::int64_t budget,
    const std::function<std::vector<std::int64_t>(std::size_t)>& len) {
  std::vector<std::size_t> order(count);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return len(a) < len(b);
  });
  for (std::size_t i : order) {
    for (std::int64_t l : len(i)) {
      if (l > budget) {
        throw ContractError("sentence " + std::to_string(i) + " has length " +
                            std::to_string(l) + " above the token budget " +
                            std::to_string(budget));
      }
    }
  }
  std::vector<Batch> batches;
  Batch cur;
  std::vector<std::int64_t> max_len;
  for (std::size_t i : order) {
    auto li = len(i);
    std::vector<std::int64_t> next_max = max_len.empty() ? li : max_len;
    for (std::size_t s = 0; s < li.size(); ++s) next_max[s] = std::max(next_max[s], li[s]);
    const std::int64_t n = static_cast<std::int64_t>(cur.indices.size()) + 1;
    bool fits = true;
    for (std::int64_t m : next_max) fits = fits && n * m <= budget;
    if (!fits && !cur.indices.empty()) {
      batches.push_back(std::move(cur));
      cur = Batch{};
      next_max = li;
    }
    cur.indices.push_back(i);
    max_len = std::move(next_max);
  }
  if (!cur.indices.empty()) batches.push_back(std::move(cur));
  return batches;
}

}  // namespace batching_detail

inline std::vector<Batch> batch_by_length(const MonoCorpus& corpus,
                                          std::int64_t token_budget) {
  return batching_detail::bucket(
      corpus.sentences.size(), token_budget, [&](std::size_t i) {
        return std::vector<std::int64_t>{
            static_cast<std::int64_t>(corpus.sentences[i].size())};
      });
}

inline std::vector<Batch> batch_by_length(const ParallelCorpus& corpus,
                                          std::int64_t token_budget) {
  return batching_detail::bucket(
      corpus.size(), token_budget, [&](std::size_t i) {
        // decoder input is BOS-framed, one longer than the raw target
        return std::vector<std::int64_t>{
            static_cast<std::int64_t>(corpus.source[i].size()),
            static_cast<std::int64_t>(corpus.target[i].size()) + 1};
      });
}

// Fresh batch order for an epoch; sentence membership stays fixed.
inline void shuffle_batches(std::vector<Batch>& batches, Rng& rng) {
  std::shuffle(batches.begin(), batches.end(), rng);
}

}  // namespace fusenmt
