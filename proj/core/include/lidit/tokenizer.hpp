#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

namespace lidit {

// Fixed word-level vocabulary over the corpus, benchmark, and instruction
// text. Unknown words map to a single out-of-vocabulary token.
struct Vocab {
    std::vector<std::string> words;  // id -> word
    std::unordered_map<std::string, int32_t> index;
    int32_t oov_id = 0;

    static const Vocab& standard();

    int32_t id(const std::string& w) const {
        auto it = index.find(w);
        return it == index.end() ? oov_id : it->second;
    }
    int64_t size() const { return static_cast<int64_t>(words.size()); }
};

// lowercase, split on whitespace, punctuation becomes single-char tokens
std::vector<std::string> word_split(const std::string& text);
std::vector<int32_t> tokenize(const Vocab& vocab, const std::string& text);

}  // namespace lidit
