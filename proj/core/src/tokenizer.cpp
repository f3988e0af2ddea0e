#include "lidit/tokenizer.hpp"

#include <algorithm>
#include <cctype>
#include <set>

#include "lidit/dataset.hpp"

namespace lidit {

namespace {

bool is_punct_token(char c) {
    return c == '.' || c == ',' || c == ';' || c == ':' || c == '!' || c == '?';
}

}  // namespace

std::vector<std::string> word_split(const std::string& text) {
    std::vector<std::string> out;
    std::string cur;
    auto flush = [&] {
        if (!cur.empty()) {
            out.push_back(cur);
            cur.clear();
        }
    };
    for (char raw : text) {
        char c = static_cast<char>(std::tolower(static_cast<unsigned char>(raw)));
        if (std::isspace(static_cast<unsigned char>(c))) {
            flush();
        } else if (is_punct_token(c)) {
            flush();
            out.emplace_back(1, c);
        } else {
            cur.push_back(c);
        }
    }
    flush();
    return out;
}

std::vector<int32_t> tokenize(const Vocab& vocab, const std::string& text) {
    std::vector<int32_t> ids;
    for (const auto& w : word_split(text)) ids.push_back(vocab.id(w));
    return ids;
}

const Vocab& Vocab::standard() {
    static const Vocab vocab = [] {
        std::set<std::string> words;
        // template and punctuation tokens
        for (const char* w : {"a", "and", ".", ","}) words.insert(w);
        // corpus palette and shape inventory
        for (const auto& c : palette_colors()) words.insert(c.name);
        for (const auto& s : shape_names()) words.insert(s);
        // instruction text
        const char* instruction_words[] = {"describe", "the",      "image",   "by",   "detailing",
                                           "color",    "shape",    "size",    "texture", "quantity",
                                           "text",     "spatial",  "relationships", "of", "objects"};
        for (const char* w : instruction_words) words.insert(w);

        Vocab v;
        v.words.push_back("<oov>");
        v.oov_id = 0;
        for (const auto& w : words) v.words.push_back(w);
        for (size_t i = 0; i < v.words.size(); ++i) v.index[v.words[i]] = static_cast<int32_t>(i);
        return v;
    }();
    return vocab;
}

}  // namespace lidit
