#pragma once

#include <algorithm>
#include <cctype>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "regionroute/common.hpp"
#include "regionroute/scenes.hpp"
#include "regionroute/styles.hpp"

namespace rr {

// Fixed word-level vocabulary: id 0 is UNK, then style phrases, object labels
// and a handful of filler words.
struct Vocabulary {
    std::vector<std::string> words;
    std::unordered_map<std::string, int> index;
    std::vector<int> style_ids;  // token id -> style id, -1 if not a style phrase

    static Vocabulary standard() {
        Vocabulary v;
        auto add = [&](const std::string& w, int style) {
            v.index[w] = static_cast<int>(v.words.size());
            v.words.push_back(w);
            v.style_ids.push_back(style);
        };
        add("<unk>", -1);
        const auto styles = default_styles();
        for (const auto& s : styles) add(s.name, s.style_id);
        for (const auto& w : object_vocabulary()) add(w, -1);
        for (const char* w : {"make", "the", "in", "into", "turn", "style", "keep", "unchanged"})
            add(w, -1);
        return v;
    }

    int size() const { return static_cast<int>(words.size()); }
};

struct TokenizedPrompt {
    std::vector<int> ids;
    std::vector<int> style_token_indices;  // K_s, positions within ids
    int style_id = -1;
};

// Requires exactly one known style phrase; all of its occurrences form K_s.
inline TokenizedPrompt tokenize_prompt(const std::string& prompt, const Vocabulary& vocab) {
    TokenizedPrompt out;
    std::istringstream iss(prompt);
    std::string word;
    while (iss >> word) {
        std::string w;
        for (char ch : word)
            if (std::isalnum(static_cast<unsigned char>(ch)) || ch == '-')
                w.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
        if (w.empty()) continue;
        auto it = vocab.index.find(w);
        const int id = it == vocab.index.end() ? 0 : it->second;
        const int pos = static_cast<int>(out.ids.size());
        out.ids.push_back(id);
        const int sid = vocab.style_ids[static_cast<size_t>(id)];
        if (sid >= 0) {
            if (out.style_id >= 0 && out.style_id != sid)
                throw ConfigError("prompt contains multiple style phrases: " + prompt);
            out.style_id = sid;
            out.style_token_indices.push_back(pos);
        }
    }
    if (out.style_id < 0) throw ConfigError("prompt contains no known style phrase: " + prompt);
    return out;
}

}  // namespace rr
