#include "granmoe/model/tokenizer.hpp"

#include <cctype>
#include <set>

#include "granmoe/errors.hpp"
#include "granmoe/textcodec/prompt.hpp"
#include "granmoe/textcodec/task.hpp"

namespace granmoe {

namespace {

constexpr std::string_view kPunct = "[],.?*|:;'\"!()-";

bool is_punct(char c) { return kPunct.find(c) != std::string_view::npos; }

// Words produced by the synthetic scene generator (classes, tones, layout
// words and the caption / question / change sentence frames).
const std::vector<std::string>& scene_words() {
  static const std::vector<std::string> words{
      "background", "pond", "building", "road", "tree", "field", "bright", "dark", "top", "bottom", "left",
      "right", "center", "a", "an", "the", "at", "and", "of", "in", "on", "is", "there", "image", "yes",
      "no", "how", "many", "objects", "are", "was", "added", "removed", "moved", "from", "to", "nothing",
      "changed", "object", "region", "what", "describe", "this", "briefly"};
  return words;
}

}  // namespace

Tokenizer::Tokenizer(std::vector<std::string> vocabulary) : vocab_(std::move(vocabulary)) {
  for (std::size_t i = 0; i < vocab_.size(); ++i) {
    if (!index_.emplace(vocab_[i], static_cast<int>(i)).second) {
      throw ContractError("duplicate vocabulary entry \"" + vocab_[i] + "\"");
    }
  }
  if (vocab_.size() < 4 || vocab_[kPad] != "<pad>" || vocab_[kUnk] != "<unk>" || vocab_[kBos] != "<bos>" ||
      vocab_[kEos] != "<eos>") {
    throw ContractError("vocabulary must start with <pad> <unk> <bos> <eos>");
  }
}

const Tokenizer& Tokenizer::standard() {
  static const Tokenizer tok = [] {
    std::vector<std::string> v{"<pad>", "<unk>", "<bos>", "<eos>"};
    std::set<std::string> seen(v.begin(), v.end());
    auto push = [&](const std::string& s) {
      if (seen.insert(s).second) v.push_back(s);
    };
    for (TaskToken t : kAllTasks) push(std::string(to_string(t)));
    for (int n = 0; n <= 100; ++n) push(std::to_string(n));
    for (char c : kPunct) push(std::string(1, c));
    for (const auto& w : scene_words()) push(w);
    for (const auto& tmpl : prompt_templates())
      for (const auto& piece : split(tmpl.body))
        if (piece.front() != '{' && piece.back() != '}') push(piece);
    return Tokenizer(std::move(v));
  }();
  return tok;
}

std::vector<std::string> Tokenizer::split(std::string_view text) {
  std::vector<std::string> out;
  std::string word;
  auto flush = [&] {
    if (!word.empty()) out.push_back(std::move(word));
    word.clear();
  };
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
    if (std::isspace(static_cast<unsigned char>(c))) {
      flush();
      continue;
    }
    if (c == '[') {
      bool matched = false;
      for (TaskToken t : kAllTasks) {
        const auto tok = to_string(t);
        if (text.substr(i, tok.size()) == tok) {
          flush();
          out.emplace_back(tok);
          i += tok.size() - 1;
          matched = true;
          break;
        }
      }
      if (matched) continue;
    }
    if (c == '{' || c == '}') {
      // Template placeholders stay whole so they are never mistaken for words.
      flush();
      const std::size_t close = text.find('}', i);
      if (c == '{' && close != std::string_view::npos) {
        out.emplace_back(text.substr(i, close - i + 1));
        i = close;
      }
      continue;
    }
    if (is_punct(c)) {
      flush();
      out.emplace_back(1, c);
      continue;
    }
    word.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
  }
  flush();
  return out;
}

int Tokenizer::id_of(const std::string& piece) const {
  auto it = index_.find(piece);
  return it == index_.end() ? kUnk : it->second;
}

std::vector<int> Tokenizer::encode(std::string_view text) const {
  std::vector<int> ids;
  for (const auto& p : split(text)) ids.push_back(id_of(p));
  return ids;
}

bool Tokenizer::covers(std::string_view text) const {
  for (const auto& p : split(text))
    if (id_of(p) == kUnk) return false;
  return true;
}

std::string Tokenizer::decode(const std::vector<int>& ids) const {
  static constexpr std::string_view no_space_before = ",.?]*:;!)";
  static constexpr std::string_view no_space_after = "[*(";
  std::string out;
  bool glue = true;
  for (int id : ids) {
    if (id == kPad || id == kBos) continue;
    if (id == kEos) break;
    const std::string& p = piece(id);
    const bool attach = p.size() == 1 && no_space_before.find(p[0]) != std::string_view::npos;
    if (!glue && !attach) out += ' ';
    out += p;
    glue = p.size() == 1 && no_space_after.find(p[0]) != std::string_view::npos;
  }
  return out;
}

}  // namespace granmoe
