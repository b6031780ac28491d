#pragma once

#include <map>
#include <string>
#include <string_view>
#include <vector>

namespace granmoe {

// Closed-vocabulary word tokenizer. Words are lowercased; punctuation marks
// and bracketed task tokens are single tokens; 0..100 are single tokens.
class Tokenizer {
 public:
  static constexpr int kPad = 0;
  static constexpr int kUnk = 1;
  static constexpr int kBos = 2;
  static constexpr int kEos = 3;

  explicit Tokenizer(std::vector<std::string> vocabulary);

  // Specials, task tokens, numbers, punctuation, every prompt-template word
  // and the synthetic-scene vocabulary.
  static const Tokenizer& standard();

  std::vector<int> encode(std::string_view text) const;
  std::string decode(const std::vector<int>& ids) const;

  // Raw pre-tokenized pieces before id lookup.
  static std::vector<std::string> split(std::string_view text);

  int size() const noexcept { return static_cast<int>(vocab_.size()); }
  int id_of(const std::string& piece) const;
  const std::string& piece(int id) const { return vocab_.at(static_cast<std::size_t>(id)); }
  bool covers(std::string_view text) const;

 private:
  std::vector<std::string> vocab_;
  std::map<std::string, int, std::less<>> index_;
};

}  // namespace granmoe
