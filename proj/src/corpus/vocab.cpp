#include <algorithm>
#include <set>
#include <sstream>

#include "ctxedit/corpus.hpp"
#include "ctxedit/errors.hpp"
#include "ctxedit/rng.hpp"

namespace ctxedit {

Vocabulary::Vocabulary(std::vector<std::string> words) : words_(std::move(words)) {
  if (words_.empty() || words_[0] != kBos) words_.insert(words_.begin(), kBos);
  for (std::size_t i = 0; i < words_.size(); ++i) {
    if (!index_.emplace(words_[i], static_cast<TokenId>(i)).second) {
      throw std::invalid_argument("duplicate vocabulary word '" + words_[i] + "'");
    }
  }
}

TokenId Vocabulary::id(const std::string& word) const {
  auto it = index_.find(word);
  if (it == index_.end()) throw VocabularyError("out-of-vocabulary word '" + word + "'");
  return it->second;
}

const std::string& Vocabulary::word(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= words_.size()) {
    throw VocabularyError("token id " + std::to_string(id) + " outside the vocabulary");
  }
  return words_[static_cast<std::size_t>(id)];
}

std::vector<TokenId> Vocabulary::tokenize(const std::string& text) const {
  std::vector<TokenId> out;
  for (const auto& w : split_words(text)) out.push_back(id(w));
  return out;
}

std::string Vocabulary::detokenize(const std::vector<TokenId>& ids) const {
  std::vector<std::string> ws;
  ws.reserve(ids.size());
  for (TokenId t : ids) ws.push_back(word(t));
  return join_words(ws);
}

std::vector<std::string> split_words(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  for (std::string w; in >> w;) out.push_back(w);
  return out;
}

std::string join_words(const std::vector<std::string>& words) {
  std::string out;
  for (const auto& w : words) {
    if (!out.empty()) out += ' ';
    out += w;
  }
  return out;
}

const std::vector<Relation>& relations() {
  using K = ObjectKind;
  static const std::vector<Relation> table{
      {"born_in", {"was born in", "is a native of"}, "where was S born ?", K::kCity},
      {"lives_in", {"lives in", "resides in"}, "where does S live ?", K::kCity},
      {"works_for", {"works for", "is employed by"}, "who does S work for ?", K::kCompany},
      {"studied_at", {"studied at", "graduated from"}, "where did S study ?", K::kUniversity},
      {"speaks", {"speaks", "is fluent in"}, "what language does S speak ?", K::kLanguage},
      {"plays_instrument", {"plays the", "performs on the"}, "what instrument does S play ?",
       K::kInstrument},
      {"supports_team", {"supports the", "is a fan of the"}, "which team does S support ?",
       K::kTeam},
      {"citizen_of", {"is a citizen of", "holds a passport from"},
       "which country is S a citizen of ?", K::kCountry},
      {"likes_food", {"likes to eat", "enjoys eating"}, "what does S like to eat ?", K::kFood},
      {"married_to", {"is married to", "is the spouse of"}, "who is S married to ?", K::kSpouse},
      {"works_as", {"works as a", "is employed as a"}, "what is the job of S ?", K::kJob},
      {"drives", {"drives a", "owns a car made by"}, "what car does S drive ?", K::kCar},
      {"owns_pet", {"owns a pet", "keeps a pet"}, "what pet does S own ?", K::kPet},
      {"favorite_color", {"loves the color", "prefers the color"}, "what color does S love ?",
       K::kColor},
      {"wrote_book", {"wrote a book called", "is the author of"}, "which book did S write ?",
       K::kBook},
      {"plays_sport", {"plays the sport", "competes in"}, "what sport does S play ?", K::kSport},
  };
  return table;
}

namespace {

constexpr std::size_t kKinds = 15;

// Pool sizes: [0] pretraining world, [1] edit documents.
constexpr std::size_t kMaleFirst[2] = {50, 40};
constexpr std::size_t kFemaleFirst[2] = {50, 40};
constexpr std::size_t kLast[2] = {80, 60};
constexpr std::size_t kSpouseFirst[2] = {30, 30};
constexpr std::size_t kSpouseLast[2] = {30, 30};
constexpr std::size_t kObjectRoots[2] = {30, 30};

const std::vector<std::string> kFixedWords{
    ".", "?", "he", "she", "moreover", "besides", "meanwhile", "additionally", "furthermore",
    "corp", "labs", "group", "systems", "university", "college", "institute",
    "rovers", "united", "wanderers", "athletic"};

Inventory build_inventory() {
  std::set<std::string> function_words(kFixedWords.begin(), kFixedWords.end());
  for (const auto& r : relations()) {
    for (const auto& p : r.phrases)
      for (const auto& w : split_words(p)) function_words.insert(w);
    for (const auto& w : split_words(r.question))
      if (w != "S") function_words.insert(w);
  }

  // CVCV pseudo-words in a fixed shuffled order, then cut into pools.
  const std::string consonants = "bdfgklmnprstvz";
  const std::string vowels = "aeiou";
  std::vector<std::string> pseudo;
  for (char c1 : consonants)
    for (char v1 : vowels)
      for (char c2 : consonants)
        for (char v2 : vowels) {
          std::string w{c1, v1, c2, v2};
          if (!function_words.count(w)) pseudo.push_back(w);
        }
  Rng rng(derive_seed(0, "vocabulary"));
  std::shuffle(pseudo.begin(), pseudo.end(), rng);

  Inventory inv;
  std::size_t next = 0;
  auto take = [&](std::size_t n) {
    std::vector<std::string> out(pseudo.begin() + static_cast<std::ptrdiff_t>(next),
                                 pseudo.begin() + static_cast<std::ptrdiff_t>(next + n));
    next += n;
    return out;
  };
  for (int s = 0; s < 2; ++s) {
    inv.male_first[s] = take(kMaleFirst[s]);
    inv.female_first[s] = take(kFemaleFirst[s]);
    inv.last[s] = take(kLast[s]);
    inv.spouse_first[s] = take(kSpouseFirst[s]);
    inv.spouse_last[s] = take(kSpouseLast[s]);
    inv.object_roots[s].resize(kKinds);
    for (std::size_t k = 0; k < kKinds; ++k) {
      if (k != static_cast<std::size_t>(ObjectKind::kSpouse)) inv.object_roots[s][k] = take(kObjectRoots[s]);
    }
  }
  inv.connectives = {"moreover", "besides", "meanwhile", "additionally", "furthermore"};

  std::vector<std::string> words{Vocabulary::kBos};
  words.insert(words.end(), function_words.begin(), function_words.end());
  words.insert(words.end(), pseudo.begin(), pseudo.begin() + static_cast<std::ptrdiff_t>(next));
  inv.vocab = Vocabulary(std::move(words));
  return inv;
}

}  // namespace

const Inventory& inventory() {
  static const Inventory inv = build_inventory();
  return inv;
}

}  // namespace ctxedit
