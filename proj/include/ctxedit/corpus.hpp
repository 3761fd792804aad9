#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "ctxedit/tensor.hpp"

namespace ctxedit {

// Closed word-level vocabulary. Id 0 is the beginning-of-sequence marker.
class Vocabulary {
 public:
  static constexpr const char* kBos = "<bos>";

  Vocabulary() = default;
  explicit Vocabulary(std::vector<std::string> words);

  std::size_t size() const noexcept { return words_.size(); }
  TokenId bos() const noexcept { return 0; }
  TokenId id(const std::string& word) const;  // throws VocabularyError
  bool contains(const std::string& word) const { return index_.count(word) > 0; }
  const std::string& word(TokenId id) const;

  std::vector<TokenId> tokenize(const std::string& text) const;
  std::string detokenize(const std::vector<TokenId>& ids) const;

 private:
  std::vector<std::string> words_;
  std::unordered_map<std::string, TokenId> index_;
};

// Space-separated words; empty pieces are dropped.
std::vector<std::string> split_words(const std::string& text);
std::string join_words(const std::vector<std::string>& words);

// Entity kinds that fill the object slot of a relation.
enum class ObjectKind {
  kCity, kCompany, kUniversity, kLanguage, kInstrument, kTeam, kCountry, kFood,
  kSpouse, kJob, kCar, kPet, kColor, kBook, kSport
};

struct Relation {
  std::string id;
  std::vector<std::string> phrases;  // [0] main form, [1] alternate form
  std::string question;              // contains "S" where the subject goes
  ObjectKind kind;
};

const std::vector<Relation>& relations();

// The fixed world inventory: vocabulary plus disjoint name pools for the
// pretraining world and for edit documents.
struct Inventory {
  Vocabulary vocab;
  std::vector<std::string> connectives;  // sentence openers before a pronoun
  std::vector<std::string> male_first[2];  // [0] pretraining, [1] edit
  std::vector<std::string> female_first[2];
  std::vector<std::string> last[2];
  std::vector<std::string> spouse_first[2];
  std::vector<std::string> spouse_last[2];
  std::vector<std::vector<std::string>> object_roots[2];  // indexed by ObjectKind
};

const Inventory& inventory();

struct FactTriple {
  std::vector<std::string> subject;
  std::vector<std::string> relation;
  std::vector<std::string> object;
};

// One fact of a rendered document plus what is needed to re-render it.
struct DocFact {
  std::size_t position = 0;  // 1-based
  std::size_t relation = 0;  // index into relations()
  std::size_t phrase = 0;    // 0 main, 1 alternate
  std::string connective;    // may be empty; never used on the first sentence
  std::vector<std::string> object;
  std::string completion_query;
  std::string qa_query;
  std::string answer;
};

struct EditDocument {
  std::string doc_id;
  std::vector<std::string> subject;
  bool female = false;
  std::vector<DocFact> facts;  // in text order
  std::string text;

  std::vector<std::string> sentences() const;
  FactTriple triple(std::size_t i) const;
};

// Renders text, queries and answers from subject, gender and fact structure.
void render(EditDocument& doc);

// --- Pretraining corpus -------------------------------------------------------------

struct PretrainDoc {
  std::string text;
  bool qa_format = false;
};

struct PretrainCorpusConfig {
  std::size_t n_docs = 2000;
  std::size_t facts_per_doc = 6;
  std::size_t n_subjects = 400;
  double qa_fraction = 0.3;
};

// Subjects and their fact table depend only on `world_seed`; documents are
// sampled from them with `sample_seed`. A holdout set is the same world with a
// different sample seed.
std::vector<PretrainDoc> gen_pretrain_corpus(const PretrainCorpusConfig& config,
                                             std::uint64_t world_seed,
                                             std::uint64_t sample_seed);
// Entity words (names and object roots) in a pretraining corpus.
std::vector<std::string> entity_words(const std::vector<PretrainDoc>& corpus);

// --- Edit documents ----------------------------------------------------------------

// 2 <= m <= 12. Throws std::invalid_argument otherwise.
EditDocument gen_edit_document(std::size_t m, std::uint64_t seed);
std::vector<std::string> entity_words(const EditDocument& doc);

// One fragment per fact sentence; pronouns are left as they are.
std::vector<std::string> split_transform(const EditDocument& doc);

// Distinct rewrites of `doc` (phrase swaps, connective changes, adjacent-fact
// swaps with re-chaining); every answer span is kept verbatim.
std::vector<EditDocument> paraphrase_transform(const EditDocument& doc, std::size_t n_variants,
                                               std::uint64_t seed);

struct Probe {
  std::size_t position = 0;
  std::string base_query;
  std::string prepended_context;  // text strictly before the fact's sentence
  std::string prepended_query;    // context + " " + base query (or the query alone)
  std::string answer;
};

// Throws std::out_of_range for an invalid position and GenerationError when
// answer words occur in the prepended context.
Probe build_probe(const EditDocument& doc, std::size_t position);

// --- JSON-lines ---------------------------------------------------------------------

nlohmann::json doc_to_json(const EditDocument& doc);
// Recovers the fact structure by parsing the text against the relation
// templates. Throws GenerationError when the text does not parse.
EditDocument doc_from_json(const nlohmann::json& j);
void write_jsonl(const std::vector<EditDocument>& docs, const std::filesystem::path& path);
std::vector<EditDocument> read_jsonl(const std::filesystem::path& path);

}  // namespace ctxedit
