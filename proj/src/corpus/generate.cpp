#include <algorithm>
#include <fstream>
#include <numeric>
#include <set>

#include "ctxedit/corpus.hpp"
#include "ctxedit/errors.hpp"
#include "ctxedit/rng.hpp"

namespace ctxedit {
using nlohmann::json;

namespace {

const std::vector<std::string> kCompanySuffix{"corp", "labs", "group", "systems"};
const std::vector<std::string> kUniversitySuffix{"university", "college", "institute"};
const std::vector<std::string> kTeamSuffix{"rovers", "united", "wanderers", "athletic"};

constexpr double kConnectiveProb = 0.5;

template <typename V>
const auto& pick(const V& v, Rng& rng) {
  std::uniform_int_distribution<std::size_t> d(0, v.size() - 1);
  return v[d(rng)];
}

bool coin(Rng& rng, double p) { return std::uniform_real_distribution<double>(0, 1)(rng) < p; }

std::size_t kind_index(ObjectKind k) { return static_cast<std::size_t>(k); }

// An object for `kind` from pool `s` whose entity words avoid `used`.
std::vector<std::string> make_object(ObjectKind kind, int s, Rng& rng,
                                     const std::set<std::string>& used) {
  const Inventory& inv = inventory();
  for (int attempt = 0; attempt < 1000; ++attempt) {
    std::vector<std::string> obj;
    if (kind == ObjectKind::kSpouse) {
      obj = {pick(inv.spouse_first[s], rng), pick(inv.spouse_last[s], rng)};
    } else {
      const auto& roots = inv.object_roots[s][kind_index(kind)];
      obj = {pick(roots, rng)};
      if (kind == ObjectKind::kCompany) obj.push_back(pick(kCompanySuffix, rng));
      if (kind == ObjectKind::kUniversity) obj.push_back(pick(kUniversitySuffix, rng));
      if (kind == ObjectKind::kTeam) obj.push_back(pick(kTeamSuffix, rng));
      if (kind == ObjectKind::kBook) {
        obj.push_back(pick(roots, rng));
        if (obj[1] == obj[0]) continue;
      }
    }
    if (std::none_of(obj.begin(), obj.end(), [&](const auto& w) { return used.count(w) > 0; })) {
      return obj;
    }
  }
  throw GenerationError("could not draw a fresh object");
}

bool valid_object(ObjectKind kind, const std::vector<std::string>& obj) {
  const Inventory& inv = inventory();
  auto in = [](const std::vector<std::string>& pool, const std::string& w) {
    return std::find(pool.begin(), pool.end(), w) != pool.end();
  };
  auto in_either = [&](auto member, const std::string& w) {
    return in(member(0), w) || in(member(1), w);
  };
  if (kind == ObjectKind::kSpouse) {
    return obj.size() == 2 &&
           in_either([&](int s) -> const auto& { return inv.spouse_first[s]; }, obj[0]) &&
           in_either([&](int s) -> const auto& { return inv.spouse_last[s]; }, obj[1]);
  }
  auto root = [&](const std::string& w) {
    return in_either([&](int s) -> const auto& { return inv.object_roots[s][kind_index(kind)]; },
                     w);
  };
  switch (kind) {
    case ObjectKind::kCompany:
      return obj.size() == 2 && root(obj[0]) && in(kCompanySuffix, obj[1]);
    case ObjectKind::kUniversity:
      return obj.size() == 2 && root(obj[0]) && in(kUniversitySuffix, obj[1]);
    case ObjectKind::kTeam:
      return obj.size() == 2 && root(obj[0]) && in(kTeamSuffix, obj[1]);
    case ObjectKind::kBook:
      return obj.size() == 2 && root(obj[0]) && root(obj[1]);
    default:
      return obj.size() == 1 && root(obj[0]);
  }
}

std::string question_for(const Relation& r, const std::vector<std::string>& subject) {
  std::vector<std::string> out;
  for (const auto& w : split_words(r.question)) {
    if (w == "S") {
      out.insert(out.end(), subject.begin(), subject.end());
    } else {
      out.push_back(w);
    }
  }
  return join_words(out);
}

std::vector<std::string> sentence_words(const EditDocument& doc, std::size_t i) {
  const DocFact& f = doc.facts[i];
  std::vector<std::string> w;
  if (i == 0) {
    w = doc.subject;
  } else {
    if (!f.connective.empty()) w.push_back(f.connective);
    w.push_back(doc.female ? "she" : "he");
  }
  for (const auto& p : split_words(relations()[f.relation].phrases[f.phrase])) w.push_back(p);
  w.insert(w.end(), f.object.begin(), f.object.end());
  w.push_back(".");
  return w;
}

std::size_t count_occurrences(const std::vector<std::string>& hay,
                              const std::vector<std::string>& needle) {
  std::size_t n = 0;
  for (std::size_t i = 0; i + needle.size() <= hay.size(); ++i) {
    if (std::equal(needle.begin(), needle.end(), hay.begin() + static_cast<std::ptrdiff_t>(i))) {
      ++n;
    }
  }
  return n;
}

void check_answers(const EditDocument& doc) {
  const auto words = split_words(doc.text);
  for (const auto& f : doc.facts) {
    if (count_occurrences(words, f.object) != 1) {
      throw GenerationError(doc.doc_id + ": answer '" + f.answer + "' is not unique in the text");
    }
  }
}

// Draws a subject from pool `s`.
std::pair<std::vector<std::string>, bool> make_subject(int s, Rng& rng) {
  const Inventory& inv = inventory();
  const bool female = coin(rng, 0.5);
  const auto& first = female ? inv.female_first[s] : inv.male_first[s];
  return {{pick(first, rng), pick(inv.last[s], rng)}, female};
}

std::vector<std::size_t> sample_relations(std::size_t m, Rng& rng) {
  std::vector<std::size_t> idx(relations().size());
  std::iota(idx.begin(), idx.end(), 0);
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(m);
  return idx;
}

std::string maybe_connective(Rng& rng) {
  return coin(rng, kConnectiveProb) ? pick(inventory().connectives, rng) : std::string();
}

}  // namespace

std::vector<std::string> EditDocument::sentences() const {
  std::vector<std::string> out;
  std::vector<std::string> cur;
  for (auto& w : split_words(text)) {
    cur.push_back(w);
    if (w == ".") {
      out.push_back(join_words(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(join_words(cur));
  return out;
}

FactTriple EditDocument::triple(std::size_t i) const {
  const DocFact& f = facts.at(i);
  return {subject, split_words(relations()[f.relation].phrases[f.phrase]), f.object};
}

void render(EditDocument& doc) {
  std::vector<std::string> text;
  for (std::size_t i = 0; i < doc.facts.size(); ++i) {
    DocFact& f = doc.facts[i];
    const Relation& r = relations().at(f.relation);
    f.position = i + 1;
    const auto words = sentence_words(doc, i);
    text.insert(text.end(), words.begin(), words.end());
    std::vector<std::string> query = doc.subject;
    for (const auto& p : split_words(r.phrases.at(f.phrase))) query.push_back(p);
    f.completion_query = join_words(query);
    f.qa_query = question_for(r, doc.subject);
    f.answer = join_words(f.object);
  }
  doc.text = join_words(text);
}

// --- Pretraining corpus -------------------------------------------------------------

namespace {

struct WorldSubject {
  std::vector<std::string> name;
  bool female = false;
  std::vector<std::vector<std::string>> objects;  // one per relation
};

std::vector<WorldSubject> build_world(std::size_t n_subjects, std::uint64_t world_seed) {
  const Inventory& inv = inventory();
  const std::size_t capacity =
      (inv.male_first[0].size() + inv.female_first[0].size()) * inv.last[0].size();
  if (n_subjects > capacity) {
    throw std::invalid_argument("n_subjects exceeds the " + std::to_string(capacity) +
                                " available pretraining names");
  }
  Rng rng(derive_seed(world_seed, "pretrain-world"));
  std::set<std::vector<std::string>> seen;
  std::vector<WorldSubject> world;
  while (world.size() < n_subjects) {
    auto [name, female] = make_subject(0, rng);
    if (!seen.insert(name).second) continue;
    WorldSubject s{name, female, {}};
    for (const auto& r : relations()) s.objects.push_back(make_object(r.kind, 0, rng, {}));
    world.push_back(std::move(s));
  }
  return world;
}

}  // namespace

std::vector<PretrainDoc> gen_pretrain_corpus(const PretrainCorpusConfig& config,
                                             std::uint64_t world_seed,
                                             std::uint64_t sample_seed) {
  if (config.facts_per_doc == 0 || config.facts_per_doc > relations().size()) {
    throw std::invalid_argument("facts_per_doc must be in [1, " +
                                std::to_string(relations().size()) + "]");
  }
  if (config.n_subjects == 0) throw std::invalid_argument("n_subjects must be >= 1");
  const auto world = build_world(config.n_subjects, world_seed);
  Rng rng(derive_seed(sample_seed, "pretrain-docs"));
  std::uniform_int_distribution<std::size_t> pick_subject(0, world.size() - 1);
  std::vector<PretrainDoc> out;
  out.reserve(config.n_docs);
  for (std::size_t d = 0; d < config.n_docs; ++d) {
    const WorldSubject& s = world[pick_subject(rng)];
    const auto rels = sample_relations(config.facts_per_doc, rng);
    PretrainDoc doc;
    doc.qa_format = coin(rng, config.qa_fraction);
    if (doc.qa_format) {
      std::vector<std::string> words;
      for (std::size_t r : rels) {
        for (auto& w : split_words(question_for(relations()[r], s.name))) words.push_back(w);
        words.insert(words.end(), s.objects[r].begin(), s.objects[r].end());
        words.push_back(".");
      }
      doc.text = join_words(words);
    } else {
      EditDocument e;
      e.subject = s.name;
      e.female = s.female;
      for (std::size_t i = 0; i < rels.size(); ++i) {
        DocFact f;
        f.relation = rels[i];
        f.phrase = coin(rng, 0.5) ? 1 : 0;
        if (i > 0) f.connective = maybe_connective(rng);
        f.object = s.objects[rels[i]];
        e.facts.push_back(std::move(f));
      }
      render(e);
      doc.text = std::move(e.text);
    }
    out.push_back(std::move(doc));
  }
  return out;
}

namespace {

const std::set<std::string>& entity_set() {
  static const std::set<std::string> all = [] {
    const Inventory& inv = inventory();
    std::set<std::string> s;
    for (int p = 0; p < 2; ++p) {
      for (const auto* pool : {&inv.male_first[p], &inv.female_first[p], &inv.last[p],
                               &inv.spouse_first[p], &inv.spouse_last[p]}) {
        s.insert(pool->begin(), pool->end());
      }
      for (const auto& pool : inv.object_roots[p]) s.insert(pool.begin(), pool.end());
    }
    return s;
  }();
  return all;
}

std::vector<std::string> entities_in(const std::string& text, std::set<std::string>& acc) {
  for (auto& w : split_words(text))
    if (entity_set().count(w)) acc.insert(w);
  return {acc.begin(), acc.end()};
}

}  // namespace

std::vector<std::string> entity_words(const std::vector<PretrainDoc>& corpus) {
  std::set<std::string> acc;
  for (const auto& d : corpus) entities_in(d.text, acc);
  return {acc.begin(), acc.end()};
}

std::vector<std::string> entity_words(const EditDocument& doc) {
  std::set<std::string> acc;
  return entities_in(doc.text, acc);
}

// --- Edit documents ----------------------------------------------------------------

EditDocument gen_edit_document(std::size_t m, std::uint64_t seed) {
  if (m < 2 || m > 12) throw std::invalid_argument("gen_edit_document: m must be in [2, 12]");
  Rng rng(derive_seed(seed, "edit-doc", m));
  EditDocument doc;
  doc.doc_id = "edit-m" + std::to_string(m) + "-" + std::to_string(seed);
  std::tie(doc.subject, doc.female) = make_subject(1, rng);
  std::set<std::string> used(doc.subject.begin(), doc.subject.end());
  for (std::size_t i = 0; const std::size_t r : sample_relations(m, rng)) {
    DocFact f;
    f.relation = r;
    f.phrase = coin(rng, 0.5) ? 1 : 0;
    if (i++ > 0) f.connective = maybe_connective(rng);
    // Entity words are unique within a document, so an answer never leaks
    // into the text before its own sentence.
    f.object = make_object(relations()[r].kind, 1, rng, used);
    used.insert(f.object.begin(), f.object.end());
    doc.facts.push_back(std::move(f));
  }
  render(doc);
  check_answers(doc);
  return doc;
}

std::vector<std::string> split_transform(const EditDocument& doc) { return doc.sentences(); }

std::vector<EditDocument> paraphrase_transform(const EditDocument& doc, std::size_t n_variants,
                                               std::uint64_t seed) {
  if (n_variants == 0) throw std::invalid_argument("paraphrase_transform: n_variants must be >= 1");
  Rng rng(derive_seed(seed, "paraphrase"));
  std::set<std::string> seen{doc.text};
  std::vector<EditDocument> out;
  for (int attempt = 0; out.size() < n_variants; ++attempt) {
    if (attempt > 1000) throw GenerationError("could not produce distinct paraphrases");
    EditDocument v = doc;
    v.doc_id = doc.doc_id + "-para" + std::to_string(out.size() + 1);
    if (v.facts.size() >= 2) {
      std::uniform_int_distribution<std::size_t> pos(0, v.facts.size() - 2);
      const std::size_t i = pos(rng);
      std::swap(v.facts[i], v.facts[i + 1]);
    }
    for (std::size_t i = 0; i < v.facts.size(); ++i) {
      DocFact& f = v.facts[i];
      if (coin(rng, 0.5)) f.phrase = 1 - f.phrase;
      if (i == 0) {
        f.connective.clear();
      } else if (f.connective.empty() || coin(rng, 0.5)) {
        f.connective = maybe_connective(rng);
      }
    }
    render(v);
    if (!seen.insert(v.text).second) continue;
    check_answers(v);
    out.push_back(std::move(v));
  }
  return out;
}

Probe build_probe(const EditDocument& doc, std::size_t position) {
  if (position < 1 || position > doc.facts.size()) {
    throw std::out_of_range("build_probe: position " + std::to_string(position) +
                            " outside 1.." + std::to_string(doc.facts.size()));
  }
  const auto sent = doc.sentences();
  std::vector<std::string> before(sent.begin(), sent.begin() + static_cast<std::ptrdiff_t>(position - 1));
  Probe p;
  p.position = position;
  const DocFact& f = doc.facts[position - 1];
  p.base_query = f.completion_query;
  p.prepended_context = join_words(before);
  p.prepended_query =
      p.prepended_context.empty() ? p.base_query : p.prepended_context + " " + p.base_query;
  p.answer = f.answer;
  const auto ctx = split_words(p.prepended_context);
  for (const auto& w : f.object) {
    if (std::find(ctx.begin(), ctx.end(), w) != ctx.end()) {
      throw GenerationError(doc.doc_id + ": answer word '" + w +
                            "' occurs in the prepended context");
    }
  }
  return p;
}

// --- JSON-lines ---------------------------------------------------------------------

json doc_to_json(const EditDocument& doc) {
  json facts = json::array();
  for (const auto& f : doc.facts) {
    facts.push_back({{"position", f.position},
                     {"completion_query", f.completion_query},
                     {"qa_query", f.qa_query},
                     {"answer", f.answer}});
  }
  return {{"doc_id", doc.doc_id}, {"text", doc.text}, {"facts", std::move(facts)}};
}

EditDocument doc_from_json(const json& j) {
  EditDocument doc;
  doc.doc_id = j.at("doc_id").get<std::string>();
  doc.text = j.at("text").get<std::string>();
  auto fail = [&](const std::string& why) {
    return GenerationError("document " + doc.doc_id + ": " + why);
  };
  const auto& connectives = inventory().connectives;
  const auto sents = doc.sentences();
  for (std::size_t i = 0; i < sents.size(); ++i) {
    auto w = split_words(sents[i]);
    if (w.empty() || w.back() != ".") throw fail("sentence without a final period");
    w.pop_back();
    std::size_t at = 0;
    DocFact f;
    if (i == 0) {
      if (w.size() < 2) throw fail("first sentence too short");
      doc.subject = {w[0], w[1]};
      at = 2;
    } else {
      if (at < w.size() &&
          std::find(connectives.begin(), connectives.end(), w[at]) != connectives.end()) {
        f.connective = w[at++];
      }
      if (at >= w.size() || (w[at] != "he" && w[at] != "she")) {
        throw fail("sentence " + std::to_string(i + 1) + " does not start with a pronoun");
      }
      doc.female = w[at++] == "she";
    }
    bool found = false;
    for (std::size_t r = 0; r < relations().size() && !found; ++r) {
      for (std::size_t p = 0; p < 2 && !found; ++p) {
        const auto phrase = split_words(relations()[r].phrases[p]);
        if (at + phrase.size() >= w.size()) continue;
        if (!std::equal(phrase.begin(), phrase.end(), w.begin() + static_cast<std::ptrdiff_t>(at))) {
          continue;
        }
        std::vector<std::string> obj(w.begin() + static_cast<std::ptrdiff_t>(at + phrase.size()),
                                     w.end());
        if (!valid_object(relations()[r].kind, obj)) continue;
        f.relation = r;
        f.phrase = p;
        f.object = std::move(obj);
        found = true;
      }
    }
    if (!found) throw fail("sentence " + std::to_string(i + 1) + " matches no relation template");
    doc.facts.push_back(std::move(f));
  }
  const std::string text = doc.text;
  render(doc);
  if (doc.text != text) throw fail("text does not re-render identically");
  const auto& jf = j.at("facts");
  if (jf.size() != doc.facts.size()) throw fail("fact count does not match the text");
  for (std::size_t i = 0; i < doc.facts.size(); ++i) {
    const auto& f = doc.facts[i];
    if (jf[i].at("position").get<std::size_t>() != f.position ||
        jf[i].at("completion_query").get<std::string>() != f.completion_query ||
        jf[i].at("qa_query").get<std::string>() != f.qa_query ||
        jf[i].at("answer").get<std::string>() != f.answer) {
      throw fail("fact " + std::to_string(i + 1) + " does not match the text");
    }
  }
  return doc;
}

void write_jsonl(const std::vector<EditDocument>& docs, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  for (const auto& d : docs) out << doc_to_json(d).dump() << '\n';
}

std::vector<EditDocument> read_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw MissingArtifactError("cannot open " + path.string());
  std::vector<EditDocument> out;
  std::size_t line_no = 0;
  for (std::string line; std::getline(in, line);) {
    ++line_no;
    if (line.empty()) continue;
    try {
      out.push_back(doc_from_json(json::parse(line)));
    } catch (const json::exception& e) {
      throw ConfigError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace ctxedit
